"""Attention-based fusion of geometric and semantic feature maps, and the
static channel merging that yields the single unified descriptor map.

Pipeline: the semantic map is bilinearly resampled to the geometric grid,
both maps are patchified, linearly projected to a shared hidden width,
exchanged through k self+cross attention blocks, concatenated with their
block-0 tokens, pushed through per-branch two-layer MLP heads, and
unpatchified back onto the geometric grid.
"""

from dataclasses import dataclass
from fractions import Fraction
import struct

import numpy as np

from matcha import autodiff as ad
from matcha import kernels
from matcha.errors import ConfigError, DomainError, FormatError
from matcha.featuremap import FeatureMap, concat_channels, channel_stride_slice, resample
from matcha.ioutil import atomic_write_bytes

NONLINEARITY_TANH_GELU = 0

# No key bias: a per-key constant shifts every softmax row uniformly and
# cancels exactly, so it would be an unlearnable dead parameter.
ATTENTION_KEYS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")
_ATTENTION_NAMES = ("self_sem", "self_geo", "cross_sem", "cross_geo")


@dataclass(frozen=True)
class FusionConfig:
    num_blocks: int = 8
    hidden_dim: int = 512
    num_heads: int = 8
    patch_size: int = 2
    out_dim_geometric: int = 256
    out_dim_semantic: int = 768
    in_dim_semantic: int = 1280
    in_dim_geometric: int = 640
    dino_dim: int = 1024
    use_positional_encoding: bool = False
    use_pre_norm: bool = False

    def __post_init__(self):
        dims = (
            self.num_blocks,
            self.hidden_dim,
            self.num_heads,
            self.patch_size,
            self.out_dim_geometric,
            self.out_dim_semantic,
            self.in_dim_semantic,
            self.in_dim_geometric,
            self.dino_dim,
        )
        if any(int(d) != d or d < 1 for d in dims):
            raise ConfigError(f"fusion config dims must be positive integers: {dims}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.out_dim_semantic % self.out_dim_geometric:
            raise ConfigError(
                f"out_dim_semantic {self.out_dim_semantic} must be divisible by "
                f"out_dim_geometric {self.out_dim_geometric}"
            )
        if self.dino_dim % self.merged_dim:
            raise ConfigError(
                f"dino_dim {self.dino_dim} must be divisible by the merged "
                f"geometric+semantic width {self.merged_dim}"
            )

    @property
    def semantic_channel_stride(self):
        return self.out_dim_semantic // self.out_dim_geometric

    @property
    def merged_dim(self):
        return self.out_dim_geometric + self.out_dim_semantic // self.semantic_channel_stride

    @property
    def dino_channel_stride(self):
        return self.dino_dim // self.merged_dim

    @property
    def unified_dim(self):
        return self.merged_dim + self.dino_dim // self.dino_channel_stride

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads


@dataclass(frozen=True)
class TokenMatrix:
    """N x D patch tokens plus the coarse grid shape they came from."""

    values: np.ndarray
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DomainError(f"token values must be (N, D), got {values.shape}")
        if self.grid_rows * self.grid_cols != values.shape[0]:
            raise DomainError(
                f"grid {self.grid_rows}x{self.grid_cols} does not cover "
                f"{values.shape[0]} tokens"
            )
        if not np.isfinite(values).all():
            raise DomainError("token matrix contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def num_tokens(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def param_shapes(config: FusionConfig) -> dict:
    """Shapes of every learnable tensor, in the flat enumeration order.

    The order (input projections, then per-block self/cross attention for
    both branches, then the MLP heads) is the serialization and gradient
    indexing contract; do not reorder.
    """
    p2 = config.patch_size**2
    d = config.hidden_dim
    shapes = {
        "proj_sem.w": (p2 * config.in_dim_semantic, d),
        "proj_sem.b": (d,),
        "proj_geo.w": (p2 * config.in_dim_geometric, d),
        "proj_geo.b": (d,),
    }
    for i in range(config.num_blocks):
        for attn in _ATTENTION_NAMES:
            for key in ATTENTION_KEYS:
                shape = (d, d) if key.startswith("w") else (d,)
                shapes[f"block{i}.{attn}.{key}"] = shape
    for branch, out_dim in (("sem", config.out_dim_semantic), ("geo", config.out_dim_geometric)):
        shapes[f"mlp_{branch}.w1"] = (2 * d, d)
        shapes[f"mlp_{branch}.b1"] = (d,)
        shapes[f"mlp_{branch}.w2"] = (d, p2 * out_dim)
        shapes[f"mlp_{branch}.b2"] = (p2 * out_dim,)
    return shapes


class FusionParams:
    """All learnable weights, stored as an ordered name -> float64 array map."""

    def __init__(self, config: FusionConfig, tensors: dict):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f"param tensors mismatch: missing={missing} extra={extra}")
        self.config = config
        self.tensors = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name}: non-finite values")
            self.tensors[name] = arr

    @classmethod
    def zeros(cls, config: FusionConfig):
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})

    @classmethod
    def initialize(cls, config: FusionConfig, seed: int):
        """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero biases.

        Values are quantized to float32 so checkpoints round-trip losslessly.
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if len(shape) == 1:
                tensors[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                draw = rng.uniform(-bound, bound, size=shape)
                tensors[name] = draw.astype(np.float32).astype(np.float64)
        return cls(config, tensors)

    def names(self):
        return list(self.tensors.keys())

    @property
    def num_params(self):
        return sum(a.size for a in self.tensors.values())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def from_flat(self, flat: np.ndarray) -> "FusionParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ConfigError(
                f"flat vector has {flat.shape}, expected ({self.num_params},)"
            )
        out, off = {}, 0
        for name, arr in self.tensors.items():
            out[name] = flat[off : off + arr.size].reshape(arr.shape)
            off += arr.size
        return FusionParams(self.config, out)

    def semantic_mask(self) -> np.ndarray:
        """Boolean flat mask selecting every semantic-branch coordinate."""
        parts = []
        for name, arr in self.tensors.items():
            is_sem = "sem" in name
            parts.append(np.full(arr.size, is_sem, dtype=bool))
        return np.concatenate(parts)

    def as_vars(self, requires_grad=True) -> dict:
        return {n: ad.Var(a, requires_grad=requires_grad) for n, a in self.tensors.items()}

    def attention_weights(self, block_index: int, name: str) -> dict:
        prefix = f"block{block_index}.{name}."
        return {k: self.tensors[prefix + k] for k in ATTENTION_KEYS}

    def copy(self) -> "FusionParams":
        return FusionParams(self.config, {n: a.copy() for n, a in self.tensors.items()})


# -- patch <-> token layout -----------------------------------------------


def patchify_array(data: np.ndarray, p: int) -> np.ndarray:
    h, w, c = data.shape
    rows, cols = h // p, w // p
    return (
        data.reshape(rows, p, cols, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, p * p * c)
    )


def unpatchify_array(tokens: np.ndarray, p: int, channels: int, rows: int, cols: int) -> np.ndarray:
    return (
        tokens.reshape(rows, cols, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * p, cols * p, channels)
    )


def patchify(fmap: FeatureMap, p: int) -> TokenMatrix:
    """Fold each p x p spatial block into one token of dim p^2 * channels.

    Tokens are row-major over the coarse grid; within a token the layout is
    row-major over the block, channel-last.
    """
    if p < 1:
        raise DomainError(f"patch size must be >= 1, got {p}")
    if fmap.height % p or fmap.width % p:
        raise DomainError(
            f"map {fmap.height}x{fmap.width} not divisible by patch size {p}"
        )
    return TokenMatrix(patchify_array(fmap.data, p), fmap.height // p, fmap.width // p)


def unpatchify(tokens: TokenMatrix, p: int, out_channels: int,
               stride_to_image=Fraction(1), role="unified") -> FeatureMap:
    """Exact inverse of patchify's layout."""
    if tokens.dim != p * p * out_channels:
        raise DomainError(
            f"token dim {tokens.dim} != p^2 * out_channels = {p * p * out_channels}"
        )
    data = unpatchify_array(tokens.values, p, out_channels, tokens.grid_rows, tokens.grid_cols)
    return FeatureMap(data, stride_to_image, role)


# -- attention and blocks ---------------------------------------------------


def _affine(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def _layer_norm(x, eps=1e-6):
    # Parameter-free pre-norm over the feature axis; off by default.
    mu = ad.vmean(x, axis=1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.vmean(ad.mul(centered, centered), axis=1, keepdims=True)
    return ad.div(centered, ad.sqrt(ad.add(var, eps)))


def sinusoidal_encoding(n: int, dim: int) -> np.ndarray:
    """Fixed sin/cos token position code; added only when the flag is on."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((n, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return enc


def _attention_vars(q, kv, w, num_heads, pre_norm=False, collect=None):
    """Scaled dot-product multi-head attention delta (no residual)."""
    n, d = q.value.shape
    n_kv = kv.value.shape[0]
    dh = d // num_heads
    if pre_norm:
        q = _layer_norm(q)
        kv = _layer_norm(kv)
    qh = ad.transpose(ad.reshape(_affine(q, w["wq"], w["bq"]), (n, num_heads, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(ad.matmul(kv, w["wk"]), (n_kv, num_heads, dh)), (1, 0, 2))
    vh = ad.transpose(ad.reshape(_affine(kv, w["wv"], w["bv"]), (n_kv, num_heads, dh)), (1, 0, 2))
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    if collect is not None:
        collect.append(np.array(attn.value))
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, vh), (1, 0, 2)), (n, d))
    return _affine(ctx, w["wo"], w["bo"])


def multi_head_attention(queries: TokenMatrix, keys_values: TokenMatrix,
                         weights: dict, num_heads: int, return_weights=False):
    """Evaluate one attention module on plain arrays; returns the delta."""
    if queries.dim != keys_values.dim:
        raise DomainError(f"dim mismatch: {queries.dim} vs {keys_values.dim}")
    if queries.dim % num_heads:
        raise DomainError(f"dim {queries.dim} not divisible by {num_heads} heads")
    collect = [] if return_weights else None
    out = _attention_vars(
        ad.Var(queries.values), ad.Var(keys_values.values),
        weights, num_heads, collect=collect,
    )
    tokens = TokenMatrix(out.value, queries.grid_rows, queries.grid_cols)
    if return_weights:
        return tokens, collect[0]
    return tokens


def _block_vars(sem, geo, p, i, num_heads, pre_norm=False):
    """The four residual updates of one fusion block, in order."""
    def w(name):
        prefix = f"block{i}.{name}."
        return {k: p[prefix + k] for k in ATTENTION_KEYS}

    sem_s = ad.add(sem, _attention_vars(sem, sem, w("self_sem"), num_heads, pre_norm))
    geo_s = ad.add(geo, _attention_vars(geo, geo, w("self_geo"), num_heads, pre_norm))
    sem_out = ad.add(sem, _attention_vars(sem_s, geo_s, w("cross_sem"), num_heads, pre_norm))
    geo_out = ad.add(geo, _attention_vars(geo_s, sem_s, w("cross_geo"), num_heads, pre_norm))
    return sem_out, geo_out


def fusion_block(sem: TokenMatrix, geo: TokenMatrix, params: FusionParams,
                 block_index: int):
    """Public single-block evaluation on plain token matrices."""
    if sem.dim != geo.dim or sem.num_tokens != geo.num_tokens:
        raise DomainError(
            f"branch shape mismatch: {sem.values.shape} vs {geo.values.shape}"
        )
    if sem.dim != params.config.hidden_dim:
        raise DomainError(
            f"token dim {sem.dim} != hidden_dim {params.config.hidden_dim}"
        )
    s, g = _block_vars(
        ad.Var(sem.values), ad.Var(geo.values),
        params.tensors, block_index, params.config.num_heads,
        params.config.use_pre_norm,
    )
    return (
        TokenMatrix(s.value, sem.grid_rows, sem.grid_cols),
        TokenMatrix(g.value, geo.grid_rows, geo.grid_cols),
    )


def _mlp_vars(x, p, prefix):
    hidden = ad.gelu(_affine(x, p[prefix + ".w1"], p[prefix + ".b1"]))
    return _affine(hidden, p[prefix + ".w2"], p[prefix + ".b2"])


def _unpatchify_vars(tokens, patch, channels, rows, cols):
    x = ad.reshape(tokens, (rows, cols, patch, patch, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (rows * patch, cols * patch, channels))


def forward_maps_vars(sem_data: np.ndarray, geo_data: np.ndarray,
                      config: FusionConfig, p: dict):
    """Differentiable full forward; returns (semantic, geometric) map nodes.

    `p` maps parameter names to Vars (training) or arrays (inference).
    Inputs are constants: the semantic map is resampled onto the geometric
    grid before patchifying so a single patch size covers both branches.
    """
    h8, w8 = geo_data.shape[:2]
    if sem_data.shape[:2] != (h8, w8):
        sem_data = kernels.bilinear_resize(sem_data, h8, w8)
    patch = config.patch_size
    rows, cols = h8 // patch, w8 // patch
    n = rows * cols
    sem0 = _affine(ad.Var(patchify_array(sem_data, patch)), p["proj_sem.w"], p["proj_sem.b"])
    geo0 = _affine(ad.Var(patchify_array(geo_data, patch)), p["proj_geo.w"], p["proj_geo.b"])
    if config.use_positional_encoding:
        enc = sinusoidal_encoding(n, config.hidden_dim)
        sem0 = ad.add(sem0, enc)
        geo0 = ad.add(geo0, enc)
    sem, geo = sem0, geo0
    for i in range(config.num_blocks):
        sem, geo = _block_vars(sem, geo, p, i, config.num_heads, config.use_pre_norm)
    sem_cat = ad.concat([sem0, sem], axis=1)
    geo_cat = ad.concat([geo0, geo], axis=1)
    sem_out = _mlp_vars(sem_cat, p, "mlp_sem")
    geo_out = _mlp_vars(geo_cat, p, "mlp_geo")
    sem_map = _unpatchify_vars(sem_out, patch, config.out_dim_semantic, rows, cols)
    geo_map = _unpatchify_vars(geo_out, patch, config.out_dim_geometric, rows, cols)
    return sem_map, geo_map


def _validate_forward_inputs(semantic_raw: FeatureMap, geometric_raw: FeatureMap,
                             config: FusionConfig):
    if semantic_raw.channels != config.in_dim_semantic:
        raise DomainError(
            f"semantic input has {semantic_raw.channels} channels, "
            f"config expects {config.in_dim_semantic}"
        )
    if geometric_raw.channels != config.in_dim_geometric:
        raise DomainError(
            f"geometric input has {geometric_raw.channels} channels, "
            f"config expects {config.in_dim_geometric}"
        )
    if geometric_raw.height % config.patch_size or geometric_raw.width % config.patch_size:
        raise DomainError(
            f"geometric grid {geometric_raw.height}x{geometric_raw.width} "
            f"not divisible by patch size {config.patch_size}"
        )


def fusion_forward(semantic_raw: FeatureMap, geometric_raw: FeatureMap,
                   config: FusionConfig, params: FusionParams):
    """Run the fusion pipeline; returns (semantic_fused, geometric_fused)."""
    if params.config != config:
        raise ConfigError("params were built for a different fusion config")
    _validate_forward_inputs(semantic_raw, geometric_raw, config)
    sem_var, geo_var = forward_maps_vars(
        semantic_raw.data, geometric_raw.data, config, params.tensors
    )
    stride = geometric_raw.stride_to_image
    return (
        FeatureMap(sem_var.value, stride, "semantic_fused"),
        FeatureMap(geo_var.value, stride, "geometric_fused"),
    )


# -- static merging ----------------------------------------------------------


def merge_partial(geometric_fused: FeatureMap, semantic_fused: FeatureMap,
                  config: FusionConfig) -> FeatureMap:
    """Concatenate the geometric map with the channel-strided semantic map."""
    if geometric_fused.channels != config.out_dim_geometric:
        raise ConfigError(
            f"geometric map has {geometric_fused.channels} channels, "
            f"config expects {config.out_dim_geometric}"
        )
    if semantic_fused.channels != config.out_dim_semantic:
        raise ConfigError(
            f"semantic map has {semantic_fused.channels} channels, "
            f"config expects {config.out_dim_semantic}"
        )
    sliced = channel_stride_slice(semantic_fused, config.semantic_channel_stride)
    return concat_channels(geometric_fused, sliced, role="concat")


def merge_unified(geometric_fused: FeatureMap, semantic_fused: FeatureMap,
                  dino: FeatureMap, config: FusionConfig) -> FeatureMap:
    """Merged descriptor plus channel-strided object-level features."""
    merged = merge_partial(geometric_fused, semantic_fused, config)
    if dino.channels != config.dino_dim:
        raise ConfigError(
            f"dino map has {dino.channels} channels, config expects {config.dino_dim}"
        )
    aligned = resample(dino, merged.height, merged.width)
    # Corner-aligned resampling can land on an equivalent but differently
    # reduced stride fraction; force the shared grid stride for concat.
    aligned = FeatureMap(aligned.data, merged.stride_to_image, aligned.role)
    sliced = channel_stride_slice(aligned, config.dino_channel_stride)
    return concat_channels(merged, sliced, role="unified")


# -- params file (MFP1) -------------------------------------------------------

MFP_MAGIC = b"MFP1"
_MFP_HEADER = struct.Struct("<12I")


def serialize_params(params: FusionParams) -> bytes:
    c = params.config
    flags = (1 if c.use_positional_encoding else 0) | (2 if c.use_pre_norm else 0)
    header = _MFP_HEADER.pack(
        c.num_blocks, c.hidden_dim, c.num_heads, c.patch_size,
        c.out_dim_geometric, c.out_dim_semantic,
        c.in_dim_semantic, c.in_dim_geometric, c.dino_dim,
        flags, NONLINEARITY_TANH_GELU, params.num_params,
    )
    payload = params.to_flat().astype("<f4").tobytes()
    return MFP_MAGIC + header + payload


def deserialize_params(blob: bytes, expected_config: FusionConfig = None) -> FusionParams:
    if blob[:4] != MFP_MAGIC:
        raise FormatError(f"bad params magic {blob[:4]!r}, expected {MFP_MAGIC!r}")
    if len(blob) < 4 + _MFP_HEADER.size:
        raise FormatError("truncated params header")
    (blocks, hidden, heads, patch, out_geo, out_sem, in_sem, in_geo,
     dino, flags, nonlin, count) = _MFP_HEADER.unpack_from(blob, 4)
    if nonlin != NONLINEARITY_TANH_GELU:
        raise FormatError(f"unsupported nonlinearity code {nonlin}")
    config = FusionConfig(
        num_blocks=blocks, hidden_dim=hidden, num_heads=heads, patch_size=patch,
        out_dim_geometric=out_geo, out_dim_semantic=out_sem,
        in_dim_semantic=in_sem, in_dim_geometric=in_geo, dino_dim=dino,
        use_positional_encoding=bool(flags & 1), use_pre_norm=bool(flags & 2),
    )
    if expected_config is not None and config != expected_config:
        for f in ("num_blocks", "hidden_dim", "num_heads", "patch_size",
                  "out_dim_geometric", "out_dim_semantic", "in_dim_semantic",
                  "in_dim_geometric", "dino_dim"):
            got, want = getattr(config, f), getattr(expected_config, f)
            if got != want:
                raise ConfigError(f"params file {f}={got}, run config expects {want}")
        raise ConfigError("params file flags differ from run config")
    template = FusionParams.zeros(config)
    if count != template.num_params:
        raise FormatError(
            f"header claims {count} params, config implies {template.num_params}"
        )
    payload = blob[4 + _MFP_HEADER.size :]
    if len(payload) != count * 4:
        raise FormatError(
            f"params payload is {len(payload)} bytes, expected {count * 4}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return template.from_flat(flat)


def write_params(path, params: FusionParams):
    atomic_write_bytes(path, serialize_params(params))


def read_params(path, expected_config: FusionConfig = None) -> FusionParams:
    with open(path, "rb") as f:
        return deserialize_params(f.read(), expected_config)
