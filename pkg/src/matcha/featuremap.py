"""Dense feature-map storage, sampling, resampling and channel manipulation.

Coordinate convention, used by every module: grid coordinate (x, y) of a map
with cell stride s sits at image pixel

    px = x * s + s/2 - 0.5        (and the same for y)

i.e. grid points are cell centers. For s = 1 grid and pixel coordinates
coincide. The inverse is x = (px - s/2 + 0.5) / s.
"""

from dataclasses import dataclass
from fractions import Fraction
import re
import struct

import numpy as np

from matcha import kernels
from matcha.errors import ConfigError, DomainError, FormatError
from matcha.ioutil import atomic_write_bytes

ROLES = (
    "geometric_raw",
    "semantic_raw",
    "dino",
    "geometric_fused",
    "semantic_fused",
    "concat",
    "unified",
)

MTF_MAGIC = b"MTF1"
_MTF_HEADER = struct.Struct("<6I")  # height, width, channels, stride num/den, dtype
_DTYPE_F32 = 0


@dataclass(frozen=True)
class FeatureMap:
    """H x W x C grid of finite descriptor values, channel-last.

    `stride_to_image` is the (possibly rational) number of image pixels per
    grid cell. Zero-channel maps are permitted as transient concat operands.
    """

    data: np.ndarray
    stride_to_image: Fraction = Fraction(1)
    role: str = "unified"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DomainError(f"feature data must be (H, W, C), got shape {data.shape}")
        h, w, c = data.shape
        if h < 1 or w < 1 or c < 0:
            raise DomainError(f"invalid feature map shape {data.shape}")
        if c and not np.isfinite(data).all():
            raise DomainError("feature map contains non-finite values")
        if self.role not in ROLES:
            raise DomainError(f"unknown role {self.role!r}; expected one of {ROLES}")
        stride = Fraction(self.stride_to_image)
        if stride <= 0:
            raise DomainError("stride_to_image must be positive")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stride_to_image", stride)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def image_width(self):
        return float(self.width * self.stride_to_image)

    @property
    def image_height(self):
        return float(self.height * self.stride_to_image)

    def grid_to_image(self, pts):
        """Grid (x, y) coordinates -> image pixels per the cell-center convention."""
        s = float(self.stride_to_image)
        return np.asarray(pts, dtype=np.float64) * s + (s / 2.0 - 0.5)

    def image_to_grid(self, pts):
        s = float(self.stride_to_image)
        return (np.asarray(pts, dtype=np.float64) - (s / 2.0 - 0.5)) / s

    def cell_centers_grid(self):
        """(H*W, 2) grid (x, y) positions of all cells, row-major linear order."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)

    def cell_centers_image(self):
        return self.grid_to_image(self.cell_centers_grid())

    def with_role(self, role):
        return FeatureMap(self.data, self.stride_to_image, role)


def bilinear_sample(fmap: FeatureMap, points) -> np.ndarray:
    """Sample channel vectors at continuous grid coordinates (x, y).

    Exact grid points return stored values; interior points blend the four
    surrounding cells. Points outside [0, W-1] x [0, H-1] are an error.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"points must be (P, 2), got shape {pts.shape}")
    xs, ys = pts[:, 0], pts[:, 1]
    bad = (xs < 0) | (xs > fmap.width - 1) | (ys < 0) | (ys > fmap.height - 1)
    bad |= ~np.isfinite(xs) | ~np.isfinite(ys)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"sample point {i} = ({xs[i]}, {ys[i]}) outside grid "
            f"[0, {fmap.width - 1}] x [0, {fmap.height - 1}]"
        )
    return kernels.bilinear_gather(fmap.data, xs, ys)


def resample(fmap: FeatureMap, new_height: int, new_width: int) -> FeatureMap:
    """Corner-aligned bilinear resampling; stride rescaled by the size ratio."""
    if new_height < 1 or new_width < 1:
        raise DomainError("resample target must be at least 1x1")
    h, w = fmap.height, fmap.width
    if (new_height, new_width) == (h, w):
        return fmap
    # The single stride field rescales by the height ratio when the height
    # changes, else by the width ratio; the aligned-grid use cases are all
    # isotropic so both agree there.
    ratio = Fraction(h, new_height) if new_height != h else Fraction(w, new_width)
    data = kernels.bilinear_resize(fmap.data, new_height, new_width)
    return FeatureMap(data, fmap.stride_to_image * ratio, fmap.role)


def channel_stride_slice(fmap: FeatureMap, stride: int) -> FeatureMap:
    """Keep channels 0, stride, 2*stride, ...; channel count must divide evenly."""
    if stride < 1:
        raise ConfigError(f"channel stride must be >= 1, got {stride}")
    if stride == 1:
        return fmap
    if fmap.channels % stride != 0:
        raise ConfigError(
            f"channel count {fmap.channels} not divisible by stride {stride}"
        )
    return FeatureMap(fmap.data[:, :, ::stride], fmap.stride_to_image, fmap.role)


def concat_channels(a: FeatureMap, b: FeatureMap, role=None) -> FeatureMap:
    """Channel-wise concatenation, a's channels first."""
    if (a.height, a.width) != (b.height, b.width):
        raise DomainError(
            f"spatial mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    if a.stride_to_image != b.stride_to_image:
        raise DomainError(
            f"stride mismatch: {a.stride_to_image} vs {b.stride_to_image}"
        )
    data = np.concatenate([a.data, b.data], axis=2)
    return FeatureMap(data, a.stride_to_image, role or a.role)


def l2_normalize_channels(fmap: FeatureMap, epsilon: float = 1e-12) -> FeatureMap:
    """Divide each cell's channel vector by max(norm, epsilon)."""
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    norms = np.sqrt(np.sum(fmap.data**2, axis=2, keepdims=True))
    data = fmap.data / np.maximum(norms, epsilon)
    return FeatureMap(data, fmap.stride_to_image, fmap.role)


def normalize_rows(vectors: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """Row-wise L2 normalization of an (M, D) descriptor matrix."""
    norms = np.sqrt(np.sum(vectors**2, axis=1, keepdims=True))
    return vectors / np.maximum(norms, epsilon)


def feature_file_name(stem: str, role: str) -> str:
    if role not in ROLES:
        raise DomainError(f"unknown role {role!r}")
    return f"{stem}.{role}.mtf"


_ROLE_RE = re.compile(r"\.([a-z_0-9]+)\.mtf$")


def role_from_path(path) -> str | None:
    m = _ROLE_RE.search(str(path))
    if m and m.group(1) in ROLES:
        return m.group(1)
    return None


def write_feature_map(path, fmap: FeatureMap):
    """Write the MTF binary format (header + little-endian f32 payload)."""
    if fmap.channels < 1:
        raise DomainError("cannot write a zero-channel feature map")
    stride = fmap.stride_to_image
    header = _MTF_HEADER.pack(
        fmap.height,
        fmap.width,
        fmap.channels,
        stride.numerator,
        stride.denominator,
        _DTYPE_F32,
    )
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, MTF_MAGIC + header + payload)


def read_feature_map(path, role=None) -> FeatureMap:
    """Read an MTF file; role comes from the file name unless given."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MTF_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MTF_MAGIC!r}")
    if len(blob) < 4 + _MTF_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    h, w, c, num, den, dtype = _MTF_HEADER.unpack_from(blob, 4)
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if den == 0 or num == 0:
        raise FormatError(f"{path}: zero stride numerator/denominator")
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{path}: invalid dimensions {h}x{w}x{c}")
    expected = h * w * c * 4
    payload = blob[4 + _MTF_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    if role is None:
        role = role_from_path(path)
    if role is None:
        raise FormatError(
            f"{path}: file name carries no role suffix and no role was given"
        )
    return FeatureMap(data, Fraction(num, den), role)
