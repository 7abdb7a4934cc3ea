"""Two-stage desk-scale training of the fusion parameters.

Stage 1 optimizes the geometric dual-softmax loss with the semantic branch
frozen (masked updates keep those coordinates bitwise unchanged); stage 2
adds the weighted semantic supervision. Scene and noise seeds are derived
statelessly per step, so runs are reproducible and resumable.
"""

from dataclasses import dataclass, field, asdict, replace
import csv
import io
import json

import numpy as np

from matcha import autodiff as ad
from matcha.errors import ConfigError, FormatError, NumericalError
from matcha.fusion import FusionConfig, FusionParams, forward_maps_vars
from matcha.ioutil import atomic_write_bytes, atomic_write_text
from matcha.losses import (
    LossConfig,
    clip_contrastive_vars,
    dual_softmax_vars,
    semantic_flow_vars,
)
from matcha.synth import SceneGenConfig, SyntheticScene, generate_scene


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the reference schedule from large-scale training
    (base 1e-4 dropping to 5e-5 / 2e-5 at 100k / 150k of 220k iterations)
    is expressed by overriding the schedule fields."""

    stage1_iterations: int = 2000
    stage2_iterations: int = 2000
    batch_size_stage1: int = 2
    batch_size_stage2: int = 2
    base_lr: float = 2e-3
    lr_drop_steps: tuple = (1818, 2727)   # 100k/150k of 220k, scaled to 4000
    lr_drop_values: tuple = (1e-3, 4e-4)  # base * 0.5, base * 0.2
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(
        num_blocks=2, hidden_dim=64, num_heads=4, patch_size=2,
        out_dim_geometric=32, out_dim_semantic=96,
        in_dim_semantic=64, in_dim_geometric=32, dino_dim=128,
    ))
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)

    def __post_init__(self):
        if self.stage1_iterations < 0 or self.stage2_iterations < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.batch_size_stage1 < 1 or self.batch_size_stage2 < 1:
            raise ConfigError("batch sizes must be >= 1")
        if len(self.lr_drop_steps) != len(self.lr_drop_values):
            raise ConfigError("lr_drop_steps and lr_drop_values lengths differ")
        if list(self.lr_drop_steps) != sorted(set(self.lr_drop_steps)):
            raise ConfigError("lr_drop_steps must be strictly increasing")
        if self.base_lr < 0 or any(v < 0 for v in self.lr_drop_values):
            raise ConfigError("learning rates must be non-negative")
        object.__setattr__(self, "lr_drop_steps", tuple(int(s) for s in self.lr_drop_steps))
        object.__setattr__(self, "lr_drop_values", tuple(float(v) for v in self.lr_drop_values))

    @property
    def total_iterations(self):
        return self.stage1_iterations + self.stage2_iterations

    def validate_scene_dims(self):
        s, f = self.scene, self.fusion
        if (s.in_dim_semantic, s.in_dim_geometric, s.dino_dim) != (
            f.in_dim_semantic, f.in_dim_geometric, f.dino_dim
        ):
            raise ConfigError(
                "scene channel dims "
                f"({s.in_dim_semantic}/{s.in_dim_geometric}/{s.dino_dim}) do not match "
                f"fusion input dims ({f.in_dim_semantic}/{f.in_dim_geometric}/{f.dino_dim})"
            )
        geo_cells = s.image_size // s.geo_stride
        if geo_cells % f.patch_size:
            raise ConfigError(
                f"geometric grid {geo_cells} not divisible by patch size {f.patch_size}"
            )


def train_config_to_json(config: TrainConfig) -> str:
    doc = asdict(config)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def train_config_from_json(text: str) -> TrainConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"train config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("train config must be a JSON object")
    known = {f_.name for f_ in TrainConfig.__dataclass_fields__.values()}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
    kwargs = dict(doc)
    for key, cls in (("loss", LossConfig), ("fusion", FusionConfig), ("scene", SceneGenConfig)):
        if key in kwargs:
            if not isinstance(kwargs[key], dict):
                raise ConfigError(f"{key} must be a JSON object")
            sub_known = {f_.name for f_ in cls.__dataclass_fields__.values()}
            sub_unknown = set(kwargs[key]) - sub_known
            if sub_unknown:
                raise ConfigError(f"unknown {key} config fields: {sorted(sub_unknown)}")
            kwargs[key] = cls(**kwargs[key])
    for key in ("lr_drop_steps", "lr_drop_values"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return TrainConfig(**kwargs)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: base rate until the first drop step."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    lr = config.base_lr
    for threshold, value in zip(config.lr_drop_steps, config.lr_drop_values):
        if step >= threshold:
            lr = value
    return lr


# -- optimizer -----------------------------------------------------------


@dataclass
class OptimizerState:
    """Adaptive-moment state with decoupled weight decay."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size, **kwargs):
        return cls(m=np.zeros(size), v=np.zeros(size), **kwargs)


def optimizer_step(theta: np.ndarray, grad: np.ndarray, state: OptimizerState,
                   update_mask: np.ndarray = None):
    """One decoupled-weight-decay moment update; returns (new theta, state).

    Coordinates where update_mask is False are left bitwise untouched,
    moments included (this is how branch freezing is enforced).
    """
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ConfigError(
            f"shape mismatch: theta {theta.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.step += 1
    t = state.step
    m_new = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v_new = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    if update_mask is None:
        state.m, state.v = m_new, v_new
    else:
        state.m = np.where(update_mask, m_new, state.m)
        state.v = np.where(update_mask, v_new, state.v)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    step_vec = state.learning_rate * (
        m_hat / (np.sqrt(v_hat) + state.epsilon) + state.weight_decay * theta
    )
    if update_mask is None:
        return theta - step_vec, state
    return np.where(update_mask, theta - step_vec, theta), state


# -- loss + gradient -------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    geometric: float
    contrastive: float
    flow: float


def _gather_at(map_var, stride, points):
    s = float(stride)
    grid = (np.asarray(points, dtype=np.float64) - (s / 2.0 - 0.5)) / s
    h, w = map_var.value.shape[:2]
    xs = np.clip(grid[:, 0], 0.0, w - 1.0)
    ys = np.clip(grid[:, 1], 0.0, h - 1.0)
    return ad.bilinear_gather(map_var, xs, ys)


def _cells_image(shape, stride):
    h, w = shape
    s = float(stride)
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    return grid * s + (s / 2.0 - 0.5)


def scene_loss_vars(params_vars: dict, scene: SyntheticScene, stage: int,
                    loss_cfg: LossConfig, fusion_cfg: FusionConfig, noise_seed):
    """Per-scene supervision terms; returns (geo, cl, flow) Vars (None if absent)."""
    sem_a, geo_a = forward_maps_vars(
        scene.semantic_a.data, scene.geometric_a.data, fusion_cfg, params_vars
    )
    sem_b, geo_b = forward_maps_vars(
        scene.semantic_b.data, scene.geometric_b.data, fusion_cfg, params_vars
    )
    corr = scene.correspondences
    stride = scene.geometric_a.stride_to_image
    if stage == 1 or scene.supervision == "geometric":
        xa = _gather_at(geo_a, stride, corr.points_a)
        xb = _gather_at(geo_b, stride, corr.points_b)
        return dual_softmax_vars(xa, xb, loss_cfg.normalize_descriptors), None, None
    xa = _gather_at(sem_a, stride, corr.points_a)
    xb = _gather_at(sem_b, stride, corr.points_b)
    cl = clip_contrastive_vars(
        xa, xb, loss_cfg.tau, loss_cfg.tau_divide_mode, loss_cfg.normalize_descriptors
    )
    shape = sem_a.value.shape[:2]
    cells = _cells_image(shape, stride)
    flow = semantic_flow_vars(
        sem_a, sem_b, corr, loss_cfg, noise_seed,
        stride, stride, shape, shape, cells, cells,
    )
    return None, cl, flow


def loss_and_gradient(params: FusionParams, scenes, stage: int, loss_cfg: LossConfig,
                      noise_seed=0, compute_grad=True):
    """Batch loss (sum over scenes) and the flat reverse-mode gradient.

    Stage 1 skips the semantic loss and zeroes every semantic-branch
    gradient coordinate. Returns (LossBreakdown, grad or None).
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if not scenes:
        raise ConfigError("empty scene batch")
    pvars = params.as_vars(requires_grad=compute_grad)
    geo_terms, cl_terms, flow_terms = [], [], []
    for k, scene in enumerate(scenes):
        geo, cl, flow = scene_loss_vars(
            pvars, scene, stage, loss_cfg, params.config, (noise_seed, k)
        )
        if geo is not None:
            geo_terms.append(geo)
        if cl is not None:
            cl_terms.append(cl)
            flow_terms.append(flow)

    def _total(terms):
        if not terms:
            return ad.Var(np.zeros(()))
        out = terms[0]
        for term in terms[1:]:
            out = ad.add(out, term)
        return out

    geo_sum = _total(geo_terms)
    cl_sum = _total(cl_terms)
    flow_sum = _total(flow_terms)
    sem_sum = ad.add(ad.mul(cl_sum, loss_cfg.w_cl), ad.mul(flow_sum, loss_cfg.w_flow))
    total = ad.add(geo_sum, ad.mul(sem_sum, loss_cfg.w_sem)) if stage == 2 else geo_sum

    breakdown = LossBreakdown(
        total=float(total.value), geometric=float(geo_sum.value),
        contrastive=float(cl_sum.value), flow=float(flow_sum.value),
    )
    for term, value in (("geometric", breakdown.geometric),
                        ("contrastive", breakdown.contrastive),
                        ("flow", breakdown.flow), ("total", breakdown.total)):
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {term} loss: {value}", term=term)
    if not compute_grad:
        return breakdown, None
    ad.backward(total)
    parts = []
    for name in params.names():
        g = pvars[name].grad
        parts.append(
            (g if g is not None else np.zeros_like(params.tensors[name])).ravel()
        )
    grad = np.concatenate(parts)
    if stage == 1:
        grad[params.semantic_mask()] = 0.0
    return breakdown, grad


# -- training loop -----------------------------------------------------------


def scene_seed(run_seed: int, step: int, slot: int) -> int:
    seq = np.random.SeedSequence([int(run_seed) & 0xFFFFFFFF, 0x5CE7E, step, slot])
    return int(seq.generate_state(1)[0])


def holdout_seed(run_seed: int, index: int) -> int:
    seq = np.random.SeedSequence([int(run_seed) & 0xFFFFFFFF, 0x807D0, index])
    return int(seq.generate_state(1)[0])


def training_scene(config: TrainConfig, step: int, slot: int, stage: int) -> SyntheticScene:
    """Stage 1 draws geometric-supervision scenes; stage 2 interleaves the
    two supervision kinds 1:1 across batch slots."""
    kind = "geometric"
    if stage == 2 and slot % 2 == 1:
        kind = "semantic"
    cfg = replace(config.scene, supervision=kind)
    return generate_scene(scene_seed(config.seed, step, slot), cfg)


def holdout_scene(config: TrainConfig, index: int) -> SyntheticScene:
    """Evaluation scenes drawn from a stream disjoint from training steps."""
    return generate_scene(holdout_seed(config.seed, index), config.scene)


@dataclass
class LogRow:
    step: int
    stage: int
    lr: float
    loss_geo: float
    loss_cl: float
    loss_flow: float
    loss_total: float


LOG_HEADER = ["step", "stage", "lr", "loss_geo", "loss_cl", "loss_flow", "loss_total"]


def log_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([
            r.step, r.stage, repr(r.lr), repr(r.loss_geo),
            repr(r.loss_cl), repr(r.loss_flow), repr(r.loss_total),
        ])
    return buf.getvalue()


def save_checkpoint(path, theta, state: OptimizerState, next_step: int, config: TrainConfig):
    import io as _io

    buf = _io.BytesIO()
    np.savez(
        buf, theta=theta, m=state.m, v=state.v,
        step=np.array([state.step]), next_step=np.array([next_step]),
        config=np.frombuffer(train_config_to_json(config).encode(), dtype=np.uint8),
    )
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, config: TrainConfig):
    try:
        with np.load(path) as doc:
            theta = doc["theta"]
            m, v = doc["m"], doc["v"]
            opt_step = int(doc["step"][0])
            next_step = int(doc["next_step"][0])
            saved = bytes(doc["config"]).decode()
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad checkpoint: {exc}") from None
    if saved != train_config_to_json(config):
        raise ConfigError(f"{path}: checkpoint was written with a different train config")
    return theta, m, v, opt_step, next_step


def train(config: TrainConfig, log_path=None, checkpoint_path=None,
          checkpoint_every=0, resume_from=None, progress=None):
    """Run both stages; returns (FusionParams, list[LogRow]).

    Deterministic given config.seed: scenes and flow noise are derived per
    step, and the batch reduction is an index-ordered sum.
    """
    config.validate_scene_dims()
    template = FusionParams.initialize(config.fusion, config.seed)
    theta = template.to_flat()
    state = OptimizerState.zeros(
        theta.size, learning_rate=config.base_lr, weight_decay=config.weight_decay,
        beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon,
    )
    start = 0
    if resume_from is not None:
        theta, state.m, state.v, state.step, start = load_checkpoint(resume_from, config)
    sem_mask = template.semantic_mask()
    rows = []
    for step in range(start, config.total_iterations):
        stage = 1 if step < config.stage1_iterations else 2
        state.learning_rate = lr_schedule(step, config)
        batch = config.batch_size_stage1 if stage == 1 else config.batch_size_stage2
        scenes = [training_scene(config, step, slot, stage) for slot in range(batch)]
        params = template.from_flat(theta)
        try:
            breakdown, grad = loss_and_gradient(
                params, scenes, stage, config.loss, noise_seed=(config.seed, step)
            )
        except NumericalError as exc:
            raise NumericalError(
                f"iteration {step}: {exc}", term=exc.term
            ) from None
        mask = ~sem_mask if stage == 1 else None
        theta, state = optimizer_step(theta, grad, state, update_mask=mask)
        rows.append(LogRow(
            step, stage, state.learning_rate,
            breakdown.geometric, breakdown.contrastive, breakdown.flow, breakdown.total,
        ))
        if progress is not None:
            progress(rows[-1])
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, theta, state, step + 1, config)
    if log_path is not None:
        atomic_write_text(log_path, log_rows_to_csv(rows))
    return template.from_flat(theta), rows
