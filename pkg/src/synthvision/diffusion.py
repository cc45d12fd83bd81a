"""Class-conditional DDPM with few-shot subject fine-tuning.

The denoiser folds each ``fold x fold`` pixel block into channels, runs a
two-level convolutional encoder-decoder with one skip connection at the
reduced resolution, and unfolds the result; it predicts the noise added by
the forward process. Conditioning
is the sum of a sinusoidal timestep embedding (through a small MLP) and
learned class / body-part / skin-tone embeddings; the result is projected to
a per-channel bias at every resolution.

Images inside this module live in [-1, 1]; :func:`to_model_range` and
:func:`from_model_range` convert from/to the classifier's [0, 1] space.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .core import AdamState, Rng, Tensor, adam_step, no_grad, truncated_normal
from .core import tensor as T
from .errors import ConfigError, DataError, DimensionError, IntegrityError, ParameterError, ShortageError

BODY_PARTS = ("face", "back", "leg", "neck", "arm", "chest")
SKIN_TONES = ("fair", "brown", "dark")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)


def build_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02, shape: str = "linear") -> NoiseSchedule:
    if shape != "linear":
        raise ParameterError(f"unsupported schedule shape {shape!r}")
    if T < 1 or not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(f"need T >= 1 and 0 < beta_start <= beta_end < 1, got T={T}, {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    c = np.asarray(values[np.asarray(t)], dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Noisy image at step ``t``: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar step or one step per leading-axis sample.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 shape {x0.shape} and eps shape {eps.shape} differ")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise ParameterError(f"timestep {t} out of range [0, {schedule.T})")
    ab = _coef(schedule.alpha_bars, t_arr, x0.ndim if t_arr.ndim else 0)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, eps.dtype), copy=False)


def to_model_range(images01):
    return np.asarray(images01) * 2.0 - 1.0


def from_model_range(images):
    return np.clip((np.asarray(images) + 1.0) * 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    widths: tuple = (32, 64)
    time_dim: int = 32
    embed_dim: int = 64
    num_classes: int = 3
    fold: int = 2
    padding: str = "edge"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.padding not in ("zeros", "edge"):
            raise ConfigError(f"padding must be 'zeros' or 'edge', got {self.padding!r}")
        if len(self.widths) != 2:
            raise ConfigError(f"widths must have two entries, got {self.widths}")
        if self.image_size % (2 * self.fold):
            raise ConfigError(f"image_size must be divisible by {2 * self.fold}, got {self.image_size}")
        if self.time_dim % 2:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown denoiser config fields: {sorted(set(d) - known)}")
        return cls(**d)


def denoiser_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    c, (w1, w2), e = cfg.channels * cfg.fold**2, cfg.widths, cfg.embed_dim
    return {
        "time.fc1.weight": (cfg.time_dim, e), "time.fc1.bias": (e,),
        "time.fc2.weight": (e, e), "time.fc2.bias": (e,),
        "class_embedding": (cfg.num_classes, e),
        "body_part_embedding": (len(BODY_PARTS) + 1, e),
        "skin_tone_embedding": (len(SKIN_TONES) + 1, e),
        "down1.conv1.weight": (3, 3, c, w1), "down1.conv1.bias": (w1,),
        "down1.emb.weight": (e, 2 * w1), "down1.emb.bias": (2 * w1,),
        "down1.conv2.weight": (3, 3, w1, w1), "down1.conv2.bias": (w1,),
        "mid.conv1.weight": (3, 3, w1, w2), "mid.conv1.bias": (w2,),
        "mid.emb.weight": (e, 2 * w2), "mid.emb.bias": (2 * w2,),
        "mid.conv2.weight": (3, 3, w2, w2), "mid.conv2.bias": (w2,),
        "up1.conv1.weight": (3, 3, w1 + w2, w1), "up1.conv1.bias": (w1,),
        "up1.emb.weight": (e, 2 * w1), "up1.emb.bias": (2 * w1,),
        "out.weight": (3, 3, w1, c), "out.bias": (c,),
        "out.emb.weight": (e, c), "out.emb.bias": (c,),
    }


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def init_denoiser(cfg: DenoiserConfig, rng: Rng, dtype=np.float64) -> DenoiserParams:
    """He-scaled conv/dense weights, zero biases, zero output layer (initial prediction is 0).

    The per-layer embedding projections start at zero, so every scale/shift
    modulation starts as the identity.
    """
    tensors = {}
    for name, shape in denoiser_shapes(cfg).items():
        if name.endswith(".bias") or name.startswith("out.") or ".emb." in name:
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith("_embedding"):
            tensors[name] = truncated_normal(rng, shape, 0.02, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            tensors[name] = (rng.normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return DenoiserParams(cfg, tensors)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: [sin(t f_k), cos(t f_k)] with f_k = 10000^(-k / (dim/2))."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class Condition:
    """Per-sample conditioning indices. Attribute index 0 means 'unspecified'."""

    class_ids: np.ndarray
    body_parts: np.ndarray | None = None
    skin_tones: np.ndarray | None = None

    @classmethod
    def make(cls, n: int, class_id: int, body_part: str | None = None, skin_tone: str | None = None) -> "Condition":
        return cls(np.full(n, class_id, dtype=np.int64),
                   np.full(n, attribute_index(BODY_PARTS, body_part), dtype=np.int64),
                   np.full(n, attribute_index(SKIN_TONES, skin_tone), dtype=np.int64))

    def take(self, idx) -> "Condition":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Condition(self.class_ids[idx], pick(self.body_parts), pick(self.skin_tones))

    @staticmethod
    def concat(conds: Sequence["Condition"]) -> "Condition":
        def cat(attr):
            parts = [getattr(c, attr) for c in conds]
            if all(p is None for p in parts):
                return None
            return np.concatenate([np.zeros(len(c.class_ids), np.int64) if p is None else p
                                   for c, p in zip(conds, parts)])
        return Condition(np.concatenate([c.class_ids for c in conds]), cat("body_parts"), cat("skin_tones"))


def attribute_index(vocab: Sequence[str], value: str | None) -> int:
    if value is None:
        return 0
    if value not in vocab:
        raise DataError(f"unknown attribute value {value!r}; expected one of {list(vocab)}")
    return vocab.index(value) + 1


def denoiser_apply(cfg: DenoiserConfig, w: dict, x_t, t, cond: Condition) -> Tensor:
    """Predicted noise for NHWC ``x_t`` at steps ``t`` (one per sample)."""
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"expected denoiser input (batch, {', '.join(map(str, expected))}), got {x.shape}")
    b = x.shape[0]
    dense = lambda v, p: T.matmul(v, w[f"{p}.weight"]) + w[f"{p}.bias"]  # noqa: E731

    temb = Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (b,)), cfg.time_dim).astype(x.dtype))
    emb = dense(T.silu(dense(temb, "time.fc1")), "time.fc2")
    emb = emb + T.take_rows(w["class_embedding"], cond.class_ids)
    if cond.body_parts is not None:
        emb = emb + T.take_rows(w["body_part_embedding"], cond.body_parts)
    if cond.skin_tones is not None:
        emb = emb + T.take_rows(w["skin_tone_embedding"], cond.skin_tones)
    emb = T.silu(emb)

    def film(h, p, width):
        # per-sample scale and shift, so the gain can follow the noise level
        ss = dense(emb, f"{p}.emb").reshape(b, 1, 1, 2 * width)
        return h * (ss[..., :width] + 1.0) + ss[..., width:]

    def conv(h, p):
        return T.conv2d(h, w[f"{p}.weight"], w[f"{p}.bias"], padding=cfg.padding)

    w1, w2 = cfg.widths
    c = x.shape[-1] * cfg.fold**2
    x = space_to_depth(x, cfg.fold)
    h1 = T.silu(film(conv(x, "down1.conv1"), "down1", w1))
    h1 = T.silu(conv(h1, "down1.conv2"))
    h2 = T.silu(film(conv(T.avg_pool2(h1), "mid.conv1"), "mid", w2))
    h2 = T.silu(conv(h2, "mid.conv2"))
    h3 = T.concat([T.upsample2(h2), h1], axis=-1)
    h3 = T.silu(film(conv(h3, "up1.conv1"), "up1", w1))
    gain = dense(emb, "out.emb").reshape(b, 1, 1, c) + 1.0
    return depth_to_space(conv(h3, "out") * gain, cfg.fold)


def space_to_depth(x: Tensor, k: int) -> Tensor:
    """(B, H, W, C) -> (B, H/k, W/k, k*k*C), block pixels in (row, col, channel) order."""
    if k == 1:
        return x
    b, h, w, c = x.shape
    return x.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // k, w // k, k * k * c)


def depth_to_space(x: Tensor, k: int) -> Tensor:
    if k == 1:
        return x
    b, h, w, ck = x.shape
    c = ck // (k * k)
    return x.reshape(b, h, w, k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * k, w * k, c)


Denoiser = Callable[[DenoiserParams, Tensor, np.ndarray, Condition], Tensor]


def default_denoiser(params: DenoiserParams, weights: dict, x_t, t, cond) -> Tensor:
    return denoiser_apply(params.config, weights, x_t, t, cond)


@dataclass(frozen=True)
class PriorConfig:
    """Prior-preservation settings.

    ``weight`` scales the prior loss; ``ratio`` is the number of prior images
    per guide image in each step's batch; ``class_id`` (plus optional
    attributes) conditions both the prior images and their loss.
    """

    weight: float = 1.0
    ratio: float = 1.0
    class_id: int = 1
    num_images: int = 64
    body_part: str | None = None
    skin_tone: str | None = None


@dataclass
class Batch:
    x0: np.ndarray
    cond: Condition


def _eps_loss(params, weights, batch: Batch, schedule, rng: Rng, denoiser):
    n = batch.x0.shape[0]
    t = rng.integers(0, schedule.T, size=n)
    eps = rng.normal(batch.x0.shape).astype(batch.x0.dtype)
    x_t = q_sample(batch.x0, t, eps, schedule)
    pred = denoiser(params, weights, Tensor(x_t), t, batch.cond)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def diffusion_train_step(params: DenoiserParams, batch: Batch, schedule: NoiseSchedule, rng: Rng,
                         prior_cfg: PriorConfig | None = None, prior_batch: Batch | None = None,
                         denoiser: Callable = default_denoiser):
    """Epsilon-prediction loss and its gradients.

    Loss is mean ||eps - eps_hat(x_t, t, cond)||^2 with t uniform and eps
    standard normal; with a prior config and batch it adds
    ``prior_cfg.weight`` times the same loss on the prior batch.
    Returns ``(loss, grads)``.
    """
    weights = {k: Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
    loss = _eps_loss(params, weights, batch, schedule, rng, denoiser)
    if prior_cfg is not None and prior_batch is not None and len(prior_batch.x0):
        loss = loss + prior_cfg.weight * _eps_loss(params, weights, prior_batch, schedule, rng, denoiser)
    loss.check_finite("diffusion loss")
    if loss.requires_grad:
        loss.backward()
    grads = {k: (w.grad if w.grad is not None else np.zeros_like(w.data)) for k, w in weights.items()}
    return float(loss.data), grads


def eval_eps_loss(params: DenoiserParams, x0, cond: Condition, schedule: NoiseSchedule, seed: int = 0) -> float:
    """Epsilon loss on fixed (t, eps) draws, for comparing models on equal footing."""
    with no_grad():
        weights = {k: Tensor(v) for k, v in params.tensors.items()}
        return float(_eps_loss(params, weights, Batch(np.asarray(x0, params.dtype), cond), schedule,
                               Rng(seed), default_denoiser).data)


def ddpm_sample(params: DenoiserParams, schedule: NoiseSchedule, n: int, class_id: int, rng: Rng,
                body_part: str | None = None, skin_tone: str | None = None, batch_size: int = 50,
                denoiser: Callable = default_denoiser, clip_denoised: bool = False) -> np.ndarray:
    """Ancestral sampling from t = T-1 down to 0; returns (n, H, W, C) in [-1, 1].

    Image ``i`` draws all its noise from ``rng.fork(i)``, so results do not
    depend on ``batch_size``. With ``clip_denoised`` the mean is computed from
    the implied x0 estimate clipped to [-1, 1] (same mean when nothing clips).
    """
    cfg = params.config
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    dtype = params.dtype
    out = np.empty((n, *shape), dtype=dtype)
    if n == 0:
        return out
    sqrt_recip_alpha = 1.0 / np.sqrt(schedule.alphas)
    eps_coef = schedule.betas / np.sqrt(1.0 - schedule.alpha_bars)
    sigma = np.sqrt(schedule.posterior_variance)
    ab, ab_prev = schedule.alpha_bars, schedule.alpha_bars_prev
    coef_x0 = schedule.betas * np.sqrt(ab_prev) / (1.0 - ab)
    coef_xt = (1.0 - ab_prev) * np.sqrt(schedule.alphas) / (1.0 - ab)
    with no_grad():
        weights = {k: Tensor(v) for k, v in params.tensors.items()}
        for start in range(0, n, batch_size):
            idx = range(start, min(n, start + batch_size))
            lanes = [rng.fork(i) for i in idx]
            m = len(lanes)
            cond = Condition.make(m, class_id, body_part, skin_tone)
            x = np.stack([lane.normal(shape) for lane in lanes]).astype(dtype)
            for t in range(schedule.T - 1, -1, -1):
                eps_hat = denoiser(params, weights, Tensor(x), np.full(m, t), cond).data
                if clip_denoised:
                    x0_hat = np.clip((x - np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(ab[t]), -1.0, 1.0)
                    mean = coef_x0[t] * x0_hat + coef_xt[t] * x
                else:
                    mean = sqrt_recip_alpha[t] * (x - eps_coef[t] * eps_hat)
                if t > 0:
                    z = np.stack([lane.normal(shape) for lane in lanes])
                    x = (mean + sigma[t] * z).astype(dtype)
                else:
                    x = mean.astype(dtype)
            out[start : start + m] = np.clip(x, -1.0, 1.0)
    return out


@dataclass
class GuideSet:
    """Few validated images of one (class, body part, skin tone) combination, in [0, 1]."""

    class_id: int
    images: list
    body_part: str | None = None
    skin_tone: str | None = None
    name: str = ""

    def __post_init__(self):
        if self.body_part is not None:
            attribute_index(BODY_PARTS, self.body_part)
        if self.skin_tone is not None:
            attribute_index(SKIN_TONES, self.skin_tone)

    def check_size(self, expected: int):
        if len(self.images) != expected:
            raise DataError(f"guide set {self.name or self.class_id!r} has {len(self.images)} images, expected {expected}")

    def condition(self, n: int) -> Condition:
        return Condition.make(n, self.class_id, self.body_part, self.skin_tone)


def train_denoiser(params: DenoiserParams, data: Batch, schedule: NoiseSchedule, steps: int, rng: Rng,
                   lr: float = 1e-3, batch_size: int = 32, prior_cfg: PriorConfig | None = None,
                   prior_data: Batch | None = None, on_step: Callable | None = None,
                   denoiser: Callable = default_denoiser, ema_decay: float | None = None) -> DenoiserParams:
    """Adam on the epsilon loss, sampling minibatches with replacement.

    With ``ema_decay`` the returned weights are the exponential moving
    average of the iterates (bias-corrected), which samples more cleanly
    after short runs.
    """
    if len(data.x0) == 0:
        raise DataError("no training images for the denoiser")
    tensors = dict(params.tensors)
    state = AdamState()
    ema = {k: np.zeros_like(v) for k, v in tensors.items()} if ema_decay else None
    n_prior = 0
    if prior_cfg is not None and prior_data is not None and prior_cfg.ratio > 0:
        n_prior = max(1, int(round(prior_cfg.ratio * batch_size)))
    for step in range(steps):
        idx = rng.integers(0, len(data.x0), size=batch_size)
        batch = Batch(data.x0[idx], data.cond.take(idx))
        prior_batch = None
        if n_prior:
            pidx = rng.integers(0, len(prior_data.x0), size=n_prior)
            prior_batch = Batch(prior_data.x0[pidx], prior_data.cond.take(pidx))
        current = DenoiserParams(params.config, tensors)
        loss, grads = diffusion_train_step(current, batch, schedule, rng, prior_cfg, prior_batch, denoiser)
        tensors, state = adam_step(tensors, grads, state, lr=lr)
        if ema is not None:
            for k, v in tensors.items():
                ema[k] = ema_decay * ema[k] + (1.0 - ema_decay) * v
        if on_step is not None:
            on_step(step, loss)
    if ema is not None and steps > 0:
        scale = 1.0 / (1.0 - ema_decay**steps)
        tensors = {k: (v * scale).astype(tensors[k].dtype) for k, v in ema.items()}
    return DenoiserParams(params.config, tensors)


def guide_batch(guides: GuideSet | Sequence[GuideSet], dtype=np.float64) -> Batch:
    guides = [guides] if isinstance(guides, GuideSet) else list(guides)
    if not guides or any(len(g.images) == 0 for g in guides):
        raise DataError("guide set is empty")
    x0 = np.concatenate([to_model_range(np.stack(g.images)) for g in guides]).astype(dtype)
    cond = Condition.concat([g.condition(len(g.images)) for g in guides])
    return Batch(x0, cond)


def few_shot_finetune(base: DenoiserParams, guide: GuideSet | Sequence[GuideSet], steps: int,
                      prior_cfg: PriorConfig | None, rng: Rng, schedule: NoiseSchedule | None = None,
                      lr: float = 1e-3, batch_size: int = 16, prior_images: np.ndarray | None = None,
                      on_step: Callable | None = None, clip_denoised: bool = False,
                      ema_decay: float | None = None) -> DenoiserParams:
    """Fine-tune ``base`` on a few guide images, with optional prior preservation.

    Prior images are generated once by the frozen base model (or passed in as
    ``prior_images`` in [-1, 1]) and mixed into every step at
    ``prior_cfg.ratio`` prior images per guide image.
    """
    data = guide_batch(guide, base.dtype)
    schedule = schedule or build_schedule()
    if steps == 0:
        return base.copy()
    prior_data = None
    if prior_cfg is not None and prior_cfg.ratio > 0:
        if prior_images is None:
            prior_images = ddpm_sample(base, schedule, prior_cfg.num_images, prior_cfg.class_id, rng.fork(0xB0),
                                       prior_cfg.body_part, prior_cfg.skin_tone, clip_denoised=clip_denoised)
        prior_images = np.asarray(prior_images, dtype=base.dtype)
        prior_data = Batch(prior_images, Condition.make(len(prior_images), prior_cfg.class_id,
                                                        prior_cfg.body_part, prior_cfg.skin_tone))
    return train_denoiser(base, data, schedule, steps, rng, lr=lr, batch_size=batch_size, prior_cfg=prior_cfg,
                          prior_data=prior_data, on_step=on_step, ema_decay=ema_decay)


def pooled_features(images, pool: int = 4) -> np.ndarray:
    """Per-channel means over a pool x pool grid, flattened: (n, pool*pool*C)."""
    x = np.asarray(images, dtype=np.float64)
    n, h, w, c = x.shape
    if h % pool or w % pool:
        raise ParameterError(f"image size {h}x{w} is not divisible by pool {pool}")
    return x.reshape(n, pool, h // pool, pool, w // pool, c).mean(axis=(2, 4)).reshape(n, -1)


@dataclass
class Selection:
    indices: np.ndarray
    scores: np.ndarray
    threshold: float

    def pick(self, candidates):
        return [candidates[i] for i in self.indices]


def select_images(candidates, min_keep: int, max_keep: int, guide: GuideSet, percentile: float = 40.0,
                  pool: int = 4, feature_fn: Callable | None = None) -> Selection:
    """Rank candidates by closeness to the guide-set centroid and keep the best.

    Score is the negative Euclidean distance between a candidate's feature
    vector and the mean guide feature. Candidates scoring at or above the
    ``percentile``-th score count as acceptable; the kept count is that
    number clamped to [min_keep, max_keep]. Ties go to the lower index.
    Candidates and guide images share one value range.
    """
    if min_keep > max_keep or min_keep < 0:
        raise ParameterError(f"need 0 <= min_keep <= max_keep, got {min_keep}, {max_keep}")
    n = len(candidates)
    if n < min_keep:
        raise ShortageError(n, min_keep)
    if len(guide.images) == 0:
        raise DataError("guide set is empty")
    feats = feature_fn or (lambda imgs: pooled_features(imgs, pool))
    if n == 0:
        return Selection(np.empty(0, dtype=np.int64), np.empty(0), float("nan"))
    cand = feats(np.stack(candidates))
    centroid = feats(np.stack(guide.images)).mean(axis=0)
    scores = -np.sqrt(((cand - centroid) ** 2).sum(axis=1))
    threshold = float(np.percentile(scores, percentile))
    above = int(np.count_nonzero(scores >= threshold))
    keep = min(n, max(min_keep, min(max_keep, above)))
    order = np.lexsort((np.arange(n), -scores))
    return Selection(order[:keep], scores, threshold)


def save_denoiser(params: DenoiserParams, path, extra: dict | None = None):
    cfg = params.config.to_dict()
    if extra:
        cfg["_extra"] = extra
    return checkpoint.save_tensors(path, "denoiser", cfg, params.tensors)


def load_denoiser(path) -> tuple[DenoiserParams, dict]:
    kind, cfg, tensors = checkpoint.load_tensors(path)
    if kind != "denoiser":
        raise IntegrityError(f"checkpoint kind is {kind!r}, expected 'denoiser'", 0)
    extra = cfg.pop("_extra", {})
    config = DenoiserConfig.from_dict(cfg)
    expected = denoiser_shapes(config)
    if set(expected) != set(tensors):
        raise IntegrityError("denoiser checkpoint tensors do not match its config", 0)
    return DenoiserParams(config, {k: tensors[k] for k in expected}), extra
