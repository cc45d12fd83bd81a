"""Vision Transformer classifier with an extra dense head layer.

Pipeline: patchify -> linear patch projection -> prepend class token -> add
position embeddings -> pre-norm transformer blocks -> final layer norm ->
class-token readout -> dense(head_hidden) -> dense(num_classes).

Patch vectors flatten each ``patch x patch x channels`` tile in (row, column,
channel) order; patches themselves are ordered row-major over the grid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import Rng, Tensor, no_grad, truncated_normal
from .core import tensor as T
from .errors import ConfigError, ConfigMismatchError, DimensionError, IntegrityError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 384
    patch_size: int = 16
    channels: int = 3
    hidden_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    mlp_dim: int = 3072
    head_hidden: int = 128
    num_classes: int = 3
    attention_dropout: float = 0.1
    layer_norm_eps: float = 1e-6
    head_activation: str = "linear"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ConfigError(f"attention_dropout must be in [0, 1), got {self.attention_dropout}")
        if self.head_activation not in ("linear", "gelu"):
            raise ConfigError(f"head_activation must be 'linear' or 'gelu', got {self.head_activation!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ViT config fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "paper-vitb16-384": ViTConfig(),
    "tiny": ViTConfig(image_size=32, patch_size=8, channels=3, hidden_dim=64, num_layers=2, num_heads=4,
                      mlp_dim=128, head_hidden=16, num_classes=3),
}


def get_preset(name: str, **overrides) -> ViTConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available presets: {', '.join(sorted(PRESETS))}")
    return dataclasses.replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, m = config.hidden_dim, config.mlp_dim
    shapes = {
        "patch_projection.weight": (config.patch_dim, d),
        "patch_projection.bias": (d,),
        "class_token": (d,),
        "position_embedding": (config.seq_len, d),
    }
    for i in range(config.num_layers):
        b = f"block{i}"
        shapes[f"{b}.norm1.gamma"] = (d,)
        shapes[f"{b}.norm1.beta"] = (d,)
        for proj in ("query", "key", "value", "out"):
            shapes[f"{b}.attn.{proj}.weight"] = (d, d)
            shapes[f"{b}.attn.{proj}.bias"] = (d,)
        shapes[f"{b}.norm2.gamma"] = (d,)
        shapes[f"{b}.norm2.beta"] = (d,)
        shapes[f"{b}.mlp.fc1.weight"] = (d, m)
        shapes[f"{b}.mlp.fc1.bias"] = (m,)
        shapes[f"{b}.mlp.fc2.weight"] = (m, d)
        shapes[f"{b}.mlp.fc2.bias"] = (d,)
    shapes["final_norm.gamma"] = (d,)
    shapes["final_norm.beta"] = (d,)
    shapes["head_dense.weight"] = (d, config.head_hidden)
    shapes["head_dense.bias"] = (config.head_hidden,)
    shapes["head_out.weight"] = (config.head_hidden, config.num_classes)
    shapes["head_out.bias"] = (config.num_classes,)
    return shapes


@dataclass
class ViTParams:
    config: ViTConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ViTParams":
        return ViTParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def init_params(config: ViTConfig, rng: Rng, dtype=np.float64) -> ViTParams:
    """Truncated-normal(0.02) weights and embeddings; zero biases and class token; unit norms."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            tensors[name] = np.ones(shape, dtype=dtype)
        elif leaf in ("bias", "beta") or name == "class_token":
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = truncated_normal(rng, shape, 0.02, dtype=dtype)
    return ViTParams(config, tensors)


def patchify(images, patch_size: int) -> Tensor:
    """(H, W, C) -> (N, p*p*C), or batched (B, H, W, C) -> (B, N, p*p*C)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (B, H, W, C) images, got shape {x.shape}")
    b, h, w, c = x.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = x.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh * gw, patch_size * patch_size * c)
    return x.reshape(x.shape[1:]) if single else x


def attention(q, k, v, dropout_rate=0.0, mode="eval", rng=None, return_weights=False):
    """Scaled dot-product attention over [..., heads, seq, d_head] inputs."""
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.matmul(q, k.transpose(axes)) * scale
    weights = T.softmax(scores, axis=-1)
    dropped = T.dropout(weights, dropout_rate, mode, rng)
    out = T.matmul(dropped, v)
    return (out, weights) if return_weights else out


def _dense(x, weights, prefix):
    return T.matmul(x, weights[f"{prefix}.weight"]) + weights[f"{prefix}.bias"]


def apply(config: ViTConfig, weights: dict, images, mode="eval", rng=None, return_attention=False):
    """Forward pass over Tensor-valued ``weights``; returns logits Tensor (B, num_classes)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    expected = (config.image_size, config.image_size, config.channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"expected images of shape (batch, {', '.join(map(str, expected))}), got {x.shape}")
    if mode == "train" and config.attention_dropout > 0 and rng is None:
        raise ConfigError("train mode with attention dropout needs an rng")
    b = x.shape[0]
    d, h = config.hidden_dim, config.num_heads
    dh = d // h
    s = config.seq_len
    eps = config.layer_norm_eps

    tokens = _dense(patchify(x, config.patch_size), weights, "patch_projection")
    cls = weights["class_token"].reshape(1, 1, d) + Tensor(np.zeros((b, 1, d), dtype=tokens.dtype))
    x = T.concat([cls, tokens], axis=1) + weights["position_embedding"]

    attn_maps = []
    for i in range(config.num_layers):
        p = f"block{i}"
        y = T.layer_norm(x, weights[f"{p}.norm1.gamma"], weights[f"{p}.norm1.beta"], eps)
        heads = []
        for proj in ("query", "key", "value"):
            z = _dense(y, weights, f"{p}.attn.{proj}").reshape(b, s, h, dh).transpose(0, 2, 1, 3)
            heads.append(z)
        ctx, wts = attention(*heads, config.attention_dropout, mode, rng, return_weights=True)
        attn_maps.append(wts.data)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
        x = x + _dense(ctx, weights, f"{p}.attn.out")
        y = T.layer_norm(x, weights[f"{p}.norm2.gamma"], weights[f"{p}.norm2.beta"], eps)
        y = _dense(T.gelu(_dense(y, weights, f"{p}.mlp.fc1")), weights, f"{p}.mlp.fc2")
        x = x + y

    x = T.layer_norm(x, weights["final_norm.gamma"], weights["final_norm.beta"], eps)
    token = x[:, 0, :]
    hidden = _dense(token, weights, "head_dense")
    if config.head_activation == "gelu":
        hidden = T.gelu(hidden)
    logits = _dense(hidden, weights, "head_out")
    return (logits, attn_maps) if return_attention else logits


def forward(params: ViTParams, images, mode="eval", rng=None) -> np.ndarray:
    """Logits as a numpy array; no gradient tape."""
    images = np.asarray(images, dtype=params.dtype)
    with no_grad():
        weights = {k: Tensor(v) for k, v in params.tensors.items()}
        return apply(params.config, weights, images, mode, rng).data


# published Model Summary rows for the 384px / patch-16 / 12-layer preset (2-class output)
PUBLISHED_SUMMARY = {
    "patch_projection": 590592,
    "class_token": 768,
    "position_embedding": 443136,
    "block": 7087872,
    "final_norm": 1536,
    "head_dense": 98432,
    "head_out": 258,
}
PUBLISHED_CLASSES = 2
PUBLISHED_PRINTED_TOTAL = 86090496


def count_params(config: ViTConfig) -> tuple[list[tuple[str, int]], int]:
    """Closed-form per-layer parameter counts and their total."""
    d, m, k, c = config.hidden_dim, config.mlp_dim, config.patch_size, config.channels
    norm = 2 * d
    block = 2 * norm + 4 * (d * d + d) + (d * m + m) + (m * d + d)
    rows = [
        ("patch_projection", k * k * c * d + d),
        ("class_token", d),
        ("position_embedding", ((config.image_size // k) ** 2 + 1) * d),
    ]
    rows += [(f"block_{i}", block) for i in range(config.num_layers)]
    rows += [
        ("final_norm", norm),
        ("head_dense", d * config.head_hidden + config.head_hidden),
        ("head_out", config.head_hidden * config.num_classes + config.num_classes),
    ]
    return rows, sum(n for _, n in rows)


@dataclass
class AuditRow:
    name: str
    computed: int
    published: int | None
    note: str = ""

    @property
    def matches(self) -> bool | None:
        return None if self.published is None else self.computed == self.published


@dataclass
class ParamAudit:
    config: ViTConfig
    rows: list[AuditRow]
    total: int
    table_total: int | None = None
    published_rows_total: int | None = None
    published_printed_total: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def rows_match(self) -> bool:
        return all(r.matches is not False for r in self.rows)

    @property
    def total_discrepancy(self) -> int | None:
        if self.published_rows_total is None or self.published_printed_total is None:
            return None
        return self.published_rows_total - self.published_printed_total


def audit_params(config: ViTConfig, compare_published: bool | None = None) -> ParamAudit:
    """Parameter table, cross-checked against the published summary when the
    architecture matches the published one."""
    rows, total = count_params(config)
    reference = PRESETS["paper-vitb16-384"]
    if compare_published is None:
        compare_published = dataclasses.replace(config, num_classes=reference.num_classes) == dataclasses.replace(
            reference, attention_dropout=config.attention_dropout, layer_norm_eps=config.layer_norm_eps,
            head_activation=config.head_activation)
    if not compare_published:
        return ParamAudit(config, [AuditRow(n, c, None) for n, c in rows], total)

    out = []
    for name, count in rows:
        if name != "head_out":
            out.append(AuditRow(name, count, PUBLISHED_SUMMARY["block" if name.startswith("block_") else name]))
    # the published output row is for a 2-class head; compare it at that count
    table_rows, table_total = count_params(dataclasses.replace(config, num_classes=PUBLISHED_CLASSES))
    if config.num_classes != PUBLISHED_CLASSES:
        out.append(AuditRow(f"head_out[{config.num_classes} classes]", rows[-1][1], None, "configured"))
    out.append(AuditRow(f"head_out[{PUBLISHED_CLASSES} classes]", table_rows[-1][1], PUBLISHED_SUMMARY["head_out"]))

    table_rows, table_total = count_params(dataclasses.replace(config, num_classes=PUBLISHED_CLASSES))
    published_sum = sum(PUBLISHED_SUMMARY["block"] if n.startswith("block_") else PUBLISHED_SUMMARY[n] for n, _ in table_rows)
    audit = ParamAudit(config, out, total, table_total, published_sum, PUBLISHED_PRINTED_TOTAL)
    missing = published_sum - PUBLISHED_PRINTED_TOTAL
    head = PUBLISHED_SUMMARY["head_dense"] + PUBLISHED_SUMMARY["head_out"]
    audit.notes.append(
        f"DISCREPANCY: published rows sum to {published_sum} but the printed total is {PUBLISHED_PRINTED_TOTAL} "
        f"(difference {missing})"
        + (" = head_dense + head_out; the printed total omits both head layers" if missing == head else "")
    )
    if table_total != published_sum:
        audit.notes.append(f"computed total at {PUBLISHED_CLASSES} classes is {table_total}, "
                           f"published row sum is {published_sum}")
    return audit


def format_audit(audit: ParamAudit, fmt: str = "text") -> str:
    if fmt == "csv":
        lines = ["layer,computed,published,match"]
        for r in audit.rows:
            lines.append(f"{r.name},{r.computed},{'' if r.published is None else r.published},"
                         f"{'' if r.matches is None else str(r.matches).lower()}")
        lines.append(f"total,{audit.total},,")
        if audit.table_total is not None:
            lines.append(f"total_at_{PUBLISHED_CLASSES}_classes,{audit.table_total},,")
        if audit.published_rows_total is not None:
            lines.append(f"total_published_rows,{audit.published_rows_total},,")
            lines.append(f"total_published_printed,{audit.published_printed_total},,")
            gap = audit.published_rows_total - audit.published_printed_total
            if gap:
                lines.append(f"discrepancy,{gap},,flagged")
        return "\n".join(lines) + "\n"

    width = max(32, *(len(r.name) + 2 for r in audit.rows))
    lines = [f"{'layer':<{width}}{'params':>12}{'published':>12}  match"]
    for r in audit.rows:
        pub = "" if r.published is None else str(r.published)
        flag = "" if r.matches is None else ("ok" if r.matches else "MISMATCH")
        lines.append(f"{r.name:<{width}}{r.computed:>12}{pub:>12}  {flag}")
    lines.append(f"{f'total (computed, {audit.config.num_classes} classes)':<{width}}{audit.total:>12}")
    if audit.table_total is not None and audit.config.num_classes != PUBLISHED_CLASSES:
        lines.append(f"{f'total (computed, {PUBLISHED_CLASSES} classes)':<{width}}{audit.table_total:>12}")
    if audit.published_rows_total is not None:
        lines.append(f"{'total (published rows)':<{width}}{audit.published_rows_total:>12}")
        lines.append(f"{'total (published, printed)':<{width}}{audit.published_printed_total:>12}")
    lines.extend(audit.notes)
    return "\n".join(lines) + "\n"


def save_checkpoint(params: ViTParams, path, extra: dict | None = None) -> Path:
    config = params.config.to_dict()
    if extra:
        config = {**config, "_extra": extra}
    return checkpoint.save_tensors(path, "vit", config, params.tensors)


def load_checkpoint(path, into: ViTParams | None = None) -> ViTParams:
    """Load a ViT checkpoint. With ``into``, the stored config must match it exactly."""
    kind, cfg, tensors = checkpoint.load_tensors(path)
    if kind != "vit":
        raise IntegrityError(f"checkpoint kind is {kind!r}, expected 'vit'", 0)
    cfg = {k: v for k, v in cfg.items() if k != "_extra"}
    config = ViTConfig.from_dict(cfg)
    if into is not None and into.config != config:
        diff = {k: (v, getattr(config, k)) for k, v in into.config.to_dict().items() if getattr(config, k) != v}
        raise ConfigMismatchError(f"checkpoint config differs from target: {diff}")
    expected = param_shapes(config)
    if set(expected) != set(tensors) or any(tensors[k].shape != s for k, s in expected.items()):
        raise ConfigMismatchError("checkpoint tensors do not match the shapes implied by its config")
    return ViTParams(config, {k: tensors[k] for k in expected})
