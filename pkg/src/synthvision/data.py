"""Dataset manifests, composition policies, image I/O and augmentation.

Manifest files are UTF-8 JSON::

    {
      "schema_version": 1,
      "policy": {"name": "...", "cells": [
          {"label": "M-pox", "split": "train", "count": 1000, "origin": "synthetic"},
          {"label": "Normal", "split": "test", "count": [90, 110], "origin": "real"}, ...]},
      "records": [
          {"path": "img/a.png", "label": "M-pox", "origin": "synthetic", "split": "train",
           "body_part": "arm", "skin_tone": "fair", "provenance": {...}}, ...]
    }

``count`` is an exact integer or an inclusive ``[min, max]`` range; ``origin``
may be omitted to leave a cell unconstrained. Relative record paths resolve
against the manifest's directory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import Rng
from .diffusion import BODY_PARTS, SKIN_TONES
from .errors import DataError, ImageFormatError, ManifestParseError, ParameterError, SchemaError

SCHEMA_VERSION = 1
LABELS = ("M-pox", "Normal", "Other")
ORIGINS = ("synthetic", "real")
SPLITS = ("train", "validation", "test")

_RECORD_KEYS = {"path", "label", "origin", "split", "body_part", "skin_tone", "provenance"}
_TOP_KEYS = {"schema_version", "policy", "records", "description"}


@dataclass
class SampleRecord:
    path: str
    label: str
    origin: str
    split: str
    body_part: str | None = None
    skin_tone: str | None = None
    provenance: dict | None = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label, "origin": self.origin, "split": self.split}
        if self.body_part is not None:
            d["body_part"] = self.body_part
        if self.skin_tone is not None:
            d["skin_tone"] = self.skin_tone
        if self.provenance is not None:
            d["provenance"] = self.provenance
        return d


@dataclass(frozen=True)
class CellRule:
    min_count: int
    max_count: int
    origin: str | None = None

    def to_dict(self, label, split) -> dict:
        count = self.min_count if self.min_count == self.max_count else [self.min_count, self.max_count]
        d = {"label": label, "split": split, "count": count}
        if self.origin is not None:
            d["origin"] = self.origin
        return d


@dataclass
class CompositionPolicy:
    """Expected record count and origin for every (label, split) cell.

    Records in cells the policy does not mention are violations.
    """

    cells: dict[tuple[str, str], CellRule]
    name: str = "custom"

    def to_dict(self) -> dict:
        return {"name": self.name, "cells": [r.to_dict(l, s) for (l, s), r in self.cells.items()]}

    @classmethod
    def from_dict(cls, d: dict) -> "CompositionPolicy":
        if not isinstance(d, dict) or not isinstance(d.get("cells"), list):
            raise SchemaError("policy must be an object with a 'cells' list")
        cells = {}
        for c in d["cells"]:
            if not isinstance(c, dict) or set(c) - {"label", "split", "count", "origin"}:
                raise SchemaError(f"bad policy cell {c!r}")
            _check_enum("label", c.get("label"), LABELS)
            _check_enum("split", c.get("split"), SPLITS)
            if c.get("origin") is not None:
                _check_enum("origin", c["origin"], ORIGINS)
            count = c.get("count")
            if isinstance(count, int) and not isinstance(count, bool):
                lo = hi = count
            elif isinstance(count, list) and len(count) == 2 and all(isinstance(v, int) for v in count):
                lo, hi = count
            else:
                raise SchemaError(f"policy count must be an int or [min, max], got {count!r}")
            if lo < 0 or lo > hi:
                raise SchemaError(f"bad policy count range {count!r}")
            cells[(c["label"], c["split"])] = CellRule(lo, hi, c.get("origin"))
        return cls(cells, d.get("name", "custom"))


def scaled_policy(train=1000, validation=150, test=100, mpox_train: int | tuple[int, int] | None = None,
                  name=None) -> CompositionPolicy:
    """Table-shaped policy: M-pox training synthetic, everything else real."""
    lo, hi = (mpox_train, mpox_train) if isinstance(mpox_train, int) else (mpox_train or (train, train))
    cells = {}
    for label in LABELS:
        if label == "M-pox":
            cells[(label, "train")] = CellRule(lo, hi, "synthetic")
        else:
            cells[(label, "train")] = CellRule(train, train, "real")
        cells[(label, "validation")] = CellRule(validation, validation, "real")
        cells[(label, "test")] = CellRule(test, test, "real")
    return CompositionPolicy(cells, name or f"scaled-{train}-{validation}-{test}")


def reference_policy() -> CompositionPolicy:
    return scaled_policy(1000, 150, 100, name="reference-1000")


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    policy: CompositionPolicy | None = None
    root: Path = field(default_factory=Path)
    warnings: list[str] = field(default_factory=list)

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        if self.policy is not None:
            d["policy"] = self.policy.to_dict()
        d["records"] = [r.to_dict() for r in self.records]
        return d


def _check_enum(what, value, allowed, where=""):
    if value not in allowed:
        raise SchemaError(f"{where}unknown {what} {value!r}; expected one of {list(allowed)}")


def parse_manifest(obj, root: Path = Path("."), strict=True) -> DatasetManifest:
    if not isinstance(obj, dict):
        raise SchemaError("manifest must be a JSON object")
    notes = []

    def unknown(keys, where):
        if not keys:
            return
        msg = f"{where}unknown fields {sorted(keys)}"
        if strict:
            raise SchemaError(msg)
        warnings.warn(msg, stacklevel=3)
        notes.append(msg)

    unknown(set(obj) - _TOP_KEYS, "")
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    raw = obj.get("records")
    if not isinstance(raw, list):
        raise SchemaError("'records' must be a list")
    records = []
    for i, r in enumerate(raw):
        where = f"record {i}: "
        if not isinstance(r, dict):
            raise SchemaError(f"{where}must be an object")
        unknown(set(r) - _RECORD_KEYS, where)
        if not isinstance(r.get("path"), str) or not r["path"]:
            raise SchemaError(f"{where}missing path")
        _check_enum("label", r.get("label"), LABELS, where)
        _check_enum("origin", r.get("origin"), ORIGINS, where)
        _check_enum("split", r.get("split"), SPLITS, where)
        if r.get("body_part") is not None:
            _check_enum("body_part", r["body_part"], BODY_PARTS, where)
        if r.get("skin_tone") is not None:
            _check_enum("skin_tone", r["skin_tone"], SKIN_TONES, where)
        records.append(SampleRecord(r["path"], r["label"], r["origin"], r["split"], r.get("body_part"),
                                    r.get("skin_tone"), r.get("provenance")))
    seen, dups = set(), []
    for r in records:
        if r.path in seen:
            dups.append(r.path)
        seen.add(r.path)
    if dups:
        msg = f"duplicate paths: {sorted(set(dups))}"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    policy = CompositionPolicy.from_dict(obj["policy"]) if obj.get("policy") is not None else None
    return DatasetManifest(records, policy, root, notes)


def load_manifest(path, strict=True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno) from exc
    return parse_manifest(obj, path.parent, strict)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class GuideSpec:
    """One guide set from a guide file: a (label, body part, skin tone) combination and its images."""

    name: str
    label: str
    body_part: str | None
    skin_tone: str | None
    paths: tuple


def load_guide_sets(path) -> list[GuideSpec]:
    """Parse a guide file: ``{"schema_version": 1, "sets": [{"name", "label", "body_part",
    "skin_tone", "images": [...]}]}``; image paths resolve against the file's directory."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"guide file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno) from exc
    if not isinstance(obj, dict) or obj.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: expected an object with schema_version {SCHEMA_VERSION}")
    sets = obj.get("sets")
    if not isinstance(sets, list) or not sets:
        raise SchemaError(f"{path}: 'sets' must be a non-empty list")
    out, names = [], set()
    for i, s in enumerate(sets):
        where = f"guide set {i}: "
        if not isinstance(s, dict):
            raise SchemaError(f"{where}must be an object")
        extra = set(s) - {"name", "label", "body_part", "skin_tone", "images"}
        if extra:
            raise SchemaError(f"{where}unknown fields {sorted(extra)}")
        _check_enum("label", s.get("label"), LABELS, where)
        if s.get("body_part") is not None:
            _check_enum("body_part", s["body_part"], BODY_PARTS, where)
        if s.get("skin_tone") is not None:
            _check_enum("skin_tone", s["skin_tone"], SKIN_TONES, where)
        images = s.get("images")
        if not isinstance(images, list) or not all(isinstance(p, str) for p in images):
            raise SchemaError(f"{where}'images' must be a list of paths")
        name = s.get("name") or f"{s['label']}-{s.get('body_part')}-{s.get('skin_tone')}"
        if name in names:
            raise SchemaError(f"{where}duplicate set name {name!r}")
        names.add(name)
        paths = tuple(str(Path(p) if Path(p).is_absolute() else path.parent / p) for p in images)
        out.append(GuideSpec(name, s["label"], s.get("body_part"), s.get("skin_tone"), paths))
    return out


@dataclass(frozen=True)
class BalanceViolation:
    label: str
    split: str
    expected: tuple[int, int]
    actual: int

    def __str__(self):
        lo, hi = self.expected
        want = str(lo) if lo == hi else f"{lo}-{hi}"
        return f"BalanceViolation: {self.label}/{self.split} has {self.actual} records, expected {want}"


@dataclass(frozen=True)
class OriginViolation:
    path: str
    label: str
    split: str
    expected: str
    actual: str

    def __str__(self):
        return (f"OriginViolation: {self.path} ({self.label}/{self.split}) is {self.actual}, "
                f"cell requires {self.expected}")


@dataclass(frozen=True)
class UnexpectedCellViolation:
    label: str
    split: str
    actual: int

    def __str__(self):
        return f"UnexpectedCellViolation: {self.actual} records in {self.label}/{self.split}, which the policy does not allow"


@dataclass
class ValidationReport:
    policy: str
    counts: dict
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def format(self) -> str:
        lines = [f"policy: {self.policy}"]
        for (label, split), n in sorted(self.counts.items()):
            lines.append(f"  {label:<8}{split:<12}{n:>6}")
        if self.passed:
            lines.append("PASS")
        else:
            lines.append(f"FAIL ({len(self.violations)} violations)")
            lines.extend(f"  {v}" for v in self.violations)
        return "\n".join(lines)


def validate_manifest(manifest: DatasetManifest, policy: CompositionPolicy | None = None) -> ValidationReport:
    """Check per-cell counts and origins against ``policy`` (default: the manifest's own)."""
    policy = policy or manifest.policy or reference_policy()
    counts: dict[tuple[str, str], int] = {}
    for r in manifest.records:
        counts[(r.label, r.split)] = counts.get((r.label, r.split), 0) + 1
    violations = []
    for cell, rule in policy.cells.items():
        n = counts.get(cell, 0)
        if not rule.min_count <= n <= rule.max_count:
            violations.append(BalanceViolation(cell[0], cell[1], (rule.min_count, rule.max_count), n))
    for cell, n in sorted(counts.items()):
        if cell not in policy.cells:
            violations.append(UnexpectedCellViolation(cell[0], cell[1], n))
    for r in manifest.records:
        rule = policy.cells.get((r.label, r.split))
        if rule is not None and rule.origin is not None and r.origin != rule.origin:
            violations.append(OriginViolation(r.path, r.label, r.split, rule.origin, r.origin))
    return ValidationReport(policy.name, counts, violations)


def read_png(path) -> np.ndarray:
    """Decode an 8-bit PNG to a (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise ImageFormatError(path, f"not a PNG ({img.format})")
            if img.mode not in ("1", "L", "LA", "P", "RGB", "RGBA"):
                raise ImageFormatError(path, f"unsupported mode {img.mode}")
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise DataError(f"image not found: {path}") from exc
        raise ImageFormatError(path, str(exc)) from exc


def write_png(path, image01) -> Path:
    """Write an image in [0, 1] as 8-bit PNG (grayscale if it has one channel)."""
    arr = np.asarray(image01, dtype=np.float64)
    px = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if px.ndim == 3 and px.shape[-1] == 1:
        px = px[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(px).save(path, format="PNG")
    return path


def resize_bilinear(image, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in / out - 0.5``,
    clamped to ``[0, in - 1]``.
    """
    width = height if width is None else width
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fy = fy.reshape(-1, 1, *([1] * (img.ndim - 2)))
    fx = fx.reshape(1, -1, *([1] * (img.ndim - 2)))
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def load_image(path, target_size: int) -> np.ndarray:
    """PNG -> (target_size, target_size, 3) float array in [0, 1]."""
    img = read_png(path).astype(np.float64) / 255.0
    if img.shape[:2] != (target_size, target_size):
        img = resize_bilinear(img, target_size)
    return img


@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: tuple[float, float] = (-20.0, 20.0)
    brightness: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.rotation_degrees
        if lo > hi:
            raise ParameterError(f"rotation range {self.rotation_degrees} is inverted")
        blo, bhi = self.brightness
        if not 0.0 <= blo <= bhi:
            raise ParameterError(f"brightness range {self.brightness} must satisfy 0 <= low <= high")


def _reflect(coord: np.ndarray, n: int) -> np.ndarray:
    # mirror about the edge pixel centres: -1 -> 1, n -> n - 2
    if n == 1:
        return np.zeros_like(coord)
    period = 2 * (n - 1)
    c = np.mod(coord, period)
    return np.where(c > n - 1, period - c, c)


def rotate(image, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the centre; bilinear with reflect padding.

    Multiples of 90 degrees are exact index permutations.
    """
    img = np.asarray(image, dtype=np.float64)
    if degrees % 90 == 0:
        return np.rot90(img, k=int(degrees // 90) % 4, axes=(0, 1)).copy()
    h, w = img.shape[:2]
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sy = _reflect(np.cos(theta) * yy + np.sin(theta) * xx + cy, h)
    sx = _reflect(-np.sin(theta) * yy + np.cos(theta) * xx + cx, w)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[..., None] if img.ndim == 3 else sy - y0
    fx = (sx - x0)[..., None] if img.ndim == 3 else sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def augment(image, spec: AugmentSpec, rng: Rng) -> np.ndarray:
    """Random rotation then brightness scaling, clamped to [0, 1]."""
    angle = float(rng.uniform(*spec.rotation_degrees))
    factor = float(rng.uniform(*spec.brightness))
    img = np.asarray(image)
    out = rotate(img, angle) if angle != 0.0 else img.astype(np.float64, copy=True)
    if factor != 1.0:
        out = out * factor
    return np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float64, copy=False)


def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return Rng(shuffle_seed).fork(epoch).permutation(n)


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, shuffle_seed: int | None = None,
                   epoch: int = 0, image_size: int = 32,
                   loader: Callable | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (images, label indices) batches; the last batch may be short."""
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    load = loader or (lambda rec: load_image(manifest.resolve(rec), image_size))
    order = epoch_order(len(records), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        yield np.stack([load(r) for r in chunk]), np.array([LABELS.index(r.label) for r in chunk])


def batch_slices(n: int, batch_size: int, order: Sequence[int]) -> list[np.ndarray]:
    order = np.asarray(order)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]
