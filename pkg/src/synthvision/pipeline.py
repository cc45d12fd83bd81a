"""Run configuration and the pipeline stages behind the CLI.

A run configuration is one JSON file (``schema_version`` 1) with sections
``seed``, ``paths``, ``diffusion``, ``selection``, ``dataset``, ``model``,
``train`` and ``evaluate``; every section but ``paths`` may be omitted.
Relative paths resolve against the configuration file's directory.

Stage outputs land in a run directory (see :func:`run_directory`)::

    run_config.json
    denoiser/{base,finetuned}.ckpt, denoiser/loss_log.jsonl
    synthetic/candidates/*.png, synthetic/candidates.json, synthetic/scores.csv
    dataset/manifest.json
    classifier/{best,final}.ckpt, classifier/train_log.jsonl, classifier/train_timing.json
    reports/{report.json,report.txt,predictions.csv,confusion.csv}
    figures/*.png
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import data as D
from . import diffusion as DF
from . import metrics, plotting, trainer, vit
from .checkpoint import canonical_json
from .core import Rng
from .errors import ConfigError, DataError, ManifestParseError

log = logging.getLogger("synthvision")

RUN_SCHEMA_VERSION = 1
ENV_OUTPUT_ROOT = "SYNTHVISION_OUTPUT_ROOT"
_SECTIONS = {"schema_version", "seed", "paths", "diffusion", "selection", "dataset", "model", "train", "evaluate",
             "description"}
_PATH_KEYS = {"output_root", "real_manifest", "guides", "dataset_manifest", "base_checkpoint"}


@dataclass(frozen=True)
class PriorSection:
    weight: float = 1.0
    ratio: float = 1.0
    label: str = "Normal"
    num_images: int = 64


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    clip_denoised: bool = False
    denoiser: DF.DenoiserConfig = field(default_factory=DF.DenoiserConfig)
    base_steps: int = 1000
    finetune_steps: int = 400
    lr: float = 1e-3
    finetune_lr: float | None = None
    batch_size: int = 32
    finetune_batch_size: int = 16
    ema_decay: float | None = None
    prior: PriorSection | None = field(default_factory=PriorSection)
    guide_size: int = 15
    samples_per_set: int = 200
    sample_batch_size: int = 50
    dtype: str = "float32"


@dataclass(frozen=True)
class SelectionSection:
    min_keep: int = 100
    max_keep: int = 150
    percentile: float = 40.0
    pool: int = 4


@dataclass(frozen=True)
class EvaluateSection:
    split: str = "test"
    batch_size: int = 64


@dataclass
class RunConfig:
    seed: int
    paths: dict
    diffusion: DiffusionSection
    selection: SelectionSection
    policy: D.CompositionPolicy | None
    model: vit.ViTConfig
    train: trainer.TrainConfig
    evaluate: EvaluateSection
    normalized: dict

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.normalized)).hexdigest()[:10]

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        return Path(value) if value else None


def _build(cls, raw, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"section {section!r}: unknown fields {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def _diffusion(raw) -> DiffusionSection:
    raw = dict(raw or {})
    if "denoiser" in raw:
        raw["denoiser"] = _build(DF.DenoiserConfig, raw["denoiser"], "diffusion.denoiser")
    if "prior" in raw and raw["prior"] is not None:
        raw["prior"] = _build(PriorSection, raw["prior"], "diffusion.prior")
    sec = _build(DiffusionSection, raw, "diffusion")
    if sec.prior is not None and sec.prior.label not in D.LABELS:
        raise ConfigError(f"diffusion.prior.label {sec.prior.label!r} is not one of {list(D.LABELS)}")
    if sec.dtype not in ("float32", "float64"):
        raise ConfigError(f"diffusion.dtype must be float32 or float64, got {sec.dtype!r}")
    DF.build_schedule(sec.T, sec.beta_start, sec.beta_end)
    return sec


def _model(raw, preset_override: str | None) -> vit.ViTConfig:
    if preset_override is not None:
        raw = {**(raw if isinstance(raw, dict) else {}), "preset": preset_override}
    if raw is None:
        raw = {"preset": "tiny"}
    if isinstance(raw, str):
        raw = {"preset": raw}
    if not isinstance(raw, dict) or "preset" not in raw:
        raise ConfigError("section 'model' must be a preset name or an object with a 'preset' key")
    overrides = {k: v for k, v in raw.items() if k != "preset"}
    try:
        return vit.get_preset(raw["preset"], **overrides)
    except TypeError as exc:
        raise ConfigError(f"section 'model': {exc}") from exc


def parse_run_config(obj: dict, base_dir: Path = Path("."), seed: int | None = None,
                     preset: str | None = None) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("run configuration must be a JSON object")
    unknown = set(obj) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown configuration sections {sorted(unknown)}")
    if obj.get("schema_version") != RUN_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {obj.get('schema_version')!r}; expected {RUN_SCHEMA_VERSION}")
    run_seed = int(obj.get("seed", 0) if seed is None else seed)

    paths_raw = obj.get("paths") or {}
    if not isinstance(paths_raw, dict) or set(paths_raw) - _PATH_KEYS:
        raise ConfigError(f"section 'paths' accepts only {sorted(_PATH_KEYS)}")
    paths = {k: str((base_dir / v) if not Path(v).is_absolute() else Path(v)) for k, v in paths_raw.items() if v}
    paths.setdefault("output_root", str(base_dir / "runs"))

    diffusion = _diffusion(obj.get("diffusion"))
    selection = _build(SelectionSection, obj.get("selection"), "selection")
    dataset = obj.get("dataset") or {}
    if set(dataset) - {"policy"}:
        raise ConfigError("section 'dataset' accepts only 'policy'")
    policy = D.CompositionPolicy.from_dict(dataset["policy"]) if dataset.get("policy") else None
    model = _model(obj.get("model"), preset)
    train_raw = dict(obj.get("train") or {})
    train_raw.setdefault("image_size", model.image_size)
    train_raw["seed"] = run_seed if seed is not None or "seed" not in train_raw else train_raw["seed"]
    train_cfg = trainer.TrainConfig.from_dict(train_raw)
    evaluate = _build(EvaluateSection, obj.get("evaluate"), "evaluate")
    if evaluate.split not in D.SPLITS:
        raise ConfigError(f"evaluate.split must be one of {list(D.SPLITS)}")

    normalized = {
        "schema_version": RUN_SCHEMA_VERSION,
        "seed": run_seed,
        "paths": {k: v for k, v in sorted(paths.items()) if k != "output_root"},
        "diffusion": _plain(diffusion),
        "selection": _plain(selection),
        "dataset": {"policy": policy.to_dict() if policy else None},
        "model": model.to_dict(),
        "train": train_cfg.to_dict(),
        "evaluate": _plain(evaluate),
    }
    return RunConfig(run_seed, paths, diffusion, selection, policy, model, train_cfg, evaluate, normalized)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_run_config(path, seed: int | None = None, preset: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file not found: {path}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno) from exc
    return parse_run_config(obj, path.parent, seed, preset)


def run_directory(cfg: RunConfig, out_dir=None, fresh: bool = False) -> Path:
    """``out_dir`` if given; otherwise ``<output root>/<config hash>-<timestamp>``.

    Without ``fresh`` the newest existing directory for the same config hash
    is reused, so the stages of one run share a directory.
    """
    if out_dir is not None:
        run = Path(out_dir)
    else:
        root = Path(os.environ.get(ENV_OUTPUT_ROOT) or cfg.paths["output_root"])
        existing = [] if fresh else sorted(p for p in root.glob(f"{cfg.hash}-*") if p.is_dir())
        run = existing[-1] if existing else root / f"{cfg.hash}-{datetime.now().strftime('%Y%m%dT%H%M%S')}"
    run.mkdir(parents=True, exist_ok=True)
    (run / "run_config.json").write_text(json.dumps(cfg.normalized, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return run


def _require(cfg: RunConfig, key: str) -> Path:
    p = cfg.path(key)
    if p is None:
        raise ConfigError(f"paths.{key} is required for this stage")
    if not p.exists():
        raise ConfigError(f"paths.{key} does not exist: {p}")
    return p


# ---------------------------------------------------------------- images


def _load_for_denoiser(path, dcfg: DF.DenoiserConfig) -> np.ndarray:
    img = D.load_image(path, dcfg.image_size)
    return img.mean(axis=-1, keepdims=True) if dcfg.channels == 1 else img


def load_guides(cfg: RunConfig) -> list[DF.GuideSet]:
    specs = D.load_guide_sets(_require(cfg, "guides"))
    sets = []
    for spec in specs:
        missing = [p for p in spec.paths if not Path(p).exists()]
        if missing:
            raise DataError(f"guide set {spec.name!r}: {len(missing)} missing image(s), e.g. {missing[0]}")
        images = [_load_for_denoiser(p, cfg.diffusion.denoiser) for p in spec.paths]
        guide = DF.GuideSet(D.LABELS.index(spec.label), images, spec.body_part, spec.skin_tone, spec.name)
        guide.check_size(cfg.diffusion.guide_size)
        sets.append(guide)
    return sets


def _schedule(cfg: RunConfig) -> DF.NoiseSchedule:
    d = cfg.diffusion
    return DF.build_schedule(d.T, d.beta_start, d.beta_end)


def _write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return path


# ---------------------------------------------------------------- stages


def synth_train(cfg: RunConfig, run: Path) -> dict:
    """Base denoiser on the real training split, then few-shot fine-tuning on every guide set."""
    d = cfg.diffusion
    dtype = np.dtype(d.dtype)
    schedule = _schedule(cfg)
    guides = load_guides(cfg)
    out = run / "denoiser"
    losses = []
    root = Rng(cfg.seed)

    base_ckpt = cfg.path("base_checkpoint")
    if base_ckpt is not None:
        if not base_ckpt.exists():
            raise ConfigError(f"paths.base_checkpoint does not exist: {base_ckpt}")
        base, _ = DF.load_denoiser(base_ckpt)
        if base.config != d.denoiser:
            raise ConfigError("base checkpoint was trained with a different denoiser config")
    else:
        real = D.load_manifest(_require(cfg, "real_manifest"))
        records = real.split("train")
        base = DF.init_denoiser(d.denoiser, root.fork(10), dtype)
        if d.base_steps > 0:
            if not records:
                raise DataError("the real manifest has no training records for the base denoiser")
            x0 = np.stack([_load_for_denoiser(real.resolve(r), d.denoiser) for r in records])
            cond = DF.Condition(np.array([D.LABELS.index(r.label) for r in records]),
                                np.array([DF.attribute_index(DF.BODY_PARTS, r.body_part) for r in records]),
                                np.array([DF.attribute_index(DF.SKIN_TONES, r.skin_tone) for r in records]))
            batch = DF.Batch(DF.to_model_range(x0).astype(dtype), cond)
            base = DF.train_denoiser(base, batch, schedule, d.base_steps, root.fork(11), lr=d.lr,
                                     batch_size=d.batch_size, ema_decay=d.ema_decay,
                                     on_step=lambda s, v: losses.append({"stage": "base", "step": s, "loss": v}))
    DF.save_denoiser(base, out / "base.ckpt")

    prior = None
    if d.prior is not None and d.prior.ratio > 0:
        g0 = guides[0]
        prior = DF.PriorConfig(d.prior.weight, d.prior.ratio, D.LABELS.index(d.prior.label), d.prior.num_images,
                               g0.body_part, g0.skin_tone)
    tuned = DF.few_shot_finetune(base, guides, d.finetune_steps, prior, root.fork(12), schedule,
                                 lr=d.lr if d.finetune_lr is None else d.finetune_lr,
                                 batch_size=d.finetune_batch_size, clip_denoised=d.clip_denoised,
                                 ema_decay=d.ema_decay,
                                 on_step=lambda s, v: losses.append({"stage": "finetune", "step": s, "loss": v}))
    DF.save_denoiser(tuned, out / "finetuned.ckpt", extra={"guide_sets": [g.name for g in guides]})
    _write_jsonl(out / "loss_log.jsonl", losses)
    if losses:
        plotting.loss_curve([r["loss"] for r in losses], run / "figures" / "denoiser_loss.png")
    return {"base": out / "base.ckpt", "finetuned": out / "finetuned.ckpt", "loss_log": out / "loss_log.jsonl",
            "steps": len(losses)}


def candidate_name(label, body_part, skin_tone, seed, index) -> str:
    return f"{label}_{body_part or 'any'}_{skin_tone or 'any'}_{seed}_{index}.png"


def synth_generate(cfg: RunConfig, run: Path) -> dict:
    ckpt = run / "denoiser" / "finetuned.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no fine-tuned denoiser at {ckpt}; run synth-train first")
    params, _ = DF.load_denoiser(ckpt)
    guides = load_guides(cfg)
    d = cfg.diffusion
    schedule = _schedule(cfg)
    out = run / "synthetic"
    records = []
    n = d.samples_per_set
    if n == 0:
        log.warning("samples_per_set is 0: no candidates generated")
    for k, g in enumerate(guides):
        label = D.LABELS[g.class_id]
        samples = DF.ddpm_sample(params, schedule, n, g.class_id, Rng(cfg.seed).fork(20, k), g.body_part,
                                 g.skin_tone, batch_size=d.sample_batch_size, clip_denoised=d.clip_denoised)
        images = DF.from_model_range(samples)
        for i, img in enumerate(images):
            rel = f"candidates/{candidate_name(label, g.body_part, g.skin_tone, cfg.seed, i)}"
            D.write_png(out / rel, img)
            records.append(D.SampleRecord(rel, label, "synthetic", "train", g.body_part, g.skin_tone,
                                          {"set": g.name, "seed": cfg.seed, "index": i}))
        if n:
            plotting.image_grid(images[:40], run / "figures" / f"candidates_{g.name}.png")
    D.save_manifest(D.DatasetManifest(records, None, out), out / "candidates.json")
    return {"manifest": out / "candidates.json", "count": len(records)}


def synth_select(cfg: RunConfig, run: Path) -> dict:
    cand_path = run / "synthetic" / "candidates.json"
    if not cand_path.exists():
        raise ConfigError(f"no candidate manifest at {cand_path}; run synth-generate first")
    candidates = D.load_manifest(cand_path)
    real = D.load_manifest(_require(cfg, "real_manifest"))
    guides = load_guides(cfg)
    s = cfg.selection
    dest = run / "dataset"
    dest.mkdir(parents=True, exist_ok=True)
    kept, rows = [], []
    for g in guides:
        pool = [r for r in candidates.records if (r.provenance or {}).get("set") == g.name]
        images = [_load_for_denoiser(candidates.resolve(r), cfg.diffusion.denoiser) for r in pool]
        sel = DF.select_images(images, s.min_keep, s.max_keep, g, s.percentile, s.pool)
        chosen = set(int(i) for i in sel.indices)
        for i, r in enumerate(pool):
            score = float(sel.scores[i])
            rows.append([r.path, g.name, repr(score), int(i in chosen)])
        for i in sel.indices:
            r = pool[int(i)]
            prov = {**(r.provenance or {}), "score": float(sel.scores[int(i)])}
            kept.append(dataclasses.replace(r, path=_rel(candidates.resolve(r), dest), provenance=prov))
        log.info("set %s: kept %d of %d candidates", g.name, len(sel.indices), len(pool))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "set", "score", "kept"])
    w.writerows(rows)
    (run / "synthetic" / "scores.csv").write_text(buf.getvalue(), encoding="utf-8")
    real_records = [dataclasses.replace(r, path=_rel(real.resolve(r), dest)) for r in real.records]
    policy = cfg.policy or real.policy
    manifest = D.DatasetManifest(real_records + kept, policy, dest)
    D.save_manifest(manifest, dest / "manifest.json")
    report = D.validate_manifest(manifest) if policy is not None else None
    return {"manifest": dest / "manifest.json", "kept": len(kept), "validation": report}


def _rel(path: Path, start: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(start).resolve())).as_posix()


def _dataset_manifest(cfg: RunConfig, run: Path) -> D.DatasetManifest:
    path = cfg.path("dataset_manifest") or run / "dataset" / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}; run synth-select or set paths.dataset_manifest")
    return D.load_manifest(path)


def train_classifier(cfg: RunConfig, run: Path) -> dict:
    manifest = _dataset_manifest(cfg, run)
    out = run / "classifier"
    result = trainer.train(cfg.model, None, cfg.train, manifest, out_dir=out)
    vit.save_checkpoint(result.params, out / "final.ckpt")
    if result.log.epochs:
        plotting.training_curves(result.log, run / "figures" / "training_curves.png")
    return {"best": result.best_checkpoint, "final": out / "final.ckpt", "log": result.log}


def evaluate_classifier(cfg: RunConfig, run: Path, checkpoint=None) -> metrics.Evaluation:
    ckpt = Path(checkpoint) if checkpoint else run / "classifier" / "best.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params = vit.load_checkpoint(ckpt)
    manifest = _dataset_manifest(cfg, run)
    ev = metrics.evaluate(params, manifest, cfg.evaluate.split, cfg.evaluate.batch_size)
    out = run / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(ev.report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(ev.report.format_text(), encoding="utf-8")
    (out / "predictions.csv").write_text(ev.predictions_csv(), encoding="utf-8")
    (out / "confusion.csv").write_text(ev.confusion.to_csv(), encoding="utf-8")
    plotting.confusion_heatmap(ev.confusion, run / "figures" / "confusion.png")
    return ev


STAGES = ("synth-train", "synth-generate", "synth-select", "train", "evaluate")
