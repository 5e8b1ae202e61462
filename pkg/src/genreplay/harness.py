"""Experiment configs, multi-seed runs with stage caching, manifests and reports.

A config is flat ``dotted.key = value`` text. Every key has a default, so an
empty config is a complete experiment at the full-scale hyperparameters; the
desk presets in ``genreplay/presets`` shrink it to CPU size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch

from . import __version__
from .errors import ConfigurationError, ConfigValidationError
from .evaluation import METRICS_SCHEMA_VERSION, MetricsTable, average_improvement, read_metrics_csv
from .inheritance import DistillConfig
from .models import (
    ArchSpec,
    Generator,
    GeneratorSpec,
    IncrementalClassifier,
    generate,
    load_checkpoint,
    parameter_digest,
    save_classifier,
    save_generator,
)
from .recording import RecordingLossWeights
from .tasks import (
    PROTOCOLS,
    explicit_sequence,
    load_binary_dataset,
    load_folder_dataset,
    make_fine_grained_dataset,
    make_synthetic_dataset,
    materialize_tasks,
    split_classes,
)
from .trainers import (
    CLASSIFIER_COLUMNS,
    INHERITANCE_COLUMNS,
    METHODS,
    RECORDING_COLUMNS,
    ClassifierTrainConfig,
    InheritanceConfig,
    MethodSpec,
    RecordingConfig,
    StageConfigs,
    StageOutput,
    derive_seed,
    run_sequence,
    write_trace_csv,
)

log = logging.getLogger(__name__)

CONFIG_HEADER = "genreplay-config"
CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "GENREPLAY_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"


# -- value parsers ------------------------------------------------------------------

def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optbool(text):
    return None if str(text).strip().lower() in ("", "auto", "none") else _bool(text)


def _optfloat(text):
    return None if str(text).strip().lower() in ("", "auto", "none") else float(text)


def _intlist(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


def _groups(text):
    """``"0,1;2,3"`` -> ((0, 1), (2, 3))."""
    if isinstance(text, (list, tuple)):
        return tuple(tuple(int(c) for c in g) for g in text)
    return tuple(_intlist(g) for g in str(text).split(";") if g.strip())


def _ratio(text):
    if isinstance(text, (list, tuple)):
        g, n = text
    else:
        g, n = str(text).replace(" ", "").split(":")
    g, n = int(g), int(n)
    if g < 1 or n < 1:
        raise ValueError("ratio terms must be >= 1")
    return (g, n)


def _fmt_value(v, key=""):
    if key == "inheritance.ratio":
        return f"{v[0]}:{v[1]}"
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ";".join(",".join(str(c) for c in g) for g in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _choice(*options):
    def parse(text):
        t = str(text).strip()
        if t not in options:
            raise ValueError(f"{t!r} is not one of {', '.join(options)}")
        return t
    return parse


# key -> (parser, default). Defaults are the full-scale training recipe.
SCHEMA = {
    "dataset.kind": (_choice("synthetic", "fine-grained", "folder", "binary"), "synthetic"),
    "dataset.path": (str, ""),
    "dataset.num_classes": (int, 10),
    "dataset.train_per_class": (int, 100),
    "dataset.eval_per_class": (int, 50),
    "dataset.image_size": (int, 16),
    "dataset.channels": (int, 3),
    "dataset.seed": (int, 0),
    "dataset.confusable_groups": (_groups, ()),
    "dataset.confusable_spread": (float, 0.35),
    "dataset.noise": (float, 0.45),
    "protocol.name": (_choice(*PROTOCOLS), "equal-phase"),
    "protocol.phases": (int, 5),
    "protocol.classes": (_groups, ()),
    "method.name": (_choice(*METHODS, "custom"), "ours"),
    "method.replay": (_optbool, None),
    "method.bn": (_optbool, None),
    "method.div": (_optbool, None),
    "method.nkd": (_optbool, None),
    "tier": (_choice("desk", "paper"), "desk"),
    "seeds": (_intlist, (0, 1, 2)),
    "arch.trunk": (_choice("auto", "desk", "resnet18", "resnet34"), "auto"),
    "arch.widths": (_intlist, (16, 32, 32, 64)),
    "initial.epochs": (int, 150),
    "initial.lr": (float, 0.01),
    "initial.batch_size": (int, 128),
    "initial.momentum": (float, 0.9),
    "initial.weight_decay": (float, 5e-4),
    "initial.augment_pad": (int, 0),
    "initial.augment_flip": (_bool, False),
    "recording.epochs": (int, 500),
    "recording.steps_per_epoch": (int, 100),
    "recording.batch_size": (int, 512),
    "recording.lr": (float, 0.01),
    "recording.optimizer": (_choice("rmsprop", "adam", "sgd"), "rmsprop"),
    "recording.lambda1": (float, 5.0),
    "recording.lambda2": (float, 20.0),
    "recording.lambda3": (float, 0.1),
    "recording.pair_count": (int, 200),
    "recording.div_space": (_choice("output", "pixel"), "output"),
    "generator.noise_dim": (int, 100),
    "generator.base_width": (int, 64),
    "generator.style": (_choice("auto", "desk", "dcgan"), "auto"),
    "inheritance.epochs": (int, 150),
    "inheritance.lr": (float, 0.01),
    "inheritance.batch_size": (int, 128),
    "inheritance.ratio": (_ratio, (1, 1)),
    "inheritance.temperature": (float, 2.0),
    "inheritance.lambda4_mode": (_choice("task-index-schedule", "fixed"), "task-index-schedule"),
    "inheritance.lambda4": (_optfloat, None),
    "inheritance.rejection_budget": (int, 50),
    "inheritance.momentum": (float, 0.9),
    "inheritance.weight_decay": (float, 5e-4),
    "inheritance.augment_pad": (int, 0),
    "inheritance.augment_flip": (_bool, False),
    "run.deterministic": (_bool, True),
    "run.output_dir": (str, "runs"),
    "run.name": (str, ""),
    "run.grid_images": (int, 64),
}

# Keys that do not change any produced number.
_NON_SEMANTIC = {"run.output_dir", "run.name"}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self) -> str:
        lines = [f"# {CONFIG_HEADER} v{CONFIG_VERSION}"]
        lines += [f"{k} = {_fmt_value(self.values[k], k)}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {k: _fmt_value(v, k) for k, v in sorted(self.values.items())}

    def config_hash(self) -> str:
        """sha256 of the semantic entries in sorted key order."""
        body = "\n".join(f"{k}={_fmt_value(v, k)}" for k, v in sorted(self.values.items()) if k not in _NON_SEMANTIC)
        return hashlib.sha256(body.encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        text = self.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        return validate_config(text)

    # -- typed views ------------------------------------------------------------

    @property
    def method(self) -> MethodSpec:
        v = self.values
        base = METHODS.get(v["method.name"], MethodSpec("custom"))
        flags = {f: v[f"method.{f}"] for f in ("replay", "bn", "div", "nkd") if v[f"method.{f}"] is not None}
        if not flags:
            return base
        name = base.name if base.name != "custom" else "custom"
        spec = replace(base, **flags)
        if spec != base and name != "custom":
            name = base.name + "+" + "".join(sorted(k for k in flags))
        return replace(spec, name=name)

    @property
    def method_label(self) -> str:
        return self.method.name

    @property
    def image_shape(self) -> tuple:
        s = self.values["dataset.image_size"]
        return (self.values["dataset.channels"], s, s)

    def arch(self, image_shape=None) -> ArchSpec:
        v = self.values
        trunk = v["arch.trunk"]
        if trunk == "auto":
            trunk = "desk" if v["tier"] == "desk" else "resnet34"
        return ArchSpec(trunk, tuple(image_shape or self.image_shape), tuple(v["arch.widths"]))

    def generator_spec(self, image_shape=None) -> GeneratorSpec:
        v = self.values
        style = v["generator.style"]
        if style == "auto":
            style = "desk" if v["tier"] == "desk" else "dcgan"
        return GeneratorSpec(v["generator.noise_dim"], tuple(image_shape or self.image_shape),
                             v["generator.base_width"], style)

    def stage_configs(self, image_shape=None) -> StageConfigs:
        v = self.values
        initial = ClassifierTrainConfig(
            epochs=v["initial.epochs"], learning_rate=v["initial.lr"], batch_size=v["initial.batch_size"],
            momentum=v["initial.momentum"], weight_decay=v["initial.weight_decay"],
            augment_pad=v["initial.augment_pad"], augment_flip=v["initial.augment_flip"],
        )
        weights = RecordingLossWeights(v["recording.lambda1"], v["recording.lambda2"], v["recording.lambda3"],
                                       v["recording.pair_count"], v["recording.div_space"])
        recording = RecordingConfig(
            epochs=v["recording.epochs"], steps_per_epoch=v["recording.steps_per_epoch"],
            batch_size=v["recording.batch_size"], learning_rate=v["recording.lr"],
            optimizer_id=v["recording.optimizer"], weights=weights,
            generator=self.generator_spec(image_shape),
        )
        distill = DistillConfig(v["inheritance.temperature"], v["inheritance.lambda4_mode"], v["inheritance.lambda4"])
        inheritance = InheritanceConfig(
            epochs=v["inheritance.epochs"], learning_rate=v["inheritance.lr"],
            new_batch_size=v["inheritance.batch_size"], replay_ratio=v["inheritance.ratio"], distill=distill,
            momentum=v["inheritance.momentum"], weight_decay=v["inheritance.weight_decay"],
            rejection_budget=v["inheritance.rejection_budget"],
            augment_pad=v["inheritance.augment_pad"], augment_flip=v["inheritance.augment_flip"],
        )
        return StageConfigs(initial, recording, inheritance)


def parse_config_text(text: str):
    """Raw ``key -> string`` pairs plus line-level errors. Later duplicates win."""
    raw, errors = {}, []
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s.lstrip("#").strip()
            if body.startswith(CONFIG_HEADER):
                version = body[len(CONFIG_HEADER):].strip().lstrip("v")
                if version != str(CONFIG_VERSION):
                    errors.append(f"line {n}: unsupported config version {version!r} (expected {CONFIG_VERSION})")
            continue
        if "=" not in s:
            errors.append(f"line {n}: expected 'key = value', got {s!r}")
            continue
        k, val = s.split("=", 1)
        raw[k.strip()] = val.strip()
    return raw, errors


def validate_config(text: str = "", overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse, fill defaults, and check a config; raises :class:`ConfigValidationError` listing every problem."""
    raw, errors = parse_config_text(text)
    raw.update({k: str(v) if not isinstance(v, str) else v for k, v in (overrides or {}).items()})
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for k, s in raw.items():
        if k not in SCHEMA:
            errors.append(f"unknown key {k!r}")
            continue
        parser = SCHEMA[k][0]
        try:
            values[k] = parser(s)
        except (ValueError, TypeError) as e:
            errors.append(f"{k}: {e}")
    # unparsable keys keep their defaults, so the cross-key checks still run
    errors += _semantic_errors(values)
    if errors:
        raise ConfigValidationError(errors)
    return ExperimentConfig(values)


def _semantic_errors(v) -> list:
    errors = []
    cfg = ExperimentConfig(v)
    errors += [f"method: {e}" for e in cfg.method.validate()]
    if v["method.name"] == "custom" and v["method.replay"] is None and v["method.nkd"] is None:
        errors.append("method: 'custom' needs at least one of method.replay / method.nkd set")
    if not v["seeds"]:
        errors.append("seeds: at least one seed is required")
    if len(set(v["seeds"])) != len(v["seeds"]):
        errors.append("seeds: duplicates")
    if v["dataset.kind"] in ("folder", "binary") and not v["dataset.path"]:
        errors.append(f"dataset.path is required for dataset.kind = {v['dataset.kind']}")
    if v["protocol.name"] == "explicit" and not v["protocol.classes"]:
        errors.append("protocol.classes is required for the explicit protocol")
    if v["protocol.name"] != "explicit" and v["protocol.phases"] < 1:
        errors.append("protocol.phases must be >= 1")
    if v["inheritance.lambda4_mode"] == "fixed" and v["inheritance.lambda4"] is None:
        errors.append("inheritance.lambda4 must be set when inheritance.lambda4_mode = fixed")
    if v["inheritance.lambda4_mode"] != "fixed" and v["inheritance.lambda4"] is not None:
        errors.append("inheritance.lambda4 is only used with inheritance.lambda4_mode = fixed")
    for key in ("initial.epochs", "recording.epochs", "recording.steps_per_epoch", "inheritance.epochs",
                "initial.batch_size", "inheritance.batch_size", "recording.pair_count",
                "inheritance.rejection_budget", "generator.noise_dim", "generator.base_width"):
        if v[key] < 1:
            errors.append(f"{key} must be >= 1")
    if v["recording.batch_size"] < 2:
        errors.append("recording.batch_size must be >= 2")
    for key in ("recording.lambda1", "recording.lambda2", "recording.lambda3"):
        if v[key] < 0:
            errors.append(f"{key} must be >= 0")
    if v["inheritance.temperature"] <= 0:
        errors.append("inheritance.temperature must be > 0")
    if v["dataset.kind"] == "fine-grained" and v["dataset.num_classes"] < 5:
        errors.append("dataset.num_classes must be >= 5 for the fine-grained set (4 old classes + new ones)")
    return errors


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return validate_config(text, overrides)


def preset_path(name: str) -> Path:
    p = Path(__file__).parent / "presets" / f"{name}.conf"
    if not p.exists():
        available = sorted(q.stem for q in p.parent.glob("*.conf"))
        raise ConfigurationError(f"unknown preset {name!r}; available: {available}")
    return p


# -- data -------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig):
    v = cfg.values
    kind = v["dataset.kind"]
    if kind == "synthetic":
        return make_synthetic_dataset(
            v["dataset.num_classes"], v["dataset.train_per_class"], v["dataset.eval_per_class"], cfg.image_shape,
            seed=v["dataset.seed"], confusable_groups=v["dataset.confusable_groups"],
            confusable_spread=v["dataset.confusable_spread"], noise=v["dataset.noise"],
        )
    if kind == "fine-grained":
        return make_fine_grained_dataset(
            v["dataset.num_classes"] - 4, v["dataset.train_per_class"], v["dataset.eval_per_class"],
            cfg.image_shape, seed=v["dataset.seed"], confusable_spread=v["dataset.confusable_spread"],
            noise=v["dataset.noise"],
        )
    if kind == "folder":
        return load_folder_dataset(v["dataset.path"])
    return load_binary_dataset(v["dataset.path"])


def build_sequence(cfg: ExperimentConfig, dataset, seed: int):
    v = cfg.values
    if v["protocol.name"] == "explicit":
        skeleton = explicit_sequence([list(g) for g in v["protocol.classes"]], seed)
    else:
        skeleton = split_classes(dataset.num_classes, v["protocol.name"], seed, phases=v["protocol.phases"])
    return materialize_tasks(dataset, skeleton)


# -- persistence helpers ------------------------------------------------------------

def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    if torch.is_tensor(o):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def output_root(cfg: Optional[ExperimentConfig] = None) -> Path:
    """``run.output_dir``; relative paths resolve against ``$GENREPLAY_OUTPUT_ROOT`` when set."""
    out = Path(cfg["run.output_dir"]) if cfg is not None else Path("runs")
    if not out.is_absolute() and os.environ.get(OUTPUT_ROOT_ENV):
        out = Path(os.environ[OUTPUT_ROOT_ENV]) / out
    return out


def save_image_grid(images: torch.Tensor, path: Path, nrow: int = 8) -> Path:
    from PIL import Image
    from torchvision.utils import make_grid

    grid = make_grid(((images.detach().float().cpu() + 1) / 2).clamp(0, 1), nrow=nrow, padding=1)
    arr = (grid * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)
    return path


class StageCache:
    """Content-addressed store for stage outputs (model checkpoint, loss trace, summary)."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def _dir(self, key):
        return self.root / key[:2] / key

    def get(self, key) -> Optional[StageOutput]:
        d = self._dir(key)
        if not (d / "complete").exists():
            return None
        model = load_checkpoint(d / "model.pt")
        trace = json.loads((d / "trace.json").read_text())
        summary = json.loads((d / "summary.json").read_text())
        return StageOutput(model, trace, summary)

    def put(self, key, out: StageOutput, config_hash: str = ""):
        d = self._dir(key)
        d.mkdir(parents=True, exist_ok=True)
        if isinstance(out.model, Generator):
            save_generator(out.model, d / "model.pt", config_hash)
        else:
            save_classifier(out.model, d / "model.pt", config_hash)
        _atomic_write_text(d / "trace.json", json.dumps(out.trace))
        _atomic_write_text(d / "summary.json", _json(out.summary))
        (d / "complete").touch()

    def path(self, key) -> Path:
        return self._dir(key) / "model.pt"


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=_json_default).encode()).hexdigest()


def _semantic_subset(cfg: ExperimentConfig, prefixes) -> dict:
    return {k: _fmt_value(v, k) for k, v in sorted(cfg.values.items()) if k.startswith(prefixes)}


# -- run ----------------------------------------------------------------------------

class _Manifest:
    def __init__(self, path: Path, base: dict):
        self.path = path
        self.data = dict(base)
        self.flush()

    def update(self, **kw):
        self.data.update(kw)
        self.flush()

    def flush(self):
        _atomic_write_text(self.path, _json(self.data))


def run(cfg: ExperimentConfig, run_dir: Optional[Path] = None, cache_dir: Optional[Path] = None) -> dict:
    """Run every seed of ``cfg`` and persist metrics, logs, checkpoints and a manifest.

    Returns the final manifest dict. On failure the manifest is left with
    ``status = "failed"`` and the last completed stage, and the error re-raised.
    """
    root = output_root(cfg)
    chash = cfg.config_hash()
    method = cfg.method
    run_dir = Path(run_dir) if run_dir else root / (cfg["run.name"] or f"{method.name}-{chash[:12]}")
    cache = StageCache(Path(cache_dir) if cache_dir else root / "cache")
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(run_dir / "config.txt", cfg.to_text())
    manifest = _Manifest(run_dir / MANIFEST_NAME, {
        "status": "running",
        "run_dir": str(run_dir),
        "code_version": __version__,
        "config_hash": chash,
        "config": cfg.to_dict(),
        "method": method.name,
        "method_flags": {"replay": method.replay, "bn": method.bn, "div": method.div, "nkd": method.nkd,
                         "joint": method.joint},
        "seeds": list(cfg["seeds"]),
        "deterministic": cfg["run.deterministic"],
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "last_completed_stage": None,
        "stages": [],
        "cache": {"hits": 0, "misses": 0},
        "initial_checkpoints": {},
        "artifacts": {},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(bool(cfg["run.deterministic"]))
    try:
        dataset = build_dataset(cfg)
        all_metrics = MetricsTable()
        artifacts = {}
        for seed in cfg["seeds"]:
            seed_dir = run_dir / f"seed-{seed}"
            table, seed_artifacts = _run_seed(cfg, dataset, seed, seed_dir, cache, manifest)
            all_metrics.extend(table)
            artifacts[str(seed)] = seed_artifacts
        mean_csv = all_metrics.to_csv(run_dir / "metrics_mean.csv", rows=all_metrics.mean_rows())
        all_csv = all_metrics.to_csv(run_dir / "metrics_all.csv")
        _atomic_write_text(run_dir / "metrics.json", _json(all_metrics.to_json()))
        artifacts["metrics_mean"] = str(mean_csv.relative_to(run_dir))
        artifacts["metrics_all"] = str(all_csv.relative_to(run_dir))
        artifacts["metrics_json"] = "metrics.json"
        artifacts["config"] = "config.txt"
        for rel in _iter_artifact_paths(artifacts):
            if not (run_dir / rel).exists():
                raise ConfigurationError(f"artifact {rel} missing at completion")
        manifest.update(status="complete", artifacts=artifacts,
                        metrics_digest=_sha256_file(mean_csv),
                        finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
    except BaseException as e:
        manifest.update(status="failed", error={"type": type(e).__name__, "message": str(e),
                                                 "traceback": traceback.format_exc(limit=5)})
        raise
    finally:
        torch.use_deterministic_algorithms(prev_det)
    return manifest.data


def _iter_artifact_paths(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _iter_artifact_paths(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _iter_artifact_paths(v)
    elif isinstance(obj, str):
        yield obj


def _run_seed(cfg: ExperimentConfig, dataset, seed: int, seed_dir: Path, cache: StageCache, manifest: _Manifest):
    run_dir = seed_dir.parent
    seq = build_sequence(cfg, dataset, seed)
    seq_path = seq.write_manifest(seed_dir / "sequence.json")
    arch = cfg.arch(dataset.image_shape)
    cfgs = cfg.stage_configs(dataset.image_shape)
    chash = cfg.config_hash()
    method = cfg.method

    # shared by every method: depends only on the data, split, architecture and first-task recipe
    initial_key = _key("initial", seq.manifest(), arch.to_dict(), _semantic_subset(cfg, ("initial.",)),
                       cfg["run.deterministic"])
    trajectory_key = _key("trajectory", initial_key, method.name, manifest.data["method_flags"],
                          _semantic_subset(cfg, ("recording.", "generator.", "inheritance.", "tier")))
    logs = {}
    columns = {"initial": CLASSIFIER_COLUMNS, "recording": RECORDING_COLUMNS, "oracle": CLASSIFIER_COLUMNS}

    def hook(stage, task, fn):
        key = initial_key if stage == "initial" else _key(trajectory_key, stage, task)
        t0 = time.perf_counter()
        out = cache.get(key)
        hit = out is not None
        if not hit:
            out = fn()
            cache.put(key, out, chash)
        seconds = time.perf_counter() - t0
        name = f"{stage}-task{task}"
        log_path = write_trace_csv(out.trace, seed_dir / "logs" / f"{name}.csv",
                                   columns.get(stage, INHERITANCE_COLUMNS))
        summary_path = seed_dir / "summaries" / f"{name}.json"
        _atomic_write_text(summary_path, _json({**out.summary, "cache_hit": hit, "cache_key": key}))
        logs[name] = {"log": str(log_path.relative_to(run_dir)), "summary": str(summary_path.relative_to(run_dir))}
        counts = manifest.data["cache"]
        counts["hits" if hit else "misses"] += 1
        stages = manifest.data["stages"] + [{"seed": seed, "stage": stage, "task": task, "cache_hit": hit,
                                             "seconds": round(seconds, 3), "key": key}]
        if stage == "initial":
            manifest.data["initial_checkpoints"][str(seed)] = {"key": key, "digest": parameter_digest(out.model)}
        manifest.update(stages=stages, cache=counts, last_completed_stage=f"seed {seed} {name}")
        return out

    result = run_sequence(None, seq, cfgs, method, seed, arch=arch, stage_hook=hook)

    checkpoints, generators, grids = [], [], []
    for t, model in enumerate(result.checkpoints):
        p = save_classifier(model, seed_dir / "checkpoints" / f"task{t}.pt", chash)
        checkpoints.append(str(p.relative_to(run_dir)))
    noise_rng = torch.Generator().manual_seed(derive_seed(seed, "grid"))
    for t, gen in enumerate(result.generators):
        if gen is None:
            continue
        p = save_generator(gen, seed_dir / "generators" / f"task{t}.pt", chash)
        generators.append(str(p.relative_to(run_dir)))
        n = cfg["run.grid_images"]
        with torch.no_grad():
            z = torch.randn(n, gen.noise_dim, generator=noise_rng).to(next(gen.parameters()))
            g = save_image_grid(generate(gen, z), seed_dir / "grids" / f"generated-task{t}.png")
        grids.append(str(g.relative_to(run_dir)))
    metrics_csv = result.metrics.to_csv(seed_dir / "metrics.csv")
    _atomic_write_text(seed_dir / "metrics.json", _json(result.metrics.to_json()))
    artifacts = {
        "sequence": str(seq_path.relative_to(run_dir)),
        "metrics": str(metrics_csv.relative_to(run_dir)),
        "metrics_json": str((seed_dir / "metrics.json").relative_to(run_dir)),
        "checkpoints": checkpoints,
        "generators": generators,
        "grids": grids,
        "logs": logs,
    }
    return result.metrics, artifacts


# -- report -------------------------------------------------------------------------

def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigurationError(f"{run_dir} has no {MANIFEST_NAME}")
    return json.loads(path.read_text())


def emit_report(run_dirs, out_dir, reference: str = "ours") -> dict:
    """Cross-method accuracy table, accuracy-vs-task plot and collected image grids.

    All runs must share the dataset and protocol settings. The improvement
    column is the mean over tasks 2..N of (``reference`` - method) on all-seen
    top-1, averaged over seeds.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigurationError("no runs given")
    manifests = [read_manifest(d) for d in run_dirs]
    for d, m in zip(run_dirs, manifests):
        if m.get("status") != "complete":
            raise ConfigurationError(f"{d} is not a completed run (status {m.get('status')!r})")
        if m.get("metrics_schema_version") != METRICS_SCHEMA_VERSION:
            raise ConfigurationError(f"{d}: unknown metrics schema version {m.get('metrics_schema_version')}")
    shared = ("dataset.", "protocol.")
    base = {k: v for k, v in manifests[0]["config"].items() if k.startswith(shared)}
    for d, m in zip(run_dirs[1:], manifests[1:]):
        other = {k: v for k, v in m["config"].items() if k.startswith(shared)}
        if other != base:
            diff = {k: [base.get(k), other.get(k)] for k in sorted(set(base) | set(other)) if base.get(k) != other.get(k)}
            raise ConfigurationError(f"runs differ in dataset/protocol settings: {json.dumps(diff)}")

    rows = []
    for d, m in zip(run_dirs, manifests):
        records = read_metrics_csv(d / m["artifacts"]["metrics_mean"])
        rows.append({"method": m["method"], "run": d.name, "acc": {r.task: r.top1_all for r in records}})
    names = [r["method"] for r in rows]
    for r in rows:
        if names.count(r["method"]) > 1:
            r["method"] = f"{r['method']} ({r['run']})"
    ref = next((r for r in rows if r["method"] == reference), None)
    for r in rows:
        r["avg_improvement"] = None if ref is None or r is ref else average_improvement(ref["acc"], r["acc"])
    tasks = sorted({t for r in rows for t in r["acc"]})

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["method"] + [f"task{t}" for t in tasks] + [f"avg_improvement_of_{reference}"]
    lines = [",".join(header)]
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        cells = [r["method"]] + [_cell(r["acc"].get(t)) for t in tasks] + [_cell(r["avg_improvement"])]
        lines.append(",".join(cells))
        md.append("| " + " | ".join(cells) + " |")
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    (out / "report.md").write_text("\n".join(md) + "\n")
    plot = _plot(rows, tasks, out / "accuracy.png")
    grids = []
    for d, m in zip(run_dirs, manifests):
        for seed, art in m["artifacts"].items():
            if not isinstance(art, dict):
                continue
            for g in art.get("grids", []):
                dst = out / "grids" / f"{d.name}-seed{seed}-{Path(g).name}"
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(d / g, dst)
                grids.append(str(dst))
    return {"table": rows, "tasks": tasks, "csv": str(out / "report.csv"), "markdown": str(out / "report.md"),
            "plot": str(plot), "grids": grids}


def _cell(x):
    return "" if x is None else f"{x:.2f}"


def _plot(rows, tasks, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in rows:
        ts = [t for t in tasks if r["acc"].get(t) is not None]
        ax.plot(ts, [r["acc"][t] for t in ts], marker="o", label=r["method"])
    ax.set_xlabel("task")
    ax.set_ylabel("top-1 on all seen classes (%)")
    ax.set_xticks(tasks)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
