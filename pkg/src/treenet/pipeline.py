"""Three-phase training orchestration with resumable, hash-checked artifacts.

A run directory owns everything one experiment produces:

    runs/<name>/
        manifest.json            resolved config, hashes, phase states
        split_index.json         persisted train/val/test assignment
        encoder/checkpoint.pt    input-compression autoencoder
        decoder/checkpoint.pt    label-compression autoencoder
        bridge/checkpoint.pt     backbone trained on bottleneck pairs
        bridge/bridge_set*.npz   cached encoded training pairs
        logs/<phase>.json        per-epoch losses
        eval/                    metric rows, summary, rendered table

Phases run strictly encoder -> decoder -> bridge. Each phase checkpoint
records the hash of the configuration that produced it plus the run ids of
its upstream artifacts; a phase re-executes only when any of those changed
or its checkpoint is missing.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .assembly import AssembledTreeNet, MetricsReport, assemble, evaluate
from .autoencoders import (Autoencoder, AutoencoderSpec, KIND_INPUT, KIND_LABEL,
                           TrainedAutoencoder, build_autoencoder, train_autoencoder)
from .backbones import (BackboneSpec, BridgeTrainingSet, TrainedBridge,
                        build_backbone, materialize_bridge_set, train_bridge)
from .data import DatasetConfig, SplitIndex, prepare_dataset, select_records
from .errors import ConfigError, LockError, StaleArtifactError
from .shapes import ShapeSpec
from .trainer import TrainConfig

PHASES = ("encoder", "decoder", "bridge")
_PHASE_SEED_OFFSET = {"encoder": 1, "decoder": 2, "bridge": 3}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run, a single seed included."""

    name: str = "experiment"
    seed: int = 42
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    shapes: ShapeSpec = field(default_factory=lambda: ShapeSpec(input_size=384))
    backbone: BackboneSpec | None = None
    encoder_hp: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    decoder_hp: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    bridge_hp: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4))
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    weight_kernel: int = 31
    weight_amplification: float = 5.0
    eval_threshold: float = 0.5
    encoder_widths: tuple[int, ...] | None = None
    decoder_widths: tuple[int, ...] | None = None

    def validate(self) -> "ExperimentConfig":
        if self.dataset.target_size != self.shapes.input_size:
            raise ConfigError(
                f"dataset target_size {self.dataset.target_size} != shapes input_size "
                f"{self.shapes.input_size}"
            )
        spec = self.bridge_spec()
        if spec.scales_output and self.shapes.encoded_input_size != self.shapes.encoded_label_size:
            raise ConfigError(
                f"{spec.name} preserves spatial size, so input and label reductions "
                f"must match (got {self.shapes.input_reduction} vs {self.shapes.label_reduction})"
            )
        return self

    def bridge_spec(self) -> BackboneSpec:
        base = self.backbone or BackboneSpec()
        return BackboneSpec(
            name=base.name,
            in_channels=self.shapes.input_bottleneck_channels,
            out_channels=self.shapes.label_bottleneck_channels,
            in_size=self.shapes.encoded_input_size,
            out_size=self.shapes.encoded_label_size,
            depth=base.depth,
            base_width=base.base_width,
            param_target=base.param_target,
        )

    def autoencoder_spec(self, kind: str) -> AutoencoderSpec:
        widths = self.encoder_widths if kind == KIND_INPUT else self.decoder_widths
        return AutoencoderSpec(kind=kind, shape=self.shapes, stage_widths=widths)

    def to_dict(self) -> dict:
        backbone = (self.backbone or BackboneSpec()).to_dict()
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "shapes": self.shapes.to_dict(),
            "backbone": {k: backbone[k] for k in ("name", "depth", "base_width", "param_target")},
            "encoder_hp": self.encoder_hp.to_dict(),
            "decoder_hp": self.decoder_hp.to_dict(),
            "bridge_hp": self.bridge_hp.to_dict(),
            "scales": list(self.scales),
            "weight_kernel": self.weight_kernel,
            "weight_amplification": self.weight_amplification,
            "eval_threshold": self.eval_threshold,
            "encoder_widths": list(self.encoder_widths) if self.encoder_widths else None,
            "decoder_widths": list(self.decoder_widths) if self.decoder_widths else None,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = json.loads(json.dumps(raw))  # deep copy, JSON-typed
        seed = int(raw.get("seed", 42))
        dataset = dict(raw.get("dataset", {}))
        dataset.setdefault("seed", seed)
        shapes_dict = dict(raw.get("shapes", {"input_size": 384}))
        dataset.setdefault("target_size", shapes_dict.get("input_size", 384))
        hps = {}
        for phase, default_lr in (("encoder", 1e-3), ("decoder", 1e-3), ("bridge", 1e-4)):
            hp = dict(raw.get(f"{phase}_hp", {}))
            hp.setdefault("lr", default_lr)
            hp.setdefault("seed", seed + _PHASE_SEED_OFFSET[phase])
            hps[phase] = TrainConfig.from_dict(hp)
        backbone_raw = dict(raw.get("backbone", {}))
        backbone_raw.setdefault("name", "unet")
        backbone = BackboneSpec(
            name=backbone_raw["name"],
            depth=int(backbone_raw.get("depth", 4)),
            base_width=int(backbone_raw.get("base_width", 32)),
            param_target=backbone_raw.get("param_target"),
        )
        cfg = cls(
            name=raw.get("name", "experiment"),
            seed=seed,
            dataset=DatasetConfig.from_dict(dataset),
            shapes=ShapeSpec.from_dict(shapes_dict),
            backbone=backbone,
            encoder_hp=hps["encoder"],
            decoder_hp=hps["decoder"],
            bridge_hp=hps["bridge"],
            scales=tuple(raw.get("scales", (0.75, 1.0, 1.25))),
            weight_kernel=int(raw.get("weight_kernel", 31)),
            weight_amplification=float(raw.get("weight_amplification", 5.0)),
            eval_threshold=float(raw.get("eval_threshold", 0.5)),
            encoder_widths=tuple(raw["encoder_widths"]) if raw.get("encoder_widths") else None,
            decoder_widths=tuple(raw["decoder_widths"]) if raw.get("decoder_widths") else None,
        )
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @property
    def config_hash(self) -> str:
        return digest(self.to_dict())

    def phase_config_hash(self, phase: str) -> str:
        d = self.to_dict()
        common = {"dataset": d["dataset"], "shapes": d["shapes"]}
        if phase == "encoder":
            common.update(hp=d["encoder_hp"], widths=d["encoder_widths"], kind=KIND_INPUT)
        elif phase == "decoder":
            common.update(hp=d["decoder_hp"], widths=d["decoder_widths"], kind=KIND_LABEL)
        elif phase == "bridge":
            common.update(hp=d["bridge_hp"], backbone=d["backbone"], scales=d["scales"],
                          weight_kernel=d["weight_kernel"],
                          weight_amplification=d["weight_amplification"])
        else:
            raise ConfigError(f"unknown phase {phase!r}")
        return digest(common)


def apply_overrides(raw: dict, overrides: dict[str, object]) -> dict:
    """Apply dotted-key overrides (e.g. `bridge_hp.lr`) onto a raw config dict."""
    raw = json.loads(json.dumps(raw))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends through a non-mapping")
        node[parts[-1]] = value
    return raw


def make_desk_config(**overrides) -> ExperimentConfig:
    """Small synthetic-data configuration that trains on CPU in minutes."""
    raw = {
        "name": "desk",
        "seed": 42,
        "dataset": {"source": "synthetic", "count": 256, "split_ratios": [0.8, 0.1, 0.1]},
        "shapes": {"input_size": 96, "input_reduction": 2, "label_reduction": 2},
        "backbone": {"name": "unet", "depth": 2, "base_width": 16},
        "encoder_hp": {"lr": 1e-3, "epochs": 20},
        "decoder_hp": {"lr": 1e-3, "epochs": 20},
        "bridge_hp": {"lr": 1e-3, "epochs": 20},
        "scales": [0.75, 1.0, 1.25],
    }
    raw = apply_overrides(raw, overrides)
    return ExperimentConfig.from_dict(raw)


def make_mini_config(**overrides) -> ExperimentConfig:
    """Very small configuration for fast smoke runs."""
    raw = {
        "name": "mini",
        "seed": 42,
        "dataset": {"source": "synthetic", "count": 48, "split_ratios": [0.8, 0.1, 0.1]},
        "shapes": {"input_size": 64, "input_reduction": 2, "label_reduction": 2},
        "backbone": {"name": "unet", "depth": 2, "base_width": 8},
        "encoder_hp": {"lr": 1e-3, "epochs": 4},
        "decoder_hp": {"lr": 1e-3, "epochs": 4},
        "bridge_hp": {"lr": 1e-3, "epochs": 4},
        "scales": [1.0],
    }
    raw = apply_overrides(raw, overrides)
    return ExperimentConfig.from_dict(raw)


def make_full_config(**overrides) -> ExperimentConfig:
    """Full-resolution defaults for directory datasets.

    Scale factors are multiples of the depth-4 backbone's 16px downsampling
    grid at the 96px bridge size.
    """
    raw = {
        "name": "full",
        "seed": 42,
        "dataset": {"source": "directory", "split_ratios": [0.8, 0.1, 0.1]},
        "shapes": {"input_size": 384, "input_reduction": 4, "label_reduction": 4},
        "backbone": {"name": "unet", "depth": 4, "base_width": 32},
        "scales": [80 / 96, 1.0, 112 / 96],
    }
    raw = apply_overrides(raw, overrides)
    return ExperimentConfig.from_dict(raw)


def multiscale_batches(train_set: BridgeTrainingSet, scales: Iterable[float],
                       seed: int, batch_size: int = 8, divisor: int = 1,
                       scale_targets: bool = True) -> Callable:
    """Batch-stream factory that resizes each batch to a seeded random scale.

    Every scaled size must be divisible by the consumer's downsampling
    factor; violations are rejected up front naming the offending scale.
    The returned callable plugs into `train_bridge(batch_stream=...)`.
    """
    scales = tuple(float(s) for s in scales)
    x = torch.from_numpy(np.ascontiguousarray(train_set.inputs, dtype=np.float32))
    t = torch.from_numpy(np.clip(
        np.ascontiguousarray(train_set.targets, dtype=np.float32), 0.0, 1.0))
    in_base = x.shape[-1]
    t_base = t.shape[-1]
    sizes = {}
    for s in scales:
        scaled = int(round(in_base * s))
        if scaled < max(divisor, 1):
            raise ConfigError(f"scale {s} shrinks {in_base}px below the {divisor}px grid")
        if scaled % divisor != 0:
            raise ConfigError(
                f"scale {s} gives size {scaled}, not divisible by the backbone's "
                f"downsampling factor {divisor}"
            )
        sizes[s] = (scaled, int(round(t_base * s)) if scale_targets else t_base)

    def _resize(batch: torch.Tensor, size: int) -> torch.Tensor:
        if batch.shape[-1] == size:
            return batch
        out = F.interpolate(batch, size=(size, size), mode="bilinear", align_corners=False)
        return out.clamp_(0.0, 1.0)

    def stream(epoch: int, rng: np.random.Generator):
        scale_rng = np.random.default_rng((seed, epoch))
        perm = rng.permutation(len(x))
        for start in range(0, len(perm), batch_size):
            idx = torch.from_numpy(perm[start : start + batch_size])
            s = scales[int(scale_rng.integers(len(scales)))]
            in_size, t_size = sizes[s]
            yield _resize(x[idx], in_size), _resize(t[idx], t_size)

    return stream


@dataclass
class PhaseArtifacts:
    """What one completed training phase left on disk."""

    phase: str
    checkpoint_path: Path
    config_hash: str
    weights_hash: str
    run_id: str
    log: list[dict] = field(default_factory=list)
    skipped: bool = False


@dataclass
class PipelineResult:
    run_dir: Path
    artifacts: dict[str, PhaseArtifacts]
    assembled: AssembledTreeNet
    report: MetricsReport
    elapsed_s: float


@contextmanager
def run_lock(run_dir: Path):
    """One invocation per run directory, enforced by an exclusive lockfile."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"run directory {run_dir} is locked by another invocation "
            f"(delete {lock} if that process is gone)"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


class Manifest:
    """JSON sidecar recording config, phase states, and invocations."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"config": None, "config_hash": None, "versions": _versions(),
                         "phases": {}, "invocations": []}

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2) + "\n")

    def bind_config(self, cfg: ExperimentConfig, force: bool = False) -> None:
        if self.data["config_hash"] not in (None, cfg.config_hash):
            if not force:
                raise ConfigError(
                    f"run directory was initialized with config hash "
                    f"{self.data['config_hash'][:12]}, current config hashes to "
                    f"{cfg.config_hash[:12]}; use a new run directory or --force"
                )
            self.data["phases"] = {}
        self.data["config"] = cfg.to_dict()
        self.data["config_hash"] = cfg.config_hash
        self.data["versions"] = _versions()
        self.save()

    def phase(self, name: str) -> dict | None:
        return self.data["phases"].get(name)

    def record_phase(self, artifacts: PhaseArtifacts, upstream: dict[str, str]) -> None:
        self.data["phases"][artifacts.phase] = {
            "checkpoint": str(artifacts.checkpoint_path),
            "config_hash": artifacts.config_hash,
            "weights_hash": artifacts.weights_hash,
            "run_id": artifacts.run_id,
            "upstream": upstream,
            "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.save()

    def record_invocation(self, subcommand: str, cfg: ExperimentConfig,
                          overrides: dict | None = None) -> None:
        self.data["invocations"].append({
            "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "subcommand": subcommand,
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "overrides": overrides or {},
        })
        self.save()


def _versions() -> dict:
    import platform
    from importlib.metadata import PackageNotFoundError, version
    try:
        own = version("treenet")
    except PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__, "treenet": own}


def _phase_dir(run_dir: Path, phase: str) -> Path:
    d = run_dir / phase
    d.mkdir(parents=True, exist_ok=True)
    return d


def _checkpoint_path(run_dir: Path, phase: str) -> Path:
    return _phase_dir(run_dir, phase) / "checkpoint.pt"


def _save_phase_log(run_dir: Path, phase: str, log: list[dict]) -> None:
    logs_dir = run_dir / "logs"
    logs_dir.mkdir(exist_ok=True)
    (logs_dir / f"{phase}.json").write_text(json.dumps(log, indent=2))


def save_autoencoder_checkpoint(path: Path, trained: TrainedAutoencoder,
                                config_hash: str, run_id: str) -> None:
    torch.save({
        "kind": "autoencoder",
        "spec": trained.spec.to_dict(),
        "state_dict": trained.model.state_dict(),
        "training_log": trained.training_log,
        "config_hash": config_hash,
        "weights_hash": trained.weights_hash,
        "run_id": run_id,
    }, path)


def load_autoencoder_checkpoint(path: Path) -> tuple[TrainedAutoencoder, dict]:
    blob = torch.load(path, weights_only=False)
    spec = AutoencoderSpec.from_dict(blob["spec"])
    model = build_autoencoder(spec)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    trained = TrainedAutoencoder(spec=spec, model=model, training_log=blob["training_log"])
    return trained, blob


def save_bridge_checkpoint(path: Path, trained: TrainedBridge, config_hash: str,
                           run_id: str, upstream: dict[str, str]) -> None:
    torch.save({
        "kind": "bridge",
        "spec": trained.spec.to_dict(),
        "state_dict": trained.model.state_dict(),
        "training_log": trained.training_log,
        "config_hash": config_hash,
        "weights_hash": trained.weights_hash,
        "run_id": run_id,
        "upstream": upstream,
    }, path)


def load_bridge_checkpoint(path: Path) -> tuple[TrainedBridge, dict]:
    blob = torch.load(path, weights_only=False)
    spec = BackboneSpec.from_dict(blob["spec"])
    model = build_backbone(spec)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    trained = TrainedBridge(spec=spec, model=model, training_log=blob["training_log"])
    return trained, blob


def _phase_up_to_date(manifest: Manifest, run_dir: Path, phase: str,
                      config_hash: str, upstream: dict[str, str]) -> bool:
    entry = manifest.phase(phase)
    if entry is None or not _checkpoint_path(run_dir, phase).exists():
        return False
    return (entry["config_hash"] == config_hash
            and entry.get("upstream", {}) == upstream)


def _prepare_data(cfg: ExperimentConfig, run_dir: Path):
    records, split = prepare_dataset(cfg.dataset)
    split.save(run_dir / "split_index.json")
    return records, split


def _run_autoencoder_phase(cfg: ExperimentConfig, run_dir: Path, manifest: Manifest,
                           phase: str, records, split: SplitIndex) -> PhaseArtifacts:
    kind = KIND_INPUT if phase == "encoder" else KIND_LABEL
    hp = cfg.encoder_hp if phase == "encoder" else cfg.decoder_hp
    phase_hash = cfg.phase_config_hash(phase)
    path = _checkpoint_path(run_dir, phase)
    if _phase_up_to_date(manifest, run_dir, phase, phase_hash, {}):
        entry = manifest.phase(phase)
        trained, _ = load_autoencoder_checkpoint(path)
        return PhaseArtifacts(phase=phase, checkpoint_path=path, config_hash=phase_hash,
                              weights_hash=entry["weights_hash"], run_id=entry["run_id"],
                              log=trained.training_log, skipped=True)
    attr = "image" if kind == KIND_INPUT else "mask"
    train_data = [getattr(r, attr) for r in select_records(records, split.train_ids)]
    val_data = [getattr(r, attr) for r in select_records(records, split.val_ids)] or None
    torch.manual_seed(hp.seed)  # weight init must not depend on process history
    model = build_autoencoder(cfg.autoencoder_spec(kind))
    trained = train_autoencoder(model, train_data, hp, val_data=val_data)
    run_id = uuid.uuid4().hex
    save_autoencoder_checkpoint(path, trained, phase_hash, run_id)
    _save_phase_log(run_dir, phase, trained.training_log)
    artifacts = PhaseArtifacts(phase=phase, checkpoint_path=path, config_hash=phase_hash,
                               weights_hash=trained.weights_hash, run_id=run_id,
                               log=trained.training_log)
    manifest.record_phase(artifacts, upstream={})
    return artifacts


def _run_bridge_phase(cfg: ExperimentConfig, run_dir: Path, manifest: Manifest,
                      records, split: SplitIndex,
                      enc: TrainedAutoencoder, dec: TrainedAutoencoder,
                      upstream: dict[str, str]) -> PhaseArtifacts:
    phase_hash = cfg.phase_config_hash("bridge")
    path = _checkpoint_path(run_dir, "bridge")
    if _phase_up_to_date(manifest, run_dir, "bridge", phase_hash, upstream):
        entry = manifest.phase("bridge")
        trained, _ = load_bridge_checkpoint(path)
        return PhaseArtifacts(phase="bridge", checkpoint_path=path, config_hash=phase_hash,
                              weights_hash=entry["weights_hash"], run_id=entry["run_id"],
                              log=trained.training_log, skipped=True)
    bridge_dir = _phase_dir(run_dir, "bridge")
    train_set = materialize_bridge_set(
        enc, dec, select_records(records, split.train_ids),
        cache_path=bridge_dir / "bridge_set_train", on_stale="rebuild")
    val_set = materialize_bridge_set(
        enc, dec, select_records(records, split.val_ids),
        cache_path=bridge_dir / "bridge_set_val", on_stale="rebuild")
    spec = cfg.bridge_spec()
    torch.manual_seed(cfg.bridge_hp.seed)
    model = build_backbone(spec)
    stream = multiscale_batches(
        train_set, cfg.scales, seed=cfg.bridge_hp.seed,
        batch_size=cfg.bridge_hp.batch_size, divisor=spec.downsampling_factor,
        scale_targets=spec.scales_output)
    trained = train_bridge(model, train_set, cfg.bridge_hp, val_set=val_set,
                           batch_stream=stream, weight_kernel=cfg.weight_kernel,
                           weight_amplification=cfg.weight_amplification)
    run_id = uuid.uuid4().hex
    save_bridge_checkpoint(path, trained, phase_hash, run_id, upstream)
    _save_phase_log(run_dir, "bridge", trained.training_log)
    artifacts = PhaseArtifacts(phase="bridge", checkpoint_path=path, config_hash=phase_hash,
                               weights_hash=trained.weights_hash, run_id=run_id,
                               log=trained.training_log)
    manifest.record_phase(artifacts, upstream=upstream)
    return artifacts


def load_trained_components(cfg: ExperimentConfig, run_dir: Path
                            ) -> tuple[TrainedAutoencoder, TrainedAutoencoder, TrainedBridge]:
    """Load all three phases, refusing stale or missing artifacts."""
    run_dir = Path(run_dir)
    manifest = Manifest(run_dir)
    loaded = {}
    for phase in PHASES:
        entry = manifest.phase(phase)
        path = _checkpoint_path(run_dir, phase)
        if entry is None or not path.exists():
            raise StaleArtifactError(
                f"phase {phase!r} has no completed artifact in {run_dir}; "
                f"run `treenet run-pipeline` (or `treenet train-{phase}`) first"
            )
        if entry["config_hash"] != cfg.phase_config_hash(phase):
            raise StaleArtifactError(
                f"phase {phase!r} artifact is stale for the current config; "
                f"retrain it or rerun the pipeline"
            )
        loaded[phase] = entry
    upstream = loaded["bridge"].get("upstream", {})
    if upstream != {"encoder": loaded["encoder"]["run_id"],
                    "decoder": loaded["decoder"]["run_id"]}:
        raise StaleArtifactError(
            "bridge artifact was trained against different autoencoder runs; "
            "retrain the bridge or rerun the pipeline"
        )
    enc, _ = load_autoencoder_checkpoint(_checkpoint_path(run_dir, "encoder"))
    dec, _ = load_autoencoder_checkpoint(_checkpoint_path(run_dir, "decoder"))
    bridge, _ = load_bridge_checkpoint(_checkpoint_path(run_dir, "bridge"))
    return enc, dec, bridge


def run_phase(cfg: ExperimentConfig, run_dir: str | Path, phase: str,
              subcommand: str | None = None, overrides: dict | None = None,
              force: bool = False) -> PhaseArtifacts:
    """Run (or skip) a single phase, honoring upstream dependencies."""
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg, force=force)
        records, split = _prepare_data(cfg, run_dir)
        if phase in ("encoder", "decoder"):
            artifacts = _run_autoencoder_phase(cfg, run_dir, manifest, phase, records, split)
        else:
            for upstream_phase in ("encoder", "decoder"):
                entry = manifest.phase(upstream_phase)
                if entry is None or entry["config_hash"] != cfg.phase_config_hash(upstream_phase):
                    raise StaleArtifactError(
                        f"bridge phase needs an up-to-date {upstream_phase} artifact; "
                        f"run `treenet train-{upstream_phase}` first"
                    )
            enc, _ = load_autoencoder_checkpoint(_checkpoint_path(run_dir, "encoder"))
            dec, _ = load_autoencoder_checkpoint(_checkpoint_path(run_dir, "decoder"))
            upstream = {"encoder": manifest.phase("encoder")["run_id"],
                        "decoder": manifest.phase("decoder")["run_id"]}
            artifacts = _run_bridge_phase(cfg, run_dir, manifest, records, split,
                                          enc, dec, upstream)
        manifest.record_invocation(subcommand or f"train-{phase}", cfg, overrides)
    return artifacts


def run_pipeline(cfg: ExperimentConfig, run_dir: str | Path, force: bool = False,
                 overrides: dict | None = None) -> PipelineResult:
    """Execute encoder -> decoder -> bridge, assemble, and evaluate.

    Completed up-to-date phases are skipped; stale downstream phases are
    re-executed automatically.
    """
    started = time.monotonic()
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg, force=force)
        records, split = _prepare_data(cfg, run_dir)

        artifacts: dict[str, PhaseArtifacts] = {}
        artifacts["encoder"] = _run_autoencoder_phase(cfg, run_dir, manifest,
                                                      "encoder", records, split)
        artifacts["decoder"] = _run_autoencoder_phase(cfg, run_dir, manifest,
                                                      "decoder", records, split)
        enc, _ = load_autoencoder_checkpoint(artifacts["encoder"].checkpoint_path)
        dec, _ = load_autoencoder_checkpoint(artifacts["decoder"].checkpoint_path)
        upstream = {"encoder": artifacts["encoder"].run_id,
                    "decoder": artifacts["decoder"].run_id}
        artifacts["bridge"] = _run_bridge_phase(cfg, run_dir, manifest, records, split,
                                                enc, dec, upstream)
        bridge, _ = load_bridge_checkpoint(artifacts["bridge"].checkpoint_path)

        assembled = assemble(enc, bridge, dec)
        report = evaluate(assembled, select_records(records, split.test_ids),
                          threshold=cfg.eval_threshold,
                          model_name=f"treenet-{cfg.bridge_spec().name}",
                          dataset_name=cfg.dataset.source)
        from .report import write_metrics_artifacts
        write_metrics_artifacts(run_dir / "eval", report)
        manifest.record_invocation("run-pipeline", cfg, overrides)
    return PipelineResult(run_dir=run_dir, artifacts=artifacts, assembled=assembled,
                          report=report, elapsed_s=time.monotonic() - started)


class BaselineSegmenter(nn.Module):
    """Full-resolution backbone wrapped with the assembled model's interface."""

    def __init__(self, backbone: nn.Module, shapes: ShapeSpec):
        super().__init__()
        self.backbone = backbone
        self.shapes = shapes

    def forward(self, x):
        return self.backbone(x)


def run_baseline(cfg: ExperimentConfig, run_dir: str | Path) -> MetricsReport:
    """Train the backbone at full resolution on the identical split.

    Reuses the bridge trainer with raw (image, mask) pairs, giving the
    side-by-side accuracy comparison a fair, single-phase counterpart.
    """
    from dataclasses import replace

    run_dir = Path(run_dir)
    baseline_dir = run_dir / "baseline"
    baseline_dir.mkdir(parents=True, exist_ok=True)
    records, split = prepare_dataset(cfg.dataset)
    if not (run_dir / "split_index.json").exists():
        split.save(run_dir / "split_index.json")
    base = cfg.bridge_spec()
    spec = replace(base, in_channels=3, out_channels=1,
                   in_size=cfg.shapes.input_size, out_size=cfg.shapes.input_size,
                   param_target=None)
    torch.manual_seed(cfg.bridge_hp.seed)
    model = build_backbone(spec)
    train_records = select_records(records, split.train_ids)
    val_records = select_records(records, split.val_ids)
    train_set = BridgeTrainingSet(
        inputs=np.stack([r.image for r in train_records]),
        targets=np.stack([r.mask for r in train_records]),
        ids=[r.id for r in train_records], provenance={"raw": True})
    val_set = BridgeTrainingSet(
        inputs=np.stack([r.image for r in val_records]),
        targets=np.stack([r.mask for r in val_records]),
        ids=[r.id for r in val_records], provenance={"raw": True}) if val_records else None
    trained = train_bridge(model, train_set, cfg.bridge_hp, val_set=val_set,
                           weight_kernel=cfg.weight_kernel,
                           weight_amplification=cfg.weight_amplification)
    torch.save({"kind": "baseline", "spec": spec.to_dict(),
                "state_dict": trained.model.state_dict(),
                "training_log": trained.training_log}, baseline_dir / "checkpoint.pt")
    wrapped = BaselineSegmenter(trained.model, cfg.shapes)
    report = evaluate(wrapped, select_records(records, split.test_ids),
                      threshold=cfg.eval_threshold,
                      model_name=f"baseline-{spec.name}",
                      dataset_name=cfg.dataset.source)
    from .report import write_metrics_artifacts
    write_metrics_artifacts(baseline_dir / "eval", report)
    return report
