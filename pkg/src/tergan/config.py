"""Run configuration (strict JSON) and the ``train`` orchestration around it."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from ._validation import ConfigurationError, ValidationError
from .data import (AugmentationConfig, DatasetManifest, ingest_folder, load_images,
                   make_folds, synth_generate)
from .losses import LossWeights
from .networks import NetworkSpec
from .trainer import (OptimizerConfig, StageBudgets, TrainingData, TrainState, load_checkpoint,
                      run_curriculum, save_checkpoint)

log = logging.getLogger(__name__)

DATA_SOURCES = {
    "synth": ("n_identities", "n_expressions", "seed", "folds", "fold_seed"),
    "folder": ("path", "folds", "fold_seed"),
    "manifest": ("path",),
}
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.jsonl"


@dataclass
class RunConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    data: dict = field(default_factory=lambda: {
        "source": "synth",
        "parameters": {"n_identities": 80, "n_expressions": 6, "seed": 7, "folds": 8, "fold_seed": 0}})
    holdout_folds: List[int] = field(default_factory=lambda: [0])
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    same_identity_prob: float = 1.0
    stages: StageBudgets = field(default_factory=StageBudgets)
    seed: int = 0
    output_dir: str = "run"
    checkpoint_every: int = 500

    def __post_init__(self):
        self.network.validate()
        source = self.data.get("source")
        if source not in DATA_SOURCES:
            raise ConfigurationError(f"data.source must be one of {sorted(DATA_SOURCES)}, got {source!r}")
        params = self.data.get("parameters")
        if not isinstance(params, dict):
            raise ConfigurationError("data.parameters must be an object")
        _exact_keys(params, DATA_SOURCES[source], f"data.parameters ({source})")
        if not 0.0 <= self.same_identity_prob <= 1.0:
            raise ConfigurationError("same_identity_prob must lie in [0, 1]")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0 (0 = stage boundaries only)")
        if self.augmentation.crop_size > self.network.image_size:
            raise ConfigurationError(
                f"augmentation.crop_size {self.augmentation.crop_size} exceeds "
                f"network.image_size {self.network.image_size}")

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "optimizer": asdict(self.optimizer),
            "weights": self.weights.to_dict(),
            "data": self.data,
            "holdout_folds": list(self.holdout_folds),
            "augmentation": self.augmentation.to_dict(),
            "same_identity_prob": self.same_identity_prob,
            "stages": asdict(self.stages),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    def dumps(self) -> str:
        """Canonical form: sorted keys, fixed indentation, trailing newline."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict, text: Optional[str] = None) -> "RunConfig":
        _exact_keys(d, [f.name for f in fields(cls)], "config", text)
        sections = {
            "network": (NetworkSpec, NetworkSpec.from_dict),
            "optimizer": (OptimizerConfig, None),
            "weights": (LossWeights, LossWeights.from_dict),
            "augmentation": (AugmentationConfig, None),
            "stages": (StageBudgets, None),
        }
        kw = {}
        for name, value in d.items():
            if name in sections:
                typ, _ = sections[name]
                if not isinstance(value, dict):
                    raise ConfigurationError(f"{name} must be an object{_where(name, text)}")
                _exact_keys(value, [f.name for f in fields(typ)], name, text)
                try:
                    kw[name] = typ(**value)
                except TypeError as exc:
                    raise ConfigurationError(f"{name}: {exc}") from None
            else:
                kw[name] = value
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(d, text)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def _where(section: str, text: Optional[str]) -> str:
    """`` (line N)`` for the first occurrence of a section key in the JSON text."""
    if text is None:
        return ""
    if section == "config":
        return " (line 1)"
    m = re.search(r'"%s"\s*:' % re.escape(section.split(" ")[0].split(".")[-1]), text)
    if not m:
        return ""
    return f" (line {text.count(chr(10), 0, m.start()) + 1})"


def _exact_keys(d: dict, expected, section: str, text: Optional[str] = None):
    expected = list(expected)
    missing = [k for k in expected if k not in d]
    unknown = sorted(set(d) - set(expected))
    if missing:
        raise ConfigurationError(
            f"missing key '{section}.{missing[0]}'{_where(section, text)}"
            + (f"; also missing {missing[1:]}" if len(missing) > 1 else ""))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section}: {unknown}{_where(section, text)}")


def desk_config(output_dir: str = "run") -> RunConfig:
    """Reduced-width 32 px configuration on the 20-identity synthetic set."""
    return RunConfig(
        network=NetworkSpec(image_size=32, n_expressions=6, n_identities=20).scaled(
            8, disc_trunk_channels=[8, 16, 32, 64], disc_trunk_fc=256, disc_branch_fc=[128, 64]),
        data={"source": "synth", "parameters": {"n_identities": 20, "n_expressions": 6, "seed": 7,
                                                "folds": 5, "fold_seed": 0}},
        # half the pairs cross identities; the x_s reconstruction term is off because it
        # only makes geometric sense for same-identity pairs
        weights=LossWeights(lambda4=0.0),
        same_identity_prob=0.5,
        augmentation=AugmentationConfig(crop_size=28),
        stages=StageBudgets(300, 300, 4000),
        output_dir=output_dir,
    )


# ---------------------------------------------------------------------------
# Orchestration


def build_manifest(cfg: RunConfig) -> DatasetManifest:
    p = cfg.data["parameters"]
    source = cfg.data["source"]
    if source == "synth":
        m = synth_generate(p["n_identities"], p["n_expressions"], cfg.network.image_size, p["seed"])
        m = make_folds(m, p["folds"], p["fold_seed"])
    elif source == "folder":
        m = make_folds(ingest_folder(p["path"], cfg.network.image_size), p["folds"], p["fold_seed"])
    else:
        m = DatasetManifest.load(p["path"])
    check_manifest(m, cfg.network)
    return m


def check_manifest(m: DatasetManifest, spec: NetworkSpec):
    if m.n_expressions != spec.n_expressions or m.n_identities > spec.n_identities:
        raise ConfigurationError(
            f"manifest has {m.n_expressions} expressions / {m.n_identities} identities but the "
            f"network expects {spec.n_expressions} / at most {spec.n_identities}")


class MetricsLog:
    """Append-only JSON-lines log; on resume, lines past the checkpoint are dropped."""

    def __init__(self, path, keep_through_step: int = 0):
        self.path = Path(path)
        kept = []
        if keep_through_step > 0 and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip() and json.loads(line)["step"] <= keep_through_step:
                    kept.append(line)
        self.path.write_text("".join(l + "\n" for l in kept))
        self._fh = open(self.path, "a")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")

    def close(self):
        self._fh.close()


def train(cfg: RunConfig, resume=None, announce: Callable = None) -> TrainState:
    """Run (or continue) the curriculum, writing metrics and checkpoints to ``output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg)
    manifest.save(out / "manifest.json")
    cfg.save(out / "config.json")
    if manifest.folds is not None:
        unknown = [f for f in cfg.holdout_folds if not 0 <= f < manifest.n_folds]
        if unknown:
            raise ConfigurationError(f"holdout_folds {unknown} outside [0, {manifest.n_folds - 1}]")
        train_folds = [f for f in range(manifest.n_folds) if f not in set(cfg.holdout_folds)]
    else:
        train_folds = None
    images = load_images(manifest)
    data = TrainingData.from_images(manifest, images, cfg.augmentation, train_folds=train_folds,
                                    same_identity_prob=cfg.same_identity_prob)
    if resume is not None:
        state = load_checkpoint(resume, expected_spec=cfg.network)
        if announce:
            announce(f"resumed at step {state.global_step} (stage {state.stage})")
    else:
        state = TrainState(cfg.network, cfg.weights, cfg.optimizer, cfg.seed)
    metrics = MetricsLog(out / METRICS_NAME, keep_through_step=state.global_step if resume else 0)
    ck_path = out / CHECKPOINT_NAME

    def checkpoint(st, boundary):
        if boundary or (cfg.checkpoint_every and st.global_step % cfg.checkpoint_every == 0):
            save_checkpoint(st, ck_path)

    try:
        run_curriculum(state, data, cfg.stages, metrics, checkpoint, announce)
    finally:
        metrics.close()
    return state
