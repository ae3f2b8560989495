"""Curriculum training: encoder pre-training, then two-step adversarial updates."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses as L
from ._validation import (ConfigurationError, DivergenceError, IntegrityError,
                          ValidationError)
from .data import (AugmentationConfig, DatasetManifest, augment_array, identity_pools,
                   sample_pair)
from .networks import (Encoder, NetworkSpec, TERNetworks, build_networks,
                       concat_embeddings, gradient_reverse)

log = logging.getLogger(__name__)

STAGES = ("pretrain_expr", "pretrain_id", "adversarial")
FORMAT_VERSION = 1
MAGIC = b"TERGANCK"
GRL_SCALE = 1.0


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 2e-4
    batch_size: int = 64
    beta1: float = 0.5
    beta2: float = 0.999

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.algorithm!r} (only 'adam')")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def make(self, params):
        return torch.optim.Adam(params, lr=self.learning_rate, betas=(self.beta1, self.beta2))


@dataclass
class StageBudgets:
    pretrain_expr: int = 2000
    pretrain_id: int = 2000
    adversarial: int = 10000

    def __post_init__(self):
        if min(self.pretrain_expr, self.pretrain_id, self.adversarial) < 0:
            raise ConfigurationError("stage budgets must be >= 0")

    def __getitem__(self, stage):
        return getattr(self, stage)


@dataclass
class StageReport:
    stage: str
    steps: int
    final: dict = field(default_factory=dict)
    accuracy: Optional[float] = None


class TrainState:
    """Every mutable piece of a training run; checkpointable bit-exactly."""

    def __init__(self, spec: NetworkSpec, weights: L.LossWeights = None,
                 opt_cfg: OptimizerConfig = None, seed: int = 0):
        self.spec = spec
        self.weights = weights or L.LossWeights()
        self.opt_cfg = opt_cfg or OptimizerConfig()
        self.seed = seed
        self.nets: TERNetworks = build_networks(spec, seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.heads = nn.ModuleDict({
                "expr": nn.Linear(spec.expr_dim, spec.n_expressions),
                "id": nn.Linear(spec.id_dim, spec.n_identities),
            })
        self.frozen_expr: Optional[Encoder] = None
        self.frozen_id: Optional[Encoder] = None
        self.optimizers: Dict[str, torch.optim.Optimizer] = {}
        self.stage = STAGES[0]
        self.stage_steps = {s: 0 for s in STAGES}
        self.global_step = 0
        self.rng = np.random.default_rng(seed)

    # -- optimizers -------------------------------------------------------
    def _param_groups(self, name):
        n = self.nets
        return {
            "pretrain_expr": lambda: list(n.expr_encoder.parameters()) + list(self.heads["expr"].parameters()),
            "pretrain_id": lambda: list(n.id_encoder.parameters()) + list(self.heads["id"].parameters()),
            "G": lambda: [p for m in (n.expr_encoder, n.id_encoder, n.decoder) for p in m.parameters()],
            "D": lambda: list(n.discriminator.parameters()),
            "E": lambda: list(n.expr_disc.parameters()) + list(n.id_disc.parameters()),
            "Enc": lambda: list(n.expr_encoder.parameters()) + list(n.id_encoder.parameters()),
        }[name]()

    def optimizer(self, name) -> torch.optim.Optimizer:
        if name not in self.optimizers:
            self.optimizers[name] = self.opt_cfg.make(self._param_groups(name))
        return self.optimizers[name]

    # -- stage transitions ------------------------------------------------
    def freeze(self, which: str):
        enc = self.nets.expr_encoder if which == "expr" else self.nets.id_encoder
        frozen = copy.deepcopy(enc).eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        setattr(self, f"frozen_{which}", frozen)
        self.optimizers.pop(f"pretrain_{which}", None)

    def advance_stage(self):
        if self.stage == "pretrain_expr":
            self.freeze("expr")
            self.stage = "pretrain_id"
        elif self.stage == "pretrain_id":
            self.freeze("id")
            self.heads = None  # classification heads are discarded after pre-training
            self.stage = "adversarial"

    @property
    def is_pretrained(self) -> bool:
        return self.stage == "adversarial"

    def eval(self):
        self.nets.eval()
        return self


# ---------------------------------------------------------------------------
# Data feeding


class TrainingData:
    """Augmented image pool aligned with manifest records, plus samplers.

    ``pool[i, v]`` is augmentation variant ``v`` of record ``i``; only
    records of identities in ``train_folds`` are ever sampled.
    """

    def __init__(self, manifest: DatasetManifest, pool: np.ndarray,
                 train_folds: Optional[Sequence[int]] = None, same_identity_prob: float = 1.0):
        if pool.shape[0] != len(manifest):
            raise ValidationError("pool rows must align with manifest records")
        self.manifest = manifest
        self.pool = torch.from_numpy(np.ascontiguousarray(pool, dtype=np.float32))
        self.train_folds = None if train_folds is None else list(train_folds)
        self.same_identity_prob = same_identity_prob
        self.train_indices = manifest.record_indices(self.train_folds)
        if len(self.train_indices) == 0:
            raise ValidationError("no training records in the selected folds")
        self.expressions = torch.from_numpy(manifest.expressions)
        self.identities = torch.from_numpy(manifest.identities)
        self._pools = identity_pools(manifest, self.train_folds)

    @classmethod
    def from_images(cls, manifest: DatasetManifest, images: np.ndarray,
                    aug: Optional[AugmentationConfig] = None, **kw) -> "TrainingData":
        if aug is None:
            pool = images[:, None]
        else:
            pool = augment_array(images, aug, image_size=images.shape[1])
        return cls(manifest, pool, **kw)

    @property
    def n_variants(self) -> int:
        return self.pool.shape[1]

    def _pick(self, rng, records):
        variants = rng.integers(self.n_variants, size=len(records))
        return self.pool[torch.as_tensor(records), torch.as_tensor(variants)]

    def classification_batch(self, rng: np.random.Generator, batch_size: int):
        rec = self.train_indices[rng.integers(len(self.train_indices), size=batch_size)]
        x = self._pick(rng, rec)
        idx = torch.as_tensor(rec)
        return x, self.expressions[idx], self.identities[idx]

    def pair_batch(self, rng: np.random.Generator, batch_size: int):
        pairs = [sample_pair(self.manifest, rng, self.same_identity_prob, self.train_folds,
                             _pools=self._pools) for _ in range(batch_size)]
        src = np.array([p.source for p in pairs])
        tgt = np.array([p.target for p in pairs])
        x_s = self._pick(rng, src)
        x_t = self._pick(rng, tgt)
        return (x_s, self.expressions[torch.as_tensor(src)],
                x_t, self.identities[torch.as_tensor(tgt)])


# ---------------------------------------------------------------------------
# Steps


def _finite(name, value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise DivergenceError(name, v)
    return v


def pretrain_step(state: TrainState, x, labels, which: str):
    """One supervised classification update of an encoder and its temporary head."""
    enc = state.nets.expr_encoder if which == "expr" else state.nets.id_encoder
    head = state.heads[which]
    enc.train()
    f, _ = enc(x)
    logits = head(f)
    loss = F.cross_entropy(logits, labels)
    _finite(f"pretrain_{which}_ce", loss)
    opt = state.optimizer(f"pretrain_{which}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    acc = (logits.argmax(1) == labels).float().mean()
    return float(loss.detach()), float(acc)


def _pretrain(state, data, steps, which, metrics):
    stage = f"pretrain_{which}"
    if state.stage != stage:
        raise ValidationError(f"state is in stage {state.stage!r}, not {stage!r}")
    loss = acc = None
    for _ in range(steps):
        x, y_e, y_i = data.classification_batch(state.rng, state.opt_cfg.batch_size)
        loss, acc = pretrain_step(state, x, y_e if which == "expr" else y_i, which)
        state.global_step += 1
        state.stage_steps[stage] += 1
        if metrics:
            metrics({"step": state.global_step, "stage": stage, "loss": loss, "accuracy": acc})
    return StageReport(stage, steps, {"loss": loss}, acc)


def pretrain_expression_encoder(state: TrainState, data: TrainingData, steps: int,
                                metrics: Callable = None, finish: bool = True) -> StageReport:
    """Supervised expression classification; freezes a copy of the encoder when ``finish``."""
    report = _pretrain(state, data, steps, "expr", metrics)
    if finish:
        state.advance_stage()
    return report


def pretrain_identity_encoder(state: TrainState, data: TrainingData, steps: int,
                              metrics: Callable = None, finish: bool = True) -> StageReport:
    report = _pretrain(state, data, steps, "id", metrics)
    if finish:
        state.advance_stage()
    return report


def adversarial_step(state: TrainState, batch) -> L.LossReport:
    """One adversarial iteration: generator/discriminator step, then embedding step.

    Step 1 synthesises ``x_bar`` from the source expression and target
    identity and updates D on real/fake classification, then G on the weighted
    generator terms. Step 2 re-encodes the real inputs together with
    ``x_bar`` (detached: no gradient reaches the decoder) and trains the
    embedding discriminators through gradient reversal, so the encoders
    receive the negated gradient in the same backward pass.
    """
    if not state.is_pretrained:
        raise ValidationError(f"adversarial step requires completed pre-training (stage={state.stage})")
    w = state.weights
    nets = state.nets
    x_s, y_s, x_t, y_t = batch
    nets.train()

    # step 1 -----------------------------------------------------------------
    f_e, _ = nets.expr_encoder(x_s)
    f_i, _ = nets.id_encoder(x_t)
    x_bar = nets.decoder(concat_embeddings(f_e, f_i))

    D = nets.discriminator
    d_real_expr, d_real_id, d_fake = L.discriminator_loss(
        D(x_s), D(x_t), D(x_bar.detach()), y_s, y_t, reduce=False)
    report = L.LossReport(d_real_expr=_finite("d_real_expr", d_real_expr),
                          d_real_id=_finite("d_real_id", d_real_id),
                          d_fake=_finite("d_fake", d_fake))
    if w.lambda7 > 0:
        opt_d = state.optimizer("D")
        opt_d.zero_grad(set_to_none=True)
        (d_real_expr + d_real_id + d_fake).backward()
        opt_d.step()

    g_expr, g_id = L.generator_adv_loss(D(x_bar), y_s, y_t, reduce=False)
    irec = L.pixel_recon_loss(x_bar, x_t)
    erec = L.pixel_recon_loss(x_bar, x_s)
    with torch.no_grad():
        ref_e = state.frozen_expr(x_s)[1]
        ref_i = state.frozen_id(x_t)[1]
    ef = L.feature_match_loss(state.frozen_expr(x_bar)[1], ref_e, w.omega1)
    if_ = L.feature_match_loss(state.frozen_id(x_bar)[1], ref_i, w.omega2)
    for name, v in (("g_expr", g_expr), ("g_id", g_id), ("irec", irec), ("erec", erec),
                    ("ef", ef), ("if_", if_)):
        setattr(report, name, _finite(name, v))
    g_total = (w.lambda1 * if_ + w.lambda2 * ef + w.lambda3 * irec + w.lambda4 * erec
               + w.lambda7 * (g_expr + g_id))
    opt_g = state.optimizer("G")
    opt_g.zero_grad(set_to_none=True)
    if g_total.requires_grad:
        g_total.backward()
        opt_g.step()
    # the generator pass above also left gradients on D; discard them
    D.zero_grad(set_to_none=True)

    # step 2 -----------------------------------------------------------------
    x_bar = x_bar.detach()
    active = w.lambda5 > 0 or w.lambda6 > 0
    with torch.set_grad_enabled(active):
        expr_consist, id_consist = _consistency_losses(state, x_s, x_t, x_bar)
    report.expr_consist = _finite("expr_consist", expr_consist)
    report.id_consist = _finite("id_consist", id_consist)
    if active:
        opt_e, opt_enc = state.optimizer("E"), state.optimizer("Enc")
        opt_e.zero_grad(set_to_none=True)
        opt_enc.zero_grad(set_to_none=True)
        (w.lambda6 * expr_consist + w.lambda5 * id_consist).backward()
        opt_e.step()
        opt_enc.step()

    report.total = float(L.total_loss(report.parts(), w))
    state.global_step += 1
    state.stage_steps["adversarial"] += 1
    return report


def _consistency_losses(state: TrainState, x_s, x_t, x_bar):
    """Consistency losses of the embedding discriminators behind gradient reversal."""
    nets = state.nets
    n = x_s.shape[0]
    f_e, _ = nets.expr_encoder(torch.cat([x_s, x_bar]))
    f_i, _ = nets.id_encoder(torch.cat([x_t, x_bar]))
    le = nets.expr_disc(gradient_reverse(f_e, GRL_SCALE))
    li = nets.id_disc(gradient_reverse(f_i, GRL_SCALE))
    return (L.expression_consistency_loss(le[:n], le[n:]),
            L.identity_consistency_loss(li[:n], li[n:]))


def run_adversarial(state: TrainState, data: TrainingData, steps: int,
                    metrics: Callable = None, checkpoint: Callable = None) -> StageReport:
    report = None
    for _ in range(steps):
        batch = data.pair_batch(state.rng, state.opt_cfg.batch_size)
        report = adversarial_step(state, batch)
        if metrics:
            metrics({"step": state.global_step, "stage": "adversarial", **report.to_dict()})
        if checkpoint:
            checkpoint(state, boundary=False)
    return StageReport("adversarial", steps, report.to_dict() if report else {})


def run_curriculum(state: TrainState, data: TrainingData, budgets: StageBudgets,
                   metrics: Callable = None, checkpoint: Callable = None,
                   announce: Callable = None) -> list:
    """Run the remaining steps of every stage, resuming from ``state.stage``."""
    reports = []
    for which, stage in (("expr", "pretrain_expr"), ("id", "pretrain_id")):
        if state.stage != stage:
            continue
        remaining = max(0, budgets[stage] - state.stage_steps[stage])
        if announce:
            announce(f"stage {stage}: {remaining} step(s)")
        for _ in range(remaining):
            _pretrain(state, data, 1, which, metrics)
            if checkpoint:
                checkpoint(state, boundary=False)
        reports.append(StageReport(stage, remaining))
        state.advance_stage()
        if checkpoint:
            checkpoint(state, boundary=True)
    remaining = max(0, budgets.adversarial - state.stage_steps["adversarial"])
    if announce:
        announce(f"stage adversarial: {remaining} step(s)")
    reports.append(run_adversarial(state, data, remaining, metrics, checkpoint))
    if checkpoint:
        checkpoint(state, boundary=True)
    return reports


# ---------------------------------------------------------------------------
# Checkpoints
#
# layout: MAGIC | u64 header length | JSON header | torch payload | sha256 of all preceding bytes


def _payload(state: TrainState) -> bytes:
    blob = {
        "nets": state.nets.state_dict(),
        "heads": None if state.heads is None else state.heads.state_dict(),
        "frozen_expr": None if state.frozen_expr is None else state.frozen_expr.state_dict(),
        "frozen_id": None if state.frozen_id is None else state.frozen_id.state_dict(),
        "optimizers": {k: v.state_dict() for k, v in state.optimizers.items()},
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> None:
    """Write atomically: a failed write never replaces an existing checkpoint."""
    payload = _payload(state)
    header = {
        "format_version": FORMAT_VERSION,
        "network_spec": state.spec.to_dict(),
        "weights": state.weights.to_dict(),
        "optimizer": asdict(state.opt_cfg),
        "seed": state.seed,
        "stage": state.stage,
        "stage_steps": state.stage_steps,
        "global_step": state.global_step,
        "rng_state": state.rng.bit_generator.state,
        "payload_bytes": len(payload),
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<Q", len(head)) + head + payload
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    header, _ = _verify(raw)
    return header


def _verify(raw: bytes):
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (file corrupt or truncated)")
    (n,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + n])
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint format version {version} is not supported by this build "
            f"(expects version {FORMAT_VERSION})")
    return header, body[start + n:]


def load_checkpoint(path, expected_spec: Optional[NetworkSpec] = None) -> TrainState:
    raw = Path(path).read_bytes()
    header, payload = _verify(raw)
    spec = NetworkSpec.from_dict(header["network_spec"])
    if expected_spec is not None and spec != expected_spec:
        diff = {k: (v, getattr(expected_spec, k)) for k, v in spec.to_dict().items()
                if getattr(expected_spec, k) != v}
        raise ConfigurationError(f"checkpoint NetworkSpec differs from the requested one: {diff}")
    blob = torch.load(io.BytesIO(payload), weights_only=True)
    state = TrainState(spec, L.LossWeights.from_dict(header["weights"]),
                       OptimizerConfig(**header["optimizer"]), header["seed"])
    state.nets.load_state_dict(blob["nets"])
    state.stage = header["stage"]
    state.stage_steps = dict(header["stage_steps"])
    state.global_step = header["global_step"]
    state.rng.bit_generator.state = header["rng_state"]
    if blob["heads"] is None:
        state.heads = None
    else:
        state.heads.load_state_dict(blob["heads"])
    for which in ("expr", "id"):
        sd = blob[f"frozen_{which}"]
        if sd is not None:
            state.freeze(which)
            getattr(state, f"frozen_{which}").load_state_dict(sd)
    for name, sd in blob["optimizers"].items():
        state.optimizer(name).load_state_dict(sd)
    return state
