"""Loss terms of the TER-GAN objective.

Maximisation objectives are implemented as their negations so that every
network is trained by a minimising optimizer. Every term is a batch mean.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from ._validation import ConfigurationError, DivergenceError, ValidationError
from .networks import DiscriminatorOutput

DEFAULT_OMEGA = (0.5, 0.6, 0.7, 0.88, 0.99)


@dataclass
class LossWeights:
    lambda1: float = 1.0  # identity feature loss
    lambda2: float = 1.0  # expression feature loss
    lambda3: float = 1.0  # identity (x_t) pixel reconstruction
    lambda4: float = 1.0  # expression (x_s) pixel reconstruction
    lambda5: float = 0.3  # identity consistency
    lambda6: float = 0.3  # expression consistency
    lambda7: float = 0.5  # adversarial
    omega1: list = field(default_factory=lambda: list(DEFAULT_OMEGA))
    omega2: list = field(default_factory=lambda: list(DEFAULT_OMEGA))

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            values = v if isinstance(v, (list, tuple)) else [v]
            if any(not math.isfinite(float(x)) or float(x) < 0 for x in values):
                raise ConfigurationError(f"loss weight {f.name} must be finite and >= 0")
        if len(self.omega1) != 5 or len(self.omega2) != 5:
            raise ConfigurationError("omega1 and omega2 must have 5 entries")

    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4,
                self.lambda5, self.lambda6, self.lambda7)

    def scaled(self, factor: float) -> "LossWeights":
        d = asdict(self)
        for i in range(1, 8):
            d[f"lambda{i}"] *= factor
        return LossWeights(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown LossWeights keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    d_real_expr: float = 0.0
    d_real_id: float = 0.0
    d_fake: float = 0.0
    g_expr: float = 0.0
    g_id: float = 0.0
    expr_consist: float = 0.0
    id_consist: float = 0.0
    irec: float = 0.0
    erec: float = 0.0
    ef: float = 0.0
    if_: float = 0.0
    total: float = 0.0

    def parts(self) -> dict:
        """The seven weighted-total inputs, keyed as ``total_loss`` expects them."""
        return {
            "if_": self.if_, "ef": self.ef, "irec": self.irec, "erec": self.erec,
            "id_consist": self.id_consist, "expr_consist": self.expr_consist,
            "adv": self.g_expr + self.g_id,
        }

    def to_dict(self):
        return asdict(self)


TOTAL_TERMS = ("if_", "ef", "irec", "erec", "id_consist", "expr_consist", "adv")


def _check_labels(labels: Tensor, n_classes: int, name: str):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValidationError(f"{name} out of range [0, {n_classes - 1}]")


def _check_batch(*tensors):
    sizes = {int(t.shape[0]) for t in tensors}
    if len(sizes) != 1:
        raise ValidationError(f"batch sizes disagree: {sorted(sizes)}")


def discriminator_loss(d_real_src: DiscriminatorOutput, d_real_tgt: DiscriminatorOutput,
                       d_fake: DiscriminatorOutput, y_s: Tensor, y_t: Tensor,
                       reduce: bool = True):
    """Cross-entropy of D on real expressions, real identities and the fake class.

    With ``reduce=False`` the three terms are returned separately as
    ``(real_expr, real_id, fake)``.
    """
    _check_batch(d_real_src.expr_logits, d_real_tgt.id_logits, d_fake.expr_logits, y_s, y_t)
    n_expr = d_real_src.expr_logits.shape[1] - 1
    _check_labels(y_s, n_expr, "expression label")
    _check_labels(y_t, d_real_tgt.id_logits.shape[1], "identity label")
    fake = torch.full_like(y_s, n_expr)
    real_expr = F.cross_entropy(d_real_src.expr_logits, y_s)
    real_id = F.cross_entropy(d_real_tgt.id_logits, y_t)
    fake_term = F.cross_entropy(d_fake.expr_logits, fake)
    if not reduce:
        return real_expr, real_id, fake_term
    return real_expr + real_id + fake_term


def generator_adv_loss(d_fake: DiscriminatorOutput, y_s: Tensor, y_t: Tensor,
                       reduce: bool = True):
    """Push D to label the generated image with the source expression and target identity.

    The expression cross-entropy runs over all ``N_e + 1`` classes.
    """
    _check_batch(d_fake.expr_logits, d_fake.id_logits, y_s, y_t)
    _check_labels(y_s, d_fake.expr_logits.shape[1] - 1, "expression label")
    _check_labels(y_t, d_fake.id_logits.shape[1], "identity label")
    g_expr = F.cross_entropy(d_fake.expr_logits, y_s)
    g_id = F.cross_entropy(d_fake.id_logits, y_t)
    if not reduce:
        return g_expr, g_id
    return g_expr + g_id


def _consistency(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    _check_batch(logit_real, logit_fake)
    logits = torch.cat([logit_real.reshape(-1), logit_fake.reshape(-1)])
    targets = torch.cat([torch.ones_like(logit_real.reshape(-1)),
                         torch.zeros_like(logit_fake.reshape(-1))])
    return F.binary_cross_entropy_with_logits(logits, targets)


def expression_consistency_loss(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    """Binary cross-entropy of D_es: embeddings of x_s -> 1, of the generated image -> 0."""
    return _consistency(logit_real, logit_fake)


def identity_consistency_loss(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    """Binary cross-entropy of D_et: embeddings of x_t -> 1, of the generated image -> 0."""
    return _consistency(logit_real, logit_fake)


def pixel_recon_loss(generated: Tensor, reference: Tensor) -> Tensor:
    if generated.shape != reference.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(generated.shape)} vs {tuple(reference.shape)}")
    return (generated - reference).abs().mean()


def feature_match_loss(stack_gen: Sequence[Tensor], stack_ref: Sequence[Tensor],
                       omega: Sequence[float]) -> Tensor:
    if len(stack_gen) != len(stack_ref) or len(stack_gen) != len(omega):
        raise ValidationError(
            f"need equal numbers of layers and weights, got "
            f"{len(stack_gen)}, {len(stack_ref)}, {len(omega)}")
    total = stack_gen[0].new_zeros(())
    for w, a, b in zip(omega, stack_gen, stack_ref):
        if a.shape != b.shape:
            raise ValidationError(f"layer shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + float(w) * (a - b).abs().mean()
    return total


def total_loss(parts: dict, w: LossWeights):
    """Weighted sum in the fixed order if, ef, irec, erec, id_consist, expr_consist, adv.

    ``parts`` values may be floats or scalar tensors. A non-finite part
    raises :class:`DivergenceError` naming it.
    """
    missing = [t for t in TOTAL_TERMS if t not in parts]
    if missing:
        raise ValidationError(f"missing loss parts: {missing}")
    for name in TOTAL_TERMS:
        v = parts[name]
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise DivergenceError(name, v)
    total = 0.0
    for lam, name in zip(w.lambdas(), TOTAL_TERMS):
        total = total + lam * parts[name]
    return total
