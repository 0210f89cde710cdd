"""Generator loss terms and the per-sample loss-composition rule."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from dwih.errors import InputError, ShapeError
from dwih.signal_model import MetaInfo

BCE_EPS = 1e-7

# b-value windows (inclusive) in which the consistency term is switched on
CONSISTENCY_LOW_B = (50.0, 100.0)
CONSISTENCY_HIGH_B = (800.0, 1000.0)
REFERENCE_PAIR = (50.0, 800.0)


class Term(enum.Enum):
    DET = "det"
    CUT = "cut"
    CONSISTENCY = "consistency"


@dataclass(frozen=True)
class LossSpec:
    """Set of loss terms summed (with unit weight) for one sample."""

    terms: frozenset

    def __post_init__(self):
        terms = frozenset(self.terms)
        if not terms:
            raise InputError("a loss spec needs at least one term")
        if Term.CUT not in terms:
            raise InputError("every loss composition includes the contrastive term")
        object.__setattr__(self, "terms", terms)

    def __contains__(self, term) -> bool:
        return term in self.terms

    def names(self) -> list[str]:
        return [t.value for t in Term if t in self.terms]


@dataclass(frozen=True)
class SampleContext:
    meta: MetaInfo
    in_training_set: bool


def in_consistency_window(meta: MetaInfo) -> bool:
    return (
        CONSISTENCY_LOW_B[0] <= meta.low_b <= CONSISTENCY_LOW_B[1]
        and CONSISTENCY_HIGH_B[0] <= meta.high_b <= CONSISTENCY_HIGH_B[1]
    )


def is_reference_pair(meta: MetaInfo) -> bool:
    """Exact standard-domain pair used for labelling reference data."""
    return (meta.low_b, meta.high_b) == REFERENCE_PAIR


def loss_select(ctx: SampleContext) -> LossSpec:
    if not ctx.in_training_set:
        return LossSpec({Term.CUT})
    if in_consistency_window(ctx.meta):
        return LossSpec({Term.DET, Term.CUT, Term.CONSISTENCY})
    return LossSpec({Term.DET, Term.CUT})


def bce_loss(pred, target) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


def mse_consistency(generated, original) -> float:
    a = np.asarray(generated, dtype=np.float64)
    b = np.asarray(original, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"generated shape {a.shape} != original shape {b.shape}")
    return float(np.mean((a - b) ** 2))
