"""Margin (C&W-style) losses in plain-numpy and differentiable form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOSS_KINDS = ("margin", "target", "cross_entropy")


@dataclass(frozen=True)
class LossSpec:
    """Which scalar loss to differentiate.

    ``kind`` is ``"margin"`` (non-target, ``label`` is the true class),
    ``"target"`` (``label`` is the target class) or ``"cross_entropy"``.
    """

    kind: str
    label: int
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


def _check_scores(scores, label: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size < 2:
        raise ValueError("need at least two class scores")
    if not 0 <= label < scores.size:
        raise ValueError(f"label {label} out of range for {scores.size} classes")
    return scores


def raw_margin(scores, y: int) -> float:
    """scores[y] - max_{i != y} scores[i] (no clamping)."""
    scores = _check_scores(scores, y)
    return float(scores[y] - np.max(np.delete(scores, y)))


def margin_loss(scores, y: int, kappa: float = 0.0) -> float:
    """max(scores[y] - max_{i != y} scores[i], -kappa)."""
    return max(raw_margin(scores, y), -float(kappa))


def target_margin_loss(scores, tar: int, kappa: float = 0.0) -> float:
    """max(max_{i != tar} scores[i] - scores[tar], -kappa)."""
    return max(-raw_margin(scores, tar), -float(kappa))


def loss_value(scores, spec: LossSpec) -> float:
    if spec.kind == "margin":
        return margin_loss(scores, spec.label, spec.kappa)
    if spec.kind == "target":
        return target_margin_loss(scores, spec.label, spec.kappa)
    scores = _check_scores(scores, spec.label)
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[spec.label])


def loss_tensor(logits: ad.Tensor, spec: LossSpec) -> ad.Tensor:
    """Differentiable version of :func:`loss_value` for a (1, K) logits row."""
    k = logits.shape[-1]
    if not 0 <= spec.label < k:
        raise ValueError(f"label {spec.label} out of range for {k} classes")
    if spec.kind == "cross_entropy":
        return ad.softmax_cross_entropy(logits, [spec.label])
    row = ad.reshape(logits, (k,))
    others = [i for i in range(k) if i != spec.label]
    best_other = ad.reduce_max(ad.take(row, np.array(others)), axis=0)
    own = ad.take(row, spec.label)
    diff = own - best_other if spec.kind == "margin" else best_other - own
    floor = ad.Tensor(np.asarray(-float(spec.kappa), dtype=logits.dtype))
    return ad.maximum(diff, floor)
