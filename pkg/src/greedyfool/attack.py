"""Two-stage distortion-aware greedy sparse attack (GreedyFool).

Stage 1 grows a pixel mask by gradient saliency, weighted by a perturbation
weight map derived from a distortion map, and re-steps every selected pixel
each iteration until the image is adversarial. Stage 2 drops selected pixels
in order of increasing perturbation magnitude, re-checking adversariality
with a batched sweep of uniform step sizes 1..eps.

Images are (C, H, W) float arrays on the 0-255 scale. Masks and weight maps
are (H, W); channel magnitudes are aggregated by summing absolute values.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import LossSpec, margin_loss, raw_margin, target_margin_loss

__all__ = [
    "AttackConfig",
    "AttackResult",
    "Stage1Result",
    "AttackError",
    "DegenerateDistortionWarning",
    "margin_loss",
    "target_margin_loss",
    "weight_map",
    "increase_stage",
    "reduce_stage",
    "greedyfool",
    "direction_ablation",
    "cosine_similarity",
    "dense_sign_attack",
]

logger = logging.getLogger(__name__)

PIXEL_MAX = 255.0


class AttackError(RuntimeError):
    """The attack could not proceed (e.g. non-finite gradient)."""


class DegenerateDistortionWarning(UserWarning):
    """The distortion map is (near) constant, so the weight map is all ones."""


@dataclass(frozen=True)
class AttackConfig:
    """Attack parameters.

    ``k_schedule`` is ``"auto"`` (fixed k for eps >= 128, otherwise k grows
    by one each iteration), ``"fixed"`` or ``"increment"``; ``k`` is the
    starting select number. ``alpha`` defaults to eps / 2. ``q`` switches on
    the sign-vs-direction ablation of the Stage 1 step.
    """

    eps: float = 255.0
    max_iter: int = 200
    kappa: float = 0.0
    k: int = 1
    k_schedule: str = "auto"
    alpha: float | None = None
    tau_percentiles: tuple[float, float] = (70.0, 25.0)
    distortion: str = "none"
    target: int | None = None
    q: float | None = None
    reduce: bool = True
    reduce_budget: int | None = None

    def __post_init__(self):
        if not 0 < self.eps <= PIXEL_MAX:
            raise ValueError(f"eps must lie in (0, 255], got {self.eps}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k_schedule not in ("auto", "fixed", "increment"):
            raise ValueError(f"unknown k schedule {self.k_schedule!r}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        hi, lo = self.tau_percentiles
        if not 0 <= lo < hi <= 100:
            raise ValueError("tau percentiles must satisfy 0 <= low < high <= 100")
        if self.distortion not in ("gan", "variance", "none"):
            raise ValueError(f"unknown distortion source {self.distortion!r}")
        if self.q is not None and not 0 <= self.q <= 100:
            raise ValueError("q must lie in [0, 100]")
        if self.reduce_budget is not None and self.reduce_budget < 0:
            raise ValueError("reduce_budget must be >= 0")

    @property
    def step(self) -> float:
        return self.eps / 2 if self.alpha is None else self.alpha

    def k_at(self, t: int) -> int:
        schedule = self.k_schedule
        if schedule == "auto":
            schedule = "fixed" if self.eps >= 128 else "increment"
        return self.k if schedule == "fixed" else self.k + t

    @property
    def reduces(self) -> bool:
        return self.reduce and self.kappa == 0


@dataclass
class Stage1Result:
    adversarial: np.ndarray
    mask: np.ndarray
    iterations: int
    success: bool
    logits: np.ndarray
    selection_order: list[int] = field(default_factory=list)
    mask_sizes: list[int] = field(default_factory=list)
    k_used: list[int] = field(default_factory=list)
    cosines: list[float] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class AttackResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    success: bool
    pixel_count: int
    stage1_pixel_count: int
    stage1_iterations: int
    stage2_iterations: int
    predicted: int
    margin: float
    label: int
    target: int | None = None
    reduced: bool = False
    necessary: int = 0
    selection_order: list[int] = field(default_factory=list)
    mask_sizes: list[int] = field(default_factory=list)
    k_used: list[int] = field(default_factory=list)
    cosines: list[float] = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        return pixel_mask(self.perturbation)

    @property
    def iterations(self) -> int:
        return self.stage1_iterations + self.stage2_iterations

    def to_record(self, image_id=None, config: AttackConfig | None = None) -> dict:
        rec = {
            "image_id": image_id,
            "success": bool(self.success),
            "pixel_count": int(self.pixel_count),
            "stage1_pixel_count": int(self.stage1_pixel_count),
            "iterations": {"stage1": self.stage1_iterations, "stage2": self.stage2_iterations},
            "label": int(self.label),
            "target": self.target,
            "predicted": int(self.predicted),
            "margin": float(self.margin),
        }
        if config is not None:
            rec.update({"eps": config.eps, "kappa": config.kappa, "q": config.q,
                        "distortion": config.distortion})
        if self.cosines:
            rec["mean_cosine"] = float(np.mean(self.cosines))
        rec["timing"] = {k: round(v, 6) for k, v in self.timing.items()}
        if self.warnings:
            rec["warnings"] = list(self.warnings)
        return rec


def pixel_mask(r) -> np.ndarray:
    """(H, W) boolean mask of pixels with any non-zero channel."""
    return np.any(np.asarray(r) != 0, axis=0)


def weight_map(rho, tau_percentiles=(70.0, 25.0), *, _record: list | None = None) -> np.ndarray:
    """Perturbation weight p from distortion map rho.

    p = 0 where rho >= tau1, 1 where rho <= tau2 and linear in between,
    with tau1 / tau2 the given percentiles of rho. A map whose two
    percentiles coincide yields p = 1 everywhere and a warning.
    """
    rho = np.asarray(rho, dtype=np.float64)
    hi, lo = tau_percentiles
    tau1, tau2 = np.percentile(rho, hi), np.percentile(rho, lo)
    if not tau1 > tau2:
        msg = f"degenerate distortion map (tau1={tau1:.6g} == tau2={tau2:.6g}); using p = 1"
        warnings.warn(msg, DegenerateDistortionWarning, stacklevel=2)
        if _record is not None:
            _record.append(msg)
        return np.ones_like(rho)
    return np.clip((tau1 - rho) / (tau1 - tau2), 0.0, 1.0)


def direction_ablation(r, q: float) -> np.ndarray:
    """Rescale by the q-th largest-magnitude percentile and clamp to [-1, 1].

    q = 0 divides by the largest magnitude (direction kept); q = 100 divides
    by the smallest non-zero magnitude, which reduces to the sign.
    """
    r = np.asarray(r, dtype=np.float64)
    if not 0 <= q <= 100:
        raise ValueError("q must lie in [0, 100]")
    mags = np.abs(r[r != 0])
    if mags.size == 0:
        raise ValueError("direction_ablation needs a non-zero perturbation")
    s = np.percentile(mags, 100.0 - q)
    return np.clip(r / s, -1.0, 1.0)


def cosine_similarity(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _loss_spec(y: int, config: AttackConfig) -> LossSpec:
    if config.target is not None:
        return LossSpec("target", int(config.target), config.kappa)
    return LossSpec("margin", int(y), config.kappa)


def attack_margin(logits, y: int, target: int | None) -> float:
    """Unclamped loss the attack drives below -kappa."""
    return -raw_margin(logits, target) if target is not None else raw_margin(logits, y)


def is_adversarial(logits, y: int, config: AttackConfig) -> bool:
    logits = np.asarray(logits)
    pred = int(np.argmax(logits))
    hit = pred == config.target if config.target is not None else pred != y
    if not hit:
        return False
    return config.kappa == 0 or attack_margin(logits, y, config.target) <= -config.kappa


def _batch_adversarial(logits: np.ndarray, y: int, config: AttackConfig) -> np.ndarray:
    pred = np.argmax(logits, axis=1)
    if config.target is not None:
        hit = pred == config.target
        own = logits[:, config.target]
        others = np.delete(logits, config.target, axis=1).max(axis=1)
        marg = others - own
    else:
        hit = pred != y
        marg = logits[:, y] - np.delete(logits, y, axis=1).max(axis=1)
    if config.kappa > 0:
        hit &= marg <= -config.kappa
    return hit


def _bounds(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(x - eps, 0.0), np.minimum(x + eps, PIXEL_MAX)


def _validate(model, x, y, config):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got {x.shape}")
    if x.min() < 0 or x.max() > PIXEL_MAX:
        raise ValueError("image values must lie in [0, 255]")
    k = model.n_classes
    if not 0 <= y < k:
        raise ValueError(f"label {y} out of range for {k} classes")
    if config.target is not None:
        if not 0 <= config.target < k:
            raise ValueError(f"target {config.target} out of range for {k} classes")
        if config.target == y:
            raise ValueError("target label equals the true label")
    return x


def increase_stage(model, x, y: int, config: AttackConfig, rho=None, *,
                   weights=None, _warnings: list | None = None) -> Stage1Result:
    """Stage 1: add the top-k salient pixels per iteration until adversarial.

    Saliency is p * (1 - m) * sum_c |g|; every selected pixel then moves by
    a descent step of size alpha along the masked gradient scaled by its
    largest magnitude, and the image is projected onto the eps box within
    [0, 255]. With kappa > 0 it continues until the margin is <= -kappa.
    """
    start = time.perf_counter()
    x = _validate(model, x, y, config)
    c, h, w = x.shape
    if weights is None:
        weights = np.ones((h, w)) if rho is None else weight_map(rho, config.tau_percentiles,
                                                                 _record=_warnings)
    p = np.asarray(weights, dtype=np.float64).reshape(-1)
    if p.shape != (h * w,):
        raise ValueError(f"weight map shape {np.shape(weights)} does not match image {x.shape}")
    lo, hi = _bounds(x, config.eps)
    spec = _loss_spec(y, config)
    mask = np.zeros(h * w, dtype=bool)
    x_adv = x.copy()
    out = Stage1Result(x_adv, mask.reshape(h, w), 0, False, None)
    _, logits, g = model.loss_and_gradient(x_adv, spec)
    t = 0
    while t < config.max_iter and not is_adversarial(logits, y, config):
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at iteration {t}")
        k = config.k_at(t)
        saliency = p * ~mask * np.abs(g).sum(axis=0).reshape(-1)
        cand = np.flatnonzero(saliency > 0)
        if cand.size:
            picked = cand[np.lexsort((cand, -saliency[cand]))][:k]
            mask[picked] = True
            out.selection_order.extend(int(i) for i in picked)
        out.k_used.append(k)
        out.mask_sizes.append(int(mask.sum()))
        gm = g * mask.reshape(1, h, w)
        if not gm.any():
            logger.debug("no selectable pixel with non-zero gradient; stopping at t=%d", t)
            break
        if config.q is None:
            step = gm / np.abs(gm).max()
        else:
            step = direction_ablation(gm, config.q)
            out.cosines.append(cosine_similarity(gm, step))
        x_adv = np.clip(x_adv - config.step * step, lo, hi)
        t += 1
        _, logits, g = model.loss_and_gradient(x_adv, spec)
    out.adversarial = x_adv
    out.mask = mask.reshape(h, w)
    out.iterations = t
    out.logits = logits
    out.success = is_adversarial(logits, y, config)
    out.seconds = time.perf_counter() - start
    return out


def _alpha_grid(eps: float) -> np.ndarray:
    n = int(math.floor(eps))
    return np.arange(1, n + 1, dtype=np.float64) if n >= 1 else np.array([eps])


def reduce_stage(model, x, x_adv, y: int, config: AttackConfig) -> AttackResult:
    """Stage 2: greedily drop the least-perturbed pixels that are not needed.

    For the candidate pixel with the smallest sum_c |r| outside the keep-set,
    zero it and try x + a * sign(r') for a = 1..eps in one batched forward;
    the smallest adversarial a is adopted, otherwise the pixel is kept.
    Ordering uses the Stage 1 magnitudes throughout.
    """
    start = time.perf_counter()
    x = _validate(model, x, y, config)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ValueError(f"adversarial shape {x_adv.shape} != image shape {x.shape}")
    entry_logits = model.logits(x_adv)
    if not is_adversarial(entry_logits, y, config):
        raise ValueError("reduce_stage needs an adversarial input")
    c, h, w = x.shape
    lo, hi = _bounds(x, config.eps)
    r = (x_adv - x).reshape(c, h * w)
    mag = np.abs(r).sum(axis=0)
    active = mag > 0
    keep = np.zeros(h * w, dtype=bool)
    initial = int(active.sum())
    budget = initial if config.reduce_budget is None else config.reduce_budget
    alphas = _alpha_grid(config.eps)[:, None, None, None]
    logits = entry_logits
    t = 0
    while t < budget:
        cand = np.flatnonzero(active & ~keep)
        if cand.size == 0:
            break
        d = cand[np.argmin(mag[cand])]
        r_new = r.copy()
        r_new[:, d] = 0.0
        trial = np.clip(x + alphas * np.sign(r_new).reshape(1, c, h, w), lo, hi)
        ok = np.flatnonzero(_batch_adversarial(model.logits(trial), y, config))
        # batched float32 logits can differ from a single forward in the last bits;
        # adopt only a candidate the single-image evaluation agrees with
        found = None
        for j in ok:
            single = model.logits(trial[j])
            if is_adversarial(single, y, config):
                found, logits = j, single
                break
        if found is not None:
            r = r_new
            active[d] = False
            x_adv = trial[found]
        else:
            keep[d] = True
        t += 1
    perturbation = x_adv - x
    return AttackResult(
        adversarial=x_adv,
        perturbation=perturbation,
        success=True,
        pixel_count=int(pixel_mask(perturbation).sum()),
        stage1_pixel_count=initial,
        stage1_iterations=0,
        stage2_iterations=t,
        predicted=int(np.argmax(logits)),
        margin=attack_margin(logits, y, config.target),
        label=int(y),
        target=config.target,
        reduced=True,
        necessary=int(keep.sum()),
        timing={"stage2": time.perf_counter() - start},
    )


def greedyfool(model, x, y: int, config: AttackConfig | None = None, rho=None, *,
               weights=None) -> AttackResult:
    """Run Stage 1 and, when it succeeds with kappa == 0, Stage 2.

    ``rho`` is an (H, W) distortion map in (0, 1); ``weights`` may be given
    instead as a precomputed perturbation weight map.
    """
    config = config or AttackConfig()
    notes: list[str] = []
    if config.reduce and config.kappa > 0:
        notes.append("kappa > 0: reduce stage skipped")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDistortionWarning)
        s1 = increase_stage(model, x, y, config, rho, weights=weights, _warnings=notes)
    x = np.asarray(x, dtype=np.float64)
    if s1.success and config.reduces:
        res = reduce_stage(model, x, s1.adversarial, y, config)
    else:
        pert = s1.adversarial - x
        res = AttackResult(
            adversarial=s1.adversarial,
            perturbation=pert,
            success=s1.success,
            pixel_count=int(pixel_mask(pert).sum()),
            stage1_pixel_count=int(pixel_mask(pert).sum()),
            stage1_iterations=0,
            stage2_iterations=0,
            predicted=int(np.argmax(s1.logits)),
            margin=attack_margin(s1.logits, y, config.target),
            label=int(y),
            target=config.target,
        )
    res.stage1_iterations = s1.iterations
    res.selection_order = s1.selection_order
    res.mask_sizes = s1.mask_sizes
    res.k_used = s1.k_used
    res.cosines = s1.cosines
    res.timing = {"stage1": s1.seconds, **res.timing}
    res.warnings = notes
    return res


def dense_sign_attack(model, x, y: int, eps: float = 4.0, steps: int = 10,
                      step: float | None = None) -> np.ndarray:
    """Iterative sign-gradient L-inf baseline (I-FGSM) touching every pixel.

    Ascends the cross-entropy of the true label for all ``steps``.
    """
    x = np.asarray(x, dtype=np.float64)
    step = eps / 4 if step is None else step
    lo, hi = _bounds(x, eps)
    spec = LossSpec("cross_entropy", int(y))
    x_adv = x.copy()
    for _ in range(steps):
        g = model.input_gradient(x_adv, spec)
        x_adv = np.clip(x_adv + step * np.sign(g), lo, hi)
    return x_adv


def with_target(config: AttackConfig, target: int | None) -> AttackConfig:
    return replace(config, target=target)
