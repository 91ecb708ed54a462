"""Measurement protocols built on the attack.

Dynamic evaluation runs the attack once per image and reports mean and
median pixel counts over successes plus the fooling rate over all attempts.
Static m-pixel rates are read off the same runs by thresholding the final
pixel counts. Further studies cover targeted attacks, the kappa sweep with
transfer to victim models, component ablation, the sign-vs-direction
ablation, and detectability by a trained binary classifier.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import (
    PIXEL_MAX,
    AttackConfig,
    AttackError,
    AttackResult,
    dense_sign_attack,
    greedyfool,
    is_adversarial,
    pixel_mask,
    weight_map,
)
from .data import LabeledImageSet
from .nn import TrainConfig, train_binary_detector

logger = logging.getLogger(__name__)

STATIC_BUDGETS = (10, 20, 50, 100, 200)


@dataclass
class EvaluationReport:
    """Per-image attack results plus the aggregates derived from them."""

    results: list[AttackResult]
    image_ids: list[int]
    config: AttackConfig
    seconds: float = 0.0
    kind: str = "dynamic"
    extra: dict = field(default_factory=dict)
    errors: list[tuple[int, str]] = field(default_factory=list)
    positions: list[int] | None = None

    def __post_init__(self):
        if self.positions is None:
            self.positions = list(range(len(self.results)))

    @property
    def adversarial(self) -> np.ndarray:
        return np.stack([r.adversarial for r in self.results])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.results], dtype=np.int64)

    @property
    def attempted(self) -> int:
        return len(self.results)

    @property
    def successes(self) -> list[AttackResult]:
        return [r for r in self.results if r.success]

    @property
    def pixel_counts(self) -> np.ndarray:
        return np.array([r.pixel_count for r in self.successes], dtype=np.float64)

    @property
    def fooling_rate(self) -> float:
        return 100.0 * len(self.successes) / self.attempted if self.attempted else 0.0

    @property
    def mean_pixels(self) -> float:
        counts = self.pixel_counts
        return float(counts.mean()) if counts.size else float("nan")

    @property
    def median_pixels(self) -> float:
        counts = self.pixel_counts
        return float(np.median(counts)) if counts.size else float("nan")

    def summary(self) -> dict:
        def finite(v):
            return None if np.isnan(v) else round(v, 4)

        out = {
            "kind": self.kind,
            "attempted": self.attempted,
            "succeeded": len(self.successes),
            "fooling_rate": round(self.fooling_rate, 4),
            "mean_pixels": finite(self.mean_pixels),
            "median_pixels": finite(self.median_pixels),
            "seconds": round(self.seconds, 3),
            "errors": len(self.errors),
            "eps": self.config.eps,
            "kappa": self.config.kappa,
            "reduce": self.config.reduces,
            "distortion": self.config.distortion,
            "q": self.config.q,
        }
        out.update(self.extra)
        return out

    def records(self) -> list[dict]:
        return [r.to_record(i, self.config) for i, r in zip(self.image_ids, self.results)]


def select_correct(models, dataset: LabeledImageSet, n: int | None = None) -> LabeledImageSet:
    """First ``n`` images (dataset order) that every model classifies correctly.

    ``provenance["indices"]`` records the positions in ``dataset``.
    """
    models = models if isinstance(models, (list, tuple)) else [models]
    ok = np.ones(len(dataset), dtype=bool)
    for m in models:
        ok &= m.predict(dataset.images) == dataset.labels
    idx = np.flatnonzero(ok)[:n]
    sub = dataset.subset(idx)
    sub.provenance["indices"] = idx.tolist()
    return sub


def _weights_for(maps, i: int, config: AttackConfig):
    if maps is None:
        return None
    return weight_map(maps[i], config.tau_percentiles)


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _image_ids(images: LabeledImageSet) -> list[int]:
    return list(images.provenance.get("indices", range(len(images))))


def dynamic_evaluation(model, images: LabeledImageSet, config: AttackConfig, *,
                       maps=None, targets=None, jobs: int = 1, kind: str = "dynamic") -> EvaluationReport:
    """Attack every image once and aggregate.

    ``maps`` is an optional (N, H, W) stack of distortion maps (one per
    image); ``targets`` optional per-image target classes.
    """
    if len(images) == 0:
        raise ValueError("empty image set")
    if maps is not None and len(maps) != len(images):
        raise ValueError(f"{len(maps)} distortion maps for {len(images)} images")
    start = time.perf_counter()

    def run(i):
        cfg = config if targets is None else replace(config, target=int(targets[i]))
        try:
            res = greedyfool(model, images.images[i], int(images.labels[i]), cfg,
                             weights=_weights_for(maps, i, config))
        except AttackError as exc:
            logger.warning("image %d: %s", i, exc)
            return exc
        logger.debug("image %d: success=%s pixels=%d", i, res.success, res.pixel_count)
        return res

    outcomes = _map_jobs(run, range(len(images)), jobs)
    ids = _image_ids(images)
    results = [r for r in outcomes if isinstance(r, AttackResult)]
    kept = [i for i, r in zip(ids, outcomes) if isinstance(r, AttackResult)]
    errors = [(i, str(r)) for i, r in zip(ids, outcomes) if not isinstance(r, AttackResult)]
    positions = [p for p, r in enumerate(outcomes) if isinstance(r, AttackResult)]
    report = EvaluationReport(results, kept, config, time.perf_counter() - start, kind,
                              errors=errors, positions=positions)
    logger.info("%s evaluation: %s", kind, report.summary())
    return report


def static_evaluation(report: EvaluationReport, budgets=STATIC_BUDGETS) -> list[tuple[int, float]]:
    """m-pixel fooling rate: share of attempts that succeeded with <= m pixels."""
    counts = np.array([r.pixel_count if r.success else np.inf for r in report.results])
    n = max(report.attempted, 1)
    return [(int(m), 100.0 * float(np.sum(counts <= m)) / n) for m in budgets]


def merge_reports(*reports: EvaluationReport) -> EvaluationReport:
    if not reports:
        raise ValueError("nothing to merge")
    results, ids, errors = [], [], []
    for r in reports:
        results.extend(r.results)
        ids.extend(r.image_ids)
        errors.extend(r.errors)
    return EvaluationReport(results, ids, reports[0].config, sum(r.seconds for r in reports),
                            reports[0].kind, errors=errors)


def sample_targets(labels, n_classes: int, seed: int = 0) -> np.ndarray:
    """One target per image, uniform over the classes other than its label."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    shift = rng.integers(1, n_classes, size=len(labels))
    return (labels + shift) % n_classes


def target_evaluation(model, images: LabeledImageSet, config: AttackConfig, *, targets=None,
                      seed: int = 0, maps=None, jobs: int = 1) -> EvaluationReport:
    """Targeted variant: success means the prediction equals the target."""
    if targets is None:
        targets = sample_targets(images.labels, model.n_classes, seed)
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) != len(images):
        raise ValueError(f"{len(targets)} targets for {len(images)} images")
    clash = np.flatnonzero(targets == images.labels)
    if clash.size:
        raise ValueError(f"target equals the true label for image {int(clash[0])}")
    report = dynamic_evaluation(model, images, config, maps=maps, targets=targets, jobs=jobs,
                                kind="target")
    report.extra["targets"] = targets.tolist()
    return report


def _check_compatible(source, victims):
    for name, v in victims.items():
        if v.spec.shape != source.spec.shape or v.n_classes != source.n_classes:
            raise ValueError(f"victim {name!r} has input {v.spec.shape}/{v.n_classes} classes, "
                             f"source has {source.spec.shape}/{source.n_classes}")


@dataclass
class TransferRow:
    kappa: float
    report: EvaluationReport
    victim_rates: dict[str, float]

    def summary(self) -> dict:
        return {
            "kappa": self.kappa,
            "mean_pixels": self.report.mean_pixels,
            "median_pixels": self.report.median_pixels,
            "white_box_rate": self.report.fooling_rate,
            **{f"transfer_{k}": v for k, v in self.victim_rates.items()},
        }


def transfer_study(source, victims, images: LabeledImageSet, kappa_grid=(0, 1, 2, 3, 4, 5, 6),
                   config: AttackConfig | None = None, *, jobs: int = 1) -> list[TransferRow]:
    """Increase-stage-only attacks for each kappa; fooling rate on each victim.

    The transfer rate for a victim is the share of attempted images whose
    adversarial version the victim misclassifies (failed white-box attempts
    count as the victim's prediction on the final iterate).
    """
    config = config or AttackConfig()
    if not isinstance(victims, dict):
        victims = {f"victim{i}": v for i, v in enumerate(victims)}
    _check_compatible(source, victims)
    rows = []
    for kappa in kappa_grid:
        cfg = replace(config, kappa=float(kappa), reduce=False)
        report = dynamic_evaluation(source, images, cfg, jobs=jobs, kind="transfer")
        adv = report.adversarial
        rates = {name: 100.0 * float(np.mean(v.predict(adv) != report.labels))
                 for name, v in victims.items()}
        report.extra["kappa"] = float(kappa)
        rows.append(TransferRow(float(kappa), report, rates))
        logger.info("kappa %s: %s", kappa, rows[-1].summary())
    return rows


def detector_accuracy(clean: np.ndarray, adversarial: np.ndarray,
                      config: TrainConfig | None = None) -> float:
    """Held-out accuracy of a binary CNN trained to tell clean from attacked.

    Around 50% means the perturbations are invisible to the detector.
    """
    det = train_binary_detector(clean, adversarial, config or TrainConfig(epochs=10, lr=1e-3))
    return float(det.metadata["heldout_accuracy"])


ABLATION_ROWS = (
    ("Incr", False, False),
    ("Incr+Reduce", True, False),
    ("Incr+Dis", False, True),
    ("Incr+Reduce+Dis", True, True),
)


def component_ablation(model, images: LabeledImageSet, config: AttackConfig, maps, *,
                       detector: TrainConfig | None = None, jobs: int = 1) -> list[dict]:
    """Four rows toggling the reduce stage and distortion guidance.

    With ``detector`` set, each row also reports the held-out accuracy of a
    detector trained on that row's adversarial images.
    """
    if maps is None:
        raise ValueError("component ablation needs distortion maps")
    rows = []
    for name, reduce, dis in ABLATION_ROWS:
        cfg = replace(config, reduce=reduce, distortion=config.distortion if dis else "none")
        rep = dynamic_evaluation(model, images, cfg, maps=maps if dis else None, jobs=jobs,
                                 kind="ablation")
        row = {"variant": name, "mean_pixels": rep.mean_pixels, "median_pixels": rep.median_pixels,
               "fooling_rate": rep.fooling_rate}
        if detector is not None:
            row["detector_accuracy"] = 100.0 * detector_accuracy(images.images[rep.positions],
                                                                 rep.adversarial, detector)
        row["report"] = rep
        rows.append(row)
    return rows


def direction_study(model, images: LabeledImageSet, config: AttackConfig,
                    qs=(0, 25, 50, 75, 100), *, jobs: int = 1) -> list[dict]:
    """Increase-stage pixel counts when the step is rescaled by percentile q.

    ``cosine`` is the mean, over images and iterations, of the cosine
    between the masked gradient and the step actually taken.
    """
    rows = []
    for q in qs:
        cfg = replace(config, q=float(q), reduce=False)
        rep = dynamic_evaluation(model, images, cfg, jobs=jobs, kind="direction")
        cos = [c for r in rep.results for c in r.cosines]
        rows.append({"q": float(q), "cosine": float(np.mean(cos)) if cos else 1.0,
                     "mean_pixels": rep.mean_pixels, "median_pixels": rep.median_pixels,
                     "fooling_rate": rep.fooling_rate, "report": rep})
    return rows


def detector_study(model, images: LabeledImageSet, config: AttackConfig, *, maps=None,
                   baseline_eps: float = 4.0, baseline_steps: int = 10,
                   detector: TrainConfig | None = None, jobs: int = 1) -> dict:
    """Detector accuracy on GreedyFool outputs versus a dense I-FGSM baseline."""
    rep = dynamic_evaluation(model, images, config, maps=maps, jobs=jobs, kind="detector")
    ours = rep.adversarial
    dense = np.stack([dense_sign_attack(model, x, int(y), baseline_eps, baseline_steps)
                      for x, y in zip(images.images, images.labels)])
    dense_rate = 100.0 * float(np.mean(model.predict(dense) != images.labels))
    return {
        "greedyfool_detector_accuracy": 100.0 * detector_accuracy(images.images[rep.positions], ours,
                                                                  detector),
        "dense_detector_accuracy": 100.0 * detector_accuracy(images.images, dense, detector),
        "greedyfool_fooling_rate": rep.fooling_rate,
        "dense_fooling_rate": dense_rate,
        "greedyfool_mean_pixels": rep.mean_pixels,
    }


def audit_result(x, result: AttackResult, config: AttackConfig, model=None,
                 weights=None) -> list[str]:
    """Invariant violations for one attack output (empty list when clean).

    Checks the reported count against the perturbation, the L-inf and value
    range bounds, monotone mask growth bounded by the k schedule, the Stage 2 iteration bound, that
    zero-weight pixels stay untouched and (given ``model``) that a reported
    success really is adversarial.
    """
    x = np.asarray(x, dtype=np.float64)
    bad = []
    pert = result.adversarial - x
    if not np.array_equal(pert, result.perturbation):
        bad.append("perturbation != adversarial - image")
    if result.pixel_count != int(pixel_mask(pert).sum()):
        bad.append(f"pixel_count {result.pixel_count} != mask size {int(pixel_mask(pert).sum())}")
    if np.abs(pert).max(initial=0.0) > config.eps + 1e-9:
        bad.append(f"L-inf {np.abs(pert).max():.6g} exceeds eps {config.eps}")
    if result.adversarial.min() < 0 or result.adversarial.max() > PIXEL_MAX:
        bad.append("adversarial image leaves [0, 255]")
    if np.any(np.diff(result.mask_sizes) < 0):
        bad.append("stage 1 mask shrank")
    if len(result.k_used) == len(result.mask_sizes) and result.mask_sizes:
        growth = np.diff([0, *result.mask_sizes])
        if np.any(growth > np.asarray(result.k_used)):
            bad.append("stage 1 added more pixels than scheduled")
    if result.mask_sizes and result.stage1_pixel_count > result.mask_sizes[-1]:
        bad.append("more perturbed pixels than selected")
    if result.stage2_iterations > result.stage1_pixel_count:
        bad.append("stage 2 ran past its budget")
    if result.pixel_count > result.stage1_pixel_count:
        bad.append("reduce stage grew the perturbation")
    if weights is not None and np.any(pixel_mask(pert) & (np.asarray(weights) == 0)):
        bad.append("zero-weight pixel perturbed")
    if model is not None and result.success:
        cfg = replace(config, target=result.target)
        if not is_adversarial(model.logits(result.adversarial), result.label, cfg):
            bad.append("reported success is not adversarial")
    return bad
