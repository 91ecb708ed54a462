import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greedyfool.attack import AttackConfig, AttackResult
from greedyfool.data import LabeledImageSet
from greedyfool.distortion import variance_distortion
from greedyfool.evaluation import (
    ABLATION_ROWS,
    EvaluationReport,
    audit_result,
    component_ablation,
    direction_study,
    dynamic_evaluation,
    merge_reports,
    sample_targets,
    select_correct,
    static_evaluation,
    target_evaluation,
    transfer_study,
)
from greedyfool.nn import ConvClassifier, InputSpec

SPEC = InputSpec(1, 8, 8)


def model(seed=0, classes=4, widths=(4, 4), spec=SPEC):
    return ConvClassifier.create(spec, classes=classes, widths=widths, hidden=8, seed=seed,
                                 dtype=np.float64)


def image_set(m, n=6, seed=0):
    images = np.random.default_rng(seed).uniform(0, 255, (n, *m.spec.shape))
    return LabeledImageSet(images, m.predict(images), "test", m.n_classes)


def fake_result(pixels, success=True):
    x = np.zeros((1, 2, 2))
    return AttackResult(adversarial=x, perturbation=x, success=success, pixel_count=pixels,
                        stage1_pixel_count=pixels, stage1_iterations=1, stage2_iterations=0,
                        predicted=1, margin=-1.0, label=0)


def test_pre_fooled_set():
    m = model()
    data = image_set(m)
    wrong = LabeledImageSet(data.images, (data.labels + 1) % 4, "test", 4)
    rep = dynamic_evaluation(m, wrong, AttackConfig())
    assert rep.mean_pixels == 0 and rep.median_pixels == 0 and rep.fooling_rate == 100
    assert static_evaluation(rep, [0]) == [(0, 100.0)]


def test_empty_set_rejected():
    m = model()
    empty = LabeledImageSet(np.zeros((0, 1, 8, 8)), np.zeros(0), "test", 4)
    with pytest.raises(ValueError):
        dynamic_evaluation(m, empty, AttackConfig())


def test_eps255_fools_everything_and_audits_clean():
    m = model(1)
    data = image_set(m, 8, 1)
    rep = dynamic_evaluation(m, data, AttackConfig(eps=255))
    assert rep.fooling_rate == 100
    for x, r in zip(data.images, rep.results):
        assert audit_result(x, r, rep.config, m) == []


def test_reproducible_and_parallel_equal():
    m = model(2)
    data = image_set(m, 6, 2)
    cfg = AttackConfig(eps=60)
    a = dynamic_evaluation(m, data, cfg)
    b = dynamic_evaluation(m, data, cfg, jobs=3)
    drop = lambda s: {k: v for k, v in s.items() if k != "seconds"}  # noqa: E731
    assert drop(a.summary()) == drop(b.summary())
    assert np.array_equal(a.adversarial, b.adversarial)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 300), st.booleans()), min_size=1, max_size=12),
       st.lists(st.tuples(st.integers(0, 300), st.booleans()), min_size=1, max_size=12))
def test_merge_gives_weighted_mean(a, b):
    cfg = AttackConfig()
    ra = EvaluationReport([fake_result(p, s) for p, s in a], list(range(len(a))), cfg)
    rb = EvaluationReport([fake_result(p, s) for p, s in b], list(range(len(b))), cfg)
    merged = merge_reports(ra, rb)
    na, nb = len(ra.successes), len(rb.successes)
    assert merged.attempted == len(a) + len(b)
    if na + nb:
        parts = [r.mean_pixels * len(r.successes) for r in (ra, rb) if r.successes]
        assert merged.mean_pixels == pytest.approx(sum(parts) / (na + nb))
    rate = (ra.fooling_rate * len(a) + rb.fooling_rate * len(b)) / (len(a) + len(b))
    assert merged.fooling_rate == pytest.approx(rate)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 400), st.booleans()), min_size=1, max_size=20))
def test_static_curve_properties(outcomes):
    rep = EvaluationReport([fake_result(p, s) for p, s in outcomes], list(range(len(outcomes))),
                           AttackConfig())
    curve = static_evaluation(rep, [0, 10, 20, 50, 100, 200, 400])
    rates = [r for _, r in curve]
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    assert rates[-1] == pytest.approx(rep.fooling_rate)
    zero = sum(1 for p, s in outcomes if s and p == 0) / len(outcomes) * 100
    assert rates[0] == pytest.approx(zero)
    assert all(0 <= r <= 100 for r in rates)


def test_failures_excluded_from_mean_but_counted_in_rate():
    rep = EvaluationReport([fake_result(4), fake_result(10), fake_result(90, False)], [0, 1, 2],
                           AttackConfig())
    assert rep.mean_pixels == 7 and rep.median_pixels == 7
    assert rep.fooling_rate == pytest.approx(200 / 3)
    empty = EvaluationReport([fake_result(3, False)], [0], AttackConfig())
    assert np.isnan(empty.mean_pixels) and empty.summary()["mean_pixels"] is None


def test_sample_targets_avoid_label():
    labels = np.arange(100) % 10
    t = sample_targets(labels, 10, seed=3)
    assert np.all(t != labels) and np.all((t >= 0) & (t < 10))
    assert np.array_equal(t, sample_targets(labels, 10, seed=3))


def test_target_evaluation():
    m = model(3)
    data = image_set(m, 6, 3)
    cfg = AttackConfig(eps=255)
    rep = target_evaluation(m, data, cfg, seed=1)
    for r, t in zip(rep.results, rep.extra["targets"]):
        if r.success:
            assert r.predicted == t
    plain = dynamic_evaluation(m, data, cfg)
    assert rep.fooling_rate <= plain.fooling_rate
    with pytest.raises(ValueError):
        target_evaluation(m, data, cfg, targets=data.labels)


def test_two_class_target_equals_untargeted():
    m = model(4, classes=2)
    data = image_set(m, 6, 4)
    cfg = AttackConfig(eps=80)
    a = dynamic_evaluation(m, data, cfg)
    b = target_evaluation(m, data, cfg, targets=1 - data.labels)
    assert [r.pixel_count for r in a.results] == [r.pixel_count for r in b.results]
    assert np.array_equal(a.adversarial, b.adversarial)


def test_transfer_self_victim_and_incompatible():
    m = model(5)
    data = image_set(m, 5, 5)
    # logits of this untrained net span ~0.5, so kappa is scaled to match
    rows = transfer_study(m, {"self": m}, data, kappa_grid=(0, 0.2), config=AttackConfig(eps=255))
    for row in rows:
        assert row.report.fooling_rate == 100 and row.victim_rates["self"] == 100
        assert row.report.config.reduce is False
        assert all(r.stage2_iterations == 0 for r in row.report.results)
    assert rows[1].report.median_pixels >= rows[0].report.median_pixels
    other = model(6, spec=InputSpec(1, 6, 6))
    with pytest.raises(ValueError):
        transfer_study(m, [other], data, kappa_grid=(0,))


def test_component_ablation_rows():
    m = model(7)
    data = image_set(m, 4, 7)
    maps = np.stack([variance_distortion(x) for x in data.images])
    rows = component_ablation(m, data, AttackConfig(eps=255, distortion="variance"), maps)
    assert [r["variant"] for r in rows] == [name for name, _, _ in ABLATION_ROWS]
    incr, reduced = rows[0], rows[1]
    assert reduced["mean_pixels"] <= incr["mean_pixels"]
    for row, (_, reduce, dis) in zip(rows, ABLATION_ROWS):
        assert row["report"].config.reduce is reduce
        assert (row["report"].config.distortion != "none") is dis
    with pytest.raises(ValueError):
        component_ablation(m, data, AttackConfig(), None)


def test_direction_study_rows():
    m = model(8)
    data = image_set(m, 4, 8)
    rows = direction_study(m, data, AttackConfig(eps=60), qs=(0, 100))
    assert rows[0]["cosine"] == pytest.approx(1.0)
    assert rows[1]["cosine"] <= rows[0]["cosine"]


def test_select_correct_records_indices():
    m = model(9)
    data = image_set(m, 6, 9)
    labels = data.labels.copy()
    labels[[1, 4]] = (labels[[1, 4]] + 1) % 4
    chosen = select_correct(m, LabeledImageSet(data.images, labels, "test", 4), n=3)
    assert chosen.provenance["indices"] == [0, 2, 3]
