import numpy as np
import pytest

from fedfsl.data import Dataset, make_synthetic_blobs
from fedfsl.diffcore import ModelSpec, ParamVector
from fedfsl.eval import (
    EvalPlan,
    dump_features,
    evaluate,
    pool_reports,
    predict_labels,
    separation_ratio,
    write_features_csv,
)
from fedfsl.fsl import InnerLoopConfig
from helpers import random_model, tiny_dataset


def _onehot_dataset(n_classes=5, per_class=20):
    inputs = np.repeat(np.eye(n_classes), per_class, axis=0)
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(inputs, labels, (), tuple(range(n_classes)))


def _identity_zero_classifier_model(n_classes=5):
    spec = ModelSpec(n_classes, n_classes, n_classes, ())
    values = np.zeros(spec.param_count)
    values[: n_classes * n_classes] = np.eye(n_classes).ravel()
    return spec, ParamVector.for_spec(spec, values)


def test_oracle_features_reach_perfect_accuracy():
    ds = _onehot_dataset()
    spec, w = _identity_zero_classifier_model()
    report = evaluate(
        spec, w, ds, ds.novel_indices, n_way=5, n_shot=1, n_query=5,
        episodes=50, inner_cfg=InnerLoopConfig(alpha=0.5), seed=0,
    )
    assert report.mean_accuracy == 1.0
    assert all(v == 1.0 for v in report.per_class_accuracy.values())


def test_untrained_model_sits_at_chance():
    ds = make_synthetic_blobs(10, 60, 6, 1.0, seed=1, n_novel=10)
    spec = ModelSpec(6, 4, 5, (8,))
    w = random_model(spec, 2)
    report = evaluate(
        spec, w, ds, ds.novel_indices, n_way=5, n_shot=1, n_query=15,
        episodes=600, inner_cfg=InnerLoopConfig(alpha=0.01), seed=3,
    )
    # binomial chance band over 600 episode means
    assert abs(report.mean_accuracy - 0.2) < 3 * np.sqrt(0.2 * 0.8 / 600)


def test_evaluate_rejects_zero_episodes():
    ds = _onehot_dataset()
    spec, w = _identity_zero_classifier_model()
    with pytest.raises(ValueError, match="no episodes"):
        evaluate(spec, w, ds, ds.novel_indices, 5, 1, 5, 0, InnerLoopConfig(), 0)


def test_argmax_ties_resolve_to_lowest_index():
    assert predict_labels(np.array([[1.0, 1.0, 0.0]])).tolist() == [0]
    assert predict_labels(np.array([[0.0, 2.0, 2.0]])).tolist() == [1]


def test_accuracy_invariant_under_monotone_logit_scaling():
    ds = make_synthetic_blobs(8, 40, 4, 1.0, seed=4, n_novel=8)
    spec = ModelSpec(4, 3, 4, ())
    w = random_model(spec, 5)
    scaled = w.with_segment("classifier", 3.0 * w.segment("classifier"))
    kwargs = dict(n_way=4, n_shot=1, n_query=6, episodes=80,
                  inner_cfg=InnerLoopConfig(alpha=0.0), seed=6)
    a = evaluate(spec, w, ds, ds.novel_indices, **kwargs)
    b = evaluate(spec, scaled, ds, ds.novel_indices, **kwargs)
    assert a.mean_accuracy == b.mean_accuracy
    assert np.array_equal(a.confusion, b.confusion)


def test_report_statistics_are_internally_consistent():
    ds = make_synthetic_blobs(8, 40, 4, 1.0, seed=7, n_novel=8)
    spec = ModelSpec(4, 3, 4, ())
    w = random_model(spec, 8)
    episodes, n_way, n_query = 40, 4, 6
    report = evaluate(spec, w, ds, ds.novel_indices, n_way, 1, n_query,
                      episodes, InnerLoopConfig(), seed=9)
    assert report.episodes_evaluated == episodes
    assert report.confusion.sum() == episodes * n_way * n_query
    trace_acc = np.trace(report.confusion) / report.confusion.sum()
    assert abs(report.mean_accuracy - trace_acc) < 1e-12
    assert abs(report.mean_accuracy - report.episode_accuracies.mean()) < 1e-12
    recomputed = 1.96 * np.std(report.episode_accuracies, ddof=1) / np.sqrt(episodes)
    assert abs(report.ci95_halfwidth - recomputed) < 1e-9
    for i, c in enumerate(report.class_ids):
        row = report.confusion[i].sum()
        if row:
            assert report.per_class_accuracy[c] == pytest.approx(
                report.confusion[i, i] / row
            )


def test_evaluate_never_mutates_the_model():
    ds = make_synthetic_blobs(8, 30, 4, 1.0, seed=10, n_novel=8)
    spec = ModelSpec(4, 3, 4, ())
    w = random_model(spec, 11)
    before = w.values.tobytes()
    evaluate(spec, w, ds, ds.novel_indices, 4, 1, 4, 10, InnerLoopConfig(), 12)
    assert w.values.tobytes() == before


def test_evaluate_deterministic_under_seed():
    ds = make_synthetic_blobs(8, 30, 4, 1.0, seed=13, n_novel=8)
    spec = ModelSpec(4, 3, 4, ())
    w = random_model(spec, 14)
    a = evaluate(spec, w, ds, ds.novel_indices, 4, 1, 4, 25, InnerLoopConfig(), 15)
    b = evaluate(spec, w, ds, ds.novel_indices, 4, 1, 4, 25, InnerLoopConfig(), 15)
    assert np.array_equal(a.episode_accuracies, b.episode_accuracies)
    assert np.array_equal(a.confusion, b.confusion)


def test_eval_plan_schedule():
    plan = EvalPlan(episodes=10, every=5)
    assert plan.due(4, 20) and plan.due(9, 20) and plan.due(19, 20)
    assert not plan.due(5, 20)
    final_only = EvalPlan(episodes=10, every=0)
    assert final_only.due(19, 20) and not plan.due(0, 20)
    assert not EvalPlan(episodes=0).due(19, 20)


def test_pool_reports_concatenates_episode_streams():
    ds = make_synthetic_blobs(8, 30, 4, 1.0, seed=16, n_novel=8)
    spec = ModelSpec(4, 3, 4, ())
    reports = [
        evaluate(spec, random_model(spec, s), ds, ds.novel_indices, 4, 1, 4,
                 20, InnerLoopConfig(), 17)
        for s in (18, 19)
    ]
    pooled = pool_reports(reports)
    assert pooled.episodes_evaluated == 40
    assert pooled.confusion.sum() == sum(r.confusion.sum() for r in reports)
    assert pooled.mean_accuracy == pytest.approx(
        np.trace(pooled.confusion) / pooled.confusion.sum()
    )


# ---------------------------------------------------------------------------
# feature dumps


def test_dump_features_zero_generator():
    spec = ModelSpec(4, 3, 2, ())
    w = ParamVector.for_spec(spec, np.zeros(spec.param_count))
    dump = dump_features(spec, w, np.random.default_rng(0).normal(size=(6, 4)),
                         np.zeros(6, dtype=int))
    assert np.all(dump.features == 0.0)


def test_dump_features_identity_generator():
    spec = ModelSpec(2, 2, 2, ())
    values = np.zeros(spec.param_count)
    values[0:4] = np.eye(2).ravel()
    w = ParamVector.for_spec(spec, values)
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    dump = dump_features(spec, w, x, np.array([0, 1]))
    np.testing.assert_allclose(dump.features, x)


def test_dump_features_matches_forward_oracle():
    from fedfsl.diffcore import forward_features

    ds = tiny_dataset(seed=20)
    spec = ModelSpec(ds.input_dim, 3, 3, (5,))
    w = random_model(spec, 21)
    dump = dump_features(spec, w, ds.inputs[:10], ds.labels[:10])
    np.testing.assert_allclose(dump.features, forward_features(spec, w, ds.inputs[:10]))
    W, b = dump.classifier_weight, dump.classifier_bias
    assert W.shape == (3, 3) and b.shape == (3,)


def test_features_csv_roundtrip(tmp_path):
    spec = ModelSpec(3, 2, 2, ())
    w = random_model(spec, 22)
    x = np.random.default_rng(23).normal(size=(5, 3))
    labels = np.array([0, 1, 0, 1, 1])
    dump = dump_features(spec, w, x, labels)
    path = tmp_path / "features.csv"
    write_features_csv(dump, path)
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "class,f1,f2"
    rows = np.array([[float(v) for v in l.split(",")] for l in lines[1:]])
    assert np.array_equal(rows[:, 0].astype(int), labels)
    np.testing.assert_allclose(rows[:, 1:], dump.features, rtol=1e-9)


def test_separation_ratio_orders_geometries():
    rng = np.random.default_rng(24)
    tight = np.concatenate([rng.normal(0, 0.1, (30, 2)) + [0, 0],
                            rng.normal(0, 0.1, (30, 2)) + [5, 5]])
    loose = np.concatenate([rng.normal(0, 2.0, (30, 2)) + [0, 0],
                            rng.normal(0, 2.0, (30, 2)) + [1, 1]])
    labels = np.repeat([0, 1], 30)
    spec = ModelSpec(2, 2, 2, ())
    values = np.zeros(spec.param_count)
    values[0:4] = np.eye(2).ravel()
    w = ParamVector.for_spec(spec, values)
    r_tight = separation_ratio(dump_features(spec, w, tight, labels))
    r_loose = separation_ratio(dump_features(spec, w, loose, labels))
    assert r_tight > r_loose
