import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neumat import lowering, profiler, pwl, training, zoo
from neumat.errors import ArgumentError, NumericalError, StructuralError
from neumat.training import TrainConfig


def gelu_plan(segments, seed=0, hidden=16, correct=True, X=None):
    g = zoo.mlp(hidden=hidden, seed=seed)
    if X is None:
        X, _ = zoo.blobs(200, seed=seed)
    rep = profiler.profile_ranges(g, [{"x": X}])
    tables = lowering.build_tables(rep, segments=segments, correct=correct)
    return g, lowering.lower_graph(g, tables, rep)


# ---------------------------------------------------------------- pwl_gradient

def test_relu_gradient():
    t = pwl.relu_table()
    assert training.pwl_gradient(t, -1.0) == 0.0
    assert training.pwl_gradient(t, 1.0) == 1.0


def test_breakpoint_takes_segment_starting_there():
    t = pwl.relu_table()
    assert training.pwl_gradient(t, 0.0) == t.k[pwl.segment_index(t, 0.0)] == 1.0


@given(st.floats(0.001, 0.999))
def test_single_segment_exp_gradient(x):
    t = pwl.vertical_bias_correction("exp", pwl.fit_uniform("exp", (0, 1), 1))
    assert training.pwl_gradient(t, x) == pytest.approx(math.e - 1, rel=1e-12)


def test_gradient_matches_central_difference_in_interiors():
    t = pwl.vertical_bias_correction("gelu", pwl.fit_uniform("gelu", (-8, 8), 32))
    h = 1e-4
    X = np.asarray(t.breakpoints)
    mids = (X[:-1] + X[1:]) / 2
    for x in np.concatenate([mids, X[:-1] + 3 * h, X[1:] - 3 * h]):
        fd = (pwl.evaluate(t, x + h) - pwl.evaluate(t, x - h)) / (2 * h)
        assert abs(fd - training.pwl_gradient(t, x)) <= 1e-6


def test_backward_uses_forward_segment():
    t = pwl.fit_uniform("tanh", (-3, 3), 12)
    xs = np.random.default_rng(0).uniform(-4, 4, 1000)
    idx = pwl.segment_index_batch(t, xs)
    assert np.array_equal(training.pwl_gradient(t, xs), np.asarray(t.k)[idx])


# ---------------------------------------------------------------- config

def test_config_validation():
    for bad in ({"lr": -1}, {"epochs": 0}, {"batch_size": 0}, {"acc_th": -0.1}, {"momentum": 1.0}):
        with pytest.raises(ArgumentError):
            TrainConfig(**bad)
    with pytest.raises(ArgumentError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    assert TrainConfig.from_dict({"lr": 0.5}).lr == 0.5


# ---------------------------------------------------------------- backprop

def test_gradient_check_against_finite_differences():
    X, y = zoo.blobs(64, seed=3)
    _, plan = gelu_plan(64, correct=False, X=X)
    params = {t: plan.constants[t].astype(np.float64) for t in plan.trainable}
    loss, grads, _ = training.loss_and_grads(plan, X, y, params)
    rng = np.random.default_rng(7)
    names = sorted(params)
    h = 1e-6
    checked = 0
    while checked < 20:
        name = names[rng.integers(len(names))]
        i = tuple(int(rng.integers(d)) for d in params[name].shape)
        p_plus = {k: v.copy() for k, v in params.items()}
        p_minus = {k: v.copy() for k, v in params.items()}
        p_plus[name][i] += h
        p_minus[name][i] -= h
        fd = (training.loss_and_grads(plan, X, y, p_plus)[0] - training.loss_and_grads(plan, X, y, p_minus)[0]) / (2 * h)
        an = grads[name][i]
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (name, i, fd, an)
        checked += 1


def test_exact_mode_gradient_check():
    X, y = zoo.blobs(32, seed=4)
    _, plan = gelu_plan(16, X=X)
    params = {t: plan.constants[t].astype(np.float64) for t in plan.trainable}
    _, grads, _ = training.loss_and_grads(plan, X, y, params, exact=True)
    name = plan.trainable[0]
    h = 1e-6
    for i in np.ndindex(params[name].shape):
        pp = {k: v.copy() for k, v in params.items()}
        pm = {k: v.copy() for k, v in params.items()}
        pp[name][i] += h
        pm[name][i] -= h
        fd = (training.loss_and_grads(plan, X, y, pp, exact=True)[0]
              - training.loss_and_grads(plan, X, y, pm, exact=True)[0]) / (2 * h)
        assert abs(fd - grads[name][i]) <= 1e-5 * max(1.0, abs(fd))


def test_softmax_xent_matches_direct_formula():
    r = np.random.default_rng(0)
    z = r.standard_normal((5, 3))
    y = np.array([0, 2, 1, 1, 0])
    loss, g = training.softmax_xent(z, y)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(5), y])), rel=1e-12)
    onehot = np.eye(3)[y]
    assert np.allclose(g, (p - onehot) / 5, atol=1e-15)


def test_conv_plan_gradients_flow_through_im2col_and_pool():
    g = zoo.cnn(channels=1, size=4, filters=2, classes=2, pool="MaxPool")
    plan = lowering.lower_graph(g)
    r = np.random.default_rng(1)
    X = r.standard_normal((6, 1, 4, 4)).astype(np.float32)
    y = np.array([0, 1, 0, 1, 1, 0])
    params = {t: plan.constants[t].astype(np.float64) for t in plan.trainable}
    _, grads, _ = training.loss_and_grads(plan, X, y, params)
    h = 1e-6
    for name in plan.trainable:
        i = tuple(0 for _ in params[name].shape)
        pp = {k: v.copy() for k, v in params.items()}
        pm = {k: v.copy() for k, v in params.items()}
        pp[name][i] += h
        pm[name][i] -= h
        fd = (training.loss_and_grads(plan, X, y, pp)[0] - training.loss_and_grads(plan, X, y, pm)[0]) / (2 * h)
        assert abs(fd - grads[name][i]) <= 1e-3 * max(abs(fd), 1e-6), name


# ---------------------------------------------------------------- finetune

def test_zero_learning_rate_keeps_weights():
    X, y = zoo.blobs(64, seed=1)
    _, plan = gelu_plan(16, X=X)
    out, hist = training.finetune(plan, X, y, TrainConfig(lr=0.0, epochs=3))
    for t in plan.trainable:
        assert out.constants[t].tobytes() == plan.constants[t].tobytes()
    assert len(hist.rows) == 3


def test_blobs_reach_high_training_accuracy():
    X, y = zoo.blobs(400, seed=0, separation=6.0)
    _, plan = gelu_plan(64, X=X)
    _, hist = training.finetune(plan, X, y, TrainConfig(lr=0.1, epochs=50, momentum=0.9))
    assert max(r[2] for r in hist.rows) >= 0.99


def test_finetune_deterministic():
    X, y = zoo.blobs(128, seed=2)
    _, plan = gelu_plan(16, X=X)
    cfg = TrainConfig(epochs=3, seed=5, momentum=0.5)
    a, ha = training.finetune(plan, X, y, cfg)
    b, hb = training.finetune(plan, X, y, cfg)
    assert ha.to_csv() == hb.to_csv()
    for t in plan.trainable:
        assert a.constants[t].tobytes() == b.constants[t].tobytes()


def test_finetune_leaves_tables_and_input_plan_untouched():
    X, y = zoo.blobs(64, seed=2)
    _, plan = gelu_plan(16, X=X)
    before = {t: plan.constants[t].copy() for t in plan.trainable}
    out, _ = training.finetune(plan, X, y, TrainConfig(epochs=2))
    assert out.tables == plan.tables
    for t, v in before.items():
        assert np.array_equal(plan.constants[t], v)


def test_history_csv():
    X, y = zoo.blobs(64, seed=2)
    _, plan = gelu_plan(16, X=X)
    _, hist = training.finetune(plan, X, y, TrainConfig(epochs=2), eval_data=(X, y))
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,loss,train_acc,eval_acc"
    assert len(lines) == 3 and lines[1].startswith("1,")


def test_unsupported_primitive_named():
    X, y = zoo.blobs(16)
    _, plan = gelu_plan(16, X=X)
    plan = plan.copy()
    plan.prims[0] = lowering.Primitive("conv", plan.prims[0].inputs, plan.prims[0].output, {}, "fc1")
    with pytest.raises(StructuralError, match="conv"):
        training.finetune(plan, X, y)


def test_int8_plan_rejected():
    X, y = zoo.blobs(16)
    _, plan = gelu_plan(16, X=X)
    q = lowering.quantize_plan(plan, {"x": X})
    with pytest.raises(ArgumentError):
        training.finetune(q, X, y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch():
    X, y = zoo.blobs(64, seed=0)
    X = X * 1e30
    _, plan = gelu_plan(16, X=zoo.blobs(64, seed=0)[0])
    with pytest.raises(NumericalError) as e:
        training.finetune(plan, X, y, TrainConfig(lr=1e30, epochs=5))
    assert e.value.exit_code == 3
    assert "epoch" in e.value.context


def test_mismatched_dataset():
    X, y = zoo.blobs(16)
    _, plan = gelu_plan(16, X=X)
    with pytest.raises(ArgumentError):
        training.finetune(plan, X, y[:5])
    with pytest.raises(ArgumentError):
        training.finetune(plan, X[:0], y[:0])


def test_finetuning_does_not_worsen_training_accuracy_majority():
    better_or_equal = 0
    for seed in range(5):
        X, y = zoo.blobs(200, seed=seed)
        g, plan = gelu_plan(16, seed=seed, X=X)
        before = training.accuracy(training.predict(plan, X), y)
        out, _ = training.finetune(plan, X, y, TrainConfig(lr=0.1, epochs=20, seed=seed, momentum=0.9))
        after = training.accuracy(training.predict(out, X), y)
        better_or_equal += after >= before
    assert better_or_equal >= 3


# ---------------------------------------------------------------- accuracy_gap

def test_relu_plan_has_zero_gap():
    g = zoo.mlp(act="ReLU")
    plan = lowering.lower_graph(g)
    X, y = zoo.blobs(200)
    gap = training.accuracy_gap(g, plan, X, y)
    assert gap.acc_loss == 0.0 and not gap.retrain


def test_coarse_tables_lose_at_least_as_much():
    X, y = zoo.blobs(400, seed=0)
    g = zoo.mlp(seed=0)
    # train the exact network first so accuracy is informative
    plan0 = lowering.lower_graph(g, lowering.build_tables(profiler.profile_ranges(g, [{"x": X}]), segments=256))
    tuned, _ = training.finetune(plan0, X, y, TrainConfig(epochs=10, momentum=0.9), exact=True)
    g2 = training.graph_with_plan_weights(g, tuned)
    rep = profiler.profile_ranges(g2, [{"x": X}])
    gaps = {}
    for n in (4, 256):
        plan = lowering.lower_graph(g2, lowering.build_tables(rep, segments=n), rep)
        gaps[n] = training.accuracy_gap(g2, plan, X, y).acc_loss
    assert gaps[4] >= gaps[256]


def test_acc_th_one_never_retrains():
    X, y = zoo.blobs(100)
    g, plan = gelu_plan(2, X=X)
    assert not training.accuracy_gap(g, plan, X, y, acc_th=1.0).retrain


def test_empty_eval_set():
    g, plan = gelu_plan(16)
    with pytest.raises(ArgumentError):
        training.accuracy_gap(g, plan, np.zeros((0, 2), np.float32), np.zeros(0, np.int64))


def test_graph_with_plan_weights_roundtrip():
    g = zoo.cnn(channels=1, size=4, filters=2, classes=3)
    plan = lowering.lower_graph(g)
    g2 = training.graph_with_plan_weights(g, plan)
    for k, v in g.weights.items():
        assert np.array_equal(g2.weights[k], v)


def test_pipeline_skips_retraining_when_within_threshold():
    X, y = zoo.blobs(200)
    g = zoo.mlp(act="ReLU")
    res = training.approximate_and_finetune(g, [{"x": X}], X, y, segments=16)
    assert not res.retrained and res.history is None


def test_pipeline_retrains_when_gap_exceeds_threshold():
    X, y = zoo.blobs(200)
    g = zoo.mlp()
    res = training.approximate_and_finetune(g, [{"x": X}], X, y, TrainConfig(acc_th=0.0, epochs=2), segments=2)
    if res.gap.acc_loss > 0:
        assert res.retrained and len(res.history.rows) == 2
    else:
        assert not res.retrained
