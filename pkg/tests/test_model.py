"""Tests for the frozen-base models: forward, gradients, merging, evaluation."""

import math
import traceback

import numpy as np
import pytest

from tools.adapter import AdapterConfig, AdapterState, Basis, select_window, tie_modules
from tools.linalg import svd
from tools.model import (
    DenseLayer,
    FrozenModel,
    LabeledDataset,
    build_linear_classifier,
    build_mlp,
    evaluate,
    forward,
    margin_features,
    max_hidden_norm,
    pretrain,
    xent_loss_and_grads,
)
from utils.errors import ConfigurationError, InvalidInputError, ShapeError
from utils.parallel import set_threads


def small_mlp(seed=0, input_dim=8, num_classes=3):
    return build_mlp(input_dim, num_classes, hidden_dim=16, hidden_layers=1, seed=seed)


def adapter_for(model, groups=1, rank=2, proj_dim=3, seed=0, v_scale=0.0):
    cfg = AdapterConfig(rank=rank, proj_dim=proj_dim, groups=groups, seed=seed)
    windows = [select_window(svd(W), Basis.ROTATE, rank, 1) for W in model.adapted_weights()]
    state = AdapterState.fresh(cfg, windows, tie_modules(model.num_adapted, groups))
    if v_scale:
        state.v[:] = np.random.default_rng(seed + 100).normal(scale=v_scale, size=state.v.shape)
    return state


def random_dataset(n, dim, num_classes, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.normal(size=(n, dim)), rng.integers(0, num_classes, size=n), num_classes)


def runner_up(logits, labels):
    others = logits.copy()
    others[np.arange(len(labels)), labels] = -np.inf
    return np.argmax(others, axis=1)


ARCHITECTURES = {
    "linear": lambda seed: build_linear_classifier(8, 3, seed=seed),
    "mlp": lambda seed: small_mlp(seed=seed),
}


def test_mlp_structure():
    model = build_mlp(8, 4, hidden_dim=16, hidden_layers=2)
    assert model.num_adapted == 3
    assert model.head is not None
    assert [layer.relu for layer in model.layers] == [True, True, False]
    assert all(layer.layer_norm for layer in model.layers)


def test_zero_adapter_is_bit_identical():
    """No adapter and a v = 0 adapter give identical logits."""
    for name, build in ARCHITECTURES.items():
        model = build(1)
        X = np.random.default_rng(2).normal(size=(50, 8))
        plain = forward(model, X).logits
        with_zero = forward(model, X, adapter_for(model)).logits
        assert np.array_equal(plain, with_zero), name


def test_merge_equivalence():
    """Live-adapter forward equals forward with merged weights."""
    for name, build in ARCHITECTURES.items():
        model = build(3)
        adapter = adapter_for(model, v_scale=0.3, seed=3)
        X = np.random.default_rng(4).normal(size=(100, 8))
        live = forward(model, X, adapter).logits

        merged = model.copy()
        merged.merge_deltas(adapter.deltas())
        np.testing.assert_allclose(forward(merged, X).logits, live, rtol=1e-12, atol=1e-12, err_msg=name)


def test_margin_definition():
    """Logits [2, 0.5] with label 0 give margin 1.5."""
    model = FrozenModel(
        kind="linear",
        layers=[DenseLayer(weight=np.zeros((2, 1)), bias=np.array([2.0, 0.5]))],
        num_classes=2,
    )
    pred = forward(model, np.array([0.0]), labels=np.array([0]))
    assert pred.margin[0] == 1.5
    assert bool(pred.correct[0])
    assert forward(model, np.array([0.0]), labels=np.array([1])).margin[0] == -1.5


def test_forward_rejects_wrong_width():
    model = build_linear_classifier(8, 3)
    with pytest.raises(ShapeError):
        forward(model, np.zeros(5))


def test_uniform_logits_loss():
    """All-zero logits over C classes cost ln C."""
    model = FrozenModel(
        kind="linear", layers=[DenseLayer(weight=np.zeros((5, 4)), bias=np.zeros(5))], num_classes=5
    )
    batch = random_dataset(10, 4, 5)
    result = xent_loss_and_grads(model, batch, None)
    assert result.loss == pytest.approx(math.log(5), abs=1e-15)
    assert result.grad_v is None


def test_loss_rejects_empty_batch():
    model = build_linear_classifier(8, 3)
    empty = LabeledDataset(np.zeros((0, 8)), np.zeros(0, dtype=np.int64), 3)
    with pytest.raises(InvalidInputError):
        xent_loss_and_grads(model, empty, adapter_for(model))


def test_head_gradient_needs_head():
    model = build_linear_classifier(8, 3)
    with pytest.raises(ConfigurationError):
        xent_loss_and_grads(model, random_dataset(4, 8, 3), None, train_head=True)


def test_grad_v_matches_finite_differences():
    """Analytic dL/dv against central differences on 20 seeded instances per architecture."""
    step = 1e-6
    for name, build in ARCHITECTURES.items():
        for seed in range(20):
            model = build(seed)
            adapter = adapter_for(model, groups=1, seed=seed, v_scale=0.05)
            batch = random_dataset(4, 8, 3, seed=seed)
            analytic = xent_loss_and_grads(model, batch, adapter).grad_v.ravel()

            v0 = adapter.v.ravel().copy()
            numeric = np.zeros_like(v0)
            for i in range(v0.size):
                e = np.zeros_like(v0)
                e[i] = step
                up = xent_loss_and_grads(model, batch, adapter.with_v(v0 + e)).loss
                down = xent_loss_and_grads(model, batch, adapter.with_v(v0 - e)).loss
                numeric[i] = (up - down) / (2 * step)

            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
            assert rel < 1e-5, f"{name} seed {seed}: relative error {rel:.3g}"


def test_single_group_shares_one_gradient_row():
    """Every adapted module of a single group feeds one shared gradient row."""
    model = build_mlp(8, 3, hidden_dim=16, hidden_layers=2, seed=5)
    tied = adapter_for(model, groups=1, seed=5, v_scale=0.05)
    batch = random_dataset(6, 8, 3, seed=5)
    grad = xent_loss_and_grads(model, batch, tied).grad_v
    assert grad.shape == (1, 3)
    assert np.all(np.isfinite(grad))


def test_confident_examples_still_have_gradient():
    """Cross-entropy on correct, high-margin examples is not exactly zero."""
    model = FrozenModel(
        kind="linear",
        layers=[DenseLayer(weight=np.array([[4.0, 0.0], [0.0, 4.0]]), bias=np.zeros(2))],
        num_classes=2,
    )
    batch = LabeledDataset(np.array([[3.0, 0.0], [0.0, 3.0]]), np.array([0, 1]), 2)
    adapter = adapter_for(model, rank=1, proj_dim=2, seed=1)
    assert evaluate(model, batch).accuracy == 1.0
    assert np.any(xent_loss_and_grads(model, batch, adapter).grad_v != 0.0)


def test_gradients_do_not_depend_on_thread_count():
    model = small_mlp(seed=8)
    adapter = adapter_for(model, seed=8, v_scale=0.05)
    batch = random_dataset(3000, 8, 3, seed=8)
    try:
        set_threads(1)
        one = xent_loss_and_grads(model, batch, adapter)
        set_threads(4)
        four = xent_loss_and_grads(model, batch, adapter)
    finally:
        set_threads(1)
    assert one.loss == four.loss
    assert np.array_equal(one.grad_v, four.grad_v)


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_correct_example_adds_only_its_own_gradient(arch):
    """grad_v over failures plus one correct example is the count-weighted sum of the parts."""
    model = ARCHITECTURES[arch](11)
    adapter = adapter_for(model, seed=11, v_scale=0.05)
    data = random_dataset(120, 8, 3, seed=11)
    evaluation = evaluate(model, data, adapter)
    failures = evaluation.failures
    correct = np.flatnonzero(evaluation.correct)
    assert failures.size > 0 and correct.size > 0

    extra = int(correct[0])
    g_fail = xent_loss_and_grads(model, data.subset(failures), adapter).grad_v
    g_extra = xent_loss_and_grads(model, data.subset([extra]), adapter).grad_v
    g_both = xent_loss_and_grads(model, data.subset(np.append(failures, extra)), adapter).grad_v

    b = failures.size
    np.testing.assert_allclose((b + 1) * g_both, b * g_fail + g_extra, rtol=1e-10, atol=1e-12)
    # The correct example does move the gradient, so leaving it out matters
    assert np.linalg.norm(g_both - g_fail) > 0.0


def test_evaluate_partition():
    model = small_mlp(seed=6)
    data = random_dataset(200, 8, 3, seed=6)
    result = evaluate(model, data)
    assert result.accuracy + result.failure_count / len(data) == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(np.flatnonzero(~result.correct), result.failures)


def test_separable_data_is_fully_classified():
    """A linear model aligned with separable classes has accuracy 1."""
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=300)
    X = np.where(labels[:, None] == 0, -5.0, 5.0) + rng.uniform(-1, 1, size=(300, 2))
    model = FrozenModel(
        kind="linear",
        layers=[DenseLayer(weight=np.array([[-1.0, -1.0], [1.0, 1.0]]), bias=np.zeros(2))],
        num_classes=2,
    )
    result = evaluate(model, LabeledDataset(X, labels, 2))
    assert result.accuracy == 1.0
    assert result.failure_count == 0


def test_max_hidden_norm():
    bias_free = FrozenModel(
        kind="linear", layers=[DenseLayer(weight=np.ones((3, 4)), bias=np.zeros(3))], num_classes=3
    )
    zeros = LabeledDataset(np.zeros((5, 4)), np.zeros(5, dtype=np.int64), 3)
    assert max_hidden_norm(bias_free, zeros) == 0.0

    model = small_mlp(seed=2)
    data = random_dataset(40, 8, 3, seed=2)
    single = data.subset([7])
    expected = max(float(np.linalg.norm(h)) for h in forward(model, single.features).hidden)
    assert max_hidden_norm(model, single) == pytest.approx(expected, rel=1e-15)
    assert max_hidden_norm(model, data.subset(range(20))) <= max_hidden_norm(model, data)


def test_margin_features_predict_linear_margin_change():
    """For the linear classifier at v = 0 the margin change is exactly <v, phi>."""
    model = build_linear_classifier(8, 3, seed=4)
    data = random_dataset(30, 8, 3, seed=4)
    adapter = adapter_for(model, seed=4)
    phi = margin_features(model, data.features, data.labels, adapter)
    assert phi.shape == (30, 3)

    v = np.random.default_rng(9).normal(scale=1e-3, size=adapter.v.shape)
    before = forward(model, data.features, labels=data.labels)
    after = forward(model, data.features, adapter.with_v(v), labels=data.labels)
    # Valid while the runner-up class does not change
    same = runner_up(before.logits, data.labels) == runner_up(after.logits, data.labels)
    predicted = phi @ v.ravel()
    np.testing.assert_allclose((after.margin - before.margin)[same], predicted[same], atol=1e-12)


def test_pretrain_lowers_loss():
    model = small_mlp(seed=1)
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 3, size=300)
    X = rng.normal(size=(300, 8)) + 3.0 * np.eye(3, 8)[labels]
    data = LabeledDataset(X, labels, 3)
    before = xent_loss_and_grads(model, data, None).loss
    history = pretrain(model, data, epochs=5, lr=1e-2, batch_size=32, seed=1)
    assert len(history) == 5
    assert xent_loss_and_grads(model, data, None).loss < before


def test_state_round_trip_preserves_predictions():
    model = small_mlp(seed=12)
    restored = FrozenModel.from_state(*model.state_dict())
    X = np.random.default_rng(12).normal(size=(20, 8))
    assert np.array_equal(forward(model, X).logits, forward(restored, X).logits)


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 5]), 2)
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.array([[np.inf, 0.0]]), np.array([0]), 2)


if __name__ == "__main__":
    print("=" * 60)
    print("rankstack - Model Test Suite")
    print("=" * 60)

    tests = [
        test_mlp_structure,
        test_zero_adapter_is_bit_identical,
        test_merge_equivalence,
        test_margin_definition,
        test_forward_rejects_wrong_width,
        test_uniform_logits_loss,
        test_loss_rejects_empty_batch,
        test_head_gradient_needs_head,
        test_grad_v_matches_finite_differences,
        test_single_group_shares_one_gradient_row,
        test_confident_examples_still_have_gradient,
        test_gradients_do_not_depend_on_thread_count,
        lambda: test_correct_example_adds_only_its_own_gradient("linear"),
        lambda: test_correct_example_adds_only_its_own_gradient("mlp"),
        test_evaluate_partition,
        test_separable_data_is_fully_classified,
        test_max_hidden_norm,
        test_margin_features_predict_linear_margin_change,
        test_pretrain_lowers_loss,
        test_state_round_trip_preserves_predictions,
        test_dataset_validation,
    ]

    passed = 0
    failed = 0
    for test in tests:
        try:
            test()
            passed += 1
        except AssertionError as e:
            failed += 1
            print(f"❌ Test failed: {test.__name__}\n   {e}\n")
        except Exception as e:
            failed += 1
            print(f"❌ Test error: {test.__name__}\n   {e}")
            traceback.print_exc()

    print("=" * 60)
    print(f"✅ Tests passed: {passed}")
    print(f"❌ Tests failed: {failed}")
    print("=" * 60)
