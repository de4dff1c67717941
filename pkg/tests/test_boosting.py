"""Tests for the boosting loop: failure isolation, merging, rank growth, checkpoints."""

import tempfile
import traceback
from pathlib import Path

import numpy as np
import pytest

from tools.adapter import AdapterConfig, AdapterState, Basis, select_window, tie_modules
from tools.boosting import (
    BoostConfig,
    FailureBatchLoader,
    checkpoint,
    default_threshold,
    effective_learning_rate,
    restore,
    run,
    train_head,
    train_round,
    two_phase_round,
)
from tools.data_generator import MixtureSpec, SyntheticDataGenerator, frame_to_dataset
from tools.linalg import numerical_rank, svd
from tools.model import LabeledDataset, build_linear_classifier, build_mlp, evaluate, pretrain
from utils.errors import CapacityExhaustedError, ConfigurationError, IntegrityError, InvalidInputError


def noisy_dataset(n=200, dim=16, classes=16, seed=0):
    """Random labels: the model keeps failing, so every round has work to do."""
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.normal(size=(n, dim)), rng.integers(0, classes, size=n), classes)


def square_linear(seed=0):
    # 16 x 16 weight: 16 singular directions for ROTATE to walk through
    return build_linear_classifier(16, 16, seed=seed)


def boost_config(rank=2, rounds=3, basis=Basis.ROTATE, groups=1, **overrides):
    values = dict(
        rounds=rounds,
        adapter=AdapterConfig(rank=rank, proj_dim=3, groups=groups, basis=basis, seed=4),
        lr_base=5e-3,
        epochs_per_round=1,
        early_stop_threshold=0,
        seed=4,
    )
    values.update(overrides)
    return BoostConfig(**values)


def test_effective_learning_rate():
    base = boost_config()
    assert effective_learning_rate(base) == base.lr_base

    wide = AdapterConfig(rank=2, proj_dim=6, groups=8)
    scaled = BoostConfig(adapter=wide, lr_base=1e-3, lr_scaling=True)
    assert effective_learning_rate(scaled) == pytest.approx(5e-4)
    assert effective_learning_rate(BoostConfig(adapter=wide, lr_base=1e-3)) == 1e-3


def test_default_threshold():
    assert default_threshold(50000) == 250
    assert default_threshold(10) == 1


def test_threshold_above_n_stops_before_round_one():
    model = square_linear()
    data = noisy_dataset()
    result = run(model, data, boost_config(early_stop_threshold=len(data) + 1))
    assert result.rounds_completed == 0
    assert result.terminated_early
    assert np.array_equal(result.model.adapted_weights()[0], model.adapted_weights()[0])
    assert result.b_total() == 0.0


def test_single_round_merges_its_delta():
    model = square_linear()
    data = noisy_dataset()
    result = run(model, data, boost_config(rounds=1))
    assert [r.round for r in result.reports] == [1]
    assert not result.terminated_early

    delta = result.deltas[0][0]
    assert np.array_equal(result.accumulators[0], delta)
    assert np.array_equal(result.model.adapted_weights()[0], model.adapted_weights()[0] + delta)
    report = result.reports[0]
    assert report.cumulative_v_norm == report.v_norm
    assert report.failure_count == evaluate(model, data).failure_count


def test_caller_model_is_not_modified():
    model = square_linear()
    before = model.adapted_weights()[0].copy()
    run(model, noisy_dataset(), boost_config(rounds=2))
    assert np.array_equal(model.adapted_weights()[0], before)


def test_only_failures_reach_the_optimizer():
    """Every batch of round t is drawn from the examples wrong before round t."""
    loaders = []

    def factory(indices, batch_size, seed, round_index):
        loader = FailureBatchLoader(indices, batch_size, seed, round_index)
        loaders.append(loader)
        return loader

    result = run(square_linear(), noisy_dataset(), boost_config(rounds=3), loader_factory=factory)
    assert len(loaders) == result.rounds_completed == 3
    for t, loader in enumerate(loaders, start=1):
        failures = np.flatnonzero(~(result.margin_snapshots[t - 1] > 0))
        seen = np.concatenate(loader.history)
        assert set(seen.tolist()) == set(failures.tolist())
        assert seen.shape[0] == failures.shape[0] == result.reports[t - 1].failure_count


def test_train_round_rejects_empty_failures():
    model = square_linear()
    data = noisy_dataset()
    cfg = boost_config()
    windows = [select_window(svd(W), Basis.ROTATE, 2, 1) for W in model.adapted_weights()]
    adapter = AdapterState.fresh(cfg.adapter, windows, tie_modules(1, 1))
    with pytest.raises(InvalidInputError):
        train_round(model, data, [], adapter, cfg)


def test_two_phase_isolates_head_and_adapter():
    model = build_mlp(8, 4, hidden_dim=16, hidden_layers=1, seed=1)
    rng = np.random.default_rng(1)
    data = LabeledDataset(rng.normal(size=(120, 8)), rng.integers(0, 4, size=120), 4)
    cfg = boost_config(rank=2, lr_base=1e-2, head_lr=1e-2)
    windows = [select_window(svd(W), Basis.ROTATE, 2, 1) for W in model.adapted_weights()]
    adapter = AdapterState.fresh(cfg.adapter, windows, tie_modules(model.num_adapted, 1))
    base = [W.copy() for W in model.adapted_weights()]

    # Phase 1: the head moves, v stays at zero
    head_before = model.head.weight.copy()
    assert train_head(model, data, adapter, cfg) > 0
    assert np.array_equal(adapter.v, np.zeros_like(adapter.v))
    assert not np.array_equal(model.head.weight, head_before)

    # Phase 2: v moves, the head stays put
    head_after_phase1 = model.head.weight.copy()
    failures = evaluate(model, data).failures
    trained = train_round(model, data, failures, adapter, cfg)
    assert np.array_equal(model.head.weight, head_after_phase1)
    assert np.linalg.norm(trained.v) > 0
    for W, W0 in zip(model.adapted_weights(), base):
        assert np.array_equal(W, W0)


def test_two_phase_needs_a_head():
    model = square_linear()
    cfg = boost_config(two_phase=True)
    windows = [select_window(svd(W), Basis.ROTATE, 2, 1) for W in model.adapted_weights()]
    adapter = AdapterState.fresh(cfg.adapter, windows, tie_modules(1, 1))
    with pytest.raises(ConfigurationError):
        two_phase_round(model, noisy_dataset(), [0, 1], adapter, cfg)


def test_two_phase_run_completes():
    model = build_mlp(8, 4, hidden_dim=16, hidden_layers=1, seed=2)
    rng = np.random.default_rng(2)
    data = LabeledDataset(rng.normal(size=(100, 8)), rng.integers(0, 4, size=100), 4)
    result = run(model, data, boost_config(rounds=2, two_phase=True))
    assert result.rounds_completed == 2
    assert not np.array_equal(result.model.head.weight, model.head.weight)


def test_rotate_capacity_is_checked_up_front():
    with pytest.raises(CapacityExhaustedError) as excinfo:
        run(square_linear(), noisy_dataset(), boost_config(rank=4, rounds=5))
    assert excinfo.value.round_index == 5
    assert excinfo.value.p == 16


def test_empty_dataset_is_rejected():
    empty = LabeledDataset(np.zeros((0, 16)), np.zeros(0, dtype=np.int64), 16)
    with pytest.raises(InvalidInputError):
        run(square_linear(), empty, boost_config())


@pytest.mark.parametrize("rank,rounds", [(1, 5), (2, 4), (4, 3)])
def test_rotate_rank_grows_by_r_per_round(rank, rounds):
    """Disjoint windows stack: the accumulated delta has rank r * T."""
    result = run(
        square_linear(seed=rank), noisy_dataset(seed=rank), boost_config(rank=rank, rounds=rounds, track_x=False)
    )
    assert result.rounds_completed == rounds
    acc = result.accumulators[0]
    assert numerical_rank(acc) == rank * rounds
    for t in range(1, rounds + 1):
        partial = sum(deltas[0] for deltas in result.deltas[:t])
        assert numerical_rank(partial) == rank * t


def test_top_basis_stays_in_its_window():
    model = square_linear(seed=5)
    result = run(model, noisy_dataset(seed=5), boost_config(rank=2, rounds=4, basis=Basis.TOP))
    assert result.rounds_completed == 4
    acc = result.accumulators[0]
    assert numerical_rank(acc) <= 2
    U = svd(model.adapted_weights()[0]).U[:, :2]
    residual = acc - U @ (U.T @ acc)
    assert np.linalg.norm(residual) <= 1e-10 * max(np.linalg.norm(acc), 1.0)
    assert all(r.rank_measures.eps_rank <= 2 for r in result.reports)


def test_skipping_per_round_x_leaves_training_unchanged():
    tracked = run(square_linear(), noisy_dataset(), boost_config(rounds=2))
    untracked = run(square_linear(), noisy_dataset(), boost_config(rounds=2, track_x=False))
    assert untracked.round_x == []
    assert len(tracked.round_x) == 2
    assert untracked.round_frozen_x == untracked.final_x == tracked.final_x
    assert [r.to_dict() for r in untracked.reports] == [r.to_dict() for r in tracked.reports]


@pytest.mark.parametrize("rank,rounds", [(1, 8), (2, 6), (4, 5)])
def test_rotate_rank_is_exact_on_a_square_64_weight(rank, rounds):
    model = build_linear_classifier(64, 64, seed=rank)
    data = noisy_dataset(n=200, dim=64, classes=64, seed=rank)
    result = run(model, data, boost_config(rank=rank, rounds=rounds, track_x=False))
    assert result.rounds_completed == rounds
    assert all(np.linalg.norm(v) > 0 for v in result.v_history)
    assert numerical_rank(result.accumulators[0]) == rank * rounds


def test_top_basis_stays_low_rank_for_twenty_rounds():
    model = build_linear_classifier(64, 64, seed=7)
    data = noisy_dataset(n=200, dim=64, classes=64, seed=7)
    result = run(model, data, boost_config(rank=2, rounds=20, basis=Basis.TOP, track_x=False))
    assert result.rounds_completed == 20
    assert numerical_rank(result.accumulators[0]) <= 2
    assert result.reports[-1].rank_measures.eps_rank <= 4


def test_first_round_is_the_same_for_both_bases():
    """Round one uses columns [0, r) under either basis."""
    rotate = run(square_linear(seed=3), noisy_dataset(seed=3), boost_config(rounds=1))
    top = run(square_linear(seed=3), noisy_dataset(seed=3), boost_config(rounds=1, basis=Basis.TOP))
    assert rotate.reports[0].to_dict() == top.reports[0].to_dict()
    assert np.array_equal(rotate.deltas[0][0], top.deltas[0][0])


def test_flips_over_a_run_stay_below_the_regression_threshold():
    df = SyntheticDataGenerator().generate(MixtureSpec(classes=4, dim=16, n=400, separation=2.0, seed=3))
    data = frame_to_dataset(df)
    model = build_linear_classifier(16, 4, seed=3)
    pretrain(model, data, epochs=1, lr=1e-2, seed=3)
    result = run(model, data, boost_config(rank=1, rounds=4))
    assert result.rounds_completed == 4

    for t, audit in enumerate(result.audits, start=1):
        before = result.margin_snapshots[t - 1]
        after = result.margin_snapshots[t]
        flips = np.flatnonzero((before > 0) & ~(after > 0))
        assert audit["flips"] == flips.size
        assert np.all(before[flips] < audit["threshold"])
        assert audit["violations"] == 0


def test_two_phase_beats_adapter_only():
    """Paired runs from one seed: adding the head phase ends with higher accuracy."""
    df = SyntheticDataGenerator().generate(MixtureSpec(classes=4, dim=8, n=300, separation=2.0, seed=5))
    data = frame_to_dataset(df)
    model = build_mlp(8, 4, hidden_dim=16, hidden_layers=1, seed=5)
    adapter_only = run(model, data, boost_config(rounds=3))
    two_phase = run(model, data, boost_config(rounds=3, two_phase=True, head_lr=1e-2, head_epochs=2))
    assert adapter_only.rounds_completed == two_phase.rounds_completed == 3
    assert evaluate(two_phase.model, data).accuracy > evaluate(adapter_only.model, data).accuracy


def test_mlp_rotate_rank_on_every_module():
    model = build_mlp(16, 4, hidden_dim=32, hidden_layers=1, seed=6)
    rng = np.random.default_rng(6)
    data = LabeledDataset(rng.normal(size=(150, 16)), rng.integers(0, 4, size=150), 4)
    result = run(model, data, boost_config(rank=2, rounds=5, groups=2))
    assert result.rounds_completed == 5
    for acc in result.accumulators:
        assert numerical_rank(acc) == 10
    assert len(result.module_measures[-1]) == model.num_adapted


def test_runs_are_deterministic():
    first = run(square_linear(), noisy_dataset(), boost_config(rounds=3))
    second = run(square_linear(), noisy_dataset(), boost_config(rounds=3))
    assert [r.to_dict() for r in first.reports] == [r.to_dict() for r in second.reports]
    for a, b in zip(first.accumulators, second.accumulators):
        assert np.array_equal(a, b)


def test_on_round_callback_sees_every_report():
    seen = []
    result = run(
        square_linear(), noisy_dataset(), boost_config(rounds=3), on_round=lambda report, state: seen.append(report)
    )
    assert seen == result.reports
    assert len(result.margin_snapshots) == 4
    assert len(result.round_x) == 3
    assert result.final_x >= 0.0


def test_checkpoint_round_trip_is_byte_stable():
    model = square_linear()
    data = noisy_dataset()
    result = run(model, data, boost_config(rounds=2))
    with tempfile.TemporaryDirectory() as tmp:
        first = Path(tmp) / "a.bstl"
        second = Path(tmp) / "b.bstl"
        checkpoint(result, str(first))
        restored = restore(str(first))
        checkpoint(restored, str(second))
        assert first.read_bytes() == second.read_bytes()

        assert restored.rounds_completed == 2
        assert evaluate(restored.model, data).accuracy == evaluate(result.model, data).accuracy
        for a, b in zip(restored.accumulators, result.accumulators):
            assert np.array_equal(a, b)

        truncated = Path(tmp) / "c.bstl"
        truncated.write_bytes(first.read_bytes()[:-10])
        with pytest.raises(IntegrityError):
            restore(str(truncated))


@pytest.mark.slow
def test_desk_rotate_outgrows_top():
    """Ten-class mixture, pretrained MLP, r = 2 for 20 rounds."""
    df = SyntheticDataGenerator().generate(MixtureSpec(classes=10, dim=64, n=2000, seed=0))
    data = frame_to_dataset(df)
    model = build_mlp(64, 10, hidden_dim=64, hidden_layers=2, seed=0)
    pretrain(model, data, epochs=2, lr=1e-3, seed=0)

    ranks = {}
    for basis in (Basis.ROTATE, Basis.TOP):
        cfg = boost_config(rank=2, rounds=20, basis=basis, groups=3, epochs_per_round=3, early_stop_threshold=None)
        result = run(model, data, cfg)
        assert result.rounds_completed == 20
        ranks[basis] = result.reports[-1].rank_measures.eps_rank

    assert ranks[Basis.TOP] <= 2
    assert ranks[Basis.ROTATE] >= 5 * ranks[Basis.TOP]

    again = run(model, data, boost_config(rank=2, rounds=3, groups=3))
    repeat = run(model, data, boost_config(rank=2, rounds=3, groups=3))
    assert [r.to_dict() for r in again.reports] == [r.to_dict() for r in repeat.reports]


if __name__ == "__main__":
    print("=" * 60)
    print("rankstack - Boosting Test Suite")
    print("=" * 60)

    tests = [
        test_effective_learning_rate,
        test_default_threshold,
        test_threshold_above_n_stops_before_round_one,
        test_single_round_merges_its_delta,
        test_caller_model_is_not_modified,
        test_only_failures_reach_the_optimizer,
        test_train_round_rejects_empty_failures,
        test_two_phase_isolates_head_and_adapter,
        test_two_phase_needs_a_head,
        test_two_phase_run_completes,
        test_rotate_capacity_is_checked_up_front,
        test_empty_dataset_is_rejected,
        lambda: test_rotate_rank_grows_by_r_per_round(2, 4),
        test_top_basis_stays_in_its_window,
        test_skipping_per_round_x_leaves_training_unchanged,
        lambda: test_rotate_rank_is_exact_on_a_square_64_weight(2, 6),
        test_top_basis_stays_low_rank_for_twenty_rounds,
        test_first_round_is_the_same_for_both_bases,
        test_flips_over_a_run_stay_below_the_regression_threshold,
        test_two_phase_beats_adapter_only,
        test_mlp_rotate_rank_on_every_module,
        test_runs_are_deterministic,
        test_on_round_callback_sees_every_report,
        test_checkpoint_round_trip_is_byte_stable,
    ]

    passed = 0
    failed = 0
    for test in tests:
        name = getattr(test, "__name__", "test")
        try:
            test()
            passed += 1
        except AssertionError as e:
            failed += 1
            print(f"❌ Test failed: {name}\n   {e}\n")
        except Exception as e:
            failed += 1
            print(f"❌ Test error: {name}\n   {e}")
            traceback.print_exc()

    print("=" * 60)
    print(f"✅ Tests passed: {passed}")
    print(f"❌ Tests failed: {failed}")
    print("=" * 60)
