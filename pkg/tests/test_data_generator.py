"""Tests for the Gaussian-mixture generator, CSV loading and splits."""

import tempfile
import traceback
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from tools.data_generator import (
    MixtureSpec,
    SyntheticDataGenerator,
    frame_to_dataset,
    load_dataset_csv,
    split_dataset,
)
from tools.model import build_linear_classifier, evaluate, pretrain
from utils.errors import InvalidInputError


def test_generate_shape_and_balance():
    spec = MixtureSpec(classes=10, dim=16, n=5003, seed=1)
    df = SyntheticDataGenerator().generate(spec)
    assert list(df.columns) == [f"f{i}" for i in range(16)] + ["label"]
    counts = df["label"].value_counts()
    assert len(counts) == 10
    assert counts.max() - counts.min() <= 1


def test_generate_rejects_small_n():
    with pytest.raises(InvalidInputError):
        SyntheticDataGenerator().generate(MixtureSpec(classes=10, n=5))


def test_export_is_byte_deterministic():
    with tempfile.TemporaryDirectory() as tmp:
        paths = [Path(tmp) / f"{i}.csv" for i in range(2)]
        for path in paths:
            generator = SyntheticDataGenerator()
            generator.generate(MixtureSpec(classes=3, dim=4, n=200, seed=5))
            generator.export_to_csv(str(path))
        assert paths[0].read_bytes() == paths[1].read_bytes()


def test_csv_round_trip_is_exact():
    generator = SyntheticDataGenerator()
    df = generator.generate(MixtureSpec(classes=3, dim=4, n=100, seed=2))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "data.csv"
        generator.export_to_csv(str(path))
        dataset = load_dataset_csv(str(path))
    assert dataset.num_classes == 3
    assert np.array_equal(dataset.features, df.drop(columns="label").to_numpy())
    assert np.array_equal(dataset.labels, df["label"].to_numpy())


def test_export_before_generate():
    with pytest.raises(ValueError):
        SyntheticDataGenerator().export_to_csv("unused.csv")


def test_well_separated_binary_task_is_linearly_solvable():
    """Two classes, wide separation: a trained linear classifier reaches 99%."""
    df = SyntheticDataGenerator().generate(MixtureSpec(classes=2, dim=8, n=2000, separation=6.0, seed=3))
    dataset = frame_to_dataset(df)
    clf = build_linear_classifier(8, 2, seed=3)
    pretrain(clf, dataset, epochs=5, lr=1e-2, batch_size=64, seed=3)
    assert evaluate(clf, dataset).accuracy >= 0.99


def test_malformed_frames():
    with pytest.raises(InvalidInputError):
        frame_to_dataset(pd.DataFrame({"f0": [1.0, 2.0]}))
    with pytest.raises(InvalidInputError):
        frame_to_dataset(pd.DataFrame({"f0": ["a", "b"], "label": [0, 1]}))
    with pytest.raises(InvalidInputError):
        frame_to_dataset(pd.DataFrame({"f0": [1.0, 2.0], "label": [0.5, 1.0]}))


def test_missing_and_empty_files():
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(InvalidInputError):
            load_dataset_csv(str(Path(tmp) / "missing.csv"))
        empty = Path(tmp) / "empty.csv"
        empty.write_text("")
        with pytest.raises(InvalidInputError):
            load_dataset_csv(str(empty))


def test_split_is_seeded_and_disjoint():
    dataset = frame_to_dataset(SyntheticDataGenerator().generate(MixtureSpec(classes=3, dim=2, n=500)))
    train, test, digest = split_dataset(dataset, 0.8, 0.2, seed=7)
    assert len(train) == 400 and len(test) == 100

    again = split_dataset(dataset, 0.8, 0.2, seed=7)
    assert again[2] == digest
    assert np.array_equal(again[0].features, train.features)
    assert split_dataset(dataset, 0.8, 0.2, seed=8)[2] != digest

    rows = {tuple(r) for r in train.features} & {tuple(r) for r in test.features}
    assert not rows


def test_split_without_test_set():
    dataset = frame_to_dataset(SyntheticDataGenerator().generate(MixtureSpec(classes=2, dim=2, n=50)))
    train, test, _ = split_dataset(dataset, 1.0, 0.0)
    assert test is None
    assert len(train) == 50
    with pytest.raises(InvalidInputError):
        split_dataset(dataset, 0.9, 0.2)


if __name__ == "__main__":
    print("=" * 60)
    print("rankstack - Data Generator Test Suite")
    print("=" * 60)

    tests = [
        test_generate_shape_and_balance,
        test_generate_rejects_small_n,
        test_export_is_byte_deterministic,
        test_csv_round_trip_is_exact,
        test_export_before_generate,
        test_well_separated_binary_task_is_linearly_solvable,
        test_malformed_frames,
        test_missing_and_empty_files,
        test_split_is_seeded_and_disjoint,
        test_split_without_test_set,
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
