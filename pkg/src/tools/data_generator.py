"""Synthetic classification data, CSV ingestion and train/test splits.

Generates Gaussian-mixture datasets in the CSV layout the models consume:
numeric feature columns f0..f{d-1} followed by an integer "label" column.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from tools.model import LabeledDataset
from utils.errors import InvalidInputError

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian-mixture dataset description.

    Attributes:
        classes: number of mixture components, one per class
        dim: feature dimension
        n: number of examples
        separation: distance of each class mean from the origin
        noise: standard deviation of the isotropic noise
        seed: generator seed
    """

    classes: int = 10
    dim: int = 64
    n: int = 50000
    separation: float = 3.0
    noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise InvalidInputError(f"classes must be >= 2, got {self.classes}")
        if self.dim < 1:
            raise InvalidInputError(f"dim must be >= 1, got {self.dim}")
        if self.n < self.classes:
            raise InvalidInputError(
                f"n = {self.n} is smaller than the number of classes ({self.classes})"
            )
        if self.separation < 0 or self.noise <= 0:
            raise InvalidInputError("separation must be >= 0 and noise > 0")


class SyntheticDataGenerator:
    """Generate Gaussian-mixture classification data."""

    def __init__(self):
        self.generated_data: Optional[pd.DataFrame] = None

    def generate(self, spec: MixtureSpec) -> pd.DataFrame:
        """Draw a dataset from the mixture described by spec.

        Labels are balanced (class counts differ by at most one) and rows are
        shuffled. The same spec always yields the same frame.

        Args:
            spec: Mixture description

        Returns:
            DataFrame with columns f0..f{d-1} and label

        Example:
            >>> generator = SyntheticDataGenerator()
            >>> df = generator.generate(MixtureSpec(classes=2, dim=8, n=1000))
            >>> df["label"].value_counts()
        """
        spec.validate()
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))

        directions = rng.normal(size=(spec.classes, spec.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = spec.separation * directions

        labels = rng.permutation(np.arange(spec.n) % spec.classes)
        features = means[labels] + spec.noise * rng.normal(size=(spec.n, spec.dim))

        df = pd.DataFrame(features, columns=[f"f{i}" for i in range(spec.dim)])
        df[LABEL_COLUMN] = labels.astype(np.int64)
        self.generated_data = df
        logger.info(
            f"Generated {spec.n} examples: {spec.classes} classes, dim {spec.dim}, "
            f"separation {spec.separation}"
        )
        return df

    def export_to_csv(self, file_path: str) -> None:
        """Export the generated data to a CSV file.

        Args:
            file_path: Path to save CSV file

        Raises:
            ValueError: If no data has been generated yet
        """
        if self.generated_data is None:
            raise ValueError("No data generated yet")

        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        self.generated_data.to_csv(file_path, index=False, float_format=FLOAT_FORMAT)
        logger.info(f"Wrote {len(self.generated_data)} rows to {file_path}")


def frame_to_dataset(df: pd.DataFrame, num_classes: Optional[int] = None) -> LabeledDataset:
    """Convert a frame with a label column into a LabeledDataset."""
    if LABEL_COLUMN not in df.columns:
        raise InvalidInputError(f"dataset has no '{LABEL_COLUMN}' column")
    feature_cols = [c for c in df.columns if c != LABEL_COLUMN]
    if not feature_cols:
        raise InvalidInputError("dataset has no feature columns")

    non_numeric = [c for c in feature_cols if not pd.api.types.is_numeric_dtype(df[c])]
    if non_numeric:
        raise InvalidInputError(f"non-numeric feature column(s): {non_numeric}")
    labels = df[LABEL_COLUMN]
    if not pd.api.types.is_integer_dtype(labels):
        raise InvalidInputError(f"'{LABEL_COLUMN}' column must hold integers")

    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(
        features=df[feature_cols].to_numpy(dtype=np.float64),
        labels=labels.to_numpy(dtype=np.int64),
        num_classes=max(classes, 2),
    )


def load_dataset_csv(path: str, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read a dataset CSV (numeric features plus an integer label column).

    Raises:
        InvalidInputError: If the file is empty, lacks a label column or holds
            non-numeric features
    """
    if not Path(path).exists():
        raise InvalidInputError(f"dataset file not found: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as e:
        raise InvalidInputError(f"dataset file is empty: {path}") from e
    if df.empty:
        raise InvalidInputError(f"dataset file has no rows: {path}")
    dataset = frame_to_dataset(df, num_classes)
    logger.info(f"Loaded {len(dataset)} examples with {dataset.dim} features from {path}")
    return dataset


def split_hash(train_idx: np.ndarray, test_idx: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(np.asarray(train_idx, dtype="<i8").tobytes())
    digest.update(b"|")
    digest.update(np.asarray(test_idx, dtype="<i8").tobytes())
    return digest.hexdigest()[:16]


def split_dataset(
    dataset: LabeledDataset,
    train_fraction: float = 0.8,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> Tuple[LabeledDataset, Optional[LabeledDataset], str]:
    """Seeded train/test split.

    Returns the train set, the test set (None when test_fraction is 0) and a
    hash of both index sets.
    """
    if not 0.0 < train_fraction <= 1.0 or not 0.0 <= test_fraction < 1.0:
        raise InvalidInputError("train_fraction must lie in (0, 1] and test_fraction in [0, 1)")
    if train_fraction + test_fraction > 1.0 + 1e-12:
        raise InvalidInputError("train_fraction + test_fraction exceeds 1")

    n = len(dataset)
    order = np.random.default_rng(np.random.SeedSequence([seed, 4])).permutation(n)
    n_train = int(round(train_fraction * n))
    n_test = int(round(test_fraction * n))
    n_test = min(n_test, n - n_train)
    if n_train == 0:
        raise InvalidInputError(f"train split of a {n}-example dataset is empty")

    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:n_train + n_test])
    test = dataset.subset(test_idx) if n_test > 0 else None
    return dataset.subset(train_idx), test, split_hash(train_idx, test_idx)
