"""Run directory IO: round reports, plot curves, margin snapshots, summaries.

Layout of one arm directory:

    rounds.jsonl      one RoundReport object per line
    curves.csv        plot data, appended after every round
    checkpoint.bstl   merged weights, accumulators, per-round deltas
    margins.bstl      training margin snapshots and feature-norm statistics
    summary.json      final metrics of the arm
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from utils.checkpoint import read_container, write_container
from utils.errors import IntegrityError

logger = logging.getLogger(__name__)

ROUNDS_FILE = "rounds.jsonl"
CURVES_FILE = "curves.csv"
CHECKPOINT_FILE = "checkpoint.bstl"
MARGINS_FILE = "margins.bstl"
SUMMARY_FILE = "summary.json"
BOUND_FILE = "bound.csv"
BOUND_ROUNDS_FILE = "bound_rounds.csv"

CURVE_COLUMNS = ["round", "train_acc", "test_acc", "failures", "v_norm", "cum_v_norm", "part_ratio", "eps_rank"]


class RunStore:
    """Reads and writes the artifacts of one arm."""

    def __init__(self, directory: str):
        self.directory = Path(directory)

    def path(self, name: str) -> Path:
        return self.directory / name

    def reset(self) -> None:
        """Create the directory and remove artifacts of a previous run."""
        self.directory.mkdir(parents=True, exist_ok=True)
        for name in (ROUNDS_FILE, CURVES_FILE, CHECKPOINT_FILE, MARGINS_FILE, SUMMARY_FILE):
            target = self.path(name)
            if target.exists():
                target.unlink()
                logger.debug(f"Removed stale {target}")

    def append_round(self, report: Dict[str, Any]) -> None:
        """Append one report to rounds.jsonl and one row to curves.csv."""
        with open(self.path(ROUNDS_FILE), "a", encoding="utf-8") as f:
            f.write(json.dumps(report, sort_keys=True) + "\n")

        measures = report["rank_measures"]
        row = pd.DataFrame(
            [
                {
                    "round": report["round"],
                    "train_acc": report["train_accuracy"],
                    "test_acc": report["test_accuracy"],
                    "failures": report["failure_count"],
                    "v_norm": report["v_norm"],
                    "cum_v_norm": report["cumulative_v_norm"],
                    "part_ratio": measures["participation_ratio"],
                    "eps_rank": measures["eps_rank"],
                }
            ],
            columns=CURVE_COLUMNS,
        )
        curves = self.path(CURVES_FILE)
        row.to_csv(curves, mode="a", header=not curves.exists(), index=False, float_format="%.12g")

    def read_rounds(self) -> List[Dict[str, Any]]:
        target = self.path(ROUNDS_FILE)
        if not target.exists():
            return []
        rounds = []
        with open(target, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    report = json.loads(line)
                except json.JSONDecodeError as e:
                    raise IntegrityError(f"{target}:{line_no}: unreadable report ({e})") from e
                if not isinstance(report, dict):
                    raise IntegrityError(f"{target}:{line_no}: report is not an object")
                rounds.append(report)
        return rounds

    def write_margins(
        self, snapshots: List[np.ndarray], round_x: List[float], final_x: float, n: int
    ) -> None:
        arrays = {f"margins.{t}": np.asarray(m, dtype=np.float64) for t, m in enumerate(snapshots)}
        metadata = {"rounds": len(snapshots) - 1, "round_x": list(round_x), "final_x": final_x, "n": n}
        write_container(str(self.path(MARGINS_FILE)), arrays, metadata)

    def read_margins(self) -> Tuple[List[np.ndarray], Dict[str, Any]]:
        arrays, metadata = read_container(str(self.path(MARGINS_FILE)))
        snapshots = [arrays[f"margins.{t}"] for t in range(metadata["rounds"] + 1)]
        return snapshots, metadata

    def write_summary(self, summary: Dict[str, Any]) -> None:
        with open(self.path(SUMMARY_FILE), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"Wrote summary to {self.path(SUMMARY_FILE)}")

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False, float_format="%.12g")
        logger.info(f"Wrote {len(frame)} row(s) to {target}")
        return target
