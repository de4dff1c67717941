"""Command-line entry point for rankstack.

Subcommands:
    run          execute every arm of an experiment config
    gen-data     write a Gaussian-mixture dataset CSV
    rank-audit   recompute cumulative-delta rank measures from a checkpoint
    bound-eval   evaluate the margin bound of a finished arm
    advantage    group-normalise reward groups read from stdin

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from tools import boosting
from tools.bounds import (
    BoundInputs,
    binary_metrics,
    bootstrap_accuracy_ci,
    bound_trajectory,
    evaluate_bound,
)
from tools.data_generator import (
    MixtureSpec,
    SyntheticDataGenerator,
    frame_to_dataset,
    load_dataset_csv,
    split_dataset,
)
from tools.grpo import RewardGroup, group_advantages
from tools.linalg import numerical_rank, rank_measures
from tools.model import FrozenModel, LabeledDataset, build_linear_classifier, build_mlp, forward, pretrain
from utils.config import AppConfig, ExperimentConfig
from utils.errors import ConfigurationError, InvalidInputError, IntegrityError, RankstackError
from utils.langfuse_instrumentation import flush_langfuse, initialize_langfuse
from utils.parallel import set_threads
from utils.run_store import (
    BOUND_FILE,
    BOUND_ROUNDS_FILE,
    CHECKPOINT_FILE,
    RunStore,
)

logger = logging.getLogger("rankstack")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
CROSS_CHECK_TOL = 1e-9
TRAJECTORY_COLUMNS = ["round", "theta_star", "bound_at_star", "margin_term", "complexity_term", "vacuous"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankstack",
        description="Gradient-boosted micro-adapters with rank and bound diagnostics",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override the experiment seed")
    parser.add_argument("--out", type=str, default=None, help="Output root (default $RANKSTACK_OUTPUT_ROOT or runs)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default $RANKSTACK_THREADS or 1)")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Run every arm of an experiment config")
    p_run.add_argument("config", help="Path to the YAML experiment config")

    p_gen = sub.add_parser("gen-data", help="Write a Gaussian-mixture dataset CSV")
    p_gen.add_argument("--classes", type=int, default=10)
    p_gen.add_argument("--dim", type=int, default=64)
    p_gen.add_argument("--n", type=int, default=50000)
    p_gen.add_argument("--separation", type=float, default=3.0)
    p_gen.add_argument("--noise", type=float, default=1.0)
    p_gen.add_argument("--output", required=True, help="CSV path to write")

    p_audit = sub.add_parser("rank-audit", help="Recompute rank measures from stored deltas")
    p_audit.add_argument("path", help="Arm directory or checkpoint file")

    p_bound = sub.add_parser("bound-eval", help="Evaluate the margin bound of a finished arm")
    p_bound.add_argument("run_dir", help="Arm directory")
    p_bound.add_argument("--delta", type=float, default=0.05)
    p_bound.add_argument("--final-x", action="store_true", help="Use X from the final weights")

    p_adv = sub.add_parser("advantage", help="Normalise reward groups read from stdin")
    p_adv.add_argument("--epsilon", type=float, default=1e-4)
    return parser


def _setup_logging(verbose: bool, level: str) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def _load_dataset(config: ExperimentConfig) -> LabeledDataset:
    spec = config.dataset
    if spec.csv is not None:
        return load_dataset_csv(spec.csv)
    values = dict(spec.synthetic)
    for key in ("separation", "noise"):
        if key in values:
            values[key] = float(values[key])
    generator = SyntheticDataGenerator()
    return frame_to_dataset(generator.generate(MixtureSpec(seed=config.seed, **values)))


def _build_model(config: ExperimentConfig, dataset: LabeledDataset) -> FrozenModel:
    spec = config.model
    if spec.kind == "linear":
        model = build_linear_classifier(dataset.dim, dataset.num_classes, seed=config.seed)
    else:
        model = build_mlp(
            dataset.dim,
            dataset.num_classes,
            hidden_dim=spec.hidden_dim,
            hidden_layers=spec.hidden_layers,
            seed=config.seed,
        )
    pretrain(
        model,
        dataset,
        epochs=spec.pretrain_epochs,
        lr=spec.pretrain_lr,
        batch_size=spec.pretrain_batch_size,
        seed=config.seed,
    )
    return model


def _summary(
    arm: str,
    run: boosting.BoostRun,
    test: Optional[LabeledDataset],
    seed: int,
) -> Dict[str, Any]:
    cfg = run.config
    last = run.reports[-1] if run.reports else None
    audits = run.audits
    summary: Dict[str, Any] = {
        "arm": arm,
        "rounds_completed": run.rounds_completed,
        "terminated_early": run.terminated_early,
        "split_hash": run.split_hash,
        "trainable_params": cfg.adapter.trainable_params,
        "learning_rate": boosting.effective_learning_rate(cfg),
        "lr_scaling": cfg.lr_scaling,
        "initial_train_accuracy": run.initial_accuracy,
        "initial_test_accuracy": run.initial_test_accuracy,
        "final_train_accuracy": last.train_accuracy if last else run.initial_accuracy,
        "final_test_accuracy": last.test_accuracy if last else run.initial_test_accuracy,
        "b_total": run.b_total(),
        "x_round_frozen": run.round_frozen_x,
        "x_final": run.final_x,
        "mean_regression_rate": float(np.mean([a["regression_rate"] for a in audits])) if audits else 0.0,
        "audit_violations": int(sum(a["violations"] for a in audits)),
        "config": cfg.to_dict(),
    }
    summary["train_accuracy_ci"] = bootstrap_accuracy_ci(run.final_correct, seed=seed).to_dict()
    if test is not None:
        pred = forward(run.model, test.features, labels=test.labels)
        summary["test_accuracy_ci"] = bootstrap_accuracy_ci(pred.correct, seed=seed).to_dict()
        if test.num_classes == 2:
            scores = pred.logits[:, 1] - pred.logits[:, 0]
            summary["binary_metrics"] = binary_metrics(test.labels, scores)
    return summary


def cmd_run(args: argparse.Namespace, app_config: AppConfig, tracing: bool) -> int:
    try:
        config = ExperimentConfig.from_yaml(args.config, seed=args.seed, enable_tracing=tracing)
        dataset = _load_dataset(config)
        train, test, split_hash = split_dataset(
            dataset,
            config.dataset.train_fraction,
            config.dataset.test_fraction,
            seed=config.dataset.split_seed,
        )
    except (ConfigurationError, InvalidInputError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE

    out_root = Path(args.out or app_config.output_root) / config.name
    try:
        base_model = _build_model(config, train)
        for arm in config.arms:
            store = RunStore(str(out_root / arm.name))
            store.reset()
            logger.info(f"Arm '{arm.name}': writing to {store.directory}")

            run = boosting.run(
                base_model,
                train,
                arm.boost,
                test_dataset=test,
                split_hash=split_hash,
                on_round=lambda report, _state: store.append_round(report.to_dict()),
                enable_tracing=tracing,
            )
            boosting.checkpoint(run, str(store.path(CHECKPOINT_FILE)))
            store.write_margins(run.margin_snapshots, run.round_x, run.final_x, len(train))
            store.write_summary(_summary(arm.name, run, test, config.seed))
    except RankstackError as e:
        logger.error(f"Run failed: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected error during run: {e}", exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = MixtureSpec(
        classes=args.classes,
        dim=args.dim,
        n=args.n,
        separation=args.separation,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    generator = SyntheticDataGenerator()
    try:
        generator.generate(spec)
    except InvalidInputError as e:
        logger.error(f"Invalid dataset spec: {e}")
        return EXIT_USAGE
    generator.export_to_csv(args.output)
    return EXIT_OK


def _format_measures(label: str, measures) -> str:
    return (
        f"{label}: participation_ratio={measures.participation_ratio:.6f} "
        f"eps_rank={measures.eps_rank} frobenius={measures.frobenius_norm:.6e}"
    )


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= CROSS_CHECK_TOL * max(1.0, abs(b))


def cmd_rank_audit(args: argparse.Namespace) -> int:
    path = Path(args.path)
    checkpoint_path = path / CHECKPOINT_FILE if path.is_dir() else path
    try:
        run = boosting.restore(str(checkpoint_path))
    except IntegrityError as e:
        logger.error(f"Cannot read checkpoint: {e}")
        return EXIT_FAILURE

    if run.reports and not run.deltas:
        logger.error(
            "Checkpoint has no per-round deltas; re-run with boost.store_deltas: true to audit ranks"
        )
        return EXIT_FAILURE

    epsilon = run.config.adapter.epsilon_rank_eps
    try:
        stored = RunStore(str(checkpoint_path.parent)).read_rounds()
    except IntegrityError as e:
        print(f"MISMATCH {e}")
        logger.error(f"Cannot read round reports: {e}")
        return EXIT_FAILURE
    accumulators = [np.zeros_like(acc) for acc in run.accumulators]
    mismatches: List[str] = []
    for t, deltas in enumerate(run.deltas, start=1):
        accumulators = [acc + d for acc, d in zip(accumulators, deltas)]
        measures = [rank_measures(acc, epsilon) for acc in accumulators]
        aggregate = boosting.aggregate_measures(measures, epsilon)
        if t > len(stored):
            mismatches.append(f"round {t}: missing from rounds.jsonl")
            continue
        reported = stored[t - 1].get("rank_measures")
        if not isinstance(reported, dict):
            mismatches.append(f"round {t}: no rank_measures in rounds.jsonl")
            continue
        for key in ("participation_ratio", "eps_rank", "frobenius_norm"):
            if key not in reported:
                mismatches.append(f"round {t}: {key} missing from rounds.jsonl")
            elif not _close(float(getattr(aggregate, key)), float(reported[key])):
                mismatches.append(
                    f"round {t}: {key} recomputed {getattr(aggregate, key)!r} vs reported {reported[key]!r}"
                )
    if len(stored) > len(run.deltas):
        mismatches.append(f"rounds.jsonl lists {len(stored)} round(s), checkpoint holds {len(run.deltas)}")

    measures = [rank_measures(acc, epsilon) for acc in accumulators]
    for m, acc in enumerate(accumulators):
        print(f"{_format_measures(f'module {m}', measures[m])} numerical_rank={numerical_rank(acc)}")
    print(_format_measures("aggregate", boosting.aggregate_measures(measures, epsilon)))

    for m, (recomputed, kept) in enumerate(zip(accumulators, run.accumulators)):
        if not np.allclose(recomputed, kept, rtol=0.0, atol=1e-12):
            mismatches.append(f"module {m}: stored accumulator differs from the sum of deltas")

    if mismatches:
        for line in mismatches:
            print(f"MISMATCH {line}")
        logger.error(f"Rank audit found {len(mismatches)} mismatch(es)")
        return EXIT_FAILURE
    print(f"cross-check OK: {len(run.deltas)} round(s)")
    return EXIT_OK


def cmd_bound_eval(args: argparse.Namespace) -> int:
    store = RunStore(args.run_dir)
    try:
        snapshots, meta = store.read_margins()
    except IntegrityError as e:
        logger.error(f"Cannot read margin snapshots: {e}")
        return EXIT_FAILURE
    try:
        rounds = store.read_rounds()
        cumulative = [float(r["cumulative_v_norm"]) for r in rounds]
    except (IntegrityError, KeyError, TypeError, ValueError) as e:
        logger.error(f"Cannot read round reports: {e}")
        return EXIT_FAILURE
    if len(snapshots) != len(cumulative) + 1:
        logger.error(
            f"{len(snapshots)} margin snapshot(s) do not match {len(cumulative)} reported round(s)"
        )
        return EXIT_FAILURE

    round_x = meta["round_x"]
    X = float(meta["final_x"]) if args.final_x or not round_x else max(round_x)
    margins = snapshots[-1]
    try:
        report = evaluate_bound(
            BoundInputs(
                margins=margins,
                B_total=cumulative[-1] if cumulative else 0.0,
                X=X,
                n=margins.shape[0],
                delta=args.delta,
            )
        )
    except RankstackError as e:
        logger.error(f"Bound evaluation failed: {e}")
        return EXIT_USAGE

    store.write_frame(BOUND_FILE, report.to_frame())
    trajectory = bound_trajectory(snapshots, cumulative, X, delta=args.delta)
    store.write_frame(
        BOUND_ROUNDS_FILE,
        pd.DataFrame([asdict(p) for p in trajectory], columns=TRAJECTORY_COLUMNS),
    )
    summary = report.summary()
    print(
        f"theta_star={summary['theta_star']:.6g} bound_at_star={summary['bound_at_star']:.6g} "
        f"vacuous={str(summary['vacuous']).lower()}"
    )
    return EXIT_OK


def cmd_advantage(args: argparse.Namespace) -> int:
    for line_no, line in enumerate(sys.stdin, start=1):
        tokens = line.split()
        if not tokens:
            continue
        rewards = []
        for tok in tokens:
            try:
                rewards.append(float(tok))
            except ValueError:
                print(f"line {line_no}: non-numeric token {tok!r}", file=sys.stderr)
                return EXIT_USAGE
        try:
            advantages = group_advantages(RewardGroup(rewards=np.array(rewards), epsilon=args.epsilon))
        except RankstackError as e:
            print(f"line {line_no}: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(" ".join(f"{a + 0.0:.9g}" for a in advantages))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        app_config = AppConfig.from_env()
    except ValueError as e:
        print(f"Invalid environment configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose, app_config.log_level)

    threads = args.threads if args.threads is not None else app_config.threads
    if threads < 1:
        logger.error(f"--threads must be >= 1, got {threads}")
        return EXIT_USAGE
    set_threads(threads)

    if args.command == "advantage":
        return cmd_advantage(args)
    if args.command == "gen-data":
        return cmd_gen_data(args)
    if args.command == "rank-audit":
        return cmd_rank_audit(args)
    if args.command == "bound-eval":
        return cmd_bound_eval(args)

    tracing = initialize_langfuse(app_config)
    try:
        return cmd_run(args, app_config, tracing)
    finally:
        if tracing:
            flush_langfuse()


if __name__ == "__main__":
    sys.exit(main())
