"""Gradient-boosted micro-adapters.

Each round evaluates the current merged model, extracts the training examples
it gets wrong, trains a fresh adapter (v = 0) on those examples only, merges
the adapter's delta into the base weights and discards the adapter. The sum
of all merged deltas is tracked in float64 alongside the weights so rank
growth can be measured exactly.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from langfuse.decorators import langfuse_context, observe

from tools.adapter import (
    AdapterConfig,
    AdapterState,
    Basis,
    ProjectionSet,
    make_projections,
    select_window,
    tie_modules,
)
from tools.bounds import estimate_X, regression_audit
from tools.linalg import RankMeasures, SvdFactors, rank_measures, spectral_norm, svd
from tools.model import (
    Evaluation,
    FrozenModel,
    LabeledDataset,
    evaluate,
    max_hidden_norm,
    xent_loss_and_grads,
)
from tools.optim import AdamW, clip_grad_norm, cosine_with_warmup
from utils.checkpoint import read_container, write_container
from utils.errors import (
    CapacityExhaustedError,
    ConfigurationError,
    InvalidInputError,
    TrainingAbortedError,
)

logger = logging.getLogger(__name__)

REFERENCE_PARAMS = 12


@dataclass(frozen=True)
class BoostConfig:
    """Boosting schedule and optimizer settings.

    Attributes:
        rounds: maximum number of rounds T
        adapter: adapter shape and basis strategy
        lr_base: base learning rate
        lr_scaling: scale the rate by sqrt(12 / p) when p = g * u exceeds 12
        epochs_per_round: passes over the failure set per round
        early_stop_threshold: stop when fewer failures remain; None selects
            max(1, ceil(0.5% of n))
        two_phase: train the head on all data before each adapter phase
        failure_focus: train on the failure set (False trains on all data)
        store_deltas: keep every round's per-module delta in the run
        track_x: estimate the frozen-basis X before every round (False leaves
            round_x empty; final_x is always computed)
    """

    rounds: int = 20
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lr_base: float = 5e-4
    lr_scaling: bool = False
    epochs_per_round: int = 3
    early_stop_threshold: Optional[int] = None
    two_phase: bool = False
    seed: int = 0
    batch_size: int = 32
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    grad_clip: float = 1.0
    head_epochs: int = 1
    head_lr: float = 1e-3
    failure_focus: bool = True
    store_deltas: bool = True
    track_x: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError(f"must be >= 1, got {self.rounds}", field="boost.rounds")
        if not self.lr_base > 0:
            raise ConfigurationError(f"must be > 0, got {self.lr_base}", field="boost.lr_base")
        if self.epochs_per_round < 1:
            raise ConfigurationError(
                f"must be >= 1, got {self.epochs_per_round}", field="boost.epochs_per_round"
            )
        if self.early_stop_threshold is not None and self.early_stop_threshold < 0:
            raise ConfigurationError(
                f"must be >= 0, got {self.early_stop_threshold}", field="boost.early_stop_threshold"
            )
        if self.batch_size < 1:
            raise ConfigurationError(f"must be >= 1, got {self.batch_size}", field="boost.batch_size")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigurationError(
                f"must lie in [0, 1], got {self.warmup_ratio}", field="boost.warmup_ratio"
            )
        if self.grad_clip <= 0:
            raise ConfigurationError(f"must be > 0, got {self.grad_clip}", field="boost.grad_clip")
        if self.weight_decay < 0:
            raise ConfigurationError(f"must be >= 0, got {self.weight_decay}", field="boost.weight_decay")
        if self.head_epochs < 0 or self.head_lr < 0:
            raise ConfigurationError("head_epochs and head_lr must be >= 0", field="boost.head_epochs")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["adapter"]["basis"] = self.adapter.basis.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BoostConfig":
        values = dict(data)
        adapter = dict(values.pop("adapter", {}))
        if "basis" in adapter:
            adapter["basis"] = Basis(adapter["basis"])
        return cls(adapter=AdapterConfig(**adapter), **values)


def effective_learning_rate(cfg: BoostConfig) -> float:
    """lr_base * sqrt(12 / p) when scaling is on and p > 12, else lr_base."""
    p = cfg.adapter.trainable_params
    if cfg.lr_scaling and p > REFERENCE_PARAMS:
        return cfg.lr_base * math.sqrt(REFERENCE_PARAMS / p)
    return cfg.lr_base


def default_threshold(n: int) -> int:
    return max(1, math.ceil(0.005 * n))


@dataclass
class RoundReport:
    """Per-round record; rank fields describe the float64 delta accumulator.

    failure_count is measured before training, accuracies after the merge.
    """

    round: int
    failure_count: int
    train_accuracy: float
    test_accuracy: Optional[float]
    v_norm: float
    cumulative_v_norm: float
    delta_frobenius: float
    rank_measures: RankMeasures
    optimizer_steps: int
    regressions: int
    split_hash: str = ""

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["rank_measures"] = self.rank_measures.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RoundReport":
        values = dict(data)
        values["rank_measures"] = RankMeasures(**values["rank_measures"])
        return cls(**values)


@dataclass
class RoundTraining:
    v: np.ndarray
    steps: int
    losses: List[float]
    v_norms: List[float]


@dataclass
class BoostRun:
    """Full trajectory of one boosting run.

    margin_snapshots[0] holds the training margins before round 1 and
    margin_snapshots[t] those after round t.
    """

    config: BoostConfig
    model: FrozenModel
    reports: List[RoundReport] = field(default_factory=list)
    terminated_early: bool = False
    split_hash: str = ""
    initial_accuracy: float = 0.0
    initial_test_accuracy: Optional[float] = None
    margin_snapshots: List[np.ndarray] = field(default_factory=list)
    accumulators: List[np.ndarray] = field(default_factory=list)
    deltas: List[List[np.ndarray]] = field(default_factory=list)
    v_history: List[np.ndarray] = field(default_factory=list)
    loss_curves: List[List[float]] = field(default_factory=list)
    norm_curves: List[List[float]] = field(default_factory=list)
    module_measures: List[List[RankMeasures]] = field(default_factory=list)
    audits: List[Dict[str, Any]] = field(default_factory=list)
    round_x: List[float] = field(default_factory=list)
    final_x: float = 0.0
    final_correct: Optional[np.ndarray] = None
    test_correct: Optional[np.ndarray] = None
    windows: List[Tuple[SvdFactors, ...]] = field(default_factory=list)
    projections: Tuple[ProjectionSet, ...] = ()

    @property
    def rounds_completed(self) -> int:
        return len(self.reports)

    @property
    def round_frozen_x(self) -> float:
        return max(self.round_x) if self.round_x else self.final_x

    def b_total(self) -> float:
        return self.reports[-1].cumulative_v_norm if self.reports else 0.0


class FailureBatchLoader:
    """Shuffled mini-batches over a fixed index set.

    Every batch handed out is appended to `history`, which lets callers check
    exactly which examples reached the optimizer.
    """

    def __init__(self, indices: Sequence[int], batch_size: int, seed: int, round_index: int):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.seed = seed
        self.round_index = round_index
        self.history: List[np.ndarray] = []

    def __len__(self) -> int:
        return math.ceil(self.indices.shape[0] / self.batch_size)

    def epoch(self, epoch: int) -> Iterator[np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 6, self.round_index, epoch]))
        order = rng.permutation(self.indices)
        for start in range(0, order.shape[0], self.batch_size):
            batch = order[start:start + self.batch_size]
            self.history.append(batch)
            yield batch


LoaderFactory = Callable[[np.ndarray, int, int, int], FailureBatchLoader]


def extract_failures(
    model: FrozenModel, dataset: LabeledDataset, adapter: Optional[AdapterState] = None
) -> np.ndarray:
    """Indices the current merged model predicts incorrectly."""
    return evaluate(model, dataset, adapter).failures


def _check_finite(value: float, grads: np.ndarray, round_index: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingAbortedError(f"non-finite loss at step {step}", round_index=round_index)
    if not np.all(np.isfinite(grads)):
        raise TrainingAbortedError(f"non-finite gradient at step {step}", round_index=round_index)


@observe(capture_input=False, capture_output=False)
def train_round(
    model: FrozenModel,
    dataset: LabeledDataset,
    failures: Sequence[int],
    adapter: AdapterState,
    cfg: BoostConfig,
    round_index: int = 1,
    loader: Optional[FailureBatchLoader] = None,
    lr: Optional[float] = None,
) -> RoundTraining:
    """Optimise the adapter's v on the given examples; the model stays frozen.

    AdamW with a cosine schedule, linear warmup and global-norm clipping runs
    for epochs_per_round passes. `lr` overrides the configured rate.
    """
    indices = np.asarray(failures, dtype=np.int64)
    if indices.size == 0:
        raise InvalidInputError(f"round {round_index}: nothing to train on")
    if loader is None:
        loader = FailureBatchLoader(indices, cfg.batch_size, cfg.seed, round_index)
    rate = effective_learning_rate(cfg) if lr is None else lr
    total_steps = cfg.epochs_per_round * len(loader)
    optimizer = AdamW([adapter.v], weight_decay=cfg.weight_decay)

    losses: List[float] = []
    v_norms: List[float] = []
    step = 0
    for epoch in range(cfg.epochs_per_round):
        for batch in loader.epoch(epoch):
            result = xent_loss_and_grads(model, dataset.subset(batch), adapter)
            _check_finite(result.loss, result.grad_v, round_index, step)
            (grad,), _ = clip_grad_norm([result.grad_v], cfg.grad_clip)
            optimizer.step([grad], rate * cosine_with_warmup(step, total_steps, cfg.warmup_ratio))
            if not np.all(np.isfinite(adapter.v)):
                raise TrainingAbortedError(f"non-finite adapter after step {step}", round_index=round_index)
            losses.append(result.loss)
            v_norms.append(adapter.v_norm())
            step += 1
            logger.debug(f"Round {round_index} step {step}/{total_steps}: loss {result.loss:.5f}")

    return RoundTraining(v=adapter.v.copy(), steps=step, losses=losses, v_norms=v_norms)


def train_head(
    model: FrozenModel,
    dataset: LabeledDataset,
    adapter: Optional[AdapterState],
    cfg: BoostConfig,
    round_index: int = 1,
) -> int:
    """Train the classification head on the full dataset; returns the step count."""
    if model.head is None:
        raise ConfigurationError("two-phase training needs a model with a head", field="boost.two_phase")
    loader = FailureBatchLoader(np.arange(len(dataset)), cfg.batch_size, cfg.seed + 1, round_index)
    optimizer = AdamW([model.head.weight, model.head.bias], weight_decay=cfg.weight_decay)
    steps = 0
    for epoch in range(cfg.head_epochs):
        for batch in loader.epoch(epoch):
            result = xent_loss_and_grads(model, dataset.subset(batch), adapter, train_head=True)
            head_w, head_b = result.grad_head
            _check_finite(result.loss, head_w, round_index, steps)
            optimizer.step([head_w, head_b], cfg.head_lr)
            steps += 1
    return steps


def two_phase_round(
    model: FrozenModel,
    dataset: LabeledDataset,
    failures: Sequence[int],
    adapter: AdapterState,
    cfg: BoostConfig,
    round_index: int = 1,
    loader: Optional[FailureBatchLoader] = None,
) -> RoundTraining:
    """Phase 1 trains the head on all data with v frozen; phase 2 trains v on failures."""
    if model.head is None:
        raise ConfigurationError("two-phase training needs a model with a head", field="boost.two_phase")
    head_steps = train_head(model, dataset, adapter, cfg, round_index)
    logger.debug(f"Round {round_index}: head phase took {head_steps} step(s)")
    return train_round(model, dataset, failures, adapter, cfg, round_index, loader)


def check_capacity(model: FrozenModel, cfg: BoostConfig) -> None:
    """Reject configurations whose windows cannot fit the adapted layers."""
    r = cfg.adapter.rank
    p = min(min(W.shape) for W in model.adapted_weights())
    if r > p:
        raise ConfigurationError(f"rank {r} exceeds the smallest adapted layer width {p}", field="adapter.rank")
    if cfg.adapter.basis == Basis.ROTATE and r * cfg.rounds > p:
        raise CapacityExhaustedError(round_index=p // r + 1, r=r, p=p)
    tie_modules(model.num_adapted, cfg.adapter.groups)


def aggregate_measures(measures: Sequence[RankMeasures], epsilon: float) -> RankMeasures:
    """Largest participation ratio and epsilon-rank, joint Frobenius norm."""
    return RankMeasures(
        participation_ratio=max(m.participation_ratio for m in measures),
        eps_rank=max(m.eps_rank for m in measures),
        epsilon=epsilon,
        frobenius_norm=math.sqrt(sum(m.frobenius_norm ** 2 for m in measures)),
    )


@observe(capture_input=False, capture_output=False)
def run(
    model: FrozenModel,
    dataset: LabeledDataset,
    cfg: BoostConfig,
    test_dataset: Optional[LabeledDataset] = None,
    split_hash: str = "",
    on_round: Optional[Callable[[RoundReport, BoostRun], None]] = None,
    loader_factory: Optional[LoaderFactory] = None,
    enable_tracing: bool = False,
) -> BoostRun:
    """Run the boosting loop on a copy of `model`.

    Stops at the first round whose failure count falls below the threshold.
    `on_round` is called after every completed round.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot boost on an empty dataset")
    check_capacity(model, cfg)
    model = model.copy()
    acfg = cfg.adapter
    threshold = cfg.early_stop_threshold
    if threshold is None:
        threshold = default_threshold(len(dataset))

    base_factors = [svd(W) for W in model.adapted_weights()]
    assignment = tie_modules(model.num_adapted, acfg.groups)
    projections = tuple(make_projections(acfg, g) for g in range(assignment.num_groups))

    evaluation = evaluate(model, dataset)
    state = BoostRun(
        config=cfg,
        model=model,
        split_hash=split_hash,
        initial_accuracy=evaluation.accuracy,
        margin_snapshots=[evaluation.margins.copy()],
        accumulators=[np.zeros_like(W) for W in model.adapted_weights()],
        projections=projections,
    )
    if test_dataset is not None:
        state.initial_test_accuracy = evaluate(model, test_dataset).accuracy
    logger.info(
        f"Boosting {cfg.rounds} round(s), basis {acfg.basis.value}, r={acfg.rank}, "
        f"{acfg.trainable_params} trainable parameter(s)/round, lr {effective_learning_rate(cfg):.3g}; "
        f"initial accuracy {evaluation.accuracy:.4f}"
    )

    cumulative = 0.0
    for t in range(1, cfg.rounds + 1):
        failures = evaluation.failures
        if failures.shape[0] < threshold or (cfg.failure_focus and failures.shape[0] == 0):
            state.terminated_early = True
            logger.info(f"Stopping before round {t}: {failures.shape[0]} failure(s) < threshold {threshold}")
            break

        if acfg.basis == Basis.TOP and acfg.recompute_top:
            factors = [svd(W) for W in model.adapted_weights()]
        else:
            factors = base_factors
        windows = [select_window(f, acfg.basis, acfg.rank, t) for f in factors]
        adapter = AdapterState.fresh(acfg, windows, assignment, projections)
        if cfg.track_x:
            state.round_x.append(estimate_X(model, dataset, [adapter]))

        train_idx = failures if cfg.failure_focus else np.arange(len(dataset))
        loader = None
        if loader_factory is not None:
            loader = loader_factory(train_idx, cfg.batch_size, cfg.seed, t)
        if cfg.two_phase:
            trained = two_phase_round(model, dataset, train_idx, adapter, cfg, t, loader)
            before: Evaluation = evaluate(model, dataset)
        else:
            trained = train_round(model, dataset, train_idx, adapter, cfg, t, loader)
            before = evaluation

        deltas = adapter.deltas()
        eps = max(spectral_norm(d) for d in deltas)
        H = max_hidden_norm(model, dataset)
        model.merge_deltas(deltas)
        state.accumulators = [acc + d for acc, d in zip(state.accumulators, deltas)]
        evaluation = evaluate(model, dataset)
        audit = regression_audit(before, evaluation, model.num_adapted, eps, H)

        measures = [rank_measures(acc, acfg.epsilon_rank_eps) for acc in state.accumulators]
        v_norm = adapter.v_norm()
        cumulative += v_norm
        test_accuracy = None
        if test_dataset is not None:
            test_eval = evaluate(model, test_dataset)
            test_accuracy = test_eval.accuracy
            state.test_correct = test_eval.correct
        report = RoundReport(
            round=t,
            failure_count=int(failures.shape[0]),
            train_accuracy=evaluation.accuracy,
            test_accuracy=test_accuracy,
            v_norm=v_norm,
            cumulative_v_norm=cumulative,
            delta_frobenius=math.sqrt(sum(float(np.sum(d * d)) for d in deltas)),
            rank_measures=aggregate_measures(measures, acfg.epsilon_rank_eps),
            optimizer_steps=trained.steps,
            regressions=audit.count,
            split_hash=split_hash,
        )

        state.reports.append(report)
        state.margin_snapshots.append(evaluation.margins.copy())
        state.v_history.append(trained.v)
        state.loss_curves.append(trained.losses)
        state.norm_curves.append(trained.v_norms)
        state.module_measures.append(measures)
        state.audits.append(audit.to_dict())
        state.windows.append(tuple(windows))
        if cfg.store_deltas:
            state.deltas.append(deltas)

        logger.info(
            f"Round {t}: {report.failure_count} failure(s), train acc {report.train_accuracy:.4f}, "
            f"|v| {v_norm:.4g}, eps-rank {report.rank_measures.eps_rank}, {audit.count} regression(s)"
        )
        if enable_tracing:
            langfuse_context.update_current_observation(
                metadata={"round": t, "failures": report.failure_count, "v_norm": v_norm}
            )
        if on_round is not None:
            on_round(report, state)

    state.final_correct = evaluation.correct
    if state.windows:
        adapters = [
            AdapterState.fresh(acfg, windows, assignment, projections) for windows in state.windows
        ]
        state.final_x = estimate_X(model, dataset, adapters)
    if enable_tracing:
        langfuse_context.update_current_observation(
            metadata={
                "rounds": state.rounds_completed,
                "terminated_early": state.terminated_early,
                "final_accuracy": evaluation.accuracy,
            }
        )
    return state


def _run_arrays(run: BoostRun) -> Dict[str, np.ndarray]:
    model_arrays, _ = run.model.state_dict()
    arrays = {f"model.{name}": arr for name, arr in model_arrays.items()}
    for m, acc in enumerate(run.accumulators):
        arrays[f"acc.{m}"] = acc
    for t, v in enumerate(run.v_history, start=1):
        arrays[f"v.{t}"] = v
        arrays[f"loss.{t}"] = np.asarray(run.loss_curves[t - 1], dtype=np.float64)
        arrays[f"vnorm.{t}"] = np.asarray(run.norm_curves[t - 1], dtype=np.float64)
    for t, deltas in enumerate(run.deltas, start=1):
        for m, d in enumerate(deltas):
            arrays[f"delta.{t}.{m}"] = d
    return arrays


def checkpoint(run: BoostRun, path: str) -> None:
    """Write merged weights, accumulators, deltas and reports to a container."""
    _, model_meta = run.model.state_dict()
    metadata = {
        "kind": "boost_run",
        "config": run.config.to_dict(),
        "model": model_meta,
        "reports": [r.to_dict() for r in run.reports],
        "terminated_early": run.terminated_early,
        "split_hash": run.split_hash,
        "initial_accuracy": run.initial_accuracy,
        "initial_test_accuracy": run.initial_test_accuracy,
        "num_modules": len(run.accumulators),
        "deltas_stored": len(run.deltas) > 0 or not run.reports,
        "module_measures": [[m.to_dict() for m in ms] for ms in run.module_measures],
        "audits": run.audits,
        "round_x": run.round_x,
        "final_x": run.final_x,
    }
    write_container(path, _run_arrays(run), metadata)


def restore(path: str) -> BoostRun:
    """Read a run written by checkpoint; corrupt files raise IntegrityError."""
    arrays, meta = read_container(path)
    model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    model = FrozenModel.from_state(model_arrays, meta["model"])
    reports = [RoundReport.from_dict(r) for r in meta["reports"]]
    rounds = len(reports)
    deltas = []
    if meta["deltas_stored"]:
        deltas = [
            [arrays[f"delta.{t}.{m}"] for m in range(meta["num_modules"])] for t in range(1, rounds + 1)
        ]
    return BoostRun(
        config=BoostConfig.from_dict(meta["config"]),
        model=model,
        reports=reports,
        terminated_early=meta["terminated_early"],
        split_hash=meta["split_hash"],
        initial_accuracy=meta["initial_accuracy"],
        initial_test_accuracy=meta["initial_test_accuracy"],
        accumulators=[arrays[f"acc.{m}"] for m in range(meta["num_modules"])],
        deltas=deltas,
        v_history=[arrays[f"v.{t}"] for t in range(1, rounds + 1)],
        loss_curves=[arrays[f"loss.{t}"].tolist() for t in range(1, rounds + 1)],
        norm_curves=[arrays[f"vnorm.{t}"].tolist() for t in range(1, rounds + 1)],
        module_measures=[[RankMeasures(**m) for m in ms] for ms in meta["module_measures"]],
        audits=meta["audits"],
        round_x=meta["round_x"],
        final_x=meta["final_x"],
    )
