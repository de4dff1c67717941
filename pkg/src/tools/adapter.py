"""Micro-adapter built inside the SVD subspace of a frozen weight.

Each adapted weight W (d x k) receives an update

    dW = U diag(sigma) R V^T,   R = sum_i v_i P_i

where (U, sigma, V) is an r-column window of the SVD of W, the P_i are frozen
r x r Gaussian projections and v (length u) is the only trainable vector.
Modules are tied into g groups that share one v and one projection set, so a
round trains g * u scalars in total.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from tools.linalg import SvdFactors, truncate
from utils.errors import CapacityExhaustedError, ConfigurationError, ShapeError

logger = logging.getLogger(__name__)


class Basis(str, Enum):
    """Which singular directions a round's adapter occupies."""

    TOP = "top"
    ROTATE = "rotate"


@dataclass(frozen=True)
class AdapterConfig:
    """Adapter shape and seeding.

    Attributes:
        rank: SVD window width r
        proj_dim: length u of the trainable vector per group
        groups: number of tying groups g
        basis: TOP or ROTATE
        seed: root seed for the projection streams
        epsilon_rank_eps: relative threshold of the epsilon-rank
        recompute_top: TOP only; take the window from the SVD of the current
            merged weight each round instead of the original one
    """

    rank: int = 2
    proj_dim: int = 3
    groups: int = 3
    basis: Basis = Basis.ROTATE
    seed: int = 0
    epsilon_rank_eps: float = 0.01
    recompute_top: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError(f"must be >= 1, got {self.rank}", field="adapter.rank")
        if self.proj_dim < 1:
            raise ConfigurationError(f"must be >= 1, got {self.proj_dim}", field="adapter.proj_dim")
        if self.groups < 1:
            raise ConfigurationError(f"must be >= 1, got {self.groups}", field="adapter.groups")
        if not 0.0 < self.epsilon_rank_eps < 1.0:
            raise ConfigurationError(
                f"must lie in (0, 1), got {self.epsilon_rank_eps}", field="adapter.epsilon_rank_eps"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"must be a 64-bit unsigned integer, got {self.seed}", field="adapter.seed")
        if not isinstance(self.basis, Basis):
            object.__setattr__(self, "basis", Basis(str(self.basis).lower()))

    @property
    def trainable_params(self) -> int:
        return self.groups * self.proj_dim


@dataclass(frozen=True)
class ProjectionSet:
    """The u frozen r x r projections of one tying group."""

    mats: Tuple[np.ndarray, ...]

    def __post_init__(self):
        for mat in self.mats:
            mat.flags.writeable = False

    @property
    def stack(self) -> np.ndarray:
        """Projections as a (u, r, r) array."""
        return np.stack(self.mats)

    @property
    def proj_dim(self) -> int:
        return len(self.mats)

    @property
    def rank(self) -> int:
        return self.mats[0].shape[0]


@dataclass(frozen=True)
class TyingAssignment:
    """Maps each adapted module to its tying group."""

    groups: Tuple[int, ...]
    num_groups: int

    def group_of(self, module: int) -> int:
        return self.groups[module]

    def members(self, group: int) -> List[int]:
        return [m for m, g in enumerate(self.groups) if g == group]

    @property
    def num_modules(self) -> int:
        return len(self.groups)


def make_projections(cfg: AdapterConfig, group: int) -> ProjectionSet:
    """Draw the projection set of one group.

    Matrix i of group g comes from its own stream keyed by (seed, g, i), with
    i.i.d. N(0, 1/r) entries, so adding groups never changes existing ones.
    """
    r = cfg.rank
    mats = []
    for i in range(cfg.proj_dim):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, group, i]))
        mats.append(rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, r)))
    return ProjectionSet(mats=tuple(mats))


def tie_modules(num_modules: int, g: int) -> TyingAssignment:
    """Tiled assignment: module m belongs to group m mod g."""
    if g < 1:
        raise ConfigurationError(f"must be >= 1, got {g}", field="adapter.groups")
    if g > num_modules:
        raise ConfigurationError(
            f"{g} tying groups but only {num_modules} adapted module(s)", field="adapter.groups"
        )
    return TyingAssignment(groups=tuple(m % g for m in range(num_modules)), num_groups=g)


def build_r(v: Sequence[float], P: ProjectionSet) -> np.ndarray:
    """R = sum_i v_i P_i."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (P.proj_dim,):
        raise ShapeError(
            f"v has shape {v.shape}, expected ({P.proj_dim},)",
            expected=(P.proj_dim,),
            actual=v.shape,
        )
    return np.tensordot(v, P.stack, axes=1)


def _check_window(window: SvdFactors, R: np.ndarray) -> None:
    r = window.width
    if R.shape != (r, r):
        raise ShapeError(f"R has shape {R.shape}, window width is {r}", expected=(r, r), actual=R.shape)


def delta_w(window: SvdFactors, R: np.ndarray) -> np.ndarray:
    """dW = U diag(sigma) R V^T, a d x k matrix of rank <= r."""
    R = np.asarray(R, dtype=np.float64)
    _check_window(window, R)
    return ((window.U * window.sigma) @ R) @ window.V.T


def select_window(f: SvdFactors, basis: Basis, r: int, round_index: int) -> SvdFactors:
    """Singular-vector window used by round `round_index` (1-based)."""
    if round_index < 1:
        raise ConfigurationError(f"round index must be >= 1, got {round_index}")
    if basis == Basis.TOP:
        return truncate(f, 0, r)
    if r * round_index > f.width:
        raise CapacityExhaustedError(round_index=round_index, r=r, p=f.width)
    return truncate(f, r * (round_index - 1), r)


def merge(W: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """W + dW as a new array."""
    W = np.asarray(W, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    if W.shape != dW.shape:
        raise ShapeError(f"cannot merge {dW.shape} into {W.shape}", expected=W.shape, actual=dW.shape)
    return W + dW


def feature_map(
    window: SvdFactors, P: ProjectionSet, h: np.ndarray, readout: np.ndarray
) -> np.ndarray:
    """phi_i = readout^T U diag(sigma) P_i V^T h.

    The logit change along `readout` caused by the adapter is <v, phi>.
    """
    h = np.asarray(h, dtype=np.float64)
    readout = np.asarray(readout, dtype=np.float64)
    if h.shape != (window.V.shape[0],):
        raise ShapeError(
            f"h has shape {h.shape}, expected ({window.V.shape[0]},)",
            expected=(window.V.shape[0],),
            actual=h.shape,
        )
    if readout.shape != (window.U.shape[0],):
        raise ShapeError(
            f"readout has shape {readout.shape}, expected ({window.U.shape[0]},)",
            expected=(window.U.shape[0],),
            actual=readout.shape,
        )
    left = (readout @ window.U) * window.sigma
    right = h @ window.V
    return np.einsum("a,iab,b->i", left, P.stack, right)


def _as_rows(arr: np.ndarray, width: int, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"{name} has shape {arr.shape}, expected (*, {width})", actual=arr.shape)
    return arr


def per_example_features(
    upstream: np.ndarray, window: SvdFactors, P: ProjectionSet, h: np.ndarray
) -> np.ndarray:
    """Row n holds upstream_n^T U diag(sigma) P_i V^T h_n for every i."""
    upstream = _as_rows(upstream, window.U.shape[0], "upstream")
    h = _as_rows(h, window.V.shape[0], "h")
    if upstream.shape[0] != h.shape[0]:
        raise ShapeError(
            f"upstream has {upstream.shape[0]} row(s) but h has {h.shape[0]}",
            expected=(h.shape[0],),
            actual=(upstream.shape[0],),
        )
    left = (upstream @ window.U) * window.sigma
    right = h @ window.V
    return np.einsum("na,iab,nb->ni", left, P.stack, right)


def grad_v(
    upstream: np.ndarray, window: SvdFactors, P: ProjectionSet, h: np.ndarray
) -> np.ndarray:
    """dL/dv for one module, summed over the rows of the batch.

    `upstream` is dL/d(module output), `h` the module input; both may be a
    single vector or a batch of rows.
    """
    upstream = _as_rows(upstream, window.U.shape[0], "upstream")
    h = _as_rows(h, window.V.shape[0], "h")
    if upstream.shape[0] != h.shape[0]:
        raise ShapeError(
            f"upstream has {upstream.shape[0]} row(s) but h has {h.shape[0]}",
            expected=(h.shape[0],),
            actual=(upstream.shape[0],),
        )
    left = (upstream @ window.U) * window.sigma
    right = h @ window.V
    return np.einsum("na,iab,nb->i", left, P.stack, right)


@dataclass
class AdapterState:
    """Trainable state of one boosting round.

    `v` has shape (groups, proj_dim); row g is shared by every module of
    group g. Windows and projections are frozen.
    """

    config: AdapterConfig
    assignment: TyingAssignment
    projections: Tuple[ProjectionSet, ...]
    windows: Tuple[SvdFactors, ...]
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.windows) != self.assignment.num_modules:
            raise ShapeError(
                f"{len(self.windows)} window(s) for {self.assignment.num_modules} module(s)"
            )
        if len(self.projections) != self.assignment.num_groups:
            raise ShapeError(
                f"{len(self.projections)} projection set(s) for {self.assignment.num_groups} group(s)"
            )
        if self.v is None:
            self.v = np.zeros((self.assignment.num_groups, self.config.proj_dim))

    @classmethod
    def fresh(
        cls,
        cfg: AdapterConfig,
        windows: Sequence[SvdFactors],
        assignment: TyingAssignment,
        projections: Optional[Sequence[ProjectionSet]] = None,
    ) -> "AdapterState":
        """New round adapter with v = 0."""
        if projections is None:
            projections = [make_projections(cfg, g) for g in range(assignment.num_groups)]
        return cls(
            config=cfg,
            assignment=assignment,
            projections=tuple(projections),
            windows=tuple(windows),
        )

    @property
    def num_modules(self) -> int:
        return self.assignment.num_modules

    def r_matrix(self, module: int) -> np.ndarray:
        group = self.assignment.group_of(module)
        return build_r(self.v[group], self.projections[group])

    def delta(self, module: int) -> np.ndarray:
        return delta_w(self.windows[module], self.r_matrix(module))

    def deltas(self) -> List[np.ndarray]:
        return [self.delta(m) for m in range(self.num_modules)]

    def apply(self, module: int, H: np.ndarray) -> np.ndarray:
        """Rows of H mapped through dW without materialising it."""
        window = self.windows[module]
        R = self.r_matrix(module)
        return (((H @ window.V) @ R.T) * window.sigma) @ window.U.T

    def apply_transpose(self, module: int, G: np.ndarray) -> np.ndarray:
        """Rows of G mapped through dW^T."""
        window = self.windows[module]
        R = self.r_matrix(module)
        return (((G @ window.U) * window.sigma) @ R) @ window.V.T

    def module_grad(self, module: int, upstream: np.ndarray, h: np.ndarray) -> np.ndarray:
        group = self.assignment.group_of(module)
        return grad_v(upstream, self.windows[module], self.projections[group], h)

    def module_features(self, module: int, upstream: np.ndarray, h: np.ndarray) -> np.ndarray:
        group = self.assignment.group_of(module)
        return per_example_features(upstream, self.windows[module], self.projections[group], h)

    def v_norm(self) -> float:
        return float(np.linalg.norm(self.v))

    def with_v(self, v: np.ndarray) -> "AdapterState":
        return replace(self, v=np.array(v, dtype=np.float64).reshape(self.v.shape))
