"""Small frozen-base classifiers whose linear layers carry adapters.

Two architectures are provided:
- a linear classifier: one adapted layer mapping features to logits
- an MLP: [linear -> layernorm -> relu] x hidden_layers, a pre-head
  linear -> layernorm, then a trainable linear head; every linear layer
  except the head is adapted

A linear layer maps an input row h to z = W h + b with W of shape d x k.
When an adapter is supplied its update is applied live, so base weights only
change through merge_deltas.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tools.adapter import AdapterState, merge
from tools.optim import AdamW
from utils.errors import ConfigurationError, InvalidInputError, ShapeError
from utils.parallel import chunk_slices, chunked_map, tree_sum

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


@dataclass
class LabeledDataset:
    """Feature rows with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError(
                f"{self.labels.shape[0]} label(s) for {self.features.shape[0]} example(s)"
            )
        if self.num_classes < 2:
            raise InvalidInputError(f"need at least 2 classes, got {self.num_classes}")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    ln_gamma: Optional[np.ndarray] = None
    ln_beta: Optional[np.ndarray] = None
    relu: bool = False
    adapted: bool = True

    @property
    def layer_norm(self) -> bool:
        return self.ln_gamma is not None


@dataclass
class Head:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class FrozenModel:
    """Ordered dense layers, optional layer norm and ReLU, optional head."""

    kind: str
    layers: List[DenseLayer]
    num_classes: int
    head: Optional[Head] = None

    def __post_init__(self):
        if not self.adapted_layers:
            raise ConfigurationError("model has no adapted layers", field="model")

    @property
    def adapted_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapted]

    @property
    def num_adapted(self) -> int:
        return len(self.adapted_layers)

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weight.shape[1])

    def adapted_weights(self) -> List[np.ndarray]:
        return [self.layers[i].weight for i in self.adapted_layers]

    def merge_deltas(self, deltas: Sequence[np.ndarray]) -> None:
        """Fold one delta per adapted module into the base weights."""
        if len(deltas) != self.num_adapted:
            raise ShapeError(f"{len(deltas)} delta(s) for {self.num_adapted} adapted module(s)")
        for layer_index, dW in zip(self.adapted_layers, deltas):
            layer = self.layers[layer_index]
            layer.weight = merge(layer.weight, dW)

    def copy(self) -> "FrozenModel":
        return FrozenModel.from_state(*self.state_dict())

    def state_dict(self) -> Tuple[Dict[str, np.ndarray], dict]:
        """Arrays keyed by name, plus structural metadata."""
        arrays: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            arrays[f"layer{i}.weight"] = layer.weight.copy()
            arrays[f"layer{i}.bias"] = layer.bias.copy()
            if layer.layer_norm:
                arrays[f"layer{i}.ln_gamma"] = layer.ln_gamma.copy()
                arrays[f"layer{i}.ln_beta"] = layer.ln_beta.copy()
        if self.head is not None:
            arrays["head.weight"] = self.head.weight.copy()
            arrays["head.bias"] = self.head.bias.copy()
        meta = {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "layers": [
                {"relu": layer.relu, "adapted": layer.adapted, "layer_norm": layer.layer_norm}
                for layer in self.layers
            ],
            "head": self.head is not None,
        }
        return arrays, meta

    @classmethod
    def from_state(cls, arrays: Dict[str, np.ndarray], meta: dict) -> "FrozenModel":
        layers = []
        for i, spec in enumerate(meta["layers"]):
            layers.append(
                DenseLayer(
                    weight=np.array(arrays[f"layer{i}.weight"], dtype=np.float64),
                    bias=np.array(arrays[f"layer{i}.bias"], dtype=np.float64),
                    ln_gamma=np.array(arrays[f"layer{i}.ln_gamma"]) if spec["layer_norm"] else None,
                    ln_beta=np.array(arrays[f"layer{i}.ln_beta"]) if spec["layer_norm"] else None,
                    relu=bool(spec["relu"]),
                    adapted=bool(spec["adapted"]),
                )
            )
        head = None
        if meta["head"]:
            head = Head(np.array(arrays["head.weight"]), np.array(arrays["head.bias"]))
        return cls(kind=meta["kind"], layers=layers, num_classes=int(meta["num_classes"]), head=head)


def _gaussian_layer(rng: np.random.Generator, d: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
    return rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k)), np.zeros(d)


def build_linear_classifier(input_dim: int, num_classes: int, seed: int = 0) -> FrozenModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    W, b = _gaussian_layer(rng, num_classes, input_dim)
    return FrozenModel(kind="linear", layers=[DenseLayer(W, b)], num_classes=num_classes)


def build_mlp(
    input_dim: int,
    num_classes: int,
    hidden_dim: int = 64,
    hidden_layers: int = 2,
    seed: int = 0,
) -> FrozenModel:
    """MLP with hidden_layers + 1 adapted layers and a trainable head."""
    if hidden_layers < 1:
        raise ConfigurationError(f"must be >= 1, got {hidden_layers}", field="model.hidden_layers")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    layers = []
    fan_in = input_dim
    for i in range(hidden_layers + 1):
        W, b = _gaussian_layer(rng, hidden_dim, fan_in)
        layers.append(
            DenseLayer(
                weight=W,
                bias=b,
                ln_gamma=np.ones(hidden_dim),
                ln_beta=np.zeros(hidden_dim),
                relu=i < hidden_layers,
            )
        )
        fan_in = hidden_dim
    head_w, head_b = _gaussian_layer(rng, num_classes, hidden_dim)
    return FrozenModel(
        kind="mlp", layers=layers, num_classes=num_classes, head=Head(head_w, head_b)
    )


@dataclass
class Prediction:
    """Forward-pass result for a batch of rows.

    `hidden[m]` is the input activation of adapted module m. `margin` and
    `correct` are None when no labels were given.
    """

    logits: np.ndarray
    predicted: np.ndarray
    margin: Optional[np.ndarray]
    correct: Optional[np.ndarray]
    hidden: List[np.ndarray]


@dataclass
class _LayerCache:
    h_in: np.ndarray
    xhat: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None
    relu_mask: Optional[np.ndarray] = None


@dataclass
class _ForwardCache:
    layers: List[_LayerCache] = field(default_factory=list)
    head_in: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


def _as_batch(model: FrozenModel, x: np.ndarray) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(
            f"input has shape {np.shape(x)}, model expects {model.input_dim} feature(s)",
            expected=(model.input_dim,),
            actual=tuple(np.shape(x)),
        )
    return X


def _check_adapter(model: FrozenModel, adapter: Optional[AdapterState]) -> None:
    if adapter is not None and adapter.num_modules != model.num_adapted:
        raise ShapeError(
            f"adapter covers {adapter.num_modules} module(s), model has {model.num_adapted}"
        )


def _forward(model: FrozenModel, X: np.ndarray, adapter: Optional[AdapterState]) -> _ForwardCache:
    cache = _ForwardCache()
    H = X
    module = 0
    for layer in model.layers:
        entry = _LayerCache(h_in=H)
        Z = H @ layer.weight.T + layer.bias
        if layer.adapted:
            if adapter is not None:
                Z = Z + adapter.apply(module, H)
            module += 1
        if layer.layer_norm:
            mu = Z.mean(axis=1, keepdims=True)
            var = Z.var(axis=1, keepdims=True)
            entry.inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
            entry.xhat = (Z - mu) * entry.inv_std
            Z = layer.ln_gamma * entry.xhat + layer.ln_beta
        if layer.relu:
            entry.relu_mask = Z > 0
            Z = np.where(entry.relu_mask, Z, 0.0)
        cache.layers.append(entry)
        H = Z
    if model.head is not None:
        cache.head_in = H
        H = H @ model.head.weight.T + model.head.bias
    cache.logits = H
    return cache


def _margins(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Correct logit minus best other logit, and the runner-up class."""
    rows = np.arange(logits.shape[0])
    others = logits.copy()
    others[rows, labels] = -np.inf
    runner_up = np.argmax(others, axis=1)
    return logits[rows, labels] - others[rows, runner_up], runner_up


@dataclass
class _Grads:
    v: Optional[np.ndarray] = None
    head_weight: Optional[np.ndarray] = None
    head_bias: Optional[np.ndarray] = None
    layers: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
    features: Optional[np.ndarray] = None


def _backward(
    model: FrozenModel,
    cache: _ForwardCache,
    dlogits: np.ndarray,
    adapter: Optional[AdapterState],
    want_head: bool = False,
    want_base: bool = False,
    per_example: bool = False,
) -> _Grads:
    """Backpropagate dlogits to v and, optionally, the head and base layers.

    With per_example set, the adapter contribution is returned per row as
    an (n, groups * proj_dim) feature array instead of a batch sum.
    """
    grads = _Grads()
    n = dlogits.shape[0]
    if adapter is not None:
        if per_example:
            grads.features = np.zeros((n, adapter.assignment.num_groups, adapter.config.proj_dim))
        else:
            grads.v = np.zeros_like(adapter.v)
    if want_base:
        grads.layers = [None] * len(model.layers)

    G = dlogits
    if model.head is not None:
        if want_head:
            grads.head_weight = G.T @ cache.head_in
            grads.head_bias = G.sum(axis=0)
        G = G @ model.head.weight

    module = model.num_adapted
    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        entry = cache.layers[index]
        if layer.relu:
            G = np.where(entry.relu_mask, G, 0.0)
        if layer.layer_norm:
            D = G.shape[1]
            dxhat = G * layer.ln_gamma
            mean_correction = dxhat.sum(axis=1, keepdims=True)
            std_correction = (dxhat * entry.xhat).sum(axis=1, keepdims=True) * entry.xhat
            G = (D * dxhat - mean_correction - std_correction) * entry.inv_std / D
        if want_base:
            grads.layers[index] = (G.T @ entry.h_in, G.sum(axis=0))
        if layer.adapted:
            module -= 1
            if adapter is not None:
                group = adapter.assignment.group_of(module)
                if per_example:
                    grads.features[:, group, :] += adapter.module_features(module, G, entry.h_in)
                else:
                    grads.v[group] += adapter.module_grad(module, G, entry.h_in)
        if index == 0:
            break
        G_in = G @ layer.weight
        if layer.adapted and adapter is not None:
            G_in = G_in + adapter.apply_transpose(module, G)
        G = G_in

    if per_example and grads.features is not None:
        grads.features = grads.features.reshape(n, -1)
    return grads


def forward(
    model: FrozenModel,
    x: np.ndarray,
    adapter: Optional[AdapterState] = None,
    labels: Optional[np.ndarray] = None,
) -> Prediction:
    """Logits, predictions and (given labels) margins for one row or a batch."""
    X = _as_batch(model, x)
    _check_adapter(model, adapter)
    cache = _forward(model, X, adapter)
    logits = cache.logits
    margin = correct = None
    if labels is not None:
        y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if y.shape != (X.shape[0],):
            raise ShapeError(f"{y.shape[0]} label(s) for {X.shape[0]} row(s)")
        margin, _ = _margins(logits, y)
        # Exact logit ties count as incorrect
        correct = margin > 0
    hidden = [cache.layers[i].h_in for i in model.adapted_layers]
    return Prediction(
        logits=logits,
        predicted=np.argmax(logits, axis=1),
        margin=margin,
        correct=correct,
        hidden=hidden,
    )


@dataclass
class LossAndGrads:
    loss: float
    grad_v: Optional[np.ndarray]
    grad_head: Optional[Tuple[np.ndarray, np.ndarray]] = None


def _cross_entropy_chunk(
    model: FrozenModel,
    X: np.ndarray,
    y: np.ndarray,
    n_total: int,
    adapter: Optional[AdapterState],
    train_head: bool,
    train_base: bool = False,
):
    cache = _forward(model, X, adapter)
    logits = cache.logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    rows = np.arange(X.shape[0])
    loss_sum = float(np.sum(np.log(denom[:, 0]) - shifted[rows, y]))
    dlogits = exp / denom
    dlogits[rows, y] -= 1.0
    dlogits /= n_total
    grads = _backward(model, cache, dlogits, adapter, want_head=train_head, want_base=train_base)
    return loss_sum, grads


def xent_loss_and_grads(
    model: FrozenModel,
    batch: LabeledDataset,
    adapter: Optional[AdapterState],
    train_head: bool = False,
) -> LossAndGrads:
    """Mean cross-entropy over the batch with gradients for v and the head.

    The batch is split into fixed chunks and chunk gradients are combined by
    a pairwise tree sum, so the result does not depend on the thread count.
    """
    n = len(batch)
    if n == 0:
        raise InvalidInputError("cannot compute a loss on an empty batch")
    if train_head and model.head is None:
        raise ConfigurationError("model has no trainable head", field="boost.two_phase")
    _check_adapter(model, adapter)

    def work(chunk: slice):
        return _cross_entropy_chunk(
            model, batch.features[chunk], batch.labels[chunk], n, adapter, train_head
        )

    results = chunked_map(work, chunk_slices(n))
    loss = tree_sum([loss_sum for loss_sum, _ in results]) / n
    grad_v = None
    if adapter is not None:
        grad_v = tree_sum([g.v for _, g in results])
    grad_head = None
    if train_head:
        grad_head = (
            tree_sum([g.head_weight for _, g in results]),
            tree_sum([g.head_bias for _, g in results]),
        )
    return LossAndGrads(loss=float(loss), grad_v=grad_v, grad_head=grad_head)


@dataclass
class Evaluation:
    accuracy: float
    failures: np.ndarray
    margins: np.ndarray
    correct: np.ndarray

    @property
    def failure_count(self) -> int:
        return int(self.failures.shape[0])


def evaluate(
    model: FrozenModel, dataset: LabeledDataset, adapter: Optional[AdapterState] = None
) -> Evaluation:
    """Greedy predictions over the dataset; failures are the incorrect indices."""
    n = len(dataset)
    if n == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")

    def work(chunk: slice) -> np.ndarray:
        pred = forward(model, dataset.features[chunk], adapter, dataset.labels[chunk])
        return pred.margin

    margins = np.concatenate(chunked_map(work, chunk_slices(n)))
    correct = margins > 0
    failures = np.flatnonzero(~correct)
    return Evaluation(
        accuracy=1.0 - failures.shape[0] / n,
        failures=failures,
        margins=margins,
        correct=correct,
    )


def max_hidden_norm(model: FrozenModel, dataset: LabeledDataset) -> float:
    """Largest input-activation norm over examples and adapted layers."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot compute hidden norms on an empty dataset")

    def work(chunk: slice) -> float:
        pred = forward(model, dataset.features[chunk])
        return max(float(np.max(np.linalg.norm(h, axis=1))) for h in pred.hidden)

    return max(chunked_map(work, chunk_slices(len(dataset))))


def margin_features(
    model: FrozenModel, X: np.ndarray, y: np.ndarray, adapter: AdapterState
) -> np.ndarray:
    """Per-example feature vectors of length groups * proj_dim.

    Row n is the gradient of example n's margin with respect to v (runner-up
    class held fixed), evaluated at the adapter's current v. The first-order
    margin change caused by the adapter is <v, phi_n>; for the linear
    classifier at v = 0 it is exact.
    """
    X = _as_batch(model, X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _check_adapter(model, adapter)

    def work(chunk: slice) -> np.ndarray:
        cache = _forward(model, X[chunk], adapter)
        _, runner_up = _margins(cache.logits, y[chunk])
        readout = np.zeros_like(cache.logits)
        rows = np.arange(readout.shape[0])
        readout[rows, y[chunk]] = 1.0
        readout[rows, runner_up] -= 1.0
        return _backward(model, cache, readout, adapter, per_example=True).features

    return np.concatenate(chunked_map(work, chunk_slices(X.shape[0])))


def pretrain(
    model: FrozenModel,
    dataset: LabeledDataset,
    epochs: int = 2,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> List[float]:
    """Full training of linear weights, biases and head before freezing.

    Layer-norm affine parameters stay at their initial values. Returns the
    mean loss per epoch.
    """
    if epochs <= 0:
        return []
    params: List[np.ndarray] = []
    for layer in model.layers:
        params.extend([layer.weight, layer.bias])
    if model.head is not None:
        params.extend([model.head.weight, model.head.bias])
    optimizer = AdamW(params, weight_decay=0.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = len(dataset)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss_sum, grads = _cross_entropy_chunk(
                model,
                dataset.features[idx],
                dataset.labels[idx],
                len(idx),
                None,
                train_head=model.head is not None,
                train_base=True,
            )
            step_grads: List[np.ndarray] = []
            for dW, db in grads.layers:
                step_grads.extend([dW, db])
            if model.head is not None:
                step_grads.extend([grads.head_weight, grads.head_bias])
            optimizer.step(step_grads, lr)
            losses.append(loss_sum / len(idx))
        history.append(float(np.mean(losses)))
        logger.info(f"Pretrain epoch {epoch + 1}/{epochs}: loss {history[-1]:.4f}")
    return history
