"""Synthetic datasets, Dirichlet label partitioning and reference trainers.

All trainers run deterministic full-batch gradient descent in float64 unless a
minibatch size is configured. Parameter layouts:

* linear regression: ``w`` (d,), ``b`` ()
* linear softmax classifier: ``W`` (d, K), ``b`` (K,)
* MLP: ``layers.<i>.weight`` (fan_in, fan_out), ``layers.<i>.bias`` (fan_out,)
  with tanh hidden units and a softmax output layer
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


class DataError(ValueError):
    pass


class InvalidAlpha(DataError):
    pass


class EmptyClass(DataError):
    pass


class Diverged(ArithmeticError):
    pass


class ShapeMismatch(DataError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None  # None for regression

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be n x d and labels a vector")
        if len(self.features) != len(self.labels):
            raise DataError("row counts of features and labels differ")
        if self.n_classes is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise DataError(f"class ids must lie in [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)

    def split(self, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
        """Random split into (first, second) with ``fraction`` of rows in the second."""
        order = np.random.default_rng(seed).permutation(self.n)
        cut = self.n - int(round(self.n * fraction))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


# -- generators --------------------------------------------------------------


def make_regression(n: int, d: int, noise_std: float, seed: int) -> tuple[LabeledDataset, np.ndarray]:
    if not n > d >= 1:
        raise DataError("need n > d >= 1")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(d)
    x = rng.standard_normal((n, d))
    y = x @ w_true + noise_std * rng.standard_normal(n)
    return LabeledDataset(x, y), w_true


def blob_centers(n_classes: int, d: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0]).uniform(-5.0, 5.0, size=(n_classes, d))


def make_blobs(n: int, d: int, n_classes: int, spread: float, seed: int) -> LabeledDataset:
    """Balanced isotropic Gaussian clusters around :func:`blob_centers`."""
    if n_classes < 2:
        raise DataError("need at least two classes")
    centers = blob_centers(n_classes, d, seed)
    rng = np.random.default_rng([seed, 1])
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    x = centers[labels] + spread * rng.standard_normal((n, d))
    return LabeledDataset(x, labels.astype(np.int64), n_classes)


# -- partitioning ------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    assignments: list[np.ndarray]
    alpha: float
    seed: int
    n_clients: int
    repairs: int = 0

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def dirichlet_partition(labels, n_clients: int, alpha: float, seed: int) -> PartitionSpec:
    """Per class, split that class's (shuffled) indices by Dirichlet(alpha) proportions."""
    labels = np.asarray(labels)
    if not alpha > 0 or not np.isfinite(alpha):
        raise InvalidAlpha(f"alpha must be > 0, got {alpha}")
    if n_clients < 1:
        raise DataError("n_clients must be >= 1")
    if len(labels) < n_clients:
        raise DataError(f"{len(labels)} samples cannot cover {n_clients} clients")
    classes = np.unique(labels)
    if len(classes) == 0:
        raise EmptyClass("no samples")
    if np.issubdtype(labels.dtype, np.integer):
        missing = sorted(set(range(int(classes.max()) + 1)) - set(classes.tolist()))
        if missing:
            raise EmptyClass(f"classes {missing} have no samples")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for k in classes:
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(n_clients, alpha))
        cuts = np.round(np.cumsum(p) * len(idx)).astype(np.int64)[:-1]
        for client, piece in enumerate(np.split(idx, cuts)):
            parts[client].append(piece)
    assignments = [np.sort(np.concatenate(p)) for p in parts]
    repairs = 0
    for client in range(n_clients):
        if len(assignments[client]) == 0:
            donor = max(range(n_clients), key=lambda c: (len(assignments[c]), -c))
            moved = assignments[donor][-1]
            assignments[donor] = assignments[donor][:-1]
            assignments[client] = np.array([moved], dtype=np.int64)
            repairs += 1
            log.warning("client %d got no samples; moved index %d from client %d", client, moved, donor)
    return PartitionSpec(assignments, float(alpha), int(seed), n_clients, repairs)


def iid_partition(n: int, n_clients: int, seed: int) -> PartitionSpec:
    order = np.random.default_rng(seed).permutation(n)
    return PartitionSpec([np.sort(a) for a in np.array_split(order, n_clients)], float("inf"), seed, n_clients)


def per_class_counts(labels, spec: PartitionSpec, n_classes: int | None = None) -> list[list[int]]:
    labels = np.asarray(labels)
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return [np.bincount(labels[a], minlength=k).tolist() for a in spec.assignments]


def label_heterogeneity(labels, spec: PartitionSpec) -> float:
    """Mean total-variation distance between each client's label mix and the global one."""
    counts = np.asarray(per_class_counts(labels, spec), dtype=np.float64)
    global_p = counts.sum(axis=0) / counts.sum()
    client_p = counts / counts.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(client_p - global_p).sum(axis=1)))


# -- models ------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))))


def mlp_layer_count(params: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith("layers.") and k.endswith(".weight"))


def predict(params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Regression outputs (n,) or class probabilities (n, K), by parameter layout."""
    if "w" in params:
        return x @ np.asarray(params["w"], dtype=np.float64) + float(params["b"])
    if "W" in params:
        return _softmax(x @ params["W"] + params["b"])
    n_layers = mlp_layer_count(params)
    if n_layers == 0:
        raise ShapeMismatch(f"unrecognized parameter layout {sorted(params)}")
    h = x
    for i in range(n_layers):
        z = h @ params[f"layers.{i}.weight"] + params[f"layers.{i}.bias"]
        h = np.tanh(z) if i < n_layers - 1 else _softmax(z)
    return h


def evaluate(params: Mapping[str, np.ndarray], dataset: LabeledDataset) -> dict[str, float]:
    try:
        out = predict(params, dataset.features)
    except (ValueError, KeyError) as exc:
        raise ShapeMismatch(str(exc)) from exc
    if dataset.is_classification:
        if out.ndim != 2:
            raise ShapeMismatch("classification dataset with regression parameters")
        return {
            "accuracy": float(np.mean(out.argmax(axis=1) == dataset.labels)),
            "loss": _cross_entropy(out, dataset.labels),
        }
    if out.ndim != 1:
        raise ShapeMismatch("regression dataset with classifier parameters")
    return {"mse": float(np.mean((out - dataset.labels) ** 2))}


def mse_loss_and_grad(params: Mapping[str, np.ndarray], x, y) -> tuple[float, Params]:
    """Mean squared error ``mean((x.w + b - y)^2)`` and its exact gradient."""
    r = x @ params["w"] + params["b"] - y
    n = len(y)
    return float(np.mean(r**2)), {"w": 2.0 / n * (x.T @ r), "b": np.asarray(2.0 / n * r.sum())}


def softmax_loss_and_grad(params: Mapping[str, np.ndarray], x, y) -> tuple[float, Params]:
    probs = _softmax(x @ params["W"] + params["b"])
    delta = (probs - _one_hot(y, probs.shape[1])) / len(y)
    return _cross_entropy(probs, y), {"W": x.T @ delta, "b": delta.sum(axis=0)}


def mlp_loss_and_grad(params: Mapping[str, np.ndarray], x, y) -> tuple[float, Params]:
    n_layers = mlp_layer_count(params)
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[f"layers.{i}.weight"] + params[f"layers.{i}.bias"]
        h = np.tanh(z) if i < n_layers - 1 else _softmax(z)
        acts.append(h)
    probs = acts[-1]
    loss = _cross_entropy(probs, y)
    grads: Params = {}
    delta = (probs - _one_hot(y, probs.shape[1])) / len(y)
    for i in reversed(range(n_layers)):
        grads[f"layers.{i}.weight"] = acts[i].T @ delta
        grads[f"layers.{i}.bias"] = delta.sum(axis=0)
        if i:
            delta = (delta @ params[f"layers.{i}.weight"].T) * (1.0 - acts[i] ** 2)
    return loss, grads


def init_mlp(d: int, hidden: Sequence[int], n_classes: int, seed: int) -> Params:
    sizes = [d, *hidden, n_classes]
    rng = np.random.default_rng(seed)
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"layers.{i}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"layers.{i}.bias"] = np.zeros(fan_out)
    return params


# -- trainers ----------------------------------------------------------------


class Trainer(Protocol):
    """Local computation plugged into the client loop."""

    validation_size: int

    def train(self, params: Mapping[str, np.ndarray], round: int) -> tuple[Params, int, dict[str, float]]: ...

    def validate(self, params: Mapping[str, np.ndarray]) -> dict[str, float]: ...


class GradientDescentTrainer:
    """Gradient descent on a loss function; full batch unless ``batch_size`` is set."""

    def __init__(
        self,
        dataset: LabeledDataset,
        loss_and_grad,
        lr: float,
        epochs: int,
        batch_size: int | None = None,
        seed: int = 0,
        validation: LabeledDataset | None = None,
        initial: Params | None = None,
    ):
        if not lr > 0:
            raise DataError("lr must be > 0")
        if epochs < 0:
            raise DataError("epochs must be >= 0")
        self.dataset = dataset
        self.loss_and_grad = loss_and_grad
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.validation = validation if validation is not None else dataset
        self.validation_size = self.validation.n
        self._initial = initial

    def initial_params(self) -> Params:
        if self._initial is None:
            raise DataError("trainer has no initial parameters")
        return {k: v.copy() for k, v in self._initial.items()}

    def train(self, params, round: int = 0) -> tuple[Params, int, dict[str, float]]:
        current = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        x, y = self.dataset.features, self.dataset.labels
        loss = float("nan")
        rng = np.random.default_rng([self.seed, round])
        for _ in range(self.epochs):
            if self.batch_size is None or self.batch_size >= len(y):
                batches = [slice(None)]
            else:
                order = rng.permutation(len(y))
                batches = [order[i : i + self.batch_size] for i in range(0, len(y), self.batch_size)]
            for batch in batches:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = self.loss_and_grad(current, x[batch], y[batch])
                if not np.isfinite(loss):
                    raise Diverged(f"loss became {loss}")
                for name, g in grads.items():
                    current[name] = current[name] - self.lr * g
        out = {k: v.astype(np.asarray(params[k]).dtype) for k, v in current.items()}
        metrics = {} if self.epochs == 0 else {"loss": loss}
        return out, self.dataset.n, metrics

    def validate(self, params) -> dict[str, float]:
        return evaluate(params, self.validation)


def linear_trainer(
    dataset: LabeledDataset,
    lr: float,
    epochs: int,
    batch: str | int = "full",
    seed: int = 0,
    validation: LabeledDataset | None = None,
) -> GradientDescentTrainer:
    batch_size = None if batch == "full" else int(batch)
    if dataset.is_classification:
        initial = {"W": np.zeros((dataset.d, dataset.n_classes)), "b": np.zeros(dataset.n_classes)}
        fn = softmax_loss_and_grad
    else:
        initial = {"w": np.zeros(dataset.d), "b": np.zeros(())}
        fn = mse_loss_and_grad
    return GradientDescentTrainer(dataset, fn, lr, epochs, batch_size, seed, validation, initial)


def mlp_trainer(
    dataset: LabeledDataset,
    hidden_layers: Sequence[int],
    lr: float,
    epochs: int,
    seed: int = 0,
    validation: LabeledDataset | None = None,
) -> GradientDescentTrainer:
    if not dataset.is_classification:
        raise DataError("the MLP trainer is a classifier")
    if not hidden_layers or min(hidden_layers) < 1:
        raise DataError("hidden layer sizes must be >= 1")
    initial = init_mlp(dataset.d, hidden_layers, dataset.n_classes, seed)
    return GradientDescentTrainer(dataset, mlp_loss_and_grad, lr, epochs, None, seed, validation, initial)
