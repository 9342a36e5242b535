"""Auxiliary per-model statistics: diagonal Fisher, Gram matrices, trim masks.

Statistics are computed for a small stack of linear layers (``ToyModel``)
with an exact backward pass, so no ML framework is needed. Accumulation is in
float64; stored values are float32.

Statistics files are ordinary containers whose tensor names carry a prefix:
``fisher/<tensor>``, ``gram/<weight tensor>`` and ``trim/<tensor>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mergelab import cost_model
from mergelab.checkpoint import TensorMap
from mergelab.merge import kernels

LOSSES = ("squared", "softmax")
ACTIVATIONS = (None, "tanh")


@dataclass
class ActivationBatch:
    layer: str
    Z: np.ndarray  # L x d

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z))
        if self.Z.shape[0] < 1:
            raise ValueError(f"activation batch for {self.layer!r} is empty")


@dataclass
class GramMatrix:
    layer: str
    G: np.ndarray
    count: int


def compute_gram(batches: Sequence[ActivationBatch]) -> GramMatrix:
    """``G = (1 / sum L) * sum Z^T Z``, symmetrized."""
    if not batches:
        raise ValueError("need at least one activation batch")
    d = batches[0].Z.shape[1]
    acc = np.zeros((d, d))
    count = 0
    for b in batches:
        if b.Z.shape[1] != d:
            raise ValueError(f"activation dim {b.Z.shape[1]} != {d} for layer {b.layer!r}")
        Z = np.asarray(b.Z, dtype=np.float64)
        acc += Z.T @ Z
        count += Z.shape[0]
    G = acc / count
    G = (G + G.T) / 2
    return GramMatrix(batches[0].layer, G.astype(np.float32), count)


class ToyModel:
    """Stack of linear layers ``h <- act(h @ W + b)``; no activation after the last.

    Parameters live in a tensor map as ``<layer>.weight`` (d x k) and an
    optional ``<layer>.bias`` (k). The likelihood is a unit-variance Gaussian
    (``loss="squared"``) or a softmax over the outputs.
    """

    def __init__(
        self,
        layers: Sequence[str],
        params: Mapping[str, np.ndarray],
        activation: str | None = None,
        loss: str = "squared",
    ):
        if loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not layers:
            raise ValueError("model needs at least one layer")
        self.layers = list(layers)
        self.activation = activation
        self.loss = loss
        self.params = {n: np.asarray(v, dtype=np.float64) for n, v in params.items()}
        prev = None
        for layer in self.layers:
            W = self.params.get(f"{layer}.weight")
            if W is None or W.ndim != 2:
                raise ValueError(f"layer {layer!r} needs a 2-D '{layer}.weight'")
            if prev is not None and W.shape[0] != prev:
                raise ValueError(f"layer {layer!r} expects input dim {W.shape[0]}, previous layer gives {prev}")
            b = self.params.get(f"{layer}.bias")
            if b is not None and b.shape != (W.shape[1],):
                raise ValueError(f"'{layer}.bias' must have shape ({W.shape[1]},)")
            prev = W.shape[1]

    @property
    def param_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.append(f"{layer}.weight")
            if f"{layer}.bias" in self.params:
                names.append(f"{layer}.bias")
        return names

    def with_params(self, params: Mapping[str, np.ndarray]) -> "ToyModel":
        return ToyModel(self.layers, params, self.activation, self.loss)

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else z

    def _dact(self, z):
        return 1.0 - np.tanh(z) ** 2 if self.activation == "tanh" else np.ones_like(z)

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        """Returns ``(output, layer_inputs, pre_activations)``."""
        h = np.asarray(X, dtype=np.float64)
        inputs, pre = [], []
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            z = h @ self.params[f"{layer}.weight"]
            if f"{layer}.bias" in self.params:
                z = z + self.params[f"{layer}.bias"]
            pre.append(z)
            h = self._act(z) if i < len(self.layers) - 1 else z
        return h, inputs, pre

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def _backprop(self, delta: np.ndarray, inputs, pre) -> list[np.ndarray]:
        """Per-layer output deltas, last layer first reversed back to input order."""
        deltas = [delta]
        for i in range(len(self.layers) - 1, 0, -1):
            delta = (delta @ self.params[f"{self.layers[i]}.weight"].T) * self._dact(pre[i - 1])
            deltas.append(delta)
        return deltas[::-1]

    def output_score(self, out: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d log p(y | x) / d output, per example."""
        if self.loss == "squared":
            return np.asarray(y, dtype=np.float64) - out
        p = _softmax(out)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(p)), np.asarray(y, dtype=np.int64)] = 1.0
        return onehot - p

    def loss_value(self, X: np.ndarray, Y: np.ndarray) -> float:
        """Mean negative log-likelihood (constants dropped)."""
        out = self.predict(X)
        if self.loss == "squared":
            return float(0.5 * np.mean(np.sum((np.asarray(Y, dtype=np.float64) - out) ** 2, axis=1)))
        logp = out - _logsumexp(out)
        return float(-np.mean(logp[np.arange(len(out)), np.asarray(Y, dtype=np.int64)]))

    def loss_gradient(self, X: np.ndarray, Y: np.ndarray) -> dict[str, np.ndarray]:
        out, inputs, pre = self.forward(X)
        n = len(out)
        deltas = self._backprop(-self.output_score(out, Y) / n, inputs, pre)
        grads = {}
        for layer, a, d in zip(self.layers, inputs, deltas):
            grads[f"{layer}.weight"] = a.T @ d
            if f"{layer}.bias" in self.params:
                grads[f"{layer}.bias"] = d.sum(axis=0)
        return grads

    def sample_labels(self, out: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        if self.loss == "squared":
            return out + gen.standard_normal(out.shape)
        p = _softmax(out)
        u = gen.random((len(p), 1))
        return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(z - _logsumexp(z))


def compute_fisher_diag(
    model: ToyModel,
    inputs: np.ndarray,
    n_samples: int = 1,
    *,
    labels: np.ndarray | None = None,
    empirical: bool = False,
    seed: int = 0,
) -> TensorMap:
    """Diagonal Fisher: mean squared per-example score.

    By default labels are drawn from the model's own predictive distribution,
    ``n_samples`` draws per input. With ``empirical=True`` the observed
    ``labels`` are used instead (one term per input).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if empirical and labels is None:
        raise ValueError("empirical Fisher needs observed labels")
    out, layer_inputs, pre = model.forward(inputs)
    gen = np.random.default_rng(seed)
    acc = {n: np.zeros_like(model.params[n]) for n in model.param_names}
    draws = 1 if empirical else n_samples
    for _ in range(draws):
        y = labels if empirical else model.sample_labels(out, gen)
        deltas = model._backprop(model.output_score(out, y), layer_inputs, pre)
        for layer, a, d in zip(model.layers, layer_inputs, deltas):
            # (a_i d_j)^2 = a_i^2 d_j^2, summed over examples
            acc[f"{layer}.weight"] += (a**2).T @ (d**2)
            if f"{layer}.bias" in acc:
                acc[f"{layer}.bias"] += (d**2).sum(axis=0)
    total = draws * len(out)
    return {n: (acc[n] / total).astype(np.float32) for n in sorted(acc)}


def layer_activations(model: ToyModel, inputs: np.ndarray) -> list[ActivationBatch]:
    _, layer_inputs, _ = model.forward(inputs)
    return [ActivationBatch(layer, a) for layer, a in zip(model.layers, layer_inputs)]


def finite_difference_check(
    model: ToyModel,
    X: np.ndarray,
    Y: np.ndarray,
    eps: float = 1e-4,
    params: Mapping[str, np.ndarray] | None = None,
    gradient: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max over entries of ``|a - n| / max(1, |a|, |n|)`` for analytic ``a`` and central difference ``n``.

    Relative for large gradients, absolute for small ones, so a single
    corrupted entry shows up at full size. ``gradient`` overrides the analytic
    gradient (to test the check itself).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if params is not None:
        model = model.with_params(params)
    analytic = gradient if gradient is not None else model.loss_gradient(X, Y)
    worst = 0.0
    for name in model.param_names:
        theta = model.params[name]
        numeric = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + eps
            up = model.loss_value(X, Y)
            theta[idx] = orig - eps
            down = model.loss_value(X, Y)
            theta[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        a = np.asarray(analytic[name], dtype=np.float64)
        scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        worst = max(worst, float((np.abs(a - numeric) / scale).max()))
    return worst


def model_statistics(
    model: ToyModel,
    inputs: np.ndarray,
    *,
    labels: np.ndarray | None = None,
    fisher: bool = True,
    gram: bool = True,
    base: Mapping[str, np.ndarray] | None = None,
    k_fraction: float | None = None,
    n_samples: int = 1,
    empirical: bool = False,
    seed: int = 0,
) -> TensorMap:
    """Everything a merge may need for one constituent, as a prefixed tensor map."""
    stats: TensorMap = {}
    if fisher:
        for name, f in compute_fisher_diag(
            model, inputs, n_samples, labels=labels, empirical=empirical, seed=seed
        ).items():
            stats[f"fisher/{name}"] = f
    if gram:
        for batch in layer_activations(model, inputs):
            stats[f"gram/{batch.layer}.weight"] = compute_gram([batch]).G
    if base is not None:
        if k_fraction is None:
            raise ValueError("trim statistics need k_fraction")
        tv = {n: kernels.compute_task_vector(model.params[n], base[n]) for n in model.params}
        for name, mask in kernels.compute_trim_statistic(tv, k_fraction).items():
            stats[f"trim/{name}"] = mask
    return {n: stats[n] for n in sorted(stats)}


def compute_statistics_flops_actual(method: str, dims: cost_model.LayerDims, T: int | None = None) -> int:
    """Statistics FLOPs for ``method``; ``T`` (tokens) overrides ``dims.T``."""
    if T is not None:
        dims = cost_model.LayerDims(dims.d, dims.k, dims.M, dims.N, dims.K, T)
    return cost_model.statistics_flops(method, dims)
