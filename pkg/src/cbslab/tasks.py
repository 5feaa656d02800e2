"""Stochastic loss landscapes with per-batch loss/gradient oracles.

Three tasks share one interface: draw a batch from an :class:`~cbslab.rng.RngStream`,
then evaluate batch-mean loss and gradient at a flat float64 parameter vector.

* :class:`QuadraticTask` has an analytically known full gradient and diagonal
  per-example gradient covariance, so estimator code can be checked against
  exact values.
* :class:`MlpTask` is a small feedforward classifier on a synthetic Gaussian
  mixture that is a pure function of its data seed.
* :class:`TinyLmTask` is a feedforward next-token model over a seeded Markov
  corpus, the closest desk-scale stand-in for language-model pretraining.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np

from .rng import RngStream


@dataclass(frozen=True)
class Batch:
    """A drawn batch: opaque task-specific payload plus size/token accounting."""

    examples: object
    size: int
    token_count: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.size}")


def _as_vector(value, dimension: int, name: str) -> np.ndarray:
    """Broadcast a scalar or validate a length-``dimension`` vector."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(dimension, float(arr))
    if arr.shape != (dimension,):
        raise ValueError(f"{name} must be a scalar or length-{dimension} vector, got shape {arr.shape}")
    return arr


def _fingerprint_payload(kind: str, payload: dict) -> bytes:
    canonical = json.dumps({"kind": kind, **payload}, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).digest()[:16]


# ---------------------------------------------------------------------------
# Quadratic task
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class QuadraticTask:
    """Noisy quadratic bowl with diagonal curvature and diagonal gradient noise.

    Per-example loss at parameters ``p`` with residual ``r = p - optimum``:
    ``0.5 * sum(hessian_diag * r**2) + noise . r`` where ``noise`` is zero-mean
    Gaussian with diagonal covariance ``noise_cov_diag``. The per-example
    gradient is therefore ``hessian_diag * r + noise``, which makes the full
    gradient and the per-example gradient covariance exactly known.
    """

    dimension: int
    hessian_diag: np.ndarray
    optimum: np.ndarray
    noise_cov_diag: np.ndarray
    tokens_per_example: int = 1
    init_offset: float = 1.0

    kind = "quadratic"

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if self.tokens_per_example < 1:
            raise ValueError("tokens_per_example must be positive")
        self.hessian_diag = _as_vector(self.hessian_diag, self.dimension, "hessian_diag")
        self.optimum = _as_vector(self.optimum, self.dimension, "optimum")
        self.noise_cov_diag = _as_vector(self.noise_cov_diag, self.dimension, "noise_cov_diag")
        if not np.all(self.hessian_diag > 0):
            raise ValueError("hessian_diag entries must be > 0")
        if not np.all(self.noise_cov_diag >= 0):
            raise ValueError("noise_cov_diag entries must be >= 0")
        self._noise_std = np.sqrt(self.noise_cov_diag)

    @property
    def param_dim(self) -> int:
        return self.dimension

    def init_params(self, rng: RngStream) -> np.ndarray:
        # Deterministic start away from the optimum; rng kept in the signature
        # so all tasks initialize through the same call.
        del rng
        return self.optimum + self.init_offset

    def sample_batch(self, rng: RngStream, size: int) -> Batch:
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        noise = rng.standard_normal((size, self.dimension)) * self._noise_std
        return Batch(noise, size, size * self.tokens_per_example)

    def loss_and_grad(self, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.dimension,):
            raise ValueError(f"params must have shape ({self.dimension},), got {params.shape}")
        residual = params - self.optimum
        mean_noise = batch.examples.mean(axis=0)
        loss = 0.5 * float(self.hessian_diag @ (residual * residual)) + float(mean_noise @ residual)
        grad = self.hessian_diag * residual + mean_noise
        return loss, grad

    def full_gradient(self, params: np.ndarray) -> np.ndarray:
        """Noise-free gradient of the expected loss."""
        return self.hessian_diag * (np.asarray(params, dtype=np.float64) - self.optimum)

    def fingerprint(self) -> bytes:
        return _fingerprint_payload(
            self.kind,
            {
                "dimension": self.dimension,
                "hessian_diag": self.hessian_diag.tolist(),
                "optimum": self.optimum.tolist(),
                "noise_cov_diag": self.noise_cov_diag.tolist(),
                "tokens_per_example": self.tokens_per_example,
                "init_offset": self.init_offset,
            },
        )


def analytic_noise_scale(task: QuadraticTask, params: np.ndarray) -> float:
    """Exact ratio of per-example gradient variance to squared full gradient.

    Returns ``trace(cov) / ||full_gradient||**2``; an exact reference for the
    two-batch-size statistical estimator. When the full gradient vanishes the
    ratio is unbounded, signalled here as ``inf`` (or 0.0 in the doubly
    degenerate noise-free case).
    """
    g = task.full_gradient(params)
    g2 = float(g @ g)
    trace = float(np.sum(task.noise_cov_diag))
    if g2 == 0.0:
        return math.inf if trace > 0.0 else 0.0
    return trace / g2


# ---------------------------------------------------------------------------
# Shared feedforward machinery
# ---------------------------------------------------------------------------


def _activation_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _activation_backward(name: str, a: np.ndarray, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    n = logits.shape[0]
    loss = -float(log_probs[np.arange(n), labels].mean())
    dlogits = exp / total
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


class _AffineStack:
    """Flat-vector packing and forward/backward for a dense layer chain."""

    def __init__(self, dims: list[int], activation: str):
        self.dims = dims
        self.activation = activation
        self.shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            self.shapes.append((fan_in, fan_out))
            self.shapes.append((fan_out,))
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.total = sum(self.sizes)

    def views(self, flat: np.ndarray) -> list[np.ndarray]:
        offset = 0
        out = []
        for shape, size in zip(self.shapes, self.sizes):
            out.append(flat[offset : offset + size].reshape(shape))
            offset += size
        return out

    def init(self, rng: RngStream) -> np.ndarray:
        flat = np.zeros(self.total)
        tensors = self.views(flat)
        for i in range(0, len(tensors), 2):
            w = tensors[i]
            w[...] = rng.standard_normal(w.shape) / math.sqrt(w.shape[0])
        return flat

    def forward(self, flat: np.ndarray, x: np.ndarray):
        """Returns (logits, cache); the last layer has no activation."""
        tensors = self.views(flat)
        n_layers = len(tensors) // 2
        acts = [x]
        pre = []
        h = x
        for i in range(n_layers):
            w, b = tensors[2 * i], tensors[2 * i + 1]
            z = h @ w + b
            pre.append(z)
            h = z if i == n_layers - 1 else _activation_forward(self.activation, z)
            acts.append(h)
        return h, (tensors, acts, pre)

    def backward(self, dlogits: np.ndarray, cache, grad_flat: np.ndarray) -> np.ndarray:
        """Fills ``grad_flat`` with layer grads; returns gradient w.r.t. the input."""
        tensors, acts, pre = cache
        grads = self.views(grad_flat)
        n_layers = len(tensors) // 2
        delta = dlogits
        for i in range(n_layers - 1, -1, -1):
            w = tensors[2 * i]
            grads[2 * i][...] = acts[i].T @ delta
            grads[2 * i + 1][...] = delta.sum(axis=0)
            delta = delta @ w.T
            if i > 0:
                delta = delta * _activation_backward(self.activation, acts[i], pre[i - 1])
        return delta


# ---------------------------------------------------------------------------
# MLP classification task
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MlpTask:
    """Feedforward classifier on a seeded synthetic Gaussian-mixture dataset."""

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    data_seed: int = 0
    input_dim: int = 16
    num_classes: int = 10
    tokens_per_example: int = 1
    dataset_size: int = 2048
    class_separation: float = 3.0

    kind = "mlp"

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if not self.layer_widths or any(w < 1 for w in self.layer_widths):
            raise ValueError("layer_widths must be a nonempty list of positive ints")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu', got {self.activation!r}")
        if min(self.input_dim, self.num_classes, self.tokens_per_example, self.dataset_size) < 1:
            raise ValueError("input_dim, num_classes, tokens_per_example, dataset_size must be positive")
        self._stack = _AffineStack(
            [self.input_dim, *self.layer_widths, self.num_classes], self.activation
        )

    @cached_property
    def _dataset(self) -> tuple[np.ndarray, np.ndarray]:
        gen = np.random.default_rng(self.data_seed)
        centers = gen.normal(size=(self.num_classes, self.input_dim))
        centers *= self.class_separation / math.sqrt(self.input_dim)
        labels = gen.integers(0, self.num_classes, self.dataset_size)
        inputs = centers[labels] + gen.normal(size=(self.dataset_size, self.input_dim))
        return inputs, labels

    @property
    def param_dim(self) -> int:
        return self._stack.total

    def init_params(self, rng: RngStream) -> np.ndarray:
        return self._stack.init(rng)

    def sample_batch(self, rng: RngStream, size: int) -> Batch:
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        inputs, labels = self._dataset
        idx = rng.integers(0, self.dataset_size, size)
        return Batch((inputs[idx], labels[idx]), size, size * self.tokens_per_example)

    def loss_and_grad(self, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_dim,):
            raise ValueError(f"params must have shape ({self.param_dim},), got {params.shape}")
        x, y = batch.examples
        logits, cache = self._stack.forward(params, x)
        loss, dlogits = _cross_entropy(logits, y)
        grad = np.zeros_like(params)
        self._stack.backward(dlogits, cache, grad)
        return loss, grad

    def fingerprint(self) -> bytes:
        return _fingerprint_payload(
            self.kind,
            {
                "layer_widths": list(self.layer_widths),
                "activation": self.activation,
                "data_seed": self.data_seed,
                "input_dim": self.input_dim,
                "num_classes": self.num_classes,
                "tokens_per_example": self.tokens_per_example,
                "dataset_size": self.dataset_size,
                "class_separation": self.class_separation,
            },
        )


# ---------------------------------------------------------------------------
# Tiny next-token task
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TinyLmTask:
    """Next-token predictor over a seeded first-order Markov corpus.

    The model embeds a fixed-length context, concatenates the embeddings, and
    runs them through ``num_layers`` dense layers before a vocabulary softmax.
    Loss is the mean cross-entropy of the single next token; each example
    accounts for ``context_len`` tokens.
    """

    vocab_size: int
    context_len: int
    embed_dim: int
    num_layers: int = 1
    corpus_seed: int = 0
    corpus_len: int = 65536

    kind = "tiny_lm"

    def __post_init__(self):
        if min(self.vocab_size, self.context_len, self.embed_dim, self.num_layers) < 1:
            raise ValueError("vocab_size, context_len, embed_dim, num_layers must be positive")
        if self.corpus_len < self.context_len + 1:
            raise ValueError("corpus_len must exceed context_len")
        dims = [self.context_len * self.embed_dim]
        dims.extend([self.embed_dim] * self.num_layers)
        dims.append(self.vocab_size)
        self._stack = _AffineStack(dims, "tanh")
        self._embed_size = self.vocab_size * self.embed_dim

    @property
    def tokens_per_example(self) -> int:
        return self.context_len

    @cached_property
    def _corpus(self) -> np.ndarray:
        gen = np.random.default_rng(self.corpus_seed)
        # Sparse-ish Markov transition rows make the source predictable enough
        # that training has signal but keeps nonzero entropy.
        weights = gen.gamma(0.3, size=(self.vocab_size, self.vocab_size)) + 1e-12
        transition = weights / weights.sum(axis=1, keepdims=True)
        cumulative = np.cumsum(transition, axis=1)
        tokens = np.empty(self.corpus_len, dtype=np.int64)
        state = int(gen.integers(self.vocab_size))
        draws = gen.uniform(size=self.corpus_len)
        for i in range(self.corpus_len):
            state = int(np.searchsorted(cumulative[state], draws[i]))
            if state >= self.vocab_size:  # guard against u == 1.0 edge
                state = self.vocab_size - 1
            tokens[i] = state
        return tokens

    @property
    def param_dim(self) -> int:
        return self._embed_size + self._stack.total

    def init_params(self, rng: RngStream) -> np.ndarray:
        flat = np.zeros(self.param_dim)
        flat[: self._embed_size] = rng.standard_normal(self._embed_size) / math.sqrt(self.embed_dim)
        flat[self._embed_size :] = self._stack.init(rng)
        return flat

    def sample_batch(self, rng: RngStream, size: int) -> Batch:
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        corpus = self._corpus
        starts = rng.integers(0, self.corpus_len - self.context_len, size)
        window = starts[:, None] + np.arange(self.context_len + 1)[None, :]
        chunk = corpus[window]
        contexts = chunk[:, :-1]
        targets = chunk[:, -1]
        return Batch((contexts, targets), size, size * self.tokens_per_example)

    def loss_and_grad(self, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_dim,):
            raise ValueError(f"params must have shape ({self.param_dim},), got {params.shape}")
        contexts, targets = batch.examples
        n = contexts.shape[0]
        embed = params[: self._embed_size].reshape(self.vocab_size, self.embed_dim)
        gathered = embed[contexts]  # (n, context_len, embed_dim)
        x = gathered.reshape(n, self.context_len * self.embed_dim)
        logits, cache = self._stack.forward(params[self._embed_size :], x)
        loss, dlogits = _cross_entropy(logits, targets)
        grad = np.zeros_like(params)
        dx = self._stack.backward(dlogits, cache, grad[self._embed_size :])
        dembed = grad[: self._embed_size].reshape(self.vocab_size, self.embed_dim)
        np.add.at(dembed, contexts.reshape(-1), dx.reshape(n * self.context_len, self.embed_dim))
        return loss, grad

    def fingerprint(self) -> bytes:
        return _fingerprint_payload(
            self.kind,
            {
                "vocab_size": self.vocab_size,
                "context_len": self.context_len,
                "embed_dim": self.embed_dim,
                "num_layers": self.num_layers,
                "corpus_seed": self.corpus_seed,
                "corpus_len": self.corpus_len,
            },
        )


TaskSpec = Union[QuadraticTask, MlpTask, TinyLmTask]


def sample_batch(task: TaskSpec, rng: RngStream, size: int) -> Batch:
    """Draw ``size`` i.i.d. examples from the task distribution using ``rng``."""
    return task.sample_batch(rng, size)


def loss_and_grad(task: TaskSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Batch-mean loss and gradient at ``params``; pure in (params, batch)."""
    return task.loss_and_grad(params, batch)
