"""Small numpy MLP classifier with hand-written backprop.

Parameters live in one flat float64 vector; the per-layer weight and bias
arrays are views into it, so SGD steps and server aggregation are plain
vector arithmetic.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EPS = 1e-12


class ConfigError(ValueError):
    """Raised for shape or configuration mismatches."""


class NumericError(FloatingPointError):
    """Raised when a parameter or gradient stops being finite."""


@dataclass
class ModelParams:
    """Flat parameter vector of an MLP with layer widths ``sizes``.

    Layer ``i`` maps ``sizes[i]`` inputs to ``sizes[i+1]`` outputs; its weight
    matrix is stored row-major with shape ``(sizes[i], sizes[i+1])`` followed
    by the bias.
    """

    sizes: tuple[int, ...]
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ConfigError(f"invalid layer sizes {self.sizes}")
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (num_params(self.sizes),):
            raise ConfigError(
                f"flat vector has {self.flat.size} entries, sizes {self.sizes} need {num_params(self.sizes)}"
            )

    @property
    def q(self) -> int:
        return self.flat.size

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.flat[off:off + fan_out]
            off += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.sizes, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.sizes, flat)


def num_params(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> ModelParams:
    sizes = [layers[0][0].shape[0]] + [w.shape[1] for w, _ in layers]
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return ModelParams(tuple(sizes), np.concatenate(parts))


def unflatten(sizes: Sequence[int], flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(w.copy(), b.copy()) for w, b in ModelParams(tuple(sizes), flat).layers()]


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    parts = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParams(tuple(sizes), np.concatenate(parts))


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(params.sizes, np.zeros_like(params.flat))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.sizes[0]:
        raise ConfigError(f"input width {x.shape[-1]} != model input width {params.sizes[0]}")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray):
    acts = [x]
    layers = params.layers()
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = _check_input(params, x)
    return _forward_cache(params, np.atleast_2d(x))[-1].reshape(x.shape[:-1] + (params.n_classes,))


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one input (1-D) or a batch (2-D)."""
    return softmax(logits(params, x))


def cross_entropy(pred: np.ndarray, label) -> np.ndarray | float:
    """-log(pred[label]) with the probability clamped at EPS."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label)
    if pred.ndim == 1:
        return float(-np.log(max(pred[int(label)], EPS)))
    picked = pred[np.arange(pred.shape[0]), label]
    return -np.log(np.maximum(picked, EPS))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray | float:
    """KL(p || q) along the last axis; 0*log 0 = 0 and q clamped at EPS."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"KL shape mismatch {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, EPS))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Loss composition and gradients


@dataclass
class LossTerm:
    """One per-sample loss applied to the model output on ``x``.

    kind:
      ``"ce"``      cross-entropy against integer ``target``
      ``"kl"``      KL(model || target) with ``target`` a fixed distribution
      ``"soft_ce"`` KL(target || model) with ``target`` fixed; same gradient
                    as cross-entropy against a soft label
    ``weight`` scales each sample's contribution (defaults to 1).
    """

    kind: str
    x: np.ndarray
    target: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ce", "kl", "soft_ce"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.weight is None:
            self.weight = np.ones(self.x.shape[0])
        else:
            self.weight = np.asarray(self.weight, dtype=np.float64)


@dataclass
class LossSpec:
    """Sum of loss terms averaged over ``n`` samples, plus an optional
    proximal penalty ``prox_mu/2 * ||w - prox_anchor||^2``."""

    terms: list[LossTerm]
    n: int | None = None
    prox_mu: float = 0.0
    prox_anchor: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        if self.n is not None:
            return self.n
        return max(t.x.shape[0] for t in self.terms) if self.terms else 0


def ce_spec(x, y, prox_mu: float = 0.0, prox_anchor=None) -> LossSpec:
    return LossSpec([LossTerm("ce", x, np.asarray(y))], prox_mu=prox_mu, prox_anchor=prox_anchor)


def _term_loss(p: np.ndarray, term: LossTerm) -> np.ndarray:
    if term.kind == "ce":
        return cross_entropy(p, term.target)
    if term.kind == "kl":
        return kl_divergence(p, term.target)
    return kl_divergence(term.target, p)


def _term_dlogits(p: np.ndarray, term: LossTerm) -> np.ndarray:
    if term.kind == "ce":
        g = p.copy()
        g[np.arange(p.shape[0]), term.target] -= 1.0
        return g
    if term.kind == "kl":
        # d/dz sum_i p_i (log p_i - log q_i) for p = softmax(z)
        r = np.log(np.maximum(p, EPS)) - np.log(np.maximum(term.target, EPS))
        return p * (r - (p * r).sum(axis=-1, keepdims=True))
    t = term.target
    return p * t.sum(axis=-1, keepdims=True) - t


def loss_value(params: ModelParams, spec: LossSpec) -> float:
    n = spec.batch_size
    if n == 0:
        raise ConfigError("empty batch")
    total = 0.0
    for term in spec.terms:
        if term.x.shape[0] == 0:
            continue
        p = forward(params, term.x)
        total += float(np.dot(term.weight, _term_loss(p, term)))
    total /= n
    if spec.prox_mu:
        diff = params.flat - spec.prox_anchor
        total += 0.5 * spec.prox_mu * float(diff @ diff)
    return total


def loss_and_grad(params: ModelParams, spec: LossSpec, parts: list | None = None) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient w.r.t. the flat parameter vector.

    If ``parts`` is given, each term's contribution to the mean loss is
    appended to it (in term order, proximal penalty last when present).
    """
    n = spec.batch_size
    if n == 0:
        raise ConfigError("empty batch")
    terms = [t for t in spec.terms if t.x.shape[0] > 0]
    grad = np.zeros(params.q)
    loss = 0.0
    if terms:
        x = _check_input(params, np.concatenate([t.x for t in terms]))
        acts = _forward_cache(params, x)
        p = softmax(acts[-1])
        dz_parts = []
        start = 0
        for t in terms:
            stop = start + t.x.shape[0]
            pt = p[start:stop]
            term_loss = float(np.dot(t.weight, _term_loss(pt, t)))
            loss += term_loss
            if parts is not None:
                parts.append(term_loss / n)
            dz_parts.append(_term_dlogits(pt, t) * t.weight[:, None])
            start = stop
        loss /= n
        dz = np.concatenate(dz_parts) / n
        layers = params.layers()
        gw_views = ModelParams(params.sizes, grad).layers()
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            gw, gb = gw_views[i]
            gw[...] = acts[i].T @ dz
            gb[...] = dz.sum(axis=0)
            if i > 0:
                dz = (dz @ w.T) * (1.0 - acts[i] ** 2)
    if spec.prox_mu:
        diff = params.flat - spec.prox_anchor
        prox = 0.5 * spec.prox_mu * float(diff @ diff)
        loss += prox
        grad += spec.prox_mu * diff
        if parts is not None:
            parts.append(prox)
    return loss, grad


def backward(params: ModelParams, spec: LossSpec) -> np.ndarray:
    return loss_and_grad(params, spec)[1]


def sgd_step(params: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient entries")
    return params.with_flat(params.flat - lr * grad)


def prox_sgd_step(params: ModelParams, grad: np.ndarray, lr: float, mu: float, anchor: np.ndarray | None) -> ModelParams:
    """SGD step on ``loss + mu/2 ||w - anchor||^2`` where ``grad`` is the
    gradient of ``loss`` alone and the quadratic is taken implicitly:

        w' = (w - lr * grad + lr * mu * anchor) / (1 + lr * mu)

    First-order identical to the explicit step for small ``lr * mu`` but
    stable for any ``mu``. ``mu == 0`` is exactly :func:`sgd_step`.
    """
    if mu == 0 or anchor is None:
        return sgd_step(params, grad, lr)
    if mu < 0:
        raise ConfigError("proximal coefficient must be non-negative")
    stepped = sgd_step(params, grad, lr).flat
    return params.with_flat((stepped + lr * mu * np.asarray(anchor)) / (1.0 + lr * mu))


def finite_diff_check(
    params: ModelParams,
    spec: LossSpec,
    n_coords: int = 64,
    step: float = 1e-4,
) -> float:
    """Max relative error between ``backward`` and central differences.

    Coordinates are an evenly spaced deterministic subsample of the flat
    vector (all of them when ``q <= n_coords``). Relative error uses
    ``|a - n| / max(|a| + |n|, 1e-8)`` so that near-zero gradients do not
    blow up the ratio.
    """
    analytic = backward(params, spec)
    q = params.q
    idx = np.unique(np.linspace(0, q - 1, min(max(n_coords, 64), q)).astype(int))
    worst = 0.0
    flat = params.flat
    for i in idx:
        up = flat.copy()
        up[i] += step
        dn = flat.copy()
        dn[i] -= step
        num = (loss_value(params.with_flat(up), spec) - loss_value(params.with_flat(dn), spec)) / (2 * step)
        denom = max(abs(analytic[i]) + abs(num), 1e-8)
        worst = max(worst, abs(analytic[i] - num) / denom)
    return float(worst)


GRADCHECK_KINDS = ("ce", "ce+kl", "ce+prox")


def gradcheck_case(kind: str, seed: int, sizes: Sequence[int] = (6, 8, 4), batch: int = 5) -> tuple[ModelParams, LossSpec]:
    """A seeded random model and loss of the given kind for gradient checks."""
    rng = np.random.default_rng([seed, 4242])
    params = init_params(sizes, rng)
    # push weights away from the tiny-init regime so every layer matters
    params = params.with_flat(params.flat * 3.0)
    x = rng.normal(size=(batch, sizes[0]))
    y = rng.integers(0, sizes[-1], size=batch)
    terms = [LossTerm("ce", x, y)]
    mu, anchor = 0.0, None
    if kind == "ce+kl":
        target = rng.dirichlet(np.ones(sizes[-1]), size=batch)
        terms.append(LossTerm("kl", x, target, rng.uniform(0.1, 2.0, size=batch)))
    elif kind == "ce+prox":
        mu, anchor = 0.5, params.flat + rng.normal(scale=0.1, size=params.q)
    elif kind != "ce":
        raise ConfigError(f"unknown gradcheck kind {kind!r}")
    return params, LossSpec(terms, prox_mu=mu, prox_anchor=anchor)


def gradcheck_suite(n_seeds: int = 20) -> dict[str, float]:
    """Worst finite-difference relative error per loss kind over ``n_seeds``
    model/batch pairs."""
    return {
        kind: max(finite_diff_check(*gradcheck_case(kind, s)) for s in range(n_seeds))
        for kind in GRADCHECK_KINDS
    }


# ---------------------------------------------------------------------------
# Checkpoints: b"FSSL", u32 version, u32 n_sizes, u32 sizes..., then f64 LE

CHECKPOINT_MAGIC = b"FSSL"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<II{len(params.sizes)}I", CHECKPOINT_VERSION, len(params.sizes), *params.sizes
    )
    path.write_bytes(header + params.flat.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ConfigError(f"{path}: truncated header")
    version, n_sizes = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 12 + 4 * n_sizes
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, 12)
    expected = num_params(sizes) * 8
    if len(raw) - off != expected:
        raise ConfigError(f"{path}: expected {expected} parameter bytes at offset {off}, found {len(raw) - off}")
    flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    return ModelParams(sizes, flat)
