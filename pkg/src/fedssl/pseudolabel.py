"""Confidence-based local/global selection, thresholded pseudo-labels and
the global-local consistency weight.

Classes are 0-based; ``DISCARD`` (-1) marks a sample whose selected
prediction did not clear the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .nn import LossSpec, LossTerm, ModelParams, loss_and_grad

DISCARD = -1


class Metric(str, Enum):
    VARIANCE = "variance"
    NEG_ENTROPY = "neg_entropy"


class Mode(str, Enum):
    CONFIDENCE = "confidence"
    LOCAL_ONLY = "local_only"
    GLOBAL_ONLY = "global_only"


class Source(str, Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class SslConfig:
    beta: float = 0.4
    lambda0: float = 1.0
    metric: Metric = Metric.VARIANCE
    mode: Mode = Mode.CONFIDENCE

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")


def confidence_variance(p: np.ndarray) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    out = ((p - 1.0 / n) ** 2).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def confidence_neg_entropy(p: np.ndarray) -> np.ndarray | float:
    """ln N - H(p); zero for the uniform vector, ln N for a one-hot."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    # clamp tiny negative rounding at the uniform point
    out = np.maximum(np.log(n) + plogp.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def confidence(p: np.ndarray, metric: Metric | str) -> np.ndarray | float:
    if Metric(metric) is Metric.VARIANCE:
        return confidence_variance(p)
    return confidence_neg_entropy(p)


@dataclass
class LogitPair:
    global_probs: np.ndarray
    local_probs: np.ndarray
    global_conf: float
    local_conf: float

    @classmethod
    def from_probs(cls, global_probs, local_probs, metric=Metric.VARIANCE) -> "LogitPair":
        return cls(
            np.asarray(global_probs, dtype=np.float64),
            np.asarray(local_probs, dtype=np.float64),
            confidence(global_probs, metric),
            confidence(local_probs, metric),
        )


@dataclass
class PseudoLabelDecision:
    selected: Source
    s_star: np.ndarray
    s_minus_star: np.ndarray
    label: int
    kl_active: bool
    lam: float


def select_logit(pair: LogitPair, mode: Mode | str = Mode.CONFIDENCE):
    """Returns ``(s_star, s_minus_star, selected)``; ties go to the global model."""
    mode = Mode(mode)
    if mode is Mode.LOCAL_ONLY or (mode is Mode.CONFIDENCE and pair.local_conf > pair.global_conf):
        return pair.local_probs, pair.global_probs, Source.LOCAL
    return pair.global_probs, pair.local_probs, Source.GLOBAL


def pseudo_label(s_star: np.ndarray, beta: float) -> int:
    s_star = np.asarray(s_star)
    return int(np.argmax(s_star)) if s_star.max() > beta else DISCARD


def lambda_weight(conf_star: float, conf_minus_star: float, lambda0: float) -> float:
    """lambda0 * h(s-*) / h(s*), capped at lambda0.

    The cap only bites in the forced local/global modes, where the kept
    model can be the less confident one.
    """
    if conf_star <= 0:
        return 0.0
    return lambda0 * min(conf_minus_star / conf_star, 1.0)


def decide(pair: LogitPair, config: SslConfig) -> PseudoLabelDecision:
    s_star, s_minus, selected = select_logit(pair, config.mode)
    h_star, h_minus = (
        (pair.local_conf, pair.global_conf) if selected is Source.LOCAL else (pair.global_conf, pair.local_conf)
    )
    label = pseudo_label(s_star, config.beta)
    kl_active = label != DISCARD and int(np.argmax(s_minus)) == label
    lam = lambda_weight(h_star, h_minus, config.lambda0) if kl_active else 0.0
    return PseudoLabelDecision(selected, s_star, s_minus, label, bool(kl_active), lam)


@dataclass
class BatchDecisions:
    """Vectorized :func:`decide` over a set of unlabeled samples."""

    selected_local: np.ndarray   # bool
    s_minus_star: np.ndarray     # (n, N) fixed consistency targets
    labels: np.ndarray           # int, DISCARD where rejected
    kl_active: np.ndarray        # bool
    lam: np.ndarray              # float, 0 where inactive
    conf_global: np.ndarray
    conf_local: np.ndarray

    @property
    def accepted(self) -> np.ndarray:
        return self.labels != DISCARD

    def __len__(self):
        return self.labels.shape[0]


def decide_batch(global_probs: np.ndarray, local_probs: np.ndarray, config: SslConfig) -> BatchDecisions:
    cg = np.asarray(confidence(global_probs, config.metric), dtype=np.float64).reshape(-1)
    cl = np.asarray(confidence(local_probs, config.metric), dtype=np.float64).reshape(-1)
    if config.mode is Mode.LOCAL_ONLY:
        use_local = np.ones(cg.shape, dtype=bool)
    elif config.mode is Mode.GLOBAL_ONLY:
        use_local = np.zeros(cg.shape, dtype=bool)
    else:
        use_local = cl > cg
    s_star = np.where(use_local[:, None], local_probs, global_probs)
    s_minus = np.where(use_local[:, None], global_probs, local_probs)
    h_star = np.where(use_local, cl, cg)
    h_minus = np.where(use_local, cg, cl)
    labels = np.where(s_star.max(axis=1) > config.beta, s_star.argmax(axis=1), DISCARD)
    kl_active = (labels != DISCARD) & (s_minus.argmax(axis=1) == labels)
    safe = np.where(h_star > 0, h_star, 1.0)
    lam = np.where(kl_active & (h_star > 0), config.lambda0 * np.minimum(h_minus / safe, 1.0), 0.0)
    return BatchDecisions(use_local, s_minus, labels, kl_active, lam, cg, cl)


def fedlabel_loss_spec(
    x_clean: np.ndarray,
    x_strong: np.ndarray,
    labels: np.ndarray,
    s_minus_star: np.ndarray,
    lam: np.ndarray,
    kl_active: np.ndarray,
    prox_mu: float = 0.0,
    prox_anchor: np.ndarray | None = None,
) -> LossSpec:
    """Mean over the given accepted samples of
    CE(model(x_strong), label) + lam * KL(model(x_clean) || s_minus_star),
    the KL part only where ``kl_active``."""
    n = labels.shape[0]
    terms = [LossTerm("ce", x_strong, labels)]
    act = np.asarray(kl_active, dtype=bool)
    if act.any():
        terms.append(LossTerm("kl", x_clean[act], s_minus_star[act], np.asarray(lam)[act]))
    return LossSpec(terms, n=n, prox_mu=prox_mu, prox_anchor=prox_anchor)


def semi_supervised_batch_loss(
    w_u: ModelParams,
    x: np.ndarray,
    decisions: BatchDecisions,
    augmenter: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[float, np.ndarray, int]:
    """Loss, gradient and accepted count for one unlabeled batch.

    ``decisions`` must come from the frozen global/local models, not from
    ``w_u``. Rejected samples are dropped; with none accepted the result is
    ``(0.0, zeros, 0)``.
    """
    acc = decisions.accepted
    n_acc = int(acc.sum())
    if n_acc == 0:
        return 0.0, np.zeros(w_u.q), 0
    xa = np.asarray(x, dtype=np.float64)[acc]
    xs = augmenter(xa) if augmenter is not None else xa
    spec = fedlabel_loss_spec(
        xa, xs, decisions.labels[acc], decisions.s_minus_star[acc],
        decisions.lam[acc], decisions.kl_active[acc],
    )
    loss, grad = loss_and_grad(w_u, spec)
    return loss, grad, n_acc


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    z = np.log(np.maximum(p, 1e-300)) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
