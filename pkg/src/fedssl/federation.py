"""Round-based federated training: client sampling, the two local phases
(supervised, then semi-supervised), baselines, and weighted aggregation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .data import ClientDataset, DataError, augment_strong, augment_weak, mismatch_score
from .nn import (
    LossSpec, LossTerm, ModelParams, NumericError, ce_spec, forward, loss_and_grad, prox_sgd_step,
)
from .pseudolabel import (
    BatchDecisions, SslConfig, decide_batch, fedlabel_loss_spec, sharpen,
)

log = logging.getLogger(__name__)


class Method(str, Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDAVG_FIXMATCH = "fedavg_fixmatch"
    FEDAVG_UDA = "fedavg_uda"
    FEDPROX_FIXMATCH = "fedprox_fixmatch"
    FEDPROX_UDA = "fedprox_uda"
    FEDLABEL = "fedlabel"

    @property
    def uses_prox(self) -> bool:
        return self.value.startswith("fedprox")

    @property
    def unsup(self) -> str | None:
        if self is Method.FEDLABEL:
            return "fedlabel"
        if self.value.endswith("fixmatch"):
            return "fixmatch"
        if self.value.endswith("uda"):
            return "uda"
        return None


DEFAULT_PROX_MU = 0.01


@dataclass(frozen=True)
class MethodConfig:
    method: Method = Method.FEDLABEL
    ssl: SslConfig = field(default_factory=SslConfig)
    tau: int = 20
    tau_prime: int = 20
    lr: float = 0.05
    batch_size: int = 16
    prox_mu: float | None = None
    strong_aug: bool = True
    aug_ops: int = 1
    aug_magnitude: float = 10.0
    uda_temperature: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.tau < 0 or self.tau_prime < 0:
            raise ValueError("tau and tau_prime must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prox_mu is not None:
            if self.prox_mu < 0:
                raise ValueError("prox_mu must be >= 0")
            if self.prox_mu > 0 and not self.method.uses_prox:
                raise ValueError(f"prox_mu > 0 is only meaningful for FedProx variants, not {self.method.value}")

    @property
    def mu(self) -> float:
        if not self.method.uses_prox:
            return 0.0
        return DEFAULT_PROX_MU if self.prox_mu is None else self.prox_mu


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    weight: int
    labeled_count: int
    accepted_count: int
    sup_loss: float = math.nan
    unsup_ce: float = math.nan
    unsup_kl: float = math.nan
    # unlabeled-sample positions and the pseudo-labels trained on; scored
    # against hidden labels by the metrics code, never by training code
    pseudo_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pseudo_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decisions: BatchDecisions | None = None


@dataclass
class ServerState:
    params: ModelParams
    round: int = 0


def client_rngs(seed: int, rnd: int, client_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for the supervised and unsupervised phases."""
    return (
        np.random.default_rng([seed, rnd, client_id, 0]),
        np.random.default_rng([seed, rnd, client_id, 1]),
    )


def sample_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """ceil(fraction * M) distinct clients, uniformly, returned sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction must be in (0, 1]")
    m = min(n_clients, max(1, math.ceil(fraction * n_clients - 1e-9)))
    if m == n_clients:
        return np.arange(n_clients)
    return np.sort(rng.choice(n_clients, size=m, replace=False))


def _batch(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(b, n), replace=False))


def _step(w: ModelParams, spec: LossSpec, lr: float, mu: float, anchor) -> tuple[ModelParams, float]:
    # the proximal term is applied by the step itself, not through the loss
    loss, grad = loss_and_grad(w, spec)
    return prox_sgd_step(w, grad, lr, mu, anchor), loss


def supervised_local_update(
    global_params: ModelParams, client: ClientDataset, cfg: MethodConfig, rng: np.random.Generator
) -> tuple[ModelParams, np.ndarray, float]:
    """tau mini-batch SGD steps on the labeled data, starting at the global
    model. Returns the local model, its delta and the mean step loss."""
    n = client.n_labeled
    if n == 0 or cfg.tau == 0:
        return global_params.copy(), np.zeros(global_params.q), math.nan
    w = global_params.copy()
    mu = cfg.mu
    anchor = global_params.flat if mu else None
    losses = []
    for _ in range(cfg.tau):
        idx = _batch(rng, n, cfg.batch_size)
        w, loss = _step(w, ce_spec(client.labeled_x[idx], client.labeled_y[idx]), cfg.lr, mu, anchor)
        losses.append(loss)
    return w, w.flat - global_params.flat, float(np.mean(losses))


def compute_decisions(
    global_params: ModelParams, local_params: ModelParams, x_unlabeled: np.ndarray, ssl: SslConfig
) -> BatchDecisions:
    dec = decide_batch(forward(global_params, x_unlabeled), forward(local_params, x_unlabeled), ssl)
    if np.any(dec.lam > ssl.lambda0):
        raise AssertionError("consistency weight exceeded lambda0")
    return dec


def _strong(cfg: MethodConfig, client: ClientDataset, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if not cfg.strong_aug:
        return x
    return augment_strong(x, rng, cfg.aug_ops, cfg.aug_magnitude, client.image_shape)


def semi_supervised_local_update(
    global_params: ModelParams,
    local_params: ModelParams,
    client: ClientDataset,
    cfg: MethodConfig,
    rng: np.random.Generator,
) -> dict:
    """FedLabel's unlabeled phase.

    Decisions are made once from the frozen global and local models, then a
    fresh copy of the global model takes tau_prime SGD steps on mini-batches
    drawn from the accepted samples.
    """
    q = global_params.q
    out = dict(delta=np.zeros(q), accepted=0, ce=math.nan, kl=math.nan,
               pos=np.zeros(0, dtype=np.int64), labels=np.zeros(0, dtype=np.int64),
               lambdas=np.zeros(0), decisions=None)
    if client.n_unlabeled == 0:
        return out
    dec = compute_decisions(global_params, local_params, client.unlabeled_x, cfg.ssl)
    acc = np.flatnonzero(dec.accepted)
    out.update(decisions=dec, accepted=int(acc.size), pos=acc, labels=dec.labels[acc], lambdas=dec.lam[acc])
    if acc.size == 0 or cfg.tau_prime == 0:
        return out

    w = global_params.copy()
    mu = cfg.mu
    anchor = global_params.flat if mu else None
    ce_losses, kl_losses = [], []
    for _ in range(cfg.tau_prime):
        pick = acc[_batch(rng, acc.size, cfg.batch_size)]
        x = client.unlabeled_x[pick]
        spec = fedlabel_loss_spec(
            x, _strong(cfg, client, x, rng), dec.labels[pick], dec.s_minus_star[pick],
            dec.lam[pick], dec.kl_active[pick],
        )
        parts: list[float] = []
        _, grad = loss_and_grad(w, spec, parts)
        ce_losses.append(parts[0])
        kl_losses.append(parts[1] if len(spec.terms) > 1 else 0.0)
        w = prox_sgd_step(w, grad, cfg.lr, mu, anchor)
    out.update(delta=w.flat - global_params.flat, ce=float(np.mean(ce_losses)), kl=float(np.mean(kl_losses)))
    return out


def baseline_loss_spec(
    kind: str,
    w: ModelParams,
    x_weak: np.ndarray,
    x_strong_fn: Callable[[np.ndarray], np.ndarray],
    x_raw: np.ndarray,
    beta: float,
    temperature: float = 0.4,
    prox_mu: float = 0.0,
    prox_anchor: np.ndarray | None = None,
) -> tuple[LossSpec | None, np.ndarray, np.ndarray]:
    """FixMatch / UDA unlabeled loss for the model ``w`` itself.

    Targets come from ``w`` on the weak view (no gradient through them);
    samples whose weak-view max probability is not above ``beta`` are
    masked out. The loss is averaged over the full batch. Returns
    ``(spec or None, mask, hard labels)``.
    """
    pw = forward(w, x_weak)
    mask = pw.max(axis=1) > beta
    hard = pw.argmax(axis=1)
    if not mask.any():
        return None, mask, hard
    xs = x_strong_fn(x_raw[mask])
    if kind == "fixmatch":
        term = LossTerm("ce", xs, hard[mask])
    elif kind == "uda":
        term = LossTerm("soft_ce", xs, sharpen(pw[mask], temperature))
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return LossSpec([term], n=x_raw.shape[0], prox_mu=prox_mu, prox_anchor=prox_anchor), mask, hard


def baseline_unsup_update(
    global_params: ModelParams,
    client: ClientDataset,
    cfg: MethodConfig,
    rng: np.random.Generator,
) -> dict:
    """Unlabeled phase for FedAvg/FedProx + FixMatch/UDA, single-model."""
    q = global_params.q
    out = dict(delta=np.zeros(q), accepted=0, ce=math.nan, kl=math.nan,
               pos=np.zeros(0, dtype=np.int64), labels=np.zeros(0, dtype=np.int64),
               lambdas=np.zeros(0), decisions=None)
    n = client.n_unlabeled
    if n == 0 or cfg.tau_prime == 0:
        return out
    w = global_params.copy()
    mu = cfg.mu
    anchor = global_params.flat if mu else None
    ever = np.zeros(n, dtype=bool)
    pos, labs, losses = [], [], []
    for _ in range(cfg.tau_prime):
        idx = _batch(rng, n, cfg.batch_size)
        x = client.unlabeled_x[idx]
        xw = augment_weak(x, rng, client.image_shape)
        spec, mask, hard = baseline_loss_spec(
            cfg.method.unsup, w, xw, lambda v: _strong(cfg, client, v, rng), x,
            cfg.ssl.beta, cfg.uda_temperature,
        )
        if spec is None:
            continue
        ever[idx[mask]] = True
        pos.append(idx[mask])
        labs.append(hard[mask])
        w, loss = _step(w, spec, cfg.lr, mu, anchor)
        losses.append(loss)
    if losses:
        out.update(
            delta=w.flat - global_params.flat, ce=float(np.mean(losses)),
            pos=np.concatenate(pos), labels=np.concatenate(labs),
        )
    out["accepted"] = int(ever.sum())
    return out


def client_update(
    global_params: ModelParams, client: ClientDataset, cfg: MethodConfig, seed: int, rnd: int
) -> ClientUpdate:
    sup_rng, unsup_rng = client_rngs(seed, rnd, client.client_id)
    w_l, delta_l, sup_loss = supervised_local_update(global_params, client, cfg, sup_rng)
    kind = cfg.method.unsup
    if kind == "fedlabel":
        u = semi_supervised_local_update(global_params, w_l, client, cfg, unsup_rng)
    elif kind is not None:
        u = baseline_unsup_update(global_params, client, cfg, unsup_rng)
    else:
        u = None
    if u is None:
        return ClientUpdate(client.client_id, delta_l, client.n_labeled, client.n_labeled, 0, sup_loss)
    return ClientUpdate(
        client_id=client.client_id,
        delta=delta_l + u["delta"],
        weight=client.n_labeled + u["accepted"],
        labeled_count=client.n_labeled,
        accepted_count=u["accepted"],
        sup_loss=sup_loss,
        unsup_ce=u["ce"],
        unsup_kl=u["kl"],
        pseudo_pos=u["pos"],
        pseudo_labels=u["labels"],
        lambdas=u["lambdas"],
        decisions=u["decisions"],
    )


def aggregation_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    r = np.array([u.weight for u in updates], dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("negative aggregation weight")
    total = r.sum()
    return r / total if total > 0 else np.zeros_like(r)


def aggregate(params: ModelParams, updates: Sequence[ClientUpdate]) -> ModelParams:
    """w + sum_k r_k / sum(r) * delta_k, reduced in client-id order."""
    ordered = sorted(updates, key=lambda u: u.client_id)
    weights = aggregation_weights(ordered)
    if not ordered or weights.sum() == 0:
        log.warning("all aggregation weights are zero; global model unchanged")
        return params.copy()
    acc = np.zeros(params.q)
    for wk, u in zip(weights, ordered):
        if wk > 0:
            acc += wk * u.delta
    return params.with_flat(params.flat + acc)


def evaluate(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy."""
    if len(y) == 0:
        return math.nan
    return float(np.mean(forward(params, x).argmax(axis=1) == np.asarray(y)))


@dataclass
class RoundMetrics:
    round: int
    test_acc: float
    mean_mismatch: float
    accepted_frac: float
    pseudo_acc: float
    mean_lambda: float
    sup_loss: float
    unsup_ce: float
    unsup_kl: float
    clients: list[int] = field(default_factory=list)
    accepted_counts: list[int] = field(default_factory=list)
    weights: list[int] = field(default_factory=list)

    CSV_FIELDS = (
        "round", "test_acc", "mean_mismatch", "accepted_frac", "pseudo_acc",
        "mean_lambda", "sup_loss", "unsup_ce", "unsup_kl",
    )

    def csv_row(self) -> list[str]:
        return [str(self.round)] + [_fmt(getattr(self, f)) for f in self.CSV_FIELDS[1:]]


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _nanmean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def round_metrics(
    rnd: int, clients: Sequence[ClientDataset], updates: Sequence[ClientUpdate], test_acc: float
) -> RoundMetrics:
    by_id = {c.client_id: c for c in clients}
    mism, correct, judged, lambdas = [], 0, 0, []
    n_unl = 0
    for u in updates:
        c = by_id[u.client_id]
        n_unl += c.n_unlabeled
        try:
            mism.append(mismatch_score(c))
        except DataError:
            pass
        if u.pseudo_pos.size:
            truth = c.quarantined_labels()[u.pseudo_pos]
            correct += int(np.sum(truth == u.pseudo_labels))
            judged += u.pseudo_pos.size
        lambdas.append(u.lambdas)
    accepted = sum(u.accepted_count for u in updates)
    lam = np.concatenate(lambdas) if lambdas else np.zeros(0)
    return RoundMetrics(
        round=rnd,
        test_acc=test_acc,
        mean_mismatch=float(np.mean(mism)) if mism else math.nan,
        accepted_frac=accepted / n_unl if n_unl else math.nan,
        pseudo_acc=correct / judged if judged else math.nan,
        mean_lambda=float(lam.mean()) if lam.size else math.nan,
        sup_loss=_nanmean([u.sup_loss for u in updates]),
        unsup_ce=_nanmean([u.unsup_ce for u in updates]),
        unsup_kl=_nanmean([u.unsup_kl for u in updates]),
        clients=[u.client_id for u in updates],
        accepted_counts=[u.accepted_count for u in updates],
        weights=[u.weight for u in updates],
    )


def run_training(
    clients: Sequence[ClientDataset],
    cfg: MethodConfig,
    rounds: int,
    init: ModelParams,
    test_x: np.ndarray,
    test_y: np.ndarray,
    seed: int,
    participation: float = 1.0,
    eval_every: int = 1,
    on_round: Callable[[int, list[ClientUpdate], ModelParams], None] | None = None,
) -> tuple[list[RoundMetrics], ModelParams]:
    """Run ``rounds`` communication rounds from ``init``.

    ``on_round`` is called after aggregation with the round index, the
    client updates and the new global model (used for audits and logs).
    """
    state = ServerState(init.copy(), 0)
    history: list[RoundMetrics] = []
    for t in range(rounds):
        chosen = sample_clients(len(clients), participation, np.random.default_rng([seed, 7919, t]))
        updates = []
        for k in chosen:
            try:
                u = client_update(state.params, clients[k], cfg, seed, t)
            except NumericError as e:
                raise NumericError(f"round {t}, client {clients[k].client_id}: {e}") from e
            if not np.all(np.isfinite(u.delta)):
                raise NumericError(f"round {t}, client {clients[k].client_id}: non-finite update")
            updates.append(u)
        new = aggregate(state.params, updates)
        if not np.all(np.isfinite(new.flat)):
            raise NumericError(f"round {t}: non-finite global parameters after aggregation")
        state = ServerState(new, t + 1)
        last = t == rounds - 1
        acc = evaluate(state.params, test_x, test_y) if (last or (t + 1) % eval_every == 0) else math.nan
        history.append(round_metrics(t, clients, updates, acc))
        if on_round is not None:
            on_round(t, updates, state.params)
    return history, state.params


def with_ssl(cfg: MethodConfig, **changes) -> MethodConfig:
    return replace(cfg, ssl=replace(cfg.ssl, **changes))
