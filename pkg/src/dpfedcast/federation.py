"""Federated training with client-level differential privacy.

Each round the server samples clients independently with probability
``q = m / N_total``. Selected clients train a copy of the global model on
their own windows and send back only the parameter delta. With DP on, every
delta is clipped to L2 norm ``S`` on the client, the server sums the clipped
deltas, divides by the *expected* count ``m`` and adds one Gaussian draw with
std ``S * c / m``. Without DP the raw deltas are summed and divided by ``m``.

Client training for a round is vectorised: all selected clients are stacked
along a leading axis and stepped together. Each client still shuffles with
its own substream keyed by (round, client id), so the result for a client
does not depend on who else was selected.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dpfedcast import accountant
from dpfedcast.mlp import (
    DEFAULT_LAYERS,
    ModelParams,
    adam_update_,
    init_params,
    l2_norm,
    loss_and_grad_many,
    save_checkpoint,
)
from dpfedcast.rng import derive_seed, substream

log = logging.getLogger(__name__)

HISTORY_HEADER = ("round", "selected", "update_norm", "sigma", "train_loss", "test_loss")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ClientState:
    """A client's private training windows. Only this client's training code reads them."""

    client_id: str
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class FederationConfig:
    n_total: int
    m: float = 40
    rounds: int = 75
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    clip: float = 0.5
    epsilon: float = math.inf
    delta: float = accountant.DEFAULT_DELTA
    noise_multiplier: float | None = None
    layer_sizes: tuple[int, ...] = DEFAULT_LAYERS

    @property
    def dp(self) -> bool:
        return math.isfinite(self.epsilon)

    @property
    def q(self) -> float:
        return self.m / self.n_total

    @property
    def sigma(self) -> float:
        if not self.dp:
            return 0.0
        if self.noise_multiplier is None:
            raise ValueError("noise multiplier not calibrated yet")
        return accountant.noise_std(self.clip, self.noise_multiplier, self.m)

    def problems(self) -> list[str]:
        errs = []
        if self.n_total < 1:
            errs.append(f"N_total must be >= 1, got {self.n_total}")
        if not self.m > 0:
            errs.append(f"m must be > 0, got {self.m}")
        elif self.n_total >= 1 and self.m > self.n_total:
            errs.append(f"q > 1: m={self.m} exceeds N_total={self.n_total}")
        if self.rounds < 0:
            errs.append(f"T_cl must be >= 0, got {self.rounds}")
        if self.epochs < 0:
            errs.append(f"E must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            errs.append(f"eta must be > 0, got {self.lr}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.clip > 0:
            errs.append(f"S must be > 0, got {self.clip}")
        if not self.epsilon > 0:
            errs.append(f"epsilon must be > 0 or inf, got {self.epsilon}")
        if self.dp and not 0 < self.delta < 1:
            errs.append(f"delta must be in (0, 1), got {self.delta}")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            errs.append(f"noise multiplier must be >= 0, got {self.noise_multiplier}")
        if len(self.layer_sizes) < 2 or any(n < 1 for n in self.layer_sizes) or self.layer_sizes[-1] != 1:
            errs.append(f"layer sizes must be >= 1 and end in a single output, got {self.layer_sizes}")
        return errs

    def resolved(self) -> "FederationConfig":
        """Validate, and calibrate the noise multiplier for finite epsilon if it is not set."""
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        if self.dp and self.noise_multiplier is None and self.rounds > 0:
            c = accountant.calibrate_noise_multiplier(self.epsilon, self.delta, self.q, self.rounds)
            return replace(self, noise_multiplier=c)
        return self


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: int
    update_norm: float
    sigma: float
    train_loss: float = math.nan
    test_loss: float = math.nan


def select_clients(n_total: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of clients kept by independent Bernoulli(q) draws."""
    if not 0 <= q <= 1:
        raise ValueError(f"sampling probability must be in [0, 1], got {q}")
    return np.flatnonzero(rng.random(n_total) < q)


def train_clients(
    global_params: ModelParams,
    clients: Sequence[ClientState],
    epochs: int,
    lr: float,
    batch_size: int,
    rngs: Sequence[np.random.Generator],
) -> np.ndarray:
    """Local training for several clients at once; returns their deltas, shape (K, P).

    Each client starts from the global weights with a fresh Adam state and
    runs ``epochs`` passes of shuffled mini-batches (last batch may be
    partial). Clients without data return a zero delta.
    """
    layout = global_params.layout
    K = len(clients)
    updates = np.zeros((K, layout.n_params))
    live = [k for k, c in enumerate(clients) if c.n_samples > 0]
    for k, c in enumerate(clients):
        if c.n_samples == 0:
            log.warning("client %s selected but holds no training windows; sending a zero update", c.client_id)
    if epochs <= 0 or not live:
        return updates

    data = [(clients[k].X, clients[k].y) for k in live]
    H = layout.layer_sizes[0]
    sizes = np.array([len(y) for _, y in data])
    n_batches = -(-sizes // batch_size)
    width = int(n_batches.max()) * batch_size
    Ka = len(live)

    weights = np.zeros((Ka, width))
    for a, n in enumerate(sizes):
        for start in range(0, n, batch_size):
            rows = min(batch_size, n - start)
            weights[a, start:start + rows] = 1.0 / rows

    theta = np.repeat(global_params.flat[None], Ka, axis=0)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    scratch = np.empty_like(theta)
    t = np.zeros(Ka, dtype=np.int64)
    Xp = np.zeros((Ka, width, H))
    yp = np.zeros((Ka, width))
    for _ in range(epochs):
        for a, k in enumerate(live):
            X, y = data[a]
            order = rngs[k].permutation(len(y))
            Xp[a, :len(y)] = X[order]
            yp[a, :len(y)] = y[order]
        for b in range(int(n_batches.max())):
            # no wider than the longest batch actually present
            cols = slice(b * batch_size, min((b + 1) * batch_size, int(sizes.max())))
            stepping = n_batches > b
            t[stepping] += 1
            if stepping.all():
                _, grad = loss_and_grad_many(layout, theta, Xp[:, cols], yp[:, cols], weights[:, cols])
                adam_update_(theta, grad, m, v, t, lr, scratch=scratch)
            else:
                idx = np.flatnonzero(stepping)
                th, mm, vv = theta[idx], m[idx], v[idx]
                _, grad = loss_and_grad_many(layout, th, Xp[idx, cols], yp[idx, cols], weights[idx, cols])
                adam_update_(th, grad, mm, vv, t[idx], lr)
                theta[idx], m[idx], v[idx] = th, mm, vv
    updates[live] = theta - global_params.flat
    return updates


def local_train(
    global_params: ModelParams, client: ClientState, epochs: int, lr: float, batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One client's delta ``w_local - w_global`` after ``epochs`` of mini-batch Adam."""
    return train_clients(global_params, [client], epochs, lr, batch_size, [rng])[0]


def clip_update(u: np.ndarray, S: float) -> np.ndarray:
    """Scale ``u`` down to L2 norm ``S`` if it is longer."""
    if not S > 0:
        raise ValueError(f"clipping bound must be > 0, got {S}")
    u = np.asarray(u, dtype=np.float64)
    return u / max(1.0, l2_norm(u) / S)


def aggregate(updates: Sequence[np.ndarray] | np.ndarray, m: float, dim: int | None = None) -> np.ndarray:
    """Sum of updates divided by the expected client count ``m`` (not by ``len(updates)``)."""
    if not m > 0:
        raise ValueError(f"expected batch size must be > 0, got {m}")
    if len(updates) == 0:
        if dim is None:
            raise ValueError("dimension required to aggregate an empty update list")
        return np.zeros(dim)
    stacked = np.asarray(updates, dtype=np.float64)
    if stacked.ndim != 2 or (dim is not None and stacked.shape[1] != dim):
        raise ValueError(f"updates must all have the same length, got shape {stacked.shape}")
    return stacked.sum(axis=0) / m


def add_noise(u: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise std must be >= 0, got {sigma}")
    u = np.asarray(u, dtype=np.float64)
    if sigma == 0:
        return u.copy()
    return u + rng.normal(0.0, sigma, size=u.shape)


def client_rng(seed: int, round_index: int, client_id: str) -> np.random.Generator:
    return substream(seed, "client", round_index, client_id)


def run_training(
    config: FederationConfig,
    clients: Sequence[ClientState],
    seed: int,
    init: ModelParams | None = None,
    start_round: int = 1,
    evaluate: Callable[[ModelParams], tuple[float, float]] | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
) -> tuple[ModelParams, list[RoundRecord]]:
    """Run rounds ``start_round..T_cl`` of federated training.

    ``clients`` must hold exactly ``N_total`` entries. Passing a checkpointed
    model as ``init`` together with its next round index resumes a run
    exactly, since every random stream is keyed by round.
    """
    config = config.resolved()
    if len(clients) != config.n_total:
        raise ConfigError([f"N_total={config.n_total} but {len(clients)} clients were supplied"])
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(["duplicate client ids"])
    params = init if init is not None else init_params(config.layer_sizes, derive_seed(seed, "init"))
    if params.layer_sizes != tuple(config.layer_sizes):
        raise ConfigError([f"initial model has layers {params.layer_sizes}, config says {config.layer_sizes}"])
    sigma = config.sigma
    dim = params.n_params
    history: list[RoundRecord] = []

    for i in range(start_round, config.rounds + 1):
        chosen = select_clients(config.n_total, config.q, substream(seed, "select", i))
        picked = [clients[j] for j in chosen]
        rngs = [client_rng(seed, i, c.client_id) for c in picked]
        deltas = train_clients(params, picked, config.epochs, config.lr, config.batch_size, rngs)
        if config.dp:
            deltas = [clip_update(d, config.clip) for d in deltas]
        mean_update = aggregate(deltas, config.m, dim=dim)
        update_norm = l2_norm(mean_update)
        if config.dp:
            # drawn every round, including rounds with nobody selected
            mean_update = add_noise(mean_update, sigma, substream(seed, "noise", i))
        params = params.apply_update(mean_update)

        train_loss, test_loss = evaluate(params) if evaluate is not None else (math.nan, math.nan)
        record = RoundRecord(i, len(picked), update_norm, sigma, train_loss, test_loss)
        history.append(record)
        log.debug("round %d: %d clients, |mean update|=%.4g, train %.4g, test %.4g",
                  i, len(picked), update_norm, train_loss, test_loss)
        if checkpoint_dir is not None and checkpoint_every > 0 and i % checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"round_{i:04d}.ckpt", params, round_index=i)
    return params, history


def write_history_csv(history: Sequence[RoundRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in history:
            writer.writerow([r.round, r.selected, repr(r.update_norm), repr(r.sigma),
                             repr(r.train_loss), repr(r.test_loss)])
