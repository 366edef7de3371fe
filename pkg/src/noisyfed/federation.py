"""Round engine: broadcast, local training, upload, aggregate.

Every client takes part in every round. Client training within a round is
independent (each client owns its model copy and its RNG seed, which is
derived from ``(master seed, client id, round)``), so results do not depend
on execution order or thread count. Aggregation consumes updates in client-id
order.

Strategies
----------
``fedavg``
    ``W <- (1 - eta) W + eta * mean_k w_k``.
``scaffold``
    Local steps use ``grad - c_k + c``. After training,
    ``c_k <- c_k - c + (W - w_k) / (tau_k * lr)``; the server moves ``W`` as
    FedAvg does and adds the mean variate change to ``c``.
``fednova``
    ``d_k = (W - w_k) / tau_k``; ``W <- W - eta * mean(tau) * mean_k d_k``.

``tau_k`` is the number of local SGD steps, ``E * ceil(n_k / batch_size)``.
Client weighting is uniform.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import DomainError, ProtocolError
from .nn import ReluMlp, SgdConfig, save_snapshot, train_local

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "scaffold", "fednova")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 40
    global_lr: float = 1.0
    sgd: SgdConfig = field(default_factory=SgdConfig)
    strategy: str = "fedavg"
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise DomainError("rounds must be >= 1")
        if not 0.0 <= self.global_lr <= 1.0:
            raise DomainError("global_lr must lie in [0, 1]")
        if self.strategy not in STRATEGIES:
            raise DomainError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    @property
    def epochs(self) -> int:
        return self.sgd.epochs


@dataclass(frozen=True, eq=False)
class ClientState:
    cid: int
    dataset: LabeledDataset
    model: ReluMlp
    control: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class ServerState:
    model: ReluMlp
    control: np.ndarray | None = None
    round: int = 0


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    cid: int
    params: np.ndarray
    steps: int
    mean_loss: float


def client_seed(master_seed: int, client_id: int, round_index: int) -> int:
    """Per-(client, round) training seed, independent of scheduling."""
    ss = np.random.SeedSequence([int(master_seed), int(client_id), int(round_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _check_shapes(W: np.ndarray, arrays: Sequence[np.ndarray], what: str) -> None:
    for k, a in enumerate(arrays):
        if np.shape(a) != W.shape:
            raise ProtocolError(f"{what} {k} has shape {np.shape(a)}, global model has {W.shape}")


def aggregate_fedavg(client_params: Sequence[np.ndarray], W: np.ndarray, global_lr: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, client_params, "client update")
    mean = np.sum(np.stack(client_params), axis=0) / len(client_params)
    return (1.0 - global_lr) * W + global_lr * mean


def aggregate_fednova(client_params: Sequence[np.ndarray], steps: Sequence[int], W: np.ndarray,
                      global_lr: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, client_params, "client update")
    taus = np.asarray(steps, dtype=np.float64)
    if taus.shape != (len(client_params),):
        raise ProtocolError("need one step count per client")
    if np.any(taus < 1):
        raise DomainError("every client must report at least one local step")
    normalized = [(W - w) / t for w, t in zip(client_params, taus)]
    tau_eff = taus.sum() / len(taus)
    return W - global_lr * tau_eff * (np.sum(np.stack(normalized), axis=0) / len(normalized))


def aggregate_scaffold(client_params: Sequence[np.ndarray], steps: Sequence[int],
                       client_controls: Sequence[np.ndarray | None], W: np.ndarray,
                       server_control: np.ndarray | None, global_lr: float,
                       local_lr: float) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Returns ``(new W, new server variate, new client variates)``."""
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, client_params, "client update")
    if server_control is None or any(c is None for c in client_controls):
        raise ProtocolError("SCAFFOLD needs server and client control variates")
    _check_shapes(W, [server_control], "server control variate")
    _check_shapes(W, client_controls, "client control variate")
    if len(steps) != len(client_params) or len(client_controls) != len(client_params):
        raise ProtocolError("need one step count and one variate per client")
    if local_lr <= 0:
        raise DomainError("SCAFFOLD variate update needs a positive local learning rate")

    new_controls = []
    for w, c_k, tau in zip(client_params, client_controls, steps):
        if tau < 1:
            raise DomainError("every client must report at least one local step")
        new_controls.append(c_k - server_control + (W - w) / (tau * local_lr))
    deltas = [new - old for new, old in zip(new_controls, client_controls)]
    new_server_control = server_control + np.sum(np.stack(deltas), axis=0) / len(deltas)
    return aggregate_fedavg(client_params, W, global_lr), new_server_control, new_controls


def init_states(model: ReluMlp, datasets: Sequence[LabeledDataset],
                strategy: str) -> tuple[ServerState, list[ClientState]]:
    with_control = strategy == "scaffold"
    zeros = (lambda: np.zeros_like(model.params)) if with_control else (lambda: None)
    server = ServerState(model, zeros(), 0)
    clients = [ClientState(k, d, model, zeros()) for k, d in enumerate(datasets)]
    return server, clients


def _local_training(server: ServerState, client: ClientState, config: FederationConfig,
                    round_index: int) -> ClientUpdate:
    sgd = replace(config.sgd, seed=client_seed(config.seed, client.cid, round_index))
    correction = None
    if config.strategy == "scaffold":
        if client.control is None or server.control is None:
            raise ProtocolError(f"client {client.cid} has no control variate")
        if client.control.shape != server.model.params.shape:
            raise ProtocolError(f"client {client.cid} control variate has the wrong shape")
        correction = server.control - client.control
    result = train_local(client.model, client.dataset, sgd, correction=correction)
    return ClientUpdate(client.cid, np.asarray(result.model.params), result.steps, result.mean_loss)


MetricHook = Callable[[int, ReluMlp, Sequence[float]], object]


@dataclass
class RoundOutcome:
    server: ServerState
    clients: list[ClientState]
    client_losses: tuple[float, ...]
    metrics: object | None
    wall_time: float


def run_round(server: ServerState, clients: Sequence[ClientState], config: FederationConfig,
              evaluate: MetricHook | None = None, executor: ThreadPoolExecutor | None = None) -> RoundOutcome:
    t0 = time.perf_counter()
    W = server.model.params
    for c in clients:
        if c.model.layer_dims != server.model.layer_dims or not np.array_equal(c.model.params, W):
            raise ProtocolError(f"client {c.cid} does not hold the broadcast model")
    round_index = server.round + 1

    if executor is None:
        updates = [_local_training(server, c, config, round_index) for c in clients]
    else:
        updates = list(executor.map(lambda c: _local_training(server, c, config, round_index), clients))
    updates.sort(key=lambda u: u.cid)
    params = [u.params for u in updates]
    steps = [u.steps for u in updates]

    new_controls = [c.control for c in clients]
    server_control = server.control
    if config.strategy == "fedavg":
        new_W = aggregate_fedavg(params, W, config.global_lr)
    elif config.strategy == "fednova":
        new_W = aggregate_fednova(params, steps, W, config.global_lr)
    else:
        new_W, server_control, new_controls = aggregate_scaffold(
            params, steps, [c.control for c in clients], W, server.control,
            config.global_lr, config.sgd.learning_rate)

    new_model = server.model.with_params(new_W)
    new_server = ServerState(new_model, server_control, round_index)
    new_clients = [replace(c, model=new_model, control=ctrl) for c, ctrl in zip(clients, new_controls)]
    losses = tuple(u.mean_loss for u in updates)
    metrics = evaluate(round_index, new_model, losses) if evaluate is not None else None
    return RoundOutcome(new_server, new_clients, losses, metrics, time.perf_counter() - t0)


@dataclass
class FederationResult:
    server: ServerState
    clients: list[ClientState]
    history: list = field(default_factory=list)
    losses: list[tuple[float, ...]] = field(default_factory=list)


def format_event(round_index: int, losses: Sequence[float], wall_time: float) -> str:
    return "\t".join([str(round_index), ",".join(repr(float(x)) for x in losses), f"{wall_time:.6f}"])


def run_federation(model: ReluMlp, datasets: Sequence[LabeledDataset], config: FederationConfig,
                   evaluate: MetricHook | None = None, event_log=None,
                   snapshot_dir: str | Path | None = None, threads: int = 1) -> FederationResult:
    """Run ``config.rounds`` rounds from the initial global ``model``.

    ``event_log`` is a writable text stream receiving one tab-separated line
    per round: round index, comma-joined client losses, wall time in seconds.
    """
    server, clients = init_states(model, datasets, config.strategy)
    result = FederationResult(server, clients)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _ in range(config.rounds):
            out = run_round(server, clients, config, evaluate, executor)
            server, clients = out.server, out.clients
            result.losses.append(out.client_losses)
            if out.metrics is not None:
                result.history.append(out.metrics)
            if event_log is not None:
                event_log.write(format_event(server.round, out.client_losses, out.wall_time) + "\n")
            if snapshot_dir is not None and config.snapshot_every > 0 and server.round % config.snapshot_every == 0:
                save_snapshot(server.model, Path(snapshot_dir) / f"round_{server.round:04d}.rmlp")
            log.debug("round %d done in %.3fs", server.round, out.wall_time)
    finally:
        if executor is not None:
            executor.shutdown()
    result.server, result.clients = server, clients
    return result
