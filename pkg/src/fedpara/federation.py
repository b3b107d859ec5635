"""Server/client round loop for shared and personalized federated training."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .accounting import CostConfig, comm_seconds, energy, full_model_bytes, model_bytes
from .data import Dataset, Partition
from .model import Model, ModelSpec, SgdConfig, accuracy, local_sgd
from .payload import Algorithm, shared_schema
from .tensor import ShapeError

# Named sub-streams of the top-level seed.
STREAMS = {"partition": 1, "init": 2, "sampling": 3, "batching": 4, "data": 5}


def substream(seed: int, name: str, *ids: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *(int(i) for i in ids)])


class AggregationError(ValueError):
    """Payloads cannot be averaged together."""


@dataclass(frozen=True)
class FedConfig:
    num_clients: int
    clients_per_round: int
    rounds: int
    sgd: SgdConfig = field(default_factory=SgdConfig)
    algorithm: Algorithm = Algorithm.FEDPARA
    seed: int = 0
    workers: int = 1
    cost: CostConfig = field(default_factory=CostConfig)

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError(
                f"need 1 <= clients_per_round <= num_clients, got {self.clients_per_round} of {self.num_clients}"
            )
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @staticmethod
    def count_from_fraction(num_clients: int, fraction: float) -> int:
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        return max(1, int(round(fraction * num_clients)))


@dataclass
class ClientState:
    id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    model: Model
    seed: int


@dataclass
class ClientUpdate:
    client_id: int
    payload: dict[str, np.ndarray]
    num_samples: int
    loss: float
    skipped: bool = False


@dataclass(frozen=True)
class RoundReport:
    round: int  # 1-based
    sampled: tuple[int, ...]
    loss: float
    accuracy: float
    global_accuracy: float
    personalized: tuple[float, ...]
    up_bytes: int
    down_bytes: int
    sim_seconds: float
    sim_joules: float
    skipped: tuple[int, ...] = ()


@dataclass
class RunResult:
    reports: list[RoundReport]
    initial_broadcast_bytes: int
    clients: list[ClientState]
    server: Model

    @property
    def final(self) -> Optional[RoundReport]:
        return self.reports[-1] if self.reports else None


def sample_clients(round_index: int, config: FedConfig, rng: Optional[np.random.Generator] = None) -> tuple[int, ...]:
    """Uniform sample of ``clients_per_round`` distinct ids, ascending."""
    if rng is None:
        rng = substream(config.seed, "sampling", round_index)
    picked = rng.choice(config.num_clients, size=config.clients_per_round, replace=False)
    return tuple(sorted(int(c) for c in picked))


def _check_payload(model: Model, payload: dict) -> None:
    live = model.params()
    for k, v in payload.items():
        if k not in live or live[k].shape != np.shape(v):
            raise ShapeError(f"payload tensor {k!r} {np.shape(v)} does not fit the client model")


def local_update(client: ClientState, global_payload: dict[str, np.ndarray], config: FedConfig,
                 data: Dataset, round_index: int = 0) -> ClientUpdate:
    """Load the downloaded tensors, train locally, return the tensors to upload.

    Only the keys of ``global_payload`` are overwritten and sent back, so any
    local-only factors stay on the client across rounds.
    """
    _check_payload(client.model, global_payload)
    client.model.load(global_payload)
    if client.train_idx.size == 0:
        return ClientUpdate(client.id, {}, 0, float("nan"), skipped=True)
    rng = substream(config.seed, "batching", round_index, client.id)
    loss = local_sgd(client.model, data.features[client.train_idx], data.labels[client.train_idx],
                     config.sgd, round_index, rng)
    live = client.model.params()
    return ClientUpdate(client.id, {k: live[k].copy() for k in global_payload}, int(client.train_idx.size), loss)


def aggregate(payloads: list[dict[str, np.ndarray]], sample_counts: list[int]) -> dict[str, np.ndarray]:
    """Sample-count weighted mean of every tensor, accumulated in list order."""
    if not payloads or len(payloads) != len(sample_counts):
        raise AggregationError("need one sample count per payload and at least one payload")
    total = float(sum(sample_counts))
    if total <= 0 or any(c < 0 for c in sample_counts):
        raise AggregationError(f"sample counts must be >= 0 with a positive sum, got {sample_counts}")
    keys = payloads[0].keys()
    for p in payloads[1:]:
        if p.keys() != keys:
            raise AggregationError(f"payload keys differ: {sorted(keys)} vs {sorted(p.keys())}")
        for k in keys:
            if p[k].shape != payloads[0][k].shape:
                raise AggregationError(f"{k}: shape {p[k].shape} != {payloads[0][k].shape}")
    out = {}
    for k in keys:
        acc = np.zeros_like(payloads[0][k], dtype=np.float64)
        for p, c in zip(payloads, sample_counts):
            acc += (c / total) * p[k]
        out[k] = acc
    return out


def evaluate_personalized(clients: list[ClientState], data: Dataset,
                          global_payload: Optional[dict] = None) -> tuple[float, list[float]]:
    """Mean and per-client accuracy of each client's model on its own held-out split.

    ``global_payload`` (the server's current shared tensors) is laid over a
    scratch copy of every client model first.
    """
    accs = []
    for c in clients:
        m = c.model
        if global_payload:
            m = m.copy()
            m.load(global_payload)
        accs.append(accuracy(m, data.features[c.test_idx], data.labels[c.test_idx]))
    vals = [a for a in accs if np.isfinite(a)]
    return (float(np.mean(vals)) if vals else float("nan")), accs


def _payload_keys(model: Model, algorithm: Algorithm) -> list[str]:
    schema = shared_schema(model.spec, algorithm)
    live = model.params()
    missing = [k for k in schema if k not in live]
    if missing:
        raise ValueError(f"tensors {missing} are counted for cost projection only and cannot be trained")
    return list(schema)


def run(config: FedConfig, spec: ModelSpec, train: Dataset, partition: Partition,
        test: Optional[Dataset] = None, progress=None) -> RunResult:
    """Execute ``config.rounds`` rounds of sample, download, train, upload, aggregate, evaluate."""
    if partition.num_clients != config.num_clients:
        raise ValueError(f"partition has {partition.num_clients} clients, config expects {config.num_clients}")
    alg = config.algorithm
    server = Model.init(spec, substream(config.seed, "init"))
    keys = _payload_keys(server, alg)
    clients = [
        ClientState(c, np.asarray(partition.train[c], dtype=np.int64),
                    np.asarray(partition.test.get(c, []), dtype=np.int64), server.copy(), config.seed)
        for c in range(config.num_clients)
    ]
    cost = config.cost
    up_each = model_bytes(spec, "up", cost, alg)
    down_each = model_bytes(spec, "down", cost, alg)
    # personalized clients all start from the same full initial model
    initial = full_model_bytes(spec, cost) * config.num_clients if alg.personalized and config.rounds else 0
    has_local_test = any(c.test_idx.size for c in clients)

    reports = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for t in range(config.rounds):
            sampled = sample_clients(t, config)
            glob = {k: v.copy() for k, v in server.params().items() if k in keys}
            jobs = [(clients[c], glob) for c in sampled]
            if pool is None:
                updates = [local_update(c, g, config, train, t) for c, g in jobs]
            else:
                updates = list(pool.map(lambda job: local_update(job[0], job[1], config, train, t), jobs))
            done = [u for u in sorted(updates, key=lambda u: u.client_id) if not u.skipped]
            if done and keys:
                server.load(aggregate([u.payload for u in done], [u.num_samples for u in done]))
            up = up_each * len(done)
            down = down_each * len(sampled)
            t_comm = comm_seconds(up_each if done else 0, down_each, cost)
            glob_acc = accuracy(server, test.features, test.labels) if test is not None and not alg.personalized else float("nan")
            pers_mean, pers = float("nan"), []
            if has_local_test:
                shared_now = {k: v for k, v in server.params().items() if k in keys}
                if alg.personalized:
                    pers_mean, pers = evaluate_personalized(clients, train, shared_now)
                else:
                    view = [ClientState(c.id, c.train_idx, c.test_idx, server, c.seed) for c in clients]
                    pers_mean, pers = evaluate_personalized(view, train)
            losses = [u.loss for u in done]
            report = RoundReport(
                round=t + 1,
                sampled=sampled,
                loss=float(np.mean(losses)) if losses else float("nan"),
                accuracy=pers_mean if alg.personalized or test is None else glob_acc,
                global_accuracy=glob_acc,
                personalized=tuple(pers),
                up_bytes=up,
                down_bytes=down,
                sim_seconds=cost.compute_seconds + t_comm,
                sim_joules=energy(up + down, cost),
                skipped=tuple(u.client_id for u in updates if u.skipped),
            )
            reports.append(report)
            if progress is not None:
                progress(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(reports, initial, clients, server)
