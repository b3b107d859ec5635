"""Transferred bytes, wall-clock and energy bookkeeping.

Units: 1 MB = 10**6 bytes, 1 Mbps = 10**6 bits/s. Links are homogeneous: every
client sees the same bandwidth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .model import Model, ModelSpec
from .payload import Algorithm, schema_params, shared_schema, tensor_schema

MB = 10**6


@dataclass(frozen=True)
class CostConfig:
    bytes_per_param: int = 4
    uplink_bits: Optional[int] = None  # defaults to 8 * bytes_per_param
    downlink_bits: Optional[int] = None
    bandwidth_bps: float = 10e6
    joules_per_byte: float = 0.0
    compute_seconds: float = 0.0

    def __post_init__(self):
        if self.bytes_per_param < 1:
            raise ValueError("bytes_per_param must be positive")
        for name in ("uplink_bits", "downlink_bits"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.joules_per_byte < 0 or self.compute_seconds < 0:
            raise ValueError("energy coefficient and compute time must be >= 0")

    def bits(self, direction: str) -> int:
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        v = self.uplink_bits if direction == "up" else self.downlink_bits
        return 8 * self.bytes_per_param if v is None else v


def _spec(model: Union[Model, ModelSpec]) -> ModelSpec:
    return model.spec if isinstance(model, Model) else model


def payload_bytes(num_params: int, bits: int) -> int:
    return -(-num_params * bits // 8)


def model_bytes(model: Union[Model, ModelSpec], direction: str, cost: CostConfig,
                algorithm=Algorithm.FEDAVG) -> int:
    """Bytes one client sends (``up``) or receives (``down``) per round."""
    n = schema_params(shared_schema(_spec(model), algorithm))
    return payload_bytes(n, cost.bits(direction))


def full_model_bytes(model: Union[Model, ModelSpec], cost: CostConfig) -> int:
    """Size of the complete parameter set on the downlink (initial broadcast)."""
    return payload_bytes(schema_params(tensor_schema(_spec(model))), cost.bits("down"))


def total_comm_cost(participants_per_round: int, model_round_bytes: int, rounds: int) -> int:
    """``participants x (up + down bytes) x rounds``, exact integer."""
    for name, v in (("participants", participants_per_round), ("bytes", model_round_bytes),
                    ("rounds", rounds)):
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a non-negative integer, got {v}")
    return int(participants_per_round) * int(model_round_bytes) * int(rounds)


def comm_seconds(up_bytes: int, down_bytes: int, cost: CostConfig) -> float:
    return (up_bytes + down_bytes) * 8 / cost.bandwidth_bps


def round_time(model: Union[Model, ModelSpec], cost: CostConfig,
               algorithm=Algorithm.FEDAVG) -> tuple[float, float, float]:
    """``(t_comp, t_comm, t)`` for one client-round."""
    up = model_bytes(model, "up", cost, algorithm)
    down = model_bytes(model, "down", cost, algorithm)
    t_comm = comm_seconds(up, down, cost)
    return cost.compute_seconds, t_comm, cost.compute_seconds + t_comm


def energy(total_bytes: int, cost: CostConfig) -> float:
    return total_bytes * cost.joules_per_byte


@dataclass(frozen=True)
class CostReport:
    algorithm: str
    rounds: int
    participants: int
    params_total: int
    params_shared: int
    up_bytes_per_client: int
    down_bytes_per_client: int
    initial_broadcast_bytes: int
    total_bytes: int
    seconds_per_round: float
    total_seconds: float
    total_joules: float


def project_cost(spec: ModelSpec, algorithm, participants: int, rounds: int, cost: CostConfig,
                 num_clients: Optional[int] = None) -> CostReport:
    """Projected traffic, time and energy of a run, without training."""
    algorithm = Algorithm(algorithm)
    up = model_bytes(spec, "up", cost, algorithm)
    down = model_bytes(spec, "down", cost, algorithm)
    total = total_comm_cost(participants, up + down, rounds)
    init = 0
    if algorithm.personalized and rounds > 0:
        init = full_model_bytes(spec, cost) * (num_clients or participants)
    _, _, t = round_time(spec, cost, algorithm)
    return CostReport(
        algorithm=algorithm.value,
        rounds=rounds,
        participants=participants,
        params_total=schema_params(tensor_schema(spec)),
        params_shared=schema_params(shared_schema(spec, algorithm)),
        up_bytes_per_client=up,
        down_bytes_per_client=down,
        initial_broadcast_bytes=init,
        total_bytes=total,
        seconds_per_round=t,
        total_seconds=t * rounds,
        total_joules=energy(total, cost),
    )
