"""Which tensors each federated algorithm moves between server and clients."""
from __future__ import annotations

from enum import Enum

import numpy as np

from .model import Model, ModelSpec
from .parameterization import Scheme, factor_shapes


class Algorithm(str, Enum):
    FEDPARA = "fedpara"  # FedAvg over every factor
    FEDAVG = "fedavg"  # FedAvg over every tensor, any scheme
    PFEDPARA = "pfedpara"
    FEDPER = "fedper"
    LOCAL = "local"

    @property
    def shares_everything(self) -> bool:
        return self in (Algorithm.FEDPARA, Algorithm.FEDAVG)

    @property
    def personalized(self) -> bool:
        return not self.shares_everything


class PayloadError(ValueError):
    """An algorithm cannot be applied to the given model."""


def tensor_schema(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor of ``spec`` (``"<layer>.<name>" -> shape``), no instantiation."""
    out: dict[str, tuple[int, ...]] = {}
    for i, layer in enumerate(spec.layers):
        if not layer.has_weight:
            continue
        r = layer.rank or 1
        for k, s in factor_shapes(layer.scheme, layer.shape, r).items():
            out[f"{i}.{k}"] = tuple(s)
        width = layer.shape.weight_shape[0]
        if layer.bias:
            out[f"{i}.b"] = (width,)
        if layer.norm_affine:
            out[f"{i}.norm"] = (2, width)
    return out


def shared_schema(spec: ModelSpec, algorithm) -> dict[str, tuple[int, ...]]:
    """Tensors exchanged every round under ``algorithm``.

    pfedpara shares only the ``*1`` factor half of every layer; biases and
    the ``*2`` half stay on the client. fedper keeps the last weight layer
    local.
    """
    algorithm = Algorithm(algorithm)
    full = tensor_schema(spec)
    if algorithm.shares_everything:
        return full
    if algorithm is Algorithm.LOCAL:
        return {}
    weight_layers = [i for i, l in enumerate(spec.layers) if l.has_weight]
    if algorithm is Algorithm.FEDPER:
        last = str(weight_layers[-1])
        return {k: s for k, s in full.items() if k.split(".")[0] != last}
    bad = [i for i in weight_layers if spec.layers[i].scheme is not Scheme.PFEDPARA]
    if bad:
        raise PayloadError(f"pfedpara needs every weight layer in pfedpara form; layers {bad} are not")
    return {k: s for k, s in full.items() if k.split(".")[1] in ("X1", "Y1", "T1")}


def schema_params(schema: dict[str, tuple[int, ...]]) -> int:
    return int(sum(int(np.prod(s)) for s in schema.values()))


def extract(model: Model, keys) -> dict[str, np.ndarray]:
    live = model.params()
    return {k: live[k].copy() for k in keys}
