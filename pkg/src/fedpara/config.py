"""YAML experiment configuration, validated before any work starts."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .accounting import CostConfig
from .model import LayerSpec, ModelSpec, SgdConfig
from .parameterization import FC, Conv, Nonlinearity, Scheme, default_scheme, rank_from_gamma
from .payload import Algorithm, PayloadError, shared_schema

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` holds ``(where, message)`` pairs."""

    def __init__(self, source: str, errors: list[tuple[str, str]]):
        self.source = source
        self.errors = errors
        lines = [f"{source}: {where}: {msg}" for where, msg in errors]
        super().__init__("\n".join(lines))


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlobsData(_Block):
    kind: Literal["blobs"] = "blobs"
    num_classes: int = Field(10, ge=2)
    dim: int = Field(20, ge=1)
    per_class_train: int = Field(100, ge=1)
    per_class_test: int = Field(50, ge=0)
    spread: float = Field(1.0, ge=0)


class IdxData(_Block):
    kind: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_classes: int = Field(10, ge=2)


class PartitionBlock(_Block):
    kind: Literal["iid", "dirichlet", "pathological"] = "iid"
    alpha: float = Field(0.5, gt=0)
    classes_per_client: int = Field(2, ge=1)
    # None: 0.2 for personalized algorithms, 0 otherwise
    test_fraction: Optional[float] = Field(None, ge=0, lt=1)
    train_fraction: float = Field(1.0, gt=0, le=1)


class LayerBlock(_Block):
    kind: Literal["fc", "conv", "maxpool"]
    out: Optional[int] = Field(None, ge=1)
    kernel: int = Field(3, ge=1)
    padding: int = Field(0, ge=0)
    pool: int = Field(2, ge=1)
    activation: Literal["relu", "none"] = "none"
    bias: bool = True
    scheme: Optional[Scheme] = None
    gamma: Optional[float] = Field(None, ge=0, le=1)
    rank: Optional[int] = Field(None, ge=1)
    nonlinearity: Optional[Nonlinearity] = None
    norm_affine: bool = False

    @model_validator(mode="after")
    def _needs_out(self):
        if self.kind != "maxpool" and self.out is None:
            raise ValueError(f"{self.kind} layer needs 'out'")
        return self


class ModelBlock(_Block):
    input_shape: list[int] = Field(min_length=1)
    scheme: Union[Scheme, Literal["auto"]] = "auto"
    gamma: float = Field(0.5, ge=0, le=1)
    nonlinearity: Nonlinearity = Nonlinearity.NONE
    lam: float = Field(1.0, ge=0)
    layers: list[LayerBlock] = Field(min_length=1)


class FederationBlock(_Block):
    algorithm: Algorithm = Algorithm.FEDPARA
    clients: int = Field(10, ge=1)
    clients_per_round: Optional[int] = Field(None, ge=1)
    fraction: Optional[float] = Field(None, gt=0, le=1)
    rounds: int = Field(10, ge=0)
    local_epochs: int = Field(1, ge=0)
    batch_size: int = Field(10, ge=1)
    lr: float = Field(0.1, gt=0)
    lr_decay: float = Field(1.0, gt=0, le=1)
    momentum: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _sampling(self):
        if self.clients_per_round is not None and self.fraction is not None:
            raise ValueError("give clients_per_round or fraction, not both")
        if self.clients_per_round is not None and self.clients_per_round > self.clients:
            raise ValueError(f"clients_per_round {self.clients_per_round} exceeds clients {self.clients}")
        return self

    @property
    def per_round(self) -> int:
        if self.clients_per_round is not None:
            return self.clients_per_round
        if self.fraction is not None:
            return max(1, int(round(self.fraction * self.clients)))
        return self.clients


class AccountingBlock(_Block):
    bytes_per_param: int = Field(4, ge=1)
    uplink_bits: Optional[int] = Field(None, ge=1)
    downlink_bits: Optional[int] = Field(None, ge=1)
    bandwidth_mbps: float = Field(10.0, gt=0)
    joules_per_byte: float = Field(0.0, ge=0)
    compute_seconds: float = Field(0.0, ge=0)


class ExperimentConfig(_Block):
    seed: int = 0
    output: str = "runs/default"
    dataset: Union[BlobsData, IdxData] = Field(default_factory=BlobsData, discriminator="kind")
    partition: PartitionBlock = Field(default_factory=PartitionBlock)
    model: ModelBlock
    federation: FederationBlock = Field(default_factory=FederationBlock)
    accounting: AccountingBlock = Field(default_factory=AccountingBlock)

    def cost_config(self) -> CostConfig:
        a = self.accounting
        return CostConfig(a.bytes_per_param, a.uplink_bits, a.downlink_bits,
                          a.bandwidth_mbps * 1e6, a.joules_per_byte, a.compute_seconds)

    def sgd_config(self) -> SgdConfig:
        f = self.federation
        return SgdConfig(lr=f.lr, decay=f.lr_decay, batch_size=f.batch_size, epochs=f.local_epochs,
                         lam=self.model.lam, momentum=f.momentum, weight_decay=f.weight_decay)

    def model_spec(self) -> ModelSpec:
        """Resolve layer shapes, schemes and inner ranks into a :class:`ModelSpec`."""
        return build_model_spec(self.model)


def _layer_scheme(block: LayerBlock, model: ModelBlock, shape) -> Scheme:
    if block.scheme is not None:
        return block.scheme
    if model.scheme == "auto" or model.scheme is Scheme.FEDPARA:
        return default_scheme(shape)
    return model.scheme


def build_model_spec(model: ModelBlock) -> ModelSpec:
    cur = tuple(model.input_shape)
    layers = []
    for i, b in enumerate(model.layers):
        where = f"model.layers.{i}"
        if b.kind == "maxpool":
            if len(cur) != 3:
                raise ConfigError("<model>", [(where, "maxpool needs a C x H x W input")])
            layers.append(LayerSpec("maxpool", pool=b.pool))
            cur = (cur[0], cur[1] // b.pool, cur[2] // b.pool)
            continue
        if b.kind == "fc":
            width = 1
            for s in cur:
                width *= s
            shape = FC(b.out, width)
            nxt = (b.out,)
        else:
            if len(cur) != 3:
                raise ConfigError("<model>", [(where, "conv needs a C x H x W input")])
            shape = Conv(b.out, cur[0], b.kernel, b.kernel)
            h = cur[1] + 2 * b.padding - b.kernel + 1
            w = cur[2] + 2 * b.padding - b.kernel + 1
            if h < 1 or w < 1:
                raise ConfigError("<model>", [(where, f"kernel {b.kernel} does not fit input {cur}")])
            nxt = (b.out, h, w)
        scheme = _layer_scheme(b, model, shape)
        rank = None
        if scheme is not Scheme.ORIGINAL:
            try:
                rank = b.rank if b.rank is not None else rank_from_gamma(
                    shape, model.gamma if b.gamma is None else b.gamma, scheme).r
            except ValueError as e:
                raise ConfigError("<model>", [(where, str(e))]) from None
        nl = b.nonlinearity if b.nonlinearity is not None else model.nonlinearity
        if scheme not in (Scheme.FEDPARA, Scheme.FEDPARA_TENSOR):
            nl = Nonlinearity.NONE
        layers.append(LayerSpec(b.kind, shape, scheme, rank, b.activation, b.bias, b.padding,
                                nonlinearity=nl, norm_affine=b.norm_affine))
        cur = nxt
    try:
        return ModelSpec(tuple(model.input_shape), tuple(layers))
    except ValueError as e:
        raise ConfigError("<model>", [("model.layers", str(e))]) from None


# ----------------------------------------------------------------------------
# loading


def _node_at(node, loc):
    """Walk a composed YAML node along a pydantic error location."""
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == part:
                    nxt = v
                    break
            if nxt is None:
                return node
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            return node
    return node


def _key_node(node, loc):
    """Node of the offending key itself, for 'extra field' errors."""
    parent = _node_at(node, loc[:-1])
    if isinstance(parent, yaml.MappingNode):
        for k, _ in parent.value:
            if k.value == loc[-1]:
                return k
    return parent


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--set", [(item, "expected key=value")])
        key, raw = item.split("=", 1)
        parts = key.split(".")
        cur = data
        for p in parts[:-1]:
            if isinstance(cur, list):
                cur = cur[int(p)]
            else:
                cur = cur.setdefault(p, {})
        last = parts[-1]
        val = yaml.safe_load(raw)
        if isinstance(cur, list):
            cur[int(last)] = val
        else:
            cur[last] = val
    return data


def parse_config(text: str, source: str = "<string>", overrides: Optional[list[str]] = None) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "?"
        raise ConfigError(source, [(where, f"YAML syntax: {getattr(e, 'problem', e)}")]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(source, [("line 1", "top level must be a mapping")])
    if overrides:
        data = apply_overrides(data, overrides)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        errors = []
        for err in e.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p in ("blobs", "idx")))
            field = ".".join(str(p) for p in loc) or "<root>"
            line = "?"
            if root is not None:
                node = _key_node(root, loc) if err["type"] == "extra_forbidden" and loc else _node_at(root, loc)
                line = str(node.start_mark.line + 1)
            errors.append((f"line {line}, field {field}", err["msg"]))
        raise ConfigError(source, errors) from None
    try:
        cfg.model_spec()
    except ConfigError as e:
        errors = []
        for where, msg in e.errors:
            loc = tuple(int(p) if p.isdigit() else p for p in where.split("."))
            line = _node_at(root, loc).start_mark.line + 1 if root is not None else "?"
            errors.append((f"line {line}, field {where}", msg))
        raise ConfigError(source, errors) from None
    try:
        shared_schema(cfg.model_spec(), cfg.federation.algorithm)
    except PayloadError as e:
        line = _node_at(root, ("federation", "algorithm")).start_mark.line + 1 if root is not None else "?"
        raise ConfigError(source, [(f"line {line}, field federation.algorithm", str(e))]) from None
    return cfg


def load_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(str(path), [("file", e.strerror or str(e))]) from None
    return parse_config(text, str(path), overrides)
