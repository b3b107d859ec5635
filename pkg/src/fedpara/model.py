"""Small trainable networks over any weight parameterization.

Gradients are computed by hand-written reverse-mode passes: the network
backward gives ``dL/dW`` for every composed weight, and each
:class:`~fedpara.parameterization.FactorizedWeight` pulls that back onto its
factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .parameterization import (
    FC,
    Conv,
    FactorizedWeight,
    LayerShape,
    Nonlinearity,
    Scheme,
    init_factors,
)
from .tensor import ShapeError


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "fc" | "conv" | "maxpool"
    shape: Optional[LayerShape] = None
    scheme: Scheme = Scheme.ORIGINAL
    rank: Optional[int] = None
    activation: str = "none"  # "relu" | "none"
    bias: bool = True
    padding: int = 0
    pool: int = 2
    nonlinearity: Nonlinearity = Nonlinearity.NONE
    # group-norm style affine params; counted for payloads, not trained
    norm_affine: bool = False

    @property
    def has_weight(self) -> bool:
        return self.kind in ("fc", "conv")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()

    @property
    def num_classes(self) -> int:
        return self.output_shapes()[-1][0]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer; raises on a broken chain."""
        cur = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "fc":
                if not isinstance(layer.shape, FC):
                    raise ShapeError(f"layer {i}: fc layer needs an FC shape")
                width = int(np.prod(cur))
                if layer.shape.n != width:
                    raise ShapeError(f"layer {i}: expects {layer.shape.n} inputs, gets {width}")
                cur = (layer.shape.m,)
            elif layer.kind == "conv":
                s = layer.shape
                if not isinstance(s, Conv) or len(cur) != 3:
                    raise ShapeError(f"layer {i}: conv layer needs a C x H x W input, got {cur}")
                if s.in_channels != cur[0]:
                    raise ShapeError(f"layer {i}: expects {s.in_channels} channels, gets {cur[0]}")
                h = cur[1] + 2 * layer.padding - s.k1 + 1
                w = cur[2] + 2 * layer.padding - s.k2 + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i}: kernel larger than padded input {cur}")
                cur = (s.out_channels, h, w)
            elif layer.kind == "maxpool":
                if len(cur) != 3 or cur[1] < layer.pool or cur[2] < layer.pool:
                    raise ShapeError(f"layer {i}: cannot pool input {cur}")
                cur = (cur[0], cur[1] // layer.pool, cur[2] // layer.pool)
            else:
                raise ShapeError(f"layer {i}: unknown layer kind {layer.kind!r}")
            out.append(cur)
        if not out or len(out[-1]) != 1:
            raise ShapeError("the last layer must be fully connected (one logit per class)")
        return out


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    decay: float = 1.0
    batch_size: int = 10
    epochs: int = 1
    lam: float = 1.0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, round_index: int) -> float:
        return self.lr * self.decay ** round_index


@dataclass
class GradientSet:
    """Gradients keyed like :meth:`Model.params`, plus ``dL/dW`` per layer."""

    params: dict[str, np.ndarray]
    composed: dict[int, np.ndarray] = field(default_factory=dict)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet({k: v + other.params[k] for k, v in self.params.items()}, dict(self.composed))

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet({k: c * v for k, v in self.params.items()}, dict(self.composed))


class Model:
    def __init__(self, spec: ModelSpec, weights: list, biases: list):
        self.spec = spec
        self.weights: list[Optional[FactorizedWeight]] = list(weights)
        self.biases: list[Optional[np.ndarray]] = list(biases)
        for i, (layer, w) in enumerate(zip(spec.layers, self.weights)):
            if layer.has_weight and tuple(w.compose().shape) != layer.shape.weight_shape:
                raise ShapeError(f"layer {i}: composed weight does not match {layer.shape}")

    @classmethod
    def init(cls, spec: ModelSpec, seed) -> "Model":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        weights, biases = [], []
        for layer in spec.layers:
            if not layer.has_weight:
                weights.append(None)
                biases.append(None)
                continue
            if layer.scheme is not Scheme.ORIGINAL and layer.rank is None:
                raise ValueError(f"layer {len(weights)}: {layer.scheme.value} needs a resolved rank")
            r = layer.rank or 1
            weights.append(init_factors(layer.shape, layer.scheme, r, rng, layer.nonlinearity))
            out = layer.shape.weight_shape[0]
            biases.append(np.zeros(out) if layer.bias else None)
        return cls(spec, weights, biases)

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every trainable tensor, keyed ``"<layer>.<factor>"``."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w is not None:
                for k, v in w.params.items():
                    out[f"{i}.{k}"] = v
            if b is not None:
                out[f"{i}.b"] = b
        return out

    def load(self, params: dict[str, np.ndarray]) -> None:
        """Copy the given tensors into the model (a subset of keys is fine)."""
        live = self.params()
        for k, v in params.items():
            if k not in live:
                raise KeyError(f"unknown parameter {k!r}")
            if live[k].shape != np.shape(v):
                raise ShapeError(f"{k}: shape {np.shape(v)} != {live[k].shape}")
            live[k][...] = v

    def copy(self) -> "Model":
        return Model(
            self.spec,
            [w.copy() if w is not None else None for w in self.weights],
            [b.copy() if b is not None else None for b in self.biases],
        )

    def composed_weights(self) -> list[Optional[np.ndarray]]:
        return [w.compose() if w is not None else None for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())


# ----------------------------------------------------------------------------
# layer kernels


def conv2d_forward(kernel: np.ndarray, x: np.ndarray, padding: int = 0) -> np.ndarray:
    """Stride-1 cross-correlation of ``B x I x H x W`` input with ``O x I x K1 x K2`` kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.ndim != 4 or x.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    k1, k2 = kernel.shape[2:]
    if x.shape[2] + 2 * padding < k1 or x.shape[3] + 2 * padding < k2:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k1, k2), axis=(2, 3))
    return np.einsum("bihwkl,oikl->bohw", win, kernel, optimize=True)


def conv2d_backward(kernel, x, padding, g):
    """Gradients of :func:`conv2d_forward` w.r.t. kernel and input."""
    k1, k2 = kernel.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k1, k2), axis=(2, 3))
    gk = np.einsum("bihwkl,bohw->oikl", win, g, optimize=True)
    gxp = np.zeros_like(xp)
    ho, wo = g.shape[2:]
    for a in range(k1):
        for c in range(k2):
            gxp[:, :, a:a + ho, c:c + wo] += np.einsum("bohw,oi->bihw", g, kernel[:, :, a, c], optimize=True)
    h, w = x.shape[2:]
    return gk, gxp[:, :, padding:padding + h, padding:padding + w]


def _maxpool(x, k):
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], -1)[..., 0], arg


def _maxpool_backward(x_shape, k, arg, g):
    b, c, h, w = x_shape
    ho, wo = g.shape[2:]
    blocks = np.zeros((b, c, ho, wo, k * k))
    np.put_along_axis(blocks, arg[..., None], g[..., None], -1)
    blocks = blocks.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
    out = np.zeros(x_shape)
    out[:, :, :ho * k, :wo * k] = blocks
    return out


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


# ----------------------------------------------------------------------------
# forward / backward


def _run(model: Model, batch, keep: bool):
    spec = model.spec
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != spec.input_size:
        raise ShapeError(f"batch of shape {x.shape} does not match input {spec.input_shape}")
    h = x.reshape((x.shape[0],) + spec.input_shape)
    tape = []
    for layer, w, b in zip(spec.layers, model.weights, model.biases):
        in_shape = h.shape
        W = aux = None
        if layer.kind == "fc":
            inp = h.reshape(h.shape[0], -1)
            W = w.compose()
            z = inp @ W.T
            if b is not None:
                z = z + b
        elif layer.kind == "conv":
            inp = h
            W = w.compose()
            z = conv2d_forward(W, inp, layer.padding)
            if b is not None:
                z = z + b[None, :, None, None]
        else:
            inp = h
            z, aux = _maxpool(inp, layer.pool)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if keep:
            tape.append((in_shape, inp, W, z, aux))
    return h, tape


def forward(model: Model, batch) -> np.ndarray:
    """Logits ``B x C`` for a batch whose rows flatten to the model input."""
    return _run(model, batch, keep=False)[0]


def predict(model: Model, batch) -> np.ndarray:
    return forward(model, batch).argmax(axis=1)


def accuracy(model: Model, features, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, features) == np.asarray(labels)))


def _check_finite(loss, model):
    if not np.isfinite(loss):
        norms = {k: float(np.linalg.norm(v)) for k, v in model.params().items()}
        raise NumericalError(f"non-finite loss {float(loss)}; parameter norms: {norms}")


def loss_and_grad(model: Model, batch, labels) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy and its gradient w.r.t. every trainable tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, tape = _run(model, batch, keep=True)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    loss, g = _softmax_xent(logits, labels)
    _check_finite(loss, model)
    grads: dict[str, np.ndarray] = {}
    composed: dict[int, np.ndarray] = {}
    for i in reversed(range(len(model.spec.layers))):
        layer = model.spec.layers[i]
        in_shape, inp, W, z, aux = tape[i]
        if layer.activation == "relu":
            g = g * (z > 0)
        if layer.kind == "fc":
            if model.biases[i] is not None:
                grads[f"{i}.b"] = g.sum(axis=0)
            gW = g.T @ inp
            g = (g @ W).reshape(in_shape)
        elif layer.kind == "conv":
            if model.biases[i] is not None:
                grads[f"{i}.b"] = g.sum(axis=(0, 2, 3))
            gW, g = conv2d_backward(W, inp, layer.padding, g)
        else:
            g = _maxpool_backward(in_shape, layer.pool, aux, g)
            continue
        composed[i] = gW
        for k, v in model.weights[i].vjp(gW).items():
            grads[f"{i}.{k}"] = v
    ordered = {k: grads[k] for k in model.params()}
    return float(loss), GradientSet(ordered, composed)


def jacobian_penalty(model: Model, grads: GradientSet, eta: float) -> tuple[float, GradientSet]:
    """Mismatch between a one-step factor update and the direct weight step.

    For each factorized layer with factors ``p`` and loss gradients ``J_p``::

        D = W(p - eta J_p) - (W(p) - eta J_W)
        penalty = 1/2 sum ||D||_F^2

    ``J_p`` and ``J_W`` are held constant when differentiating, so the
    returned gradient is ``vjp(p - eta J_p, D) - vjp(p, D)``.
    """
    total = 0.0
    out = {k: np.zeros_like(v) for k, v in model.params().items()}
    for i, w in enumerate(model.weights):
        if w is None or i not in grads.composed:
            continue
        stepped = {k: v - eta * grads.params[f"{i}.{k}"] for k, v in w.params.items()}
        d = w.compose(stepped) - (w.compose() - eta * grads.composed[i])
        total += 0.5 * float(np.sum(d * d))
        g_new = w.vjp(d, stepped)
        g_old = w.vjp(d)
        for k in w.params:
            out[f"{i}.{k}"] = g_new[k] - g_old[k]
    return total, GradientSet(out)


def objective_and_grad(model: Model, batch, labels, lam: float = 0.0, eta: float = 0.1):
    """Loss plus ``lam`` times the Jacobian-correction penalty, with gradients."""
    loss, grads = loss_and_grad(model, batch, labels)
    if lam == 0.0:
        return loss, grads
    pen, pgrads = jacobian_penalty(model, grads, eta)
    return loss + lam * pen, grads + pgrads.scaled(lam)


def sgd_step(model: Model, grads: GradientSet, config: SgdConfig, round_index: int = 0,
             state: Optional[dict] = None) -> Model:
    """In-place update ``theta -= lr * decay**round * g`` (plus optional momentum / decay)."""
    lr = config.lr_at(round_index)
    for k, p in model.params().items():
        g = grads.params[k]
        if config.weight_decay:
            g = g + config.weight_decay * p
        if config.momentum:
            if state is None:
                raise ValueError("momentum needs an optimizer state dict")
            buf = state.get(k)
            buf = g.copy() if buf is None else config.momentum * buf + g
            state[k] = buf
            g = buf
        p -= lr * g
    return model


def local_sgd(model: Model, features, labels, config: SgdConfig, round_index: int,
              rng: np.random.Generator) -> float:
    """Run ``config.epochs`` of shuffled minibatch SGD; returns the mean cross-entropy."""
    n = len(labels)
    if n == 0 or config.epochs == 0:
        return float("nan")
    state: dict = {}
    eta = config.lr_at(round_index)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(model, features[idx], labels[idx])
            if config.lam:
                grads = grads + jacobian_penalty(model, grads, eta)[1].scaled(config.lam)
            sgd_step(model, grads, config, round_index, state)
            losses.append(loss)
    return float(np.mean(losses))
