"""Weight parameterizations, rank selection and parameter counting.

Every trainable layer weight is stored as a :class:`FactorizedWeight`. The
composed weight always has the layer's natural shape (``m x n`` for fully
connected layers, ``O x I x K1 x K2`` for convolutions), so the model code
never needs to know which scheme produced it.

Schemes
-------
original
    The dense weight itself.
lowrank
    ``X Y^T`` with ``X: m x 2R`` and ``Y: n x 2R``. For convolutions the same
    budget is spent on a sum of two Tucker-2 terms, which has unfolding rank
    at most ``2R``.
fedpara
    Low-rank Hadamard product ``(X1 Y1^T) * (X2 Y2^T)``. Convolution kernels
    are reshaped to ``O x (I K1 K2)`` first.
fedpara_tensor
    ``(T1 x1 X1 x2 Y1) * (T2 x1 X2 x2 Y2)`` on the 4-D kernel directly.
pfedpara
    ``W1 * (W2 + 1)`` where ``W1`` is shared with the server and ``W2`` stays
    on the client. Matrix form for FC layers, tensor form for convolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, Union

import numpy as np

from .tensor import mode_n_product


class ConstructionError(ValueError):
    """Factor shapes violate a scheme's construction invariants."""


class DomainError(ValueError):
    """An argument lies outside the domain of a rank/count rule."""


@dataclass(frozen=True)
class FC:
    """Fully connected layer with ``m`` outputs and ``n`` inputs."""

    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise DomainError(f"layer dimensions must be >= 1, got {self}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.m, self.n)

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    @property
    def fan_in(self) -> int:
        return self.n

    @property
    def size(self) -> int:
        return self.m * self.n


@dataclass(frozen=True)
class Conv:
    """Convolution kernel ``O x I x K1 x K2``."""

    out_channels: int
    in_channels: int
    k1: int
    k2: int

    def __post_init__(self):
        if min(self.out_channels, self.in_channels, self.k1, self.k2) < 1:
            raise DomainError(f"layer dimensions must be >= 1, got {self}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.k1, self.k2)

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return (self.out_channels, self.in_channels * self.k1 * self.k2)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.k1 * self.k2

    @property
    def size(self) -> int:
        return self.out_channels * self.fan_in


LayerShape = Union[FC, Conv]


class Scheme(str, Enum):
    ORIGINAL = "original"
    LOWRANK = "lowrank"
    FEDPARA = "fedpara"
    FEDPARA_TENSOR = "fedpara_tensor"
    PFEDPARA = "pfedpara"


class Nonlinearity(str, Enum):
    NONE = "none"
    TANH = "tanh"


# ----------------------------------------------------------------------------
# inner building blocks


def _matrix_inner(x, y):
    return x @ y.T


def _matrix_inner_vjp(x, y, g):
    return g @ y, g.T @ x


def _tucker2(t, x, y):
    return mode_n_product(mode_n_product(t, x, 0), y, 1)


def _tucker2_vjp(t, x, y, g):
    gt = np.einsum("oikl,oa,ib->abkl", g, x, y, optimize=True)
    gx = np.einsum("oikl,abkl,ib->oa", g, t, y, optimize=True)
    gy = np.einsum("oikl,abkl,oa->ib", g, t, x, optimize=True)
    return gt, gx, gy


def _act(z, nonlinearity):
    return np.tanh(z) if nonlinearity is Nonlinearity.TANH else z


def _act_grad(z, g, nonlinearity):
    if nonlinearity is Nonlinearity.TANH:
        return g * (1.0 - np.tanh(z) ** 2)
    return g


# ----------------------------------------------------------------------------
# factorized weights


class FactorizedWeight:
    """Base class: a layer weight held as a set of named factor tensors."""

    scheme: ClassVar[Scheme]
    keys: ClassVar[tuple[str, ...]]

    def __init__(self, shape: LayerShape, params: dict, nonlinearity=Nonlinearity.NONE):
        self.shape = shape
        self.nonlinearity = Nonlinearity(nonlinearity)
        missing = set(self.keys) - set(params)
        extra = set(params) - set(self.keys)
        if missing or extra:
            raise ConstructionError(
                f"{self.scheme.value}: expected factors {self.keys}, got {sorted(params)}"
            )
        self.params = {k: np.ascontiguousarray(params[k], dtype=np.float64) for k in self.keys}
        self._validate()

    def _validate(self) -> None:
        raise NotImplementedError

    def compose(self, params: dict | None = None) -> np.ndarray:
        """Composed weight in the layer's natural shape."""
        return self._compose(self.params if params is None else params)

    def vjp(self, grad: np.ndarray, params: dict | None = None) -> dict[str, np.ndarray]:
        """Pull ``dL/dW`` back to ``dL/d(factor)`` for every factor."""
        p = self.params if params is None else params
        return self._vjp(p, np.asarray(grad, dtype=np.float64).reshape(self.shape.weight_shape))

    @property
    def global_keys(self) -> tuple[str, ...]:
        return self.keys

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "FactorizedWeight":
        return type(self)(self.shape, {k: v.copy() for k, v in self.params.items()}, self.nonlinearity)

    def _expect(self, name, shape):
        if self.params[name].shape != tuple(shape):
            raise ConstructionError(
                f"{self.scheme.value}: factor {name} has shape {self.params[name].shape}, "
                f"expected {tuple(shape)}"
            )

    def __repr__(self):
        dims = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.shape}, {dims})"


class OriginalWeight(FactorizedWeight):
    scheme = Scheme.ORIGINAL
    keys = ("W",)

    def _validate(self):
        self._expect("W", self.shape.weight_shape)

    def _compose(self, p):
        return p["W"].copy()

    def _vjp(self, p, g):
        return {"W": g.copy()}


class LowRankWeight(FactorizedWeight):
    scheme = Scheme.LOWRANK

    def __init__(self, shape, params, nonlinearity=Nonlinearity.NONE):
        self.keys = ("X", "Y") if isinstance(shape, FC) else ("T1", "X1", "Y1", "T2", "X2", "Y2")
        super().__init__(shape, params, nonlinearity)

    def _validate(self):
        if isinstance(self.shape, FC):
            k = self.params["X"].shape[1]
            self._expect("X", (self.shape.m, k))
            self._expect("Y", (self.shape.n, k))
        else:
            _validate_tucker_pair(self, check_rank=False)

    def _compose(self, p):
        if isinstance(self.shape, FC):
            return _matrix_inner(p["X"], p["Y"])
        return _tucker2(p["T1"], p["X1"], p["Y1"]) + _tucker2(p["T2"], p["X2"], p["Y2"])

    def _vjp(self, p, g):
        if isinstance(self.shape, FC):
            gx, gy = _matrix_inner_vjp(p["X"], p["Y"], g)
            return {"X": gx, "Y": gy}
        out = {}
        for i in ("1", "2"):
            gt, gx, gy = _tucker2_vjp(p["T" + i], p["X" + i], p["Y" + i], g)
            out.update({"T" + i: gt, "X" + i: gx, "Y" + i: gy})
        return out


def _validate_tucker_pair(w, check_rank=True):
    s = w.shape
    r = w.params["X1"].shape[1] if w.params["X1"].ndim == 2 else -1
    if check_rank and r > min(s.out_channels, s.in_channels):
        raise ConstructionError(
            f"{w.scheme.value}: R={r} exceeds min(O, I)={min(s.out_channels, s.in_channels)}"
        )
    for i in ("1", "2"):
        w._expect("T" + i, (r, r, s.k1, s.k2))
        w._expect("X" + i, (s.out_channels, r))
        w._expect("Y" + i, (s.in_channels, r))


class FedParaMatrixWeight(FactorizedWeight):
    """``sigma(X1 Y1^T) * sigma(X2 Y2^T)``; conv kernels are reshaped."""

    scheme = Scheme.FEDPARA
    keys = ("X1", "Y1", "X2", "Y2")

    def _validate(self):
        m, n = self.shape.matrix_shape
        for i in ("1", "2"):
            x = self.params["X" + i]
            if x.ndim != 2:
                raise ConstructionError(f"X{i} must be a matrix, got shape {x.shape}")
            r = x.shape[1]
            if r > min(m, n):
                raise ConstructionError(f"r{i}={r} exceeds min(m, n)={min(m, n)}")
            self._expect("X" + i, (m, r))
            self._expect("Y" + i, (n, r))

    @property
    def inner_ranks(self) -> tuple[int, int]:
        return self.params["X1"].shape[1], self.params["X2"].shape[1]

    def _compose(self, p):
        w1 = _matrix_inner(p["X1"], p["Y1"])
        w2 = _matrix_inner(p["X2"], p["Y2"])
        w = _act(w1, self.nonlinearity) * _act(w2, self.nonlinearity)
        return w.reshape(self.shape.weight_shape)

    def _vjp(self, p, g):
        g = g.reshape(self.shape.matrix_shape)
        w1 = _matrix_inner(p["X1"], p["Y1"])
        w2 = _matrix_inner(p["X2"], p["Y2"])
        g1 = _act_grad(w1, g * _act(w2, self.nonlinearity), self.nonlinearity)
        g2 = _act_grad(w2, g * _act(w1, self.nonlinearity), self.nonlinearity)
        gx1, gy1 = _matrix_inner_vjp(p["X1"], p["Y1"], g1)
        gx2, gy2 = _matrix_inner_vjp(p["X2"], p["Y2"], g2)
        return {"X1": gx1, "Y1": gy1, "X2": gx2, "Y2": gy2}


class FedParaTensorWeight(FactorizedWeight):
    """``sigma(T1 x1 X1 x2 Y1) * sigma(T2 x1 X2 x2 Y2)`` on a 4-D kernel."""

    scheme = Scheme.FEDPARA_TENSOR
    keys = ("T1", "X1", "Y1", "T2", "X2", "Y2")

    def _validate(self):
        if not isinstance(self.shape, Conv):
            raise ConstructionError("fedpara_tensor applies to convolution kernels only")
        _validate_tucker_pair(self)

    def _compose(self, p):
        w1 = _tucker2(p["T1"], p["X1"], p["Y1"])
        w2 = _tucker2(p["T2"], p["X2"], p["Y2"])
        return _act(w1, self.nonlinearity) * _act(w2, self.nonlinearity)

    def _vjp(self, p, g):
        w1 = _tucker2(p["T1"], p["X1"], p["Y1"])
        w2 = _tucker2(p["T2"], p["X2"], p["Y2"])
        g1 = _act_grad(w1, g * _act(w2, self.nonlinearity), self.nonlinearity)
        g2 = _act_grad(w2, g * _act(w1, self.nonlinearity), self.nonlinearity)
        out = {}
        for i, gi in (("1", g1), ("2", g2)):
            gt, gx, gy = _tucker2_vjp(p["T" + i], p["X" + i], p["Y" + i], gi)
            out.update({"T" + i: gt, "X" + i: gx, "Y" + i: gy})
        return out


class PFedParaWeight(FactorizedWeight):
    """``W1 * (W2 + 1)`` with ``W1`` global and ``W2`` client-local."""

    scheme = Scheme.PFEDPARA

    def __init__(self, shape, params, nonlinearity=Nonlinearity.NONE):
        if Nonlinearity(nonlinearity) is not Nonlinearity.NONE:
            raise ConstructionError("pfedpara does not use a nonlinearity")
        self.keys = (
            ("X1", "Y1", "X2", "Y2") if isinstance(shape, FC)
            else ("T1", "X1", "Y1", "T2", "X2", "Y2")
        )
        super().__init__(shape, params, nonlinearity)

    def _validate(self):
        if isinstance(self.shape, Conv):
            _validate_tucker_pair(self)
            return
        m, n = self.shape.matrix_shape
        for i in ("1", "2"):
            r = self.params["X" + i].shape[1] if self.params["X" + i].ndim == 2 else -1
            if r > min(m, n):
                raise ConstructionError(f"r{i}={r} exceeds min(m, n)={min(m, n)}")
            self._expect("X" + i, (m, r))
            self._expect("Y" + i, (n, r))

    @property
    def global_keys(self) -> tuple[str, ...]:
        return tuple(k for k in self.keys if k.endswith("1"))

    @property
    def local_keys(self) -> tuple[str, ...]:
        return tuple(k for k in self.keys if k.endswith("2"))

    def _inner(self, p, i):
        if isinstance(self.shape, FC):
            return _matrix_inner(p["X" + i], p["Y" + i])
        return _tucker2(p["T" + i], p["X" + i], p["Y" + i])

    def _inner_vjp(self, p, i, g):
        if isinstance(self.shape, FC):
            gx, gy = _matrix_inner_vjp(p["X" + i], p["Y" + i], g)
            return {"X" + i: gx, "Y" + i: gy}
        gt, gx, gy = _tucker2_vjp(p["T" + i], p["X" + i], p["Y" + i], g)
        return {"T" + i: gt, "X" + i: gx, "Y" + i: gy}

    def _compose(self, p):
        return self._inner(p, "1") * (self._inner(p, "2") + 1.0)

    def _vjp(self, p, g):
        w1, w2 = self._inner(p, "1"), self._inner(p, "2")
        out = self._inner_vjp(p, "1", g * (w2 + 1.0))
        out.update(self._inner_vjp(p, "2", g * w1))
        return out


WEIGHT_CLASSES = {
    Scheme.ORIGINAL: OriginalWeight,
    Scheme.LOWRANK: LowRankWeight,
    Scheme.FEDPARA: FedParaMatrixWeight,
    Scheme.FEDPARA_TENSOR: FedParaTensorWeight,
    Scheme.PFEDPARA: PFedParaWeight,
}


def make_weight(scheme, shape: LayerShape, params: dict, nonlinearity=Nonlinearity.NONE) -> FactorizedWeight:
    return WEIGHT_CLASSES[Scheme(scheme)](shape, params, nonlinearity)


def compose_matrix(w: FedParaMatrixWeight) -> np.ndarray:
    if not isinstance(w, FedParaMatrixWeight):
        raise ConstructionError(f"compose_matrix expects a fedpara weight, got {w.scheme.value}")
    return w.compose()


def compose_tensor(w: FedParaTensorWeight) -> np.ndarray:
    if not isinstance(w, FedParaTensorWeight):
        raise ConstructionError(f"compose_tensor expects a fedpara_tensor weight, got {w.scheme.value}")
    return w.compose()


def compose_personalized(w: PFedParaWeight) -> np.ndarray:
    if not isinstance(w, PFedParaWeight):
        raise ConstructionError(f"compose_personalized expects a pfedpara weight, got {w.scheme.value}")
    return w.compose()


# ----------------------------------------------------------------------------
# rank rules and counting


def inner_rank_objective(r1: int, r2: int, m: int, n: int) -> int:
    """Parameter cost ``(r1 + r2)(m + n)`` of a matrix Hadamard factorization."""
    return (r1 + r2) * (m + n)


def optimal_inner_rank(R: int) -> tuple[int, int]:
    """Cheapest ``(r1, r2)`` with ``r1 * r2 >= R**2``; always ``(R, R)``."""
    if R < 1:
        raise DomainError(f"target rank must be >= 1, got {R}")
    return R, R


def min_full_rank(m: int, n: int) -> int:
    """Smallest R with ``R**2 >= min(m, n)``."""
    if m < 1 or n < 1:
        raise DomainError(f"dimensions must be >= 1, got ({m}, {n})")
    k = min(m, n)
    r = math.isqrt(k)
    return r if r * r == k else r + 1


def default_scheme(shape: LayerShape) -> Scheme:
    return Scheme.FEDPARA if isinstance(shape, FC) else Scheme.FEDPARA_TENSOR


def _uses_tensor_form(scheme: Scheme, shape: LayerShape) -> bool:
    return isinstance(shape, Conv) and scheme in (
        Scheme.FEDPARA_TENSOR, Scheme.PFEDPARA, Scheme.LOWRANK
    )


def param_count(scheme, shape: LayerShape, r: int = 1) -> int:
    """Exact number of trainable weight entries (biases excluded)."""
    scheme = Scheme(scheme) if not isinstance(scheme, Scheme) else scheme
    if scheme is Scheme.ORIGINAL:
        return shape.size
    if r < 1:
        raise DomainError(f"rank must be >= 1, got {r}")
    if isinstance(shape, FC):
        if scheme is Scheme.FEDPARA_TENSOR:
            raise DomainError("fedpara_tensor is defined for convolution kernels only")
        return 2 * r * (shape.m + shape.n)
    O, I, K = shape.out_channels, shape.in_channels, shape.k1 * shape.k2
    if scheme is Scheme.FEDPARA:
        return 2 * r * (O + I * K)
    return 2 * r * (O + I + r * K)


def max_rank(scheme, shape: LayerShape, r: int = 1) -> int:
    """Upper bound on the rank of the composed weight (first unfolding for convs)."""
    scheme = Scheme(scheme)
    full = min(shape.matrix_shape)
    if scheme is Scheme.ORIGINAL:
        return full
    if r < 1:
        raise DomainError(f"rank must be >= 1, got {r}")
    if scheme is Scheme.LOWRANK:
        return min(2 * r, full)
    if scheme is Scheme.PFEDPARA:
        # W1 * W2 + W1 spans at most r^2 + r rank-one terms
        return min(r * r + r, full)
    return min(r * r, full)


@dataclass(frozen=True)
class RankBudget:
    r_min: int
    r_max: int
    gamma: float
    r: int
    degenerate: bool = False


def rank_dims(shape: LayerShape, scheme: Scheme) -> tuple[int, int]:
    if _uses_tensor_form(scheme, shape):
        return shape.out_channels, shape.in_channels
    return shape.matrix_shape


def rank_from_gamma(shape: LayerShape, gamma: float, scheme=None) -> RankBudget:
    """Interpolate the inner rank between full-rank minimum and parameter ceiling.

    ``r_max`` is the largest rank whose factor count does not exceed the
    original layer; ``r = round_half_up((1 - gamma) r_min + gamma r_max)``.
    """
    scheme = default_scheme(shape) if scheme is None else Scheme(scheme)
    if scheme is Scheme.ORIGINAL:
        raise DomainError("the original parameterization has no inner rank")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    r_min = min_full_rank(*rank_dims(shape, scheme))
    budget = shape.size
    r_max = 0
    while param_count(scheme, shape, r_max + 1) <= budget:
        r_max += 1
    if r_max < r_min:
        return RankBudget(r_min, r_max, gamma, r_min, degenerate=True)
    r = math.floor((1.0 - gamma) * r_min + gamma * r_max + 0.5)
    return RankBudget(r_min, r_max, gamma, min(max(r, r_min), r_max))


def factor_shapes(scheme, shape: LayerShape, r: int) -> dict[str, tuple[int, ...]]:
    scheme = Scheme(scheme)
    if scheme is Scheme.ORIGINAL:
        return {"W": shape.weight_shape}
    if isinstance(shape, FC):
        m, n = shape.m, shape.n
        if scheme is Scheme.LOWRANK:
            return {"X": (m, 2 * r), "Y": (n, 2 * r)}
        if scheme in (Scheme.FEDPARA, Scheme.PFEDPARA):
            return {"X1": (m, r), "Y1": (n, r), "X2": (m, r), "Y2": (n, r)}
        raise DomainError(f"{scheme.value} is not defined for FC layers")
    if scheme is Scheme.FEDPARA:
        m, n = shape.matrix_shape
        return {"X1": (m, r), "Y1": (n, r), "X2": (m, r), "Y2": (n, r)}
    O, I, k1, k2 = shape.weight_shape
    out = {}
    for i in ("1", "2"):
        out.update({"T" + i: (r, r, k1, k2), "X" + i: (O, r), "Y" + i: (I, r)})
    return out


def _factor_std(scheme: Scheme, shape: LayerShape, r: int) -> float:
    """Per-entry std making Var(W) match the He target ``2 / fan_in``."""
    target = 2.0 / shape.fan_in
    tensor_form = _uses_tensor_form(scheme, shape)
    # variance of one inner product per unit factor variance, and its power
    terms, power = (r * r, 3) if tensor_form else (r, 2)
    if scheme is Scheme.ORIGINAL:
        return math.sqrt(target)
    if scheme is Scheme.LOWRANK:
        # one inner product of width 2r (FC) or two Tucker terms (conv)
        width = 2 * terms
        return (target / width) ** (1.0 / (2 * power))
    if scheme is Scheme.PFEDPARA:
        # Var(W1) (Var(W2) + 1) = target with Var(W1) = Var(W2) = v
        v = (math.sqrt(1.0 + 4.0 * target) - 1.0) / 2.0
        return (v / terms) ** (1.0 / (2 * power))
    return (math.sqrt(target) / terms) ** (1.0 / (2 * power))


def init_factors(shape: LayerShape, scheme, r: int, seed, nonlinearity=Nonlinearity.NONE) -> FactorizedWeight:
    """Seeded He-style Gaussian initialization of every factor.

    ``seed`` may be an int or a ``numpy.random.Generator`` owned by the caller.
    """
    scheme = Scheme(scheme)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = _factor_std(scheme, shape, r)
    params = {k: rng.standard_normal(s) * std for k, s in factor_shapes(scheme, shape, r).items()}
    return make_weight(scheme, shape, params, nonlinearity)
