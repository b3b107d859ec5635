"""Dense float64 tensor helpers shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. The
functions here add the shape checks the rest of the package relies on.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard expects identical shapes, got {a.shape} and {b.shape}")
    return a * b


def _check_mode(t: np.ndarray, mode: int) -> None:
    if not 0 <= mode < t.ndim:
        raise ShapeError(f"mode {mode} out of range for rank-{t.ndim} tensor")


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding: a ``k_mode x prod(other dims)`` matrix.

    Columns enumerate the remaining modes in their original order, row-major.
    """
    t = as_tensor(t)
    _check_mode(t, mode)
    return np.ascontiguousarray(np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1))


def fold(m: np.ndarray, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given ``shape``."""
    m = as_tensor(m)
    shape = tuple(int(s) for s in shape)
    if not 0 <= mode < len(shape):
        raise ShapeError(f"mode {mode} out of range for shape {shape}")
    moved = (shape[mode],) + shape[:mode] + shape[mode + 1:]
    if m.size != int(np.prod(shape)) or m.shape[0] != shape[mode]:
        raise ShapeError(f"cannot fold {m.shape} into {shape} along mode {mode}")
    return np.ascontiguousarray(np.moveaxis(m.reshape(moved), 0, mode))


def mode_n_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Multiply tensor ``t`` by matrix ``m`` along ``mode``.

    The result replaces dimension ``mode`` of ``t`` with ``m.shape[0]``.
    """
    t, m = as_tensor(t), as_tensor(m)
    _check_mode(t, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ShapeError(
            f"matrix {m.shape} incompatible with mode {mode} of tensor {t.shape}"
        )
    out = np.tensordot(m, t, axes=([1], [mode]))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def singular_values(m: np.ndarray) -> np.ndarray:
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a rank-2 tensor, got shape {m.shape}")
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def default_rank_tol(m: np.ndarray, sv: np.ndarray | None = None) -> float:
    if sv is None:
        sv = singular_values(m)
    smax = sv[0] if sv.size else 0.0
    return max(m.shape) * smax * np.finfo(np.float64).eps


def numerical_rank(m: np.ndarray, tol: float | None = None) -> int:
    """Number of singular values strictly above ``tol``.

    The default tolerance is ``max(m, n) * sigma_max * eps``.
    """
    sv = singular_values(m)
    if tol is None:
        tol = default_rank_tol(m, sv)
    return int(np.count_nonzero(sv > tol))
