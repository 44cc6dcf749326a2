"""Spectral scale estimation and the LiSSA (Neumann series) inverse solve.

Operators are anything with ``shape`` and ``matvec`` (our GGN/Hessian
operators, or a scipy LinearOperator / dense array for tests).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import aslinearoperator

log = logging.getLogger(__name__)


class LissaDivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LissaConfig:
    damping: float = 0.01
    scale: float | None = None  # None: estimate by power iteration
    max_iters: int = 10000
    tolerance: float = 1e-8
    scale_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass
class LissaInfo:
    scale: float = float("nan")
    iterations: int = 0
    update_norm: float = float("nan")
    residual: float = float("nan")
    converged: bool = False
    history: list = field(default_factory=list)


def as_operator(op):
    if hasattr(op, "matvec") and hasattr(op, "shape"):
        return op
    return aslinearoperator(np.asarray(op, dtype=np.float64))


def estimate_scale(op, iters: int = 100, seed: int = 0) -> float:
    """1.1 x the Rayleigh quotient after `iters` power-iteration steps.

    The magnitude is used so indefinite operators still get a positive scale,
    and the estimate never drops below the operator's damping.
    """
    if iters < 1:
        raise ValueError("power iteration needs at least one step")
    op = as_operator(op)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.shape[1])
    x /= np.linalg.norm(x)
    rq = 0.0
    for _ in range(iters):
        y = op.matvec(x)
        rq = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        x = y / ny
    lam = max(abs(rq), float(getattr(op, "damping", 0.0)))
    if lam == 0.0:
        raise ValueError("cannot scale a zero operator")
    return 1.1 * lam


def lissa_solve(op, v, config: LissaConfig = LissaConfig(), info: LissaInfo | None = None,
                scale: float | None = None) -> np.ndarray:
    """Approximate op^-1 v with r <- v + (I - op/s) r, returning r / s.

    Stops once the relative update norm reaches config.tolerance or after
    config.max_iters steps. A post-hoc residual ||op x - v|| / ||v|| is
    checked with one extra product and logged if it exceeds 1e-3.
    """
    op = as_operator(op)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.shape[1],):
        raise ValueError(f"vector of shape {v.shape} does not match operator {op.shape}")
    info = info if info is not None else LissaInfo()
    s = scale or config.scale or estimate_scale(op, config.scale_iters, config.seed)
    info.scale = s
    nv = np.linalg.norm(v)
    if nv == 0.0:
        info.converged, info.residual, info.update_norm = True, 0.0, 0.0
        return np.zeros_like(v)
    r = v.copy()
    for k in range(1, config.max_iters + 1):
        r_new = v + r - op.matvec(r) / s
        nr = np.linalg.norm(r_new)
        if not np.isfinite(nr):
            raise LissaDivergedError(
                f"LiSSA iterate became non-finite at step {k} (scale {s:.4g} too small?)")
        upd = np.linalg.norm(r_new - r) / nr if nr > 0 else 0.0
        r = r_new
        info.iterations, info.update_norm = k, upd
        if upd <= config.tolerance:
            info.converged = True
            break
    x = r / s
    info.residual = float(np.linalg.norm(op.matvec(x) - v) / nv)
    if info.residual > 1e-3:
        log.warning("LiSSA residual %.3g after %d iterations (scale %.4g)",
                    info.residual, info.iterations, s)
    else:
        log.debug("LiSSA residual %.3g after %d iterations", info.residual, info.iterations)
    return x
