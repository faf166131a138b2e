"""Exact LPV embedding of a neural state-space model.

At a scheduling point p = col(x, u) the state-transition and output maps are
factorized as f(x,u) = A(p)x + B(p)u + V and h(x) = C(p)x + W, where A, B, C
are line integrals of the network Jacobians along lam*p for lam in [0, 1]
(computed by composite Simpson quadrature) and V = f(0,0), W = h(0) are
constant. The factorization is exact up to quadrature error.

A second mode drops the integration and uses single Jacobians at the point
itself; offsets then become point-dependent so that the linearization is
exact at the point. That variant reproduces a Newton-style SQP baseline.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import NumericalError
from .nets import AnnSsModel

WORKERS_ENV = "LPVMPC_WORKERS"

MODE_FTC = "ftc"
MODE_JACOBIAN = "jacobian"


def scheduling_point(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Stack state and input into a scheduling point col(x, u)."""
    return np.concatenate([np.asarray(x, dtype=np.float64).ravel(),
                           np.asarray(u, dtype=np.float64).ravel()])


@dataclass(frozen=True)
class ConversionConfig:
    """Quadrature step, conversion mode, and worker hint.

    ``dlam`` is the integration step on [0, 1]; the subinterval count is
    round(1/dlam) adjusted upward to the next even number as required by
    Simpson's rule.
    """

    dlam: float = 0.05
    mode: str = MODE_FTC
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.dlam <= 1.0:
            raise ValueError(f"dlam must be in (0, 1], got {self.dlam}")
        if self.mode not in (MODE_FTC, MODE_JACOBIAN):
            raise ValueError(f"mode must be '{MODE_FTC}' or '{MODE_JACOBIAN}'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def subintervals(self) -> int:
        m = max(1, round(1.0 / self.dlam))
        return m + (m % 2)


@dataclass(frozen=True)
class LpvPoint:
    """Frozen system matrices and affine offsets at one scheduling point."""

    a: np.ndarray  # (nx, nx)
    b: np.ndarray  # (nx, nu)
    c: np.ndarray  # (ny, nx)
    v: np.ndarray  # (nx,)
    w: np.ndarray  # (ny,)
    mode: str = MODE_FTC


def effective_workers(requested: int) -> int:
    """Apply the LPVMPC_WORKERS environment cap to a requested worker count."""
    cap = os.environ.get(WORKERS_ENV, "")
    if cap:
        try:
            return max(1, min(int(requested), int(cap)))
        except ValueError:
            pass
    return max(1, int(requested))


def convert_point(model: AnnSsModel, p: np.ndarray,
                  cfg: Optional[ConversionConfig] = None) -> LpvPoint:
    """Factorize the model at one scheduling point.

    Raises NumericalError (reporting the offending lambda in quadrature mode)
    if a Jacobian evaluates to a non-finite value.
    """
    cfg = cfg or ConversionConfig()
    p = np.asarray(p, dtype=np.float64).ravel()
    nx, nu = model.nx, model.nu
    if p.shape[0] != nx + nu:
        raise ValueError(f"scheduling point has size {p.shape[0]}, expected {nx + nu}")
    if not np.all(np.isfinite(p)):
        raise NumericalError("scheduling point contains non-finite entries")
    x, u = p[:nx], p[nx:]

    if cfg.mode == MODE_FTC:
        m = cfg.subintervals
        jf = model.transition_map.simpson_jacobian(p, m)
        jh = model.output_map.simpson_jacobian(x, m)
        if not (np.all(np.isfinite(jf)) and np.all(np.isfinite(jh))):
            _raise_bad_node(model, p, x, m)
        return LpvPoint(a=jf[:, :nx], b=jf[:, nx:], c=jh,
                        v=model.v_offset, w=model.w_offset, mode=MODE_FTC)

    fval, jf = model.transition_map.value_and_jacobian(p)
    hval, jh = model.output_map.value_and_jacobian(x)
    if not all(np.all(np.isfinite(arr)) for arr in (fval, jf, hval, jh)):
        raise NumericalError(f"non-finite Jacobian at scheduling point {p}")
    a, b = jf[:, :nx], jf[:, nx:]
    return LpvPoint(a=a, b=b, c=jh,
                    v=fval - a @ x - b @ u, w=hval - jh @ x, mode=MODE_JACOBIAN)


def _raise_bad_node(model, p, x, m):
    for node in range(m + 1):
        lam = node / m
        _, jf = model.transition_map.value_and_jacobian(lam * p)
        _, jh = model.output_map.value_and_jacobian(lam * x)
        if not (np.all(np.isfinite(jf)) and np.all(np.isfinite(jh))):
            raise NumericalError(f"non-finite Jacobian at lambda={lam:.4f} along ray to {p}")
    raise NumericalError(f"non-finite quadrature result at scheduling point {p}")


def convert_schedule(model: AnnSsModel, points: Sequence[np.ndarray],
                     cfg: Optional[ConversionConfig] = None) -> List[LpvPoint]:
    """Convert every point of a scheduling trajectory.

    Each point is converted independently (identical arithmetic regardless of
    worker count); errors carry the horizon index of the offending point.
    """
    cfg = cfg or ConversionConfig()
    workers = effective_workers(cfg.workers)

    def one(idx_point):
        idx, p = idx_point
        try:
            return convert_point(model, p, cfg)
        except (NumericalError, ValueError) as exc:
            raise NumericalError(f"conversion failed at horizon point {idx}: {exc}") from exc

    items = list(enumerate(points))
    if workers == 1 or len(items) <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, items))


def reconstruction_residual(model: AnnSsModel, point: LpvPoint, p: np.ndarray) -> float:
    """Max-norm defect of A x + B u + v against the nonlinear transition."""
    p = np.asarray(p, dtype=np.float64).ravel()
    x, u = p[:model.nx], p[model.nx:]
    fx = model.f_eval(x, u)
    return float(np.max(np.abs(point.a @ x + point.b @ u + point.v - fx)))
