"""Steady-state target selection for output setpoints.

Computes a pair (x_ref, u_ref) realizing an output setpoint r by repeatedly
(i) converting the model at the current guess's scheduling point, and
(ii) solving the resulting equality-constrained QP, until the iterate stops
moving. Constraints (LPV steady-state equations, exact output match, boxes)
enter as rows of one QP; if the exact-output equality makes the QP
infeasible (setpoint unreachable under the boxes), it is dropped and the
weighted least-squares objective picks the closest feasible target.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .condense import BoxConstraints
from .convert import ConversionConfig, LpvPoint, convert_point, scheduling_point
from .nets import AnnSsModel
from .qpsolver import (STATUS_SOLVED, QpProblem, QpSettings, qp_solve)


@dataclass(frozen=True)
class TargetProblem:
    """Setpoint, selector weights, constraints, and fixed-point loop limits."""

    r: np.ndarray
    q_weight: Optional[np.ndarray] = None   # output-error weight, default I
    r_weight: Optional[np.ndarray] = None   # input-magnitude weight, default 1e-3 I
    box: Optional[BoxConstraints] = None
    tol: float = 1e-6
    max_iter: int = 20

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).ravel())
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class TargetResult:
    x_ref: np.ndarray
    u_ref: np.ndarray
    converged: bool
    feasible: bool          # False when the exact-output equality was dropped
    iterations: int
    state_residual: float   # ||f(x_ref, u_ref) - x_ref||_inf on the nonlinear model
    output_residual: float  # ||h(x_ref) - r||_inf on the nonlinear model


def _selector_qp(point: LpvPoint, tp: TargetProblem, nx: int, nu: int, ny: int,
                 exact_output: bool) -> QpProblem:
    q_w = np.eye(ny) if tp.q_weight is None else np.atleast_2d(tp.q_weight)
    r_w = 1e-3 * np.eye(nu) if tp.r_weight is None else np.atleast_2d(tp.r_weight)
    c, w = point.c, point.w
    # 0.5||C x + W - r||_Q^2 + u' R u over z = (x, u)
    p = np.zeros((nx + nu, nx + nu))
    p[:nx, :nx] = c.T @ q_w @ c
    p[nx:, nx:] = 2.0 * r_w
    q = np.concatenate([c.T @ q_w @ (w - tp.r), np.zeros(nu)])

    rows = [np.hstack([np.eye(nx) - point.a, -point.b])]
    lo = [point.v]
    hi = [point.v]
    if exact_output:
        rows.append(np.hstack([c, np.zeros((ny, nu))]))
        lo.append(tp.r - w)
        hi.append(tp.r - w)
    if tp.box is not None:
        rows.append(np.hstack([c, np.zeros((ny, nu))]))
        lo.append(tp.box.y_min - w)
        hi.append(tp.box.y_max - w)
        rows.append(np.hstack([np.zeros((nu, nx)), np.eye(nu)]))
        lo.append(tp.box.u_min)
        hi.append(tp.box.u_max)
    return QpProblem(p=p, q=q, a=np.vstack(rows),
                     l=np.concatenate(lo), u=np.concatenate(hi))


def solve_target(model: AnnSsModel, tp: TargetProblem,
                 guess: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 conversion: Optional[ConversionConfig] = None,
                 qp_settings: Optional[QpSettings] = None) -> TargetResult:
    """Iteratively re-scheduled selector QP; warm-startable via ``guess``."""
    if tp.r.size != model.ny:
        raise ValueError(f"setpoint has {tp.r.size} channels, model output is {model.ny}")
    conversion = conversion or ConversionConfig()
    nx, nu, ny = model.nx, model.nu, model.ny
    x = np.zeros(nx) if guess is None else np.asarray(guess[0], dtype=np.float64).ravel()
    u = np.zeros(nu) if guess is None else np.asarray(guess[1], dtype=np.float64).ravel()

    feasible = True
    converged = False
    iterations = 0
    for iterations in range(1, tp.max_iter + 1):
        point = convert_point(model, scheduling_point(x, u), conversion)
        sol = qp_solve(_selector_qp(point, tp, nx, nu, ny, exact_output=feasible),
                       qp_settings)
        if sol.status != STATUS_SOLVED and feasible:
            # unreachable setpoint: drop the exact-output equality and let the
            # least-squares objective find the closest feasible target
            feasible = False
            sol = qp_solve(_selector_qp(point, tp, nx, nu, ny, exact_output=False),
                           qp_settings)
        x_new, u_new = sol.z[:nx], sol.z[nx:]
        step = max(np.max(np.abs(x_new - x), initial=0.0),
                   np.max(np.abs(u_new - u), initial=0.0))
        x, u = x_new, u_new
        if step <= tp.tol:
            converged = True
            break

    return TargetResult(
        x_ref=x, u_ref=u, converged=converged, feasible=feasible,
        iterations=iterations,
        state_residual=float(np.max(np.abs(model.f_eval(x, u) - x))),
        output_residual=float(np.max(np.abs(model.h_eval(x) - tp.r))),
    )
