"""Condensed prediction model, quadratic cost, and stacked constraints.

Given frozen LPV matrices along a horizon of length N, the predicted state
stack is X = Phi x0 + Gamma U + d, where d is the accumulated response to the
per-step affine offsets, and the output stack is Y = Lam X + h. Eliminating
the states turns the horizon cost into 0.5 U' G U + F' U + const and the box
constraints into one-sided rows L U <= rhs (optionally softened by
nonnegative slack variables on the output rows).

All builders are pure functions of their arguments.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .convert import LpvPoint


@dataclass(frozen=True)
class HorizonWeights:
    """Per-step quadratic stage weights (state weights PD, input weights PSD)."""

    q: Tuple[np.ndarray, ...]  # horizon entries, each (nx, nx)
    r: Tuple[np.ndarray, ...]  # horizon entries, each (nu, nu)

    def __post_init__(self):
        q = tuple(np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in self.q)
        r = tuple(np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in self.r)
        if len(q) != len(r) or not q:
            raise ValueError("need equal, nonzero numbers of state and input weights")
        for m in q + r:
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-12):
                raise ValueError("weight matrices must be square and symmetric")
        for m in q:
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise ValueError("state weights must be positive definite") from None
        for m in r:
            if np.min(np.linalg.eigvalsh(m)) < -1e-10:
                raise ValueError("input weights must be positive semi-definite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @classmethod
    def constant(cls, q: np.ndarray, r: np.ndarray, horizon: int) -> "HorizonWeights":
        return cls((q,) * horizon, (r,) * horizon)

    @property
    def horizon(self) -> int:
        return len(self.q)

    @property
    def omega(self) -> np.ndarray:
        """Block-diagonal stack of the state weights."""
        return _block_diag(self.q)

    @property
    def psi(self) -> np.ndarray:
        """Block-diagonal stack of the input weights."""
        return _block_diag(self.r)


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    m = sum(b.shape[1] for b in blocks)
    out = np.zeros((n, m))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


@dataclass(frozen=True)
class BoxConstraints:
    """Elementwise input/output bounds; +-inf disables a bound."""

    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    def __post_init__(self):
        for name in ("u_min", "u_max", "y_min", "y_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if np.any(self.u_min > self.u_max) or np.any(self.y_min > self.y_max):
            raise ValueError("box constraints must satisfy min <= max")

    @classmethod
    def unbounded(cls, nu: int, ny: int) -> "BoxConstraints":
        inf = np.inf
        return cls(-inf * np.ones(nu), inf * np.ones(nu),
                   -inf * np.ones(ny), inf * np.ones(ny))

    @classmethod
    def symmetric(cls, u_amp: float, y_amp: float, nu: int = 1, ny: int = 1) -> "BoxConstraints":
        return cls(-u_amp * np.ones(nu), u_amp * np.ones(nu),
                   -y_amp * np.ones(ny), y_amp * np.ones(ny))

    @property
    def constrained_outputs(self) -> np.ndarray:
        """Indices of output channels with at least one finite bound."""
        return np.where(np.isfinite(self.y_min) | np.isfinite(self.y_max))[0]


@dataclass(frozen=True)
class PredictionModel:
    """Dense prediction matrices for one converted horizon.

    ``gamma`` is block lower-triangular; ``v_resp`` is the state-stack
    response to the per-step affine offsets (equals F0 V when all offsets
    coincide, as they do in quadrature mode).
    """

    phi: np.ndarray     # (N*nx, nx)
    gamma: np.ndarray   # (N*nx, N*nu)
    v_resp: np.ndarray  # (N*nx,)
    lam: np.ndarray     # (N*ny, N*nx), block diagonal of C at points 1..N
    h_stack: np.ndarray  # (N*ny,)
    nx: int
    nu: int
    ny: int
    horizon: int

    def state_stack(self, x0: np.ndarray, u_stack: np.ndarray) -> np.ndarray:
        return self.phi @ x0 + self.gamma @ u_stack + self.v_resp

    def output_stack(self, x0: np.ndarray, u_stack: np.ndarray) -> np.ndarray:
        return self.lam @ self.state_stack(x0, u_stack) + self.h_stack


def build_prediction(points: Sequence[LpvPoint], x0: Optional[np.ndarray] = None) -> PredictionModel:
    """Condense N+1 converted points into dense prediction matrices.

    Point i < N supplies (A_i, B_i, v_i) for the state recursion
    x_{i+1} = A_i x_i + B_i u_i + v_i; points 1..N supply (C_i, w_i) for the
    predicted outputs. Built by forward recursion, which is numerically
    identical to the closed-form block products.
    """
    if len(points) < 2:
        raise ValueError("need at least two points (horizon >= 1)")
    horizon = len(points) - 1
    nx = points[0].a.shape[0]
    nu = points[0].b.shape[1]
    ny = points[0].c.shape[0]
    if x0 is not None and np.asarray(x0).ravel().shape[0] != nx:
        raise ValueError("x0 dimension mismatch")
    for i, pt in enumerate(points):
        if pt.a.shape != (nx, nx) or pt.b.shape != (nx, nu) or pt.c.shape != (ny, nx):
            raise ValueError(f"inconsistent matrix dimensions at point {i}")

    phi = np.zeros((horizon * nx, nx))
    gamma = np.zeros((horizon * nx, horizon * nu))
    v_resp = np.zeros(horizon * nx)
    row_phi = np.eye(nx)
    for i in range(horizon):
        a_i, b_i, v_i = points[i].a, points[i].b, points[i].v
        rows = slice(i * nx, (i + 1) * nx)
        prev = slice((i - 1) * nx, i * nx)
        row_phi = a_i @ row_phi
        phi[rows] = row_phi
        if i > 0:
            gamma[rows, :i * nu] = a_i @ gamma[prev, :i * nu]
            v_resp[rows] = a_i @ v_resp[prev] + v_i
        else:
            v_resp[rows] = v_i
        gamma[rows, i * nu:(i + 1) * nu] = b_i

    lam = _block_diag([pt.c for pt in points[1:]])
    h_stack = np.concatenate([pt.w for pt in points[1:]])
    return PredictionModel(phi=phi, gamma=gamma, v_resp=v_resp, lam=lam,
                           h_stack=h_stack, nx=nx, nu=nu, ny=ny, horizon=horizon)


def build_cost(pm: PredictionModel, x0: np.ndarray, x_ref: np.ndarray,
               u_ref: np.ndarray, weights: HorizonWeights):
    """Hessian G = 2(Psi + Gamma' Omega Gamma), gradient F, and the constant
    making 0.5 U' G U + F' U + const equal to the stage-cost sum exactly."""
    if weights.horizon != pm.horizon:
        raise ValueError(f"weights cover {weights.horizon} steps, horizon is {pm.horizon}")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    x_ref_stack = np.tile(np.asarray(x_ref, dtype=np.float64).ravel(), pm.horizon)
    u_ref_stack = np.tile(np.asarray(u_ref, dtype=np.float64).ravel(), pm.horizon)
    if x_ref_stack.size != pm.horizon * pm.nx or u_ref_stack.size != pm.horizon * pm.nu:
        raise ValueError("reference dimensions do not match the prediction model")
    omega = weights.omega
    psi = weights.psi
    free = pm.phi @ x0 + pm.v_resp  # input-free state response
    defect = free - x_ref_stack
    g = 2.0 * (psi + pm.gamma.T @ omega @ pm.gamma)
    f = 2.0 * (pm.gamma.T @ (omega @ defect) - psi.T @ u_ref_stack)
    const = float(defect @ omega @ defect + u_ref_stack @ psi @ u_ref_stack)
    return g, f, const


@dataclass(frozen=True)
class ConstraintSet:
    """One-sided rows L U <= rhs with an optional slack column block.

    ``slack_cols`` (rows x n_slack) carries the -1 entries coupling softened
    output rows to their per-step, per-channel slack variable; slack
    nonnegativity is appended when the set is assembled into solver arrays.
    """

    l_mat: np.ndarray
    rhs: np.ndarray
    slack_cols: Optional[np.ndarray]
    slack_penalty: Optional[float]

    @property
    def n_slack(self) -> int:
        return 0 if self.slack_cols is None else self.slack_cols.shape[1]


def build_constraints(pm: PredictionModel, x0: np.ndarray, box: BoxConstraints,
                      slack_penalty: Optional[float] = None) -> ConstraintSet:
    """Stack per-step input/output box constraints in the input variable.

    Per step i in 0..N-1 the rows encode -u_i <= -u_min, u_i <= u_max,
    -y_{i+1} <= -y_min, y_{i+1} <= y_max with the predicted outputs
    substituted; rows with infinite bounds are dropped. With a positive
    ``slack_penalty``, each constrained output channel gets one nonnegative
    slack per step, shared between its lower and upper rows, penalized by
    slack_penalty * ||s||^2 in the cost.
    """
    if slack_penalty is not None and slack_penalty <= 0:
        raise ValueError("slack penalty must be positive")
    if box.u_min.size != pm.nu or box.y_min.size != pm.ny:
        raise ValueError("box constraint dimensions do not match the model")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    n, nu, ny = pm.horizon, pm.nu, pm.ny
    t_mat = pm.lam @ pm.gamma                      # output response to inputs
    y_free = pm.lam @ (pm.phi @ x0 + pm.v_resp) + pm.h_stack
    soft = slack_penalty is not None
    channels = box.constrained_outputs
    nc = channels.size
    n_slack = n * nc if soft else 0

    rows_l: List[np.ndarray] = []
    rows_rhs: List[float] = []
    rows_slack: List[np.ndarray] = []

    def add(row, rhs_val, slack_idx):
        if not np.isfinite(rhs_val):
            return
        rows_l.append(row)
        rows_rhs.append(rhs_val)
        if soft:
            s = np.zeros(n_slack)
            if slack_idx is not None:
                s[slack_idx] = -1.0
            rows_slack.append(s)

    for i in range(n):
        for j in range(nu):
            row = np.zeros(n * nu)
            row[i * nu + j] = -1.0
            add(row, -box.u_min[j], None)
        for j in range(nu):
            row = np.zeros(n * nu)
            row[i * nu + j] = 1.0
            add(row, box.u_max[j], None)
        for pos, j in enumerate(channels):
            r = i * ny + j
            s_idx = i * nc + pos if soft else None
            add(-t_mat[r], -box.y_min[j] + y_free[r], s_idx)
            add(t_mat[r], box.y_max[j] - y_free[r], s_idx)

    l_mat = np.vstack(rows_l) if rows_l else np.zeros((0, n * nu))
    rhs = np.asarray(rows_rhs)
    slack_cols = np.vstack(rows_slack) if (soft and rows_slack) else (
        np.zeros((0, n_slack)) if soft else None)
    return ConstraintSet(l_mat=l_mat, rhs=rhs, slack_cols=slack_cols,
                         slack_penalty=slack_penalty if soft else None)


@dataclass(frozen=True)
class CondensedQp:
    """Cost and constraint data of one condensed horizon problem."""

    g: np.ndarray
    f: np.ndarray
    const: float
    constraints: ConstraintSet
    nu: int
    horizon: int

    @property
    def n_inputs(self) -> int:
        return self.horizon * self.nu

    def solver_arrays(self):
        """Assemble (P, q, A, l, u) over z = [U; s] for the operator-splitting solver.

        Adds the trace-scaled ridge to G (keeps it PD when input weights are
        only PSD), slack penalty block, and slack nonnegativity rows.
        """
        cons = self.constraints
        n_u = self.n_inputs
        n_s = cons.n_slack
        n_z = n_u + n_s
        p = np.zeros((n_z, n_z))
        ridge = 1e-9 * np.trace(self.g) / self.g.shape[0]
        p[:n_u, :n_u] = self.g + ridge * np.eye(n_u)
        q = np.zeros(n_z)
        q[:n_u] = self.f
        if n_s:
            p[n_u:, n_u:] = 2.0 * cons.slack_penalty * np.eye(n_s)
        m_rows = cons.l_mat.shape[0]
        a = np.zeros((m_rows + n_s, n_z))
        a[:m_rows, :n_u] = cons.l_mat
        if n_s:
            a[:m_rows, n_u:] = cons.slack_cols
            a[m_rows:, n_u:] = np.eye(n_s)
        l = np.full(m_rows + n_s, -np.inf)
        u = np.concatenate([cons.rhs, np.full(n_s, np.inf)])
        l[m_rows:] = 0.0
        return p, q, a, l, u


def build_condensed_qp(points: Sequence[LpvPoint], x0: np.ndarray,
                       x_ref: np.ndarray, u_ref: np.ndarray,
                       weights: HorizonWeights, box: BoxConstraints,
                       slack_penalty: Optional[float] = None) -> CondensedQp:
    """Full condensing pipeline for one schedule: prediction, cost, constraints."""
    pm = build_prediction(points, x0)
    g, f, const = build_cost(pm, x0, x_ref, u_ref, weights)
    cons = build_constraints(pm, x0, box, slack_penalty)
    return CondensedQp(g=g, f=f, const=const, constraints=cons,
                       nu=pm.nu, horizon=pm.horizon)
