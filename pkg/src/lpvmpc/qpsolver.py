"""Dense operator-splitting QP solver.

Solves  min 0.5 z'Pz + q'z  s.t.  l <= Az <= u  (equalities as l == u rows)
with an OSQP-style ADMM iteration: Ruiz equilibration plus cost scaling,
a fixed KKT factorization, over-relaxation, and an active-set polish after
convergence. Termination is checked on the unscaled residuals

    dual:   ||Pz + q + A'y||_inf <= eps_abs + eps_rel * scale
    primal: ||Az - proj_[l,u](Az)||_inf <= eps_abs + eps_rel * scale

Problems at the intended scale are small (<= ~60 variables), so all linear
algebra is dense.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

_EQ_TOL = 1e-12  # rows with u - l below this are treated as equalities


@dataclass(frozen=True)
class QpProblem:
    """Problem data; P is symmetrized on ingest, bounds may be +-inf."""

    p: np.ndarray
    q: np.ndarray
    a: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p, dtype=np.float64))
        q = np.asarray(self.q, dtype=np.float64).ravel()
        a = np.asarray(self.a, dtype=np.float64)
        a = a.reshape(0, p.shape[0]) if a.size == 0 else np.atleast_2d(a)
        l = np.asarray(self.l, dtype=np.float64).ravel()
        u = np.asarray(self.u, dtype=np.float64).ravel()
        n = p.shape[0]
        if p.shape != (n, n) or q.shape[0] != n:
            raise ValueError("P must be square and match q")
        if a.shape[1] != n or l.shape[0] != a.shape[0] or u.shape[0] != a.shape[0]:
            raise ValueError("constraint dimensions are inconsistent")
        if np.any(np.isnan(p)) or np.any(np.isnan(q)) or np.any(np.isnan(a)):
            raise ValueError("problem data contains NaN")
        if np.any(np.isnan(l)) or np.any(np.isnan(u)) or np.any(l > u):
            raise ValueError("bounds must satisfy l <= u and contain no NaN")
        if not np.allclose(p, p.T, atol=1e-8 * (1.0 + np.abs(p).max(initial=0.0))):
            raise ValueError("P is not symmetric (beyond repairable round-off)")
        object.__setattr__(self, "p", 0.5 * (p + p.T))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.a.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.p @ z + self.q @ z)


@dataclass(frozen=True)
class QpSettings:
    rho: float = 0.1            # ADMM penalty (x1000 on equality rows)
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 4000
    check_interval: int = 25
    scaling_iters: int = 10
    polish: bool = True
    eq_rho_scale: float = 1e3
    eps_infeasible: float = 1e-7


DEFAULT_SETTINGS = QpSettings()

STATUS_SOLVED = "solved"
STATUS_MAX_ITER = "max-iter"
STATUS_PRIMAL_INFEASIBLE = "primal-infeasible"


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_res: float
    dual_res: float
    objective: float


def _ruiz_equilibrate(p, q, a, iters):
    """Diagonal scaling of the stacked KKT matrix plus OSQP cost scaling."""
    n, m = p.shape[0], a.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    ps, as_ = p.copy(), a.copy()
    for _ in range(iters):
        col_n = np.maximum(np.max(np.abs(ps), axis=0, initial=0.0),
                           np.max(np.abs(as_), axis=0, initial=0.0))
        row_m = np.max(np.abs(as_), axis=1, initial=0.0) if m else np.zeros(0)
        sn = 1.0 / np.sqrt(np.where(col_n > 1e-8, col_n, 1.0))
        sm = 1.0 / np.sqrt(np.where(row_m > 1e-8, row_m, 1.0))
        d *= sn
        e *= sm
        ps = sn[:, None] * ps * sn[None, :]
        as_ = sm[:, None] * as_ * sn[None, :]
    qs = d * q
    col_means = np.mean(np.abs(ps), axis=0) if n else np.zeros(0)
    cost_scale = max(np.mean(col_means), np.max(np.abs(qs), initial=0.0))
    c = 1.0 / max(cost_scale, 1e-8)
    return c * ps, c * qs, as_, d, e, c


def _unscaled_residuals(prob: QpProblem, z: np.ndarray, y: np.ndarray,
                        settings: QpSettings):
    az = prob.a @ z if prob.m else np.zeros(0)
    proj = np.clip(az, prob.l, prob.u)
    r_prim = float(np.max(np.abs(az - proj), initial=0.0))
    eps_prim = settings.eps_abs + settings.eps_rel * max(
        np.max(np.abs(az), initial=0.0), np.max(np.abs(proj), initial=0.0))
    pz = prob.p @ z
    aty = prob.a.T @ y if prob.m else np.zeros(prob.n)
    r_dual = float(np.max(np.abs(pz + prob.q + aty), initial=0.0))
    eps_dual = settings.eps_abs + settings.eps_rel * max(
        np.max(np.abs(pz), initial=0.0), np.max(np.abs(aty), initial=0.0),
        np.max(np.abs(prob.q), initial=0.0))
    return r_prim, r_dual, eps_prim, eps_dual


def _primal_infeasibility_certificate(prob, dy, settings) -> bool:
    norm = np.max(np.abs(dy), initial=0.0)
    if norm <= settings.eps_infeasible:
        return False
    v = dy / norm
    lhs = 0.0
    for ui, li, vi in zip(prob.u, prob.l, v):
        if vi > 0:
            if np.isinf(ui):
                return False
            lhs += ui * vi
        elif vi < 0:
            if np.isinf(li):
                return False
            lhs += li * vi
    if lhs >= -settings.eps_infeasible:
        return False
    return np.max(np.abs(prob.a.T @ v), initial=0.0) <= settings.eps_infeasible


def _polish(prob: QpProblem, z: np.ndarray, y_scaled: np.ndarray,
            settings: QpSettings):
    """Equality-KKT solve on the detected active set (regularized + refined)."""
    low = y_scaled < 0
    upp = y_scaled > 0
    n_act = int(np.sum(low) + np.sum(upp))
    a_act = np.vstack([prob.a[low], prob.a[upp]]) if n_act else np.zeros((0, prob.n))
    b_act = np.concatenate([prob.l[low], prob.u[upp]]) if n_act else np.zeros(0)
    dim = prob.n + n_act
    kkt = np.zeros((dim, dim))
    kkt[:prob.n, :prob.n] = prob.p
    if n_act:
        kkt[:prob.n, prob.n:] = a_act.T
        kkt[prob.n:, :prob.n] = a_act
    rhs = np.concatenate([-prob.q, b_act])
    reg = np.diag(np.concatenate([np.full(prob.n, settings.sigma),
                                  np.full(n_act, -settings.sigma)]))
    try:
        lu = scipy.linalg.lu_factor(kkt + reg)
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    sol = scipy.linalg.lu_solve(lu, rhs)
    for _ in range(3):  # iterative refinement against the unregularized system
        sol = sol + scipy.linalg.lu_solve(lu, rhs - kkt @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    z_pol = sol[:prob.n]
    y_pol = np.zeros(prob.m)
    nu_act = sol[prob.n:]
    y_pol[low] = nu_act[:int(np.sum(low))]
    y_pol[upp] = nu_act[int(np.sum(low)):]
    return z_pol, y_pol


def qp_solve(prob: QpProblem, settings: Optional[QpSettings] = None,
             z0: Optional[np.ndarray] = None,
             y0: Optional[np.ndarray] = None) -> QpSolution:
    """Solve the QP; deterministic for fixed data, settings, and warm start.

    Returns status 'solved' only when the unscaled KKT residuals meet the
    tolerances; 'primal-infeasible' is a certificate-based heuristic flag.
    """
    settings = settings or DEFAULT_SETTINGS
    n, m = prob.n, prob.m

    if m == 0:
        z = np.linalg.lstsq(prob.p + settings.sigma * np.eye(n), -prob.q, rcond=None)[0]
        r_prim, r_dual, eps_p, eps_d = _unscaled_residuals(prob, z, np.zeros(0), settings)
        status = STATUS_SOLVED if (r_prim <= eps_p and r_dual <= eps_d) else STATUS_MAX_ITER
        return QpSolution(z=z, y=np.zeros(0), status=status, iterations=0,
                          primal_res=r_prim, dual_res=r_dual, objective=prob.objective(z))

    ps, qs, as_, d, e, c = _ruiz_equilibrate(prob.p, prob.q, prob.a, settings.scaling_iters)
    ls = e * prob.l
    us = e * prob.u

    rho_vec = np.full(m, settings.rho)
    rho_vec[(prob.u - prob.l) < _EQ_TOL] = settings.rho * settings.eq_rho_scale
    rho_inv = 1.0 / rho_vec

    kkt = ps + settings.sigma * np.eye(n) + (as_.T * rho_vec) @ as_
    try:
        chol = scipy.linalg.cho_factor(kkt)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"KKT matrix could not be factorized: {exc}") from exc

    x = np.zeros(n) if z0 is None else np.asarray(z0, dtype=np.float64).ravel() / d
    y = np.zeros(m) if y0 is None else c * np.asarray(y0, dtype=np.float64).ravel() / e
    zeta = np.clip(as_ @ x, ls, us)

    status = STATUS_MAX_ITER
    iterations = settings.max_iter
    y_prev_check = y.copy()
    for it in range(1, settings.max_iter + 1):
        rhs = settings.sigma * x - qs + as_.T @ (rho_vec * zeta - y)
        x_tilde = scipy.linalg.cho_solve(chol, rhs)
        ax_tilde = as_ @ x_tilde
        x = settings.alpha * x_tilde + (1.0 - settings.alpha) * x
        zeta_prev = zeta
        mix = settings.alpha * ax_tilde + (1.0 - settings.alpha) * zeta_prev
        zeta = np.clip(mix + rho_inv * y, ls, us)
        y = y + rho_vec * (mix - zeta)

        if it % settings.check_interval == 0 or it == settings.max_iter:
            z_u = d * x
            y_u = e * y / c
            r_prim, r_dual, eps_p, eps_d = _unscaled_residuals(prob, z_u, y_u, settings)
            if r_prim <= eps_p and r_dual <= eps_d:
                status = STATUS_SOLVED
                iterations = it
                break
            if _primal_infeasibility_certificate(prob, e * (y - y_prev_check) / c, settings):
                return QpSolution(z=d * x, y=e * y / c, status=STATUS_PRIMAL_INFEASIBLE,
                                  iterations=it, primal_res=r_prim, dual_res=r_dual,
                                  objective=prob.objective(d * x))
            y_prev_check = y.copy()

    z_best = d * x
    y_best = e * y / c
    r_prim, r_dual, eps_p, eps_d = _unscaled_residuals(prob, z_best, y_best, settings)

    if settings.polish:
        polished = _polish(prob, z_best, y, settings)
        if polished is not None:
            rp2, rd2, _, _ = _unscaled_residuals(prob, polished[0], polished[1], settings)
            if max(rp2, rd2) < max(r_prim, r_dual):
                z_best, y_best = polished
                r_prim, r_dual = rp2, rd2

    if r_prim <= eps_p and r_dual <= eps_d:
        status = STATUS_SOLVED
    return QpSolution(z=z_best, y=y_best, status=status, iterations=iterations,
                      primal_res=r_prim, dual_res=r_dual,
                      objective=prob.objective(z_best))


def shift_blocks(vec: np.ndarray, block: int) -> np.ndarray:
    """Drop the leading block and duplicate the trailing one."""
    vec = np.asarray(vec, dtype=np.float64)
    if block < 1 or vec.size % block:
        raise ValueError(f"vector of size {vec.size} is not divisible into blocks of {block}")
    out = vec.reshape(-1, block)
    return np.vstack([out[1:], out[-1:]]).ravel()


def qp_warm_start_shift(prev: QpSolution, nu: int,
                        rows_per_step: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Receding-horizon warm start: shift decision blocks one step ahead,
    duplicating the terminal block; duals shift analogously when their
    per-step block size is known (or divides evenly)."""
    z0 = shift_blocks(prev.z, nu)
    n_steps = prev.z.size // nu
    if rows_per_step is None and n_steps and prev.y.size % n_steps == 0 and prev.y.size:
        rows_per_step = prev.y.size // n_steps
    if rows_per_step and prev.y.size % rows_per_step == 0 and prev.y.size:
        y0 = shift_blocks(prev.y, rows_per_step)
    else:
        y0 = prev.y.copy()
    return z0, y0
