"""Iterative LPV-MPC controller.

Each control step repeats: convert the model along the current scheduling
trajectory, condense and solve the QP, roll the nonlinear model forward
under the optimal inputs, and rebuild the schedule from that rollout --
until the stacked input trajectory stops moving. The first input is applied
and the optimal trajectory is shifted one step to bootstrap the next cycle
(schedule, QP primal, and QP dual alike).
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .condense import BoxConstraints, CondensedQp, HorizonWeights, build_condensed_qp
from .convert import ConversionConfig, convert_schedule, scheduling_point
from .errors import NumericalError, QpFailure
from .nets import AnnSsModel, IoWindow
from .plant import SimSettings, rk4_step
from .qpsolver import (STATUS_PRIMAL_INFEASIBLE, QpSettings, QpSolution,
                       shift_blocks)
from .qpsolver import qp_solve
from .target import TargetProblem, TargetResult, solve_target


@dataclass(frozen=True)
class ControllerConfig:
    """Horizon, weights, constraints, and iteration limits of the controller."""

    horizon: int
    weights: HorizonWeights
    box: BoxConstraints
    conv_tol: float = 0.1          # l2 threshold on the change of the input stack
    max_inner_iter: int = 10
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    slack_penalty: Optional[float] = 1e4
    qp_settings: QpSettings = field(default_factory=QpSettings)
    fixed_target: Optional[Tuple[np.ndarray, np.ndarray]] = None
    target_weights: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.conv_tol <= 0:
            raise ValueError("convergence tolerance must be positive")
        if self.max_inner_iter < 1:
            raise ValueError("max_inner_iter must be at least 1")
        if self.weights.horizon != self.horizon:
            raise ValueError("weights must cover the horizon")


@dataclass
class IterationRecord:
    """Per-control-step bookkeeping of the inner loop."""

    inner_iters: int = 0
    deltas: List[float] = field(default_factory=list)
    converged: bool = False
    qp_status: str = ""
    qp_iterations: int = 0
    slack_max: float = 0.0
    t_convert_ms: float = 0.0
    t_qp_ms: float = 0.0
    t_total_ms: float = 0.0

    @property
    def conv_residual(self) -> float:
        return self.deltas[-1] if self.deltas else np.nan


@dataclass
class WarmStart:
    """Bootstrap carried between control cycles."""

    schedule: List[np.ndarray]
    u_stack: np.ndarray
    qp_z0: Optional[np.ndarray] = None
    qp_y0: Optional[np.ndarray] = None


@dataclass
class InnerResult:
    u_stack: np.ndarray
    states: np.ndarray          # rollout x_0 .. x_N, shape (N+1, nx)
    schedule: List[np.ndarray]
    qp: CondensedQp
    solution: QpSolution
    t_convert: float
    t_qp: float


def cold_start(cfg: ControllerConfig, x0: np.ndarray, nu: int) -> WarmStart:
    """Initial schedule: the current state held constant with zero inputs."""
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    zeros = np.zeros(nu)
    schedule = [scheduling_point(x0, zeros) for _ in range(cfg.horizon + 1)]
    return WarmStart(schedule=schedule, u_stack=np.zeros(cfg.horizon * nu))


def inner_iteration(model: AnnSsModel, cfg: ControllerConfig, x0: np.ndarray,
                    schedule: Sequence[np.ndarray], x_ref: np.ndarray,
                    u_ref: np.ndarray, qp_z0: Optional[np.ndarray] = None,
                    qp_y0: Optional[np.ndarray] = None) -> InnerResult:
    """One pass of convert -> condense -> solve -> nonlinear rollout.

    Returns the optimal input stack, the rollout states, and the schedule
    rebuilt from them (terminal point with zero input part, as it only
    supplies the output matrix).
    """
    if len(schedule) != cfg.horizon + 1:
        raise ValueError(f"schedule must hold {cfg.horizon + 1} points")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    t0 = time.perf_counter()
    points = convert_schedule(model, schedule, cfg.conversion)
    t1 = time.perf_counter()
    qp = build_condensed_qp(points, x0, x_ref, u_ref, cfg.weights, cfg.box,
                            cfg.slack_penalty)
    prob_arrays = qp.solver_arrays()
    from .qpsolver import QpProblem

    sol = qp_solve(QpProblem(*prob_arrays), cfg.qp_settings, z0=qp_z0, y0=qp_y0)
    t2 = time.perf_counter()
    if sol.status == STATUS_PRIMAL_INFEASIBLE:
        raise QpFailure(f"horizon QP reported primal infeasibility "
                        f"(iterations={sol.iterations})")

    nu = model.nu
    u_stack = sol.z[:qp.n_inputs]
    states = np.empty((cfg.horizon + 1, model.nx))
    states[0] = x0
    for i in range(cfg.horizon):
        states[i + 1] = model.f_eval(states[i], u_stack[i * nu:(i + 1) * nu])
    if not np.all(np.isfinite(states)):
        raise NumericalError("nonlinear rollout diverged inside the inner iteration")
    new_schedule = [
        scheduling_point(states[i], u_stack[i * nu:(i + 1) * nu])
        for i in range(cfg.horizon)
    ]
    new_schedule.append(scheduling_point(states[cfg.horizon], np.zeros(nu)))
    return InnerResult(u_stack=u_stack, states=states, schedule=new_schedule,
                       qp=qp, solution=sol, t_convert=t1 - t0, t_qp=t2 - t1)


def control_step(model: AnnSsModel, cfg: ControllerConfig, x_hat: np.ndarray,
                 warm: WarmStart, x_ref: np.ndarray, u_ref: np.ndarray
                 ) -> Tuple[np.ndarray, IterationRecord, WarmStart]:
    """Iterate the inner loop to convergence and apply the first input.

    Convergence compares each solve against the previous input stack (the
    bootstrap trajectory on the first pass). On non-convergence within
    ``max_inner_iter`` the last iterate is applied and the record flags it.
    """
    t0 = time.perf_counter()
    record = IterationRecord()
    u_prev = warm.u_stack
    schedule = warm.schedule
    z0, y0 = warm.qp_z0, warm.qp_y0
    res: Optional[InnerResult] = None
    for _ in range(cfg.max_inner_iter):
        try:
            res = inner_iteration(model, cfg, x_hat, schedule, x_ref, u_ref,
                                  qp_z0=z0, qp_y0=y0)
        except (QpFailure, NumericalError) as exc:
            raise type(exc)(f"inner iteration {record.inner_iters + 1}: {exc}") from exc
        record.inner_iters += 1
        record.qp_status = res.solution.status
        record.qp_iterations += res.solution.iterations
        record.t_convert_ms += 1e3 * res.t_convert
        record.t_qp_ms += 1e3 * res.t_qp
        delta = float(np.linalg.norm(res.u_stack - u_prev))
        record.deltas.append(delta)
        u_prev = res.u_stack
        schedule = res.schedule
        z0, y0 = res.solution.z, res.solution.y
        if delta <= cfg.conv_tol:
            record.converged = True
            break

    nu = model.nu
    n_slack = res.qp.constraints.n_slack
    if n_slack:
        record.slack_max = float(np.max(res.solution.z[qpn(res):], initial=0.0))
    u_apply = np.clip(res.u_stack[:nu], cfg.box.u_min, cfg.box.u_max)

    # receding-horizon bootstrap: states and inputs shift one step, the
    # terminal entries are duplicated, and the final point keeps a zero input
    states = res.states
    u_shift = shift_blocks(res.u_stack, nu)
    next_schedule = [
        scheduling_point(states[min(i + 1, cfg.horizon)], u_shift[i * nu:(i + 1) * nu])
        for i in range(cfg.horizon)
    ]
    next_schedule.append(scheduling_point(states[cfg.horizon], np.zeros(nu)))
    z_next = np.concatenate([
        u_shift,
        shift_blocks(res.solution.z[qpn(res):], n_slack // cfg.horizon)
        if n_slack else np.zeros(0),
    ])
    y_next = _shift_duals(res, cfg.horizon)
    record.t_total_ms = 1e3 * (time.perf_counter() - t0)
    next_warm = WarmStart(schedule=next_schedule, u_stack=u_shift,
                          qp_z0=z_next, qp_y0=y_next)
    return u_apply, record, next_warm


def qpn(res: InnerResult) -> int:
    return res.qp.n_inputs


def _shift_duals(res: InnerResult, horizon: int) -> Optional[np.ndarray]:
    y = res.solution.y
    m_box = res.qp.constraints.l_mat.shape[0]
    n_slack = res.qp.constraints.n_slack
    if m_box % horizon or (n_slack and n_slack % horizon):
        return None  # uneven rows (some bounds infinite at the edges); restart duals
    parts = [shift_blocks(y[:m_box], m_box // horizon)] if m_box else []
    if n_slack:
        parts.append(shift_blocks(y[m_box:], n_slack // horizon))
    return np.concatenate(parts) if parts else None


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryLog:
    """Per-step closed-loop record."""

    k: List[int] = field(default_factory=list)
    r: List[np.ndarray] = field(default_factory=list)
    y_meas: List[np.ndarray] = field(default_factory=list)
    y_clean: List[np.ndarray] = field(default_factory=list)
    u: List[np.ndarray] = field(default_factory=list)
    x_hat: List[np.ndarray] = field(default_factory=list)
    x_ref: List[np.ndarray] = field(default_factory=list)
    u_ref: List[np.ndarray] = field(default_factory=list)
    records: List[IterationRecord] = field(default_factory=list)
    slack_max: List[float] = field(default_factory=list)

    def append(self, k, r, y_meas, y_clean, u, x_hat, x_ref, u_ref, record):
        self.k.append(int(k))
        self.r.append(np.asarray(r).ravel())
        self.y_meas.append(np.asarray(y_meas).ravel())
        self.y_clean.append(np.asarray(y_clean).ravel())
        self.u.append(np.asarray(u).ravel())
        self.x_hat.append(np.asarray(x_hat).ravel())
        self.x_ref.append(np.asarray(x_ref).ravel())
        self.u_ref.append(np.asarray(u_ref).ravel())
        self.records.append(record)
        self.slack_max.append(record.slack_max)

    def __len__(self) -> int:
        return len(self.k)

    @property
    def inner_iters(self) -> np.ndarray:
        return np.asarray([rec.inner_iters for rec in self.records])

    @property
    def total_times_ms(self) -> np.ndarray:
        return np.asarray([rec.t_total_ms for rec in self.records])

    def arrays(self) -> dict:
        return {
            "k": np.asarray(self.k),
            "r": np.asarray(self.r),
            "y": np.asarray(self.y_meas),
            "y_clean": np.asarray(self.y_clean),
            "u": np.asarray(self.u),
            "x_hat": np.asarray(self.x_hat),
            "x_ref": np.asarray(self.x_ref),
            "u_ref": np.asarray(self.u_ref),
            "inner_iters": self.inner_iters,
            "conv_residual": np.asarray([rec.conv_residual for rec in self.records]),
            "t_convert_ms": np.asarray([rec.t_convert_ms for rec in self.records]),
            "t_qp_ms": np.asarray([rec.t_qp_ms for rec in self.records]),
            "t_total_ms": self.total_times_ms,
            "slack_max": np.asarray(self.slack_max),
        }

    def summary(self) -> dict:
        iters = self.inner_iters
        t_tot = self.total_times_ms
        t_qp = np.asarray([rec.t_qp_ms for rec in self.records])
        t_conv = np.asarray([rec.t_convert_ms for rec in self.records])
        hist = {int(v): int(c) for v, c in zip(*np.unique(iters, return_counts=True))}
        return {
            "steps": len(self.k),
            "iteration_histogram": hist,
            "iterations_median": float(np.median(iters)),
            "iterations_max": int(np.max(iters)),
            "time_ms": {
                "max": float(np.max(t_tot)),
                "mean": float(np.mean(t_tot)),
                "std": float(np.std(t_tot)),
                "solver_mean": float(np.mean(t_qp)),
                "convert_mean": float(np.mean(t_conv)),
            },
            "slack_max": float(np.max(self.slack_max)) if self.slack_max else 0.0,
        }


def closed_loop(plant, model: AnnSsModel, cfg: ControllerConfig,
                reference: np.ndarray, n_sim: int, sim: SimSettings,
                x0_plant: Optional[np.ndarray] = None) -> TrajectoryLog:
    """Run the controller against a simulated plant for ``n_sim`` steps.

    Per step: measure (plant output plus seeded noise), update the I/O
    window, encode the state, resolve the target for the current setpoint,
    run the control step, and actuate the plant ZOH over one sampling period.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim == 1:
        reference = reference[:, None]
    if len(reference) < n_sim:
        raise ValueError(f"reference defined for {len(reference)} steps, need {n_sim}")
    noise_std = sim.noise_std if sim.noise_std is not None else 0.0
    rng = np.random.default_rng(sim.seed)
    x_plant = np.zeros(plant.n_states) if x0_plant is None else np.asarray(x0_plant, dtype=np.float64)

    n_lag = model.lag
    y0 = plant.output(x_plant) + noise_std * rng.standard_normal(model.ny)
    u_hist = [np.zeros(model.nu)] * n_lag
    y_hist = [y0.copy()] * (n_lag + 1)

    warm: Optional[WarmStart] = None
    target_res: Optional[TargetResult] = None
    log = TrajectoryLog()
    r_prev = None

    for k in range(n_sim):
        y_clean = plant.output(x_plant)
        if k > 0:
            y_meas = y_clean + noise_std * rng.standard_normal(model.ny)
            y_hist.append(y_meas)
            y_hist.pop(0)
        else:
            y_meas = y_hist[-1]
        window = IoWindow(u_past=np.asarray(u_hist), y_past=np.asarray(y_hist))
        x_hat = model.encode_state(window)

        r_k = reference[k]
        if cfg.fixed_target is not None:
            x_ref, u_ref = cfg.fixed_target
        else:
            if target_res is None or r_prev is None or not np.array_equal(r_k, r_prev):
                q_w, r_w = cfg.target_weights or (None, None)
                guess = None if target_res is None else (target_res.x_ref, target_res.u_ref)
                target_res = solve_target(
                    model,
                    TargetProblem(r=r_k, q_weight=q_w, r_weight=r_w, box=cfg.box),
                    guess=guess, conversion=cfg.conversion,
                    qp_settings=cfg.qp_settings)
                r_prev = r_k.copy()
            x_ref, u_ref = target_res.x_ref, target_res.u_ref

        if warm is None:
            warm = cold_start(cfg, x_hat, model.nu)
        try:
            u_k, record, warm = control_step(model, cfg, x_hat, warm, x_ref, u_ref)
        except (QpFailure, NumericalError) as exc:
            raise type(exc)(f"control step {k}: {exc}") from exc

        log.append(k, r_k, y_meas, y_clean, u_k, x_hat, x_ref, u_ref, record)

        try:
            x_plant = rk4_step(plant.ode, x_plant, u_k, sim.ts)
        except NumericalError as exc:
            raise NumericalError(f"plant integration failed at step {k}: {exc}") from exc
        u_hist.append(u_k.copy())
        u_hist.pop(0)

    return log
