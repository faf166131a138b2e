"""Ground-truth plant simulation: RK4 under zero-order-hold inputs,
measurement noise at a target SNR, and multisine excitation signals."""

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import NumericalError

OdeFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class UnbalancedDisc:
    """Motor-driven disc with an off-center mass; angle measured from rest.

    The gravity torque is restoring, so the rest position is the stable
    equilibrium the excitation and control experiments operate around.
    """

    mass: float = 0.076          # kg
    gravity: float = 9.8         # m/s^2
    arm: float = 0.041           # m, center-of-mass offset
    inertia: float = 2.4e-4      # kg m^2
    time_constant: float = 0.40  # s
    motor_gain: float = 11.0     # 1/(V s)

    def __post_init__(self):
        if min(self.mass, self.gravity, self.arm, self.inertia,
               self.time_constant, self.motor_gain) <= 0:
            raise ValueError("all disc parameters must be strictly positive")

    @property
    def n_states(self) -> int:
        return 2

    def ode(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        theta, omega = x
        torque = self.mass * self.gravity * self.arm / self.inertia
        dom = (-torque * np.sin(theta) - omega / self.time_constant
               + self.motor_gain / self.time_constant * u[0])
        return np.array([omega, dom])

    def output(self, x: np.ndarray) -> np.ndarray:
        return np.array([x[0]])


@dataclass(frozen=True)
class SimSettings:
    """Sampling time, noise target, and seed for a simulation run."""

    ts: float = 0.1
    snr_db: Optional[float] = 30.0   # None disables noise unless noise_std given
    noise_std: Optional[float] = None  # overrides snr_db when set
    seed: int = 0

    def __post_init__(self):
        if self.ts <= 0:
            raise ValueError("sampling time must be positive")


@dataclass
class Dataset:
    """Recorded input/output sequences with split boundaries.

    Splits partition the record as estimation / validation / test. The clean
    output and state trajectory are kept for diagnostics; serialization only
    writes (k, u, y).
    """

    u: np.ndarray  # (N, nu)
    y: np.ndarray  # (N, ny), noisy measurements
    n_est: int
    n_val: int
    n_test: int
    y_clean: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    noise_std: float = 0.0
    seed: int = 0
    ts: float = 0.1
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        self.u = u[:, None] if u.ndim == 1 else u
        self.y = y[:, None] if y.ndim == 1 else y
        if len(self.u) != len(self.y):
            raise ValueError("input and output records must have equal length")
        if self.n_est + self.n_val + self.n_test != len(self.u):
            raise ValueError("splits must partition the record")

    def __len__(self) -> int:
        return len(self.u)

    @property
    def split_slices(self) -> Tuple[slice, slice, slice]:
        a, b = self.n_est, self.n_est + self.n_val
        return slice(0, a), slice(a, b), slice(b, len(self))

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        idx = {"est": 0, "val": 1, "test": 2}[name]
        s = self.split_slices[idx]
        return self.u[s], self.y[s]


def rk4_step(ode: OdeFn, x: np.ndarray, u_held: np.ndarray, ts: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta step with the input held constant."""
    x = np.asarray(x, dtype=np.float64)
    u_held = np.atleast_1d(np.asarray(u_held, dtype=np.float64))
    k1 = ode(x, u_held)
    k2 = ode(x + 0.5 * ts * k1, u_held)
    k3 = ode(x + 0.5 * ts * k2, u_held)
    k4 = ode(x + ts * k3, u_held)
    x_next = x + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NumericalError("non-finite state after RK4 step")
    return x_next


def simulate(plant, u_seq: np.ndarray, settings: SimSettings,
             x0: Optional[np.ndarray] = None,
             splits: Tuple[float, float, float] = (0.6, 0.2, 0.2)) -> Dataset:
    """Simulate the plant ODE under a ZOH input sequence and add measurement noise.

    y_k is measured at sample k before u_k acts; the noise level is set from
    the clean-output variance to hit ``settings.snr_db`` (or directly from
    ``settings.noise_std``). Deterministic given the seed.
    """
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None]
    if not np.all(np.isfinite(u_seq)):
        raise ValueError("input sequence contains non-finite values")
    n = len(u_seq)
    x = np.zeros(plant.n_states) if x0 is None else np.asarray(x0, dtype=np.float64)
    ny = plant.output(x).shape[0]
    states = np.empty((n, x.shape[0]))
    y_clean = np.empty((n, ny))
    for k in range(n):
        states[k] = x
        y_clean[k] = plant.output(x)
        try:
            x = rk4_step(plant.ode, x, u_seq[k], settings.ts)
        except NumericalError as exc:
            raise NumericalError(f"plant integration diverged at step {k}: {exc}") from exc

    if settings.noise_std is not None:
        sigma = float(settings.noise_std)
    elif settings.snr_db is not None:
        sigma = float(np.mean(np.std(y_clean, axis=0)) * 10.0 ** (-settings.snr_db / 20.0))
    else:
        sigma = 0.0
    rng = np.random.default_rng(settings.seed)
    y = y_clean + sigma * rng.standard_normal(y_clean.shape)

    n_est = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    n_test = n - n_est - n_val
    return Dataset(u=u_seq, y=y, n_est=n_est, n_val=n_val, n_test=n_test,
                   y_clean=y_clean, x=states, noise_std=sigma,
                   seed=settings.seed, ts=settings.ts)


def multisine(n_components: int, f_min: float, f_max: float, amplitude: float,
              ts: float, n_samples: int, seed: int = 0) -> np.ndarray:
    """Sum of cosines at equispaced grid frequencies with random phases.

    Frequencies snap to distinct DFT bins of the record so the excited band
    is spectrally flat; the signal is rescaled to the requested amplitude and
    hard-clipped as a guard.
    """
    if n_components < 1:
        raise ValueError("need at least one component")
    nyquist = 0.5 / ts
    if not (0.0 <= f_min < f_max <= nyquist + 1e-12):
        raise ValueError(f"frequency range must satisfy 0 <= f_min < f_max <= {nyquist}")
    f_res = 1.0 / (n_samples * ts)
    k_lo = max(1, int(np.ceil(f_min / f_res - 1e-9)))
    k_hi = int(np.floor(f_max / f_res + 1e-9))
    if k_hi < k_lo:
        raise ValueError("frequency range contains no DFT bins for this record length")
    bins = np.unique(np.round(np.linspace(k_lo, k_hi, min(n_components, k_hi - k_lo + 1))).astype(int))
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=bins.size)
    t = np.arange(n_samples) * ts
    freqs = bins * f_res
    u = np.cos(2.0 * np.pi * t[:, None] * freqs[None, :] + phases[None, :]).sum(axis=1)
    peak = np.max(np.abs(u))
    if peak > 0:
        u *= amplitude / peak
    return np.clip(u, -amplitude, amplitude)
