"""Encoder-based identification of the neural state-space model.

The objective is a truncated simulation loss: from randomly selected time
instants, the encoder estimates the state from a window of past data, the
model is rolled forward T steps, and the mean squared output error over
those T steps is minimized with Adam. Gradients are computed by reverse
accumulation through the rollout (hand-coded, batched over windows).

Training runs on standardized signals; the returned model carries the
standardization so its public surface works in raw units.
"""

import copy
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, NumericalError
from .nets import AnnSsModel, IoNorm, Layer, Mlp
from .plant import Dataset

# parameter containers: per net, a list of [weights (out,in), bias (out,)]
NetParams = List[List[np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    nx: int = 2
    na: int = 4
    nb: int = 4
    hidden_layers: int = 2
    hidden_width: int = 64
    epochs: int = 50
    batch_size: int = 256
    trunc_len: int = 40          # T-step truncated rollout
    learning_rate: float = 1e-3
    seed: int = 0
    grad_clip: float = 10.0
    val_windows: int = 512       # cap on deterministic validation windows

    def __post_init__(self):
        if self.trunc_len < 2:
            raise ValueError("truncation length must be at least 2")
        if self.nx < 1 or self.na < 0 or self.nb < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf
    test_nrms: float = np.nan
    n_parameters: int = 0
    wall_time_s: float = 0.0


@dataclass(frozen=True)
class Batch:
    """Stacked training windows: encoder inputs, future inputs, target outputs."""

    starts: np.ndarray      # (B,) window anchor indices (current time k)
    enc_input: np.ndarray   # (B, nb*nu + (na+1)*ny), standardized
    u_future: np.ndarray    # (B, T, nu), standardized, inputs u_k .. u_{k+T-1}
    y_target: np.ndarray    # (B, T, ny), standardized, outputs y_{k+1} .. y_{k+T}


def valid_starts(n_samples: int, trunc_len: int, n_lag: int) -> np.ndarray:
    """Anchor indices k (0-based) whose window and T-step future fit the record.

    The window needs samples back to k - n_lag and the rollout consumes
    y_{k+T}, so valid anchors are n_lag .. n_samples - trunc_len - 1.
    """
    lo, hi = n_lag, n_samples - trunc_len
    if hi <= lo:
        raise ValueError(
            f"truncation length {trunc_len} too large for {n_samples} samples with lag {n_lag}")
    return np.arange(lo, hi)


def _window_batch(u: np.ndarray, y: np.ndarray, starts: np.ndarray,
                  trunc_len: int, na: int, nb: int) -> Batch:
    n_lag = max(na, nb)
    enc, u_fut, y_tgt = [], [], []
    for k in starts:
        u_win = u[k - n_lag:k]
        y_win = y[k - n_lag:k + 1]
        enc.append(np.concatenate([u_win[n_lag - nb:].ravel(),
                                   y_win[n_lag - na:].ravel()]))
        u_fut.append(u[k:k + trunc_len])
        y_tgt.append(y[k + 1:k + trunc_len + 1])
    return Batch(starts=np.asarray(starts), enc_input=np.asarray(enc),
                 u_future=np.asarray(u_fut), y_target=np.asarray(y_tgt))


def make_batches(dataset: Dataset, trunc_len: int, na: int, nb: int,
                 batch_size: int, seed: int,
                 norm: Optional[IoNorm] = None) -> List[Batch]:
    """Shuffled batches over the estimation split, without replacement.

    Windows never cross into the validation/test splits; signals are
    standardized with ``norm`` when given.
    """
    u_est, y_est = dataset.split("est")
    if norm is not None:
        u_est = (u_est - norm.u_mean) / norm.u_scale
        y_est = (y_est - norm.y_mean) / norm.y_scale
    starts = valid_starts(len(u_est), trunc_len, max(na, nb))
    rng = np.random.default_rng(seed)
    order = rng.permutation(starts)
    return [
        _window_batch(u_est, y_est, order[i:i + batch_size], trunc_len, na, nb)
        for i in range(0, len(order), batch_size)
    ]


# ---------------------------------------------------------------------------
# batched MLP forward/backward on parameter lists (tanh hidden, linear output)
# ---------------------------------------------------------------------------

def _mlp_forward_cached(params: NetParams, x: np.ndarray):
    cache = []
    h = x
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        a = h @ w.T + b
        out = np.tanh(a) if i < last else a
        cache.append((h, out if i < last else None))
        h = out
    return h, cache


def _mlp_backward(params: NetParams, cache, d_out: np.ndarray):
    grads = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
    last = len(params) - 1
    d = d_out
    for i in range(last, -1, -1):
        h_in, post = cache[i]
        if i < last:
            d = d * (1.0 - post * post)
        grads[i][0] = d.T @ h_in
        grads[i][1] = d.sum(axis=0)
        d = d @ params[i][0]
    return d, grads  # gradient w.r.t. the layer-stack input, plus parameter grads


def _rollout_loss_and_grads(params: Dict[str, NetParams], batch: Batch,
                            with_grads: bool = True):
    """Truncated simulation loss (mean squared output error over T steps)."""
    enc_p, f_p, h_p = params["encoder"], params["f"], params["h"]
    b_sz, t_len, ny = batch.y_target.shape
    scale = 1.0 / (b_sz * t_len * ny)

    x, enc_cache = _mlp_forward_cached(enc_p, batch.enc_input)
    f_caches, h_caches, errs, states = [], [], [], []
    loss = 0.0
    for j in range(t_len):
        z = np.concatenate([x, batch.u_future[:, j, :]], axis=1)
        x, f_cache = _mlp_forward_cached(f_p, z)
        y_hat, h_cache = _mlp_forward_cached(h_p, x)
        err = y_hat - batch.y_target[:, j, :]
        loss += float(np.sum(err * err))
        if with_grads:
            f_caches.append(f_cache)
            h_caches.append(h_cache)
            errs.append(err)
            states.append(x)
    loss *= scale
    if not np.isfinite(loss):
        raise NumericalError("non-finite truncated simulation loss")
    if not with_grads:
        return loss, None

    nx = states[0].shape[1]
    g_f = _zero_grads(f_p)
    g_h = _zero_grads(h_p)
    d_x = np.zeros((b_sz, nx))
    for j in range(t_len - 1, -1, -1):
        d_y = 2.0 * scale * errs[j]
        d_from_h, g_h_j = _mlp_backward(h_p, h_caches[j], d_y)
        _accumulate(g_h, g_h_j)
        d_z, g_f_j = _mlp_backward(f_p, f_caches[j], d_x + d_from_h)
        _accumulate(g_f, g_f_j)
        d_x = d_z[:, :nx]
    _, g_enc = _mlp_backward(enc_p, enc_cache, d_x)
    return loss, {"encoder": g_enc, "f": g_f, "h": g_h}


def _zero_grads(params: NetParams) -> NetParams:
    return [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]


def _accumulate(acc: NetParams, inc: NetParams) -> None:
    for (aw, ab), (iw, ib) in zip(acc, inc):
        aw += iw
        ab += ib


def truncated_loss(model: AnnSsModel, batch: Batch):
    """Loss and per-parameter gradients of the truncated simulation cost for
    a model (batch must already be in the model's normalized units)."""
    if model.encoder_net is None:
        raise ConfigurationError("truncated simulation loss requires an encoder")
    params = {
        "encoder": _net_to_params(model.encoder_net),
        "f": _net_to_params(model.f_net),
        "h": _net_to_params(model.h_net),
    }
    return _rollout_loss_and_grads(params, batch)


def _net_to_params(net: Mlp) -> NetParams:
    return [[l.weights.copy(), l.bias.copy()] for l in net.layers]


def _params_to_net(params: NetParams, hidden_activation: str = "tanh") -> Mlp:
    last = len(params) - 1
    return Mlp([
        Layer(w, b, hidden_activation if i < last else "linear")
        for i, (w, b) in enumerate(params)
    ])


def _init_params(sizes, rng, output_scale=1.0) -> NetParams:
    params = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == len(sizes) - 2:
            w *= output_scale
        params.append([w, np.zeros(fan_out)])
    return params


class _Adam:
    def __init__(self, params: Dict[str, NetParams], lr: float,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: _zero_grads(v) for k, v in params.items()}
        self.v = {k: _zero_grads(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for key, net in params.items():
            for layer, grad, m_l, v_l in zip(net, grads[key], self.m[key], self.v[key]):
                for arr, g, m, v in zip(layer, grad, m_l, v_l):
                    m *= self.b1
                    m += (1.0 - self.b1) * g
                    v *= self.b2
                    v += (1.0 - self.b2) * g * g
                    arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _clip_gradients(grads: Dict[str, NetParams], max_norm: float) -> None:
    total = 0.0
    for net in grads.values():
        for w, b in net:
            total += float(np.sum(w * w) + np.sum(b * b))
    norm = np.sqrt(total)
    if norm > max_norm:
        fac = max_norm / norm
        for net in grads.values():
            for w, b in net:
                w *= fac
                b *= fac


def nrms(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Root-mean-square error normalized by the standard deviation of the truth."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.ndim == 1:
        y_true, y_pred = y_true[:, None], y_pred[:, None]
    std = np.std(y_true, axis=0)
    if np.any(std == 0):
        raise ValueError("truth has zero variance; NRMS undefined")
    per_channel = np.sqrt(np.mean((y_true - y_pred) ** 2, axis=0)) / std
    return float(np.mean(per_channel))


def freerun_nrms(model: AnnSsModel, dataset: Dataset, split: str = "test") -> float:
    """Free-run simulation NRMS over a split, initialized by the encoder."""
    u, y = dataset.split(split)
    n_lag = model.lag
    if len(u) <= n_lag + 1:
        raise ValueError(f"split '{split}' too short for lag {n_lag}")
    from .nets import IoWindow

    window = IoWindow(u_past=u[:n_lag], y_past=y[:n_lag + 1])
    x = model.encode_state(window)
    y_hat = np.empty_like(y[n_lag:])
    for i, k in enumerate(range(n_lag, len(u))):
        y_hat[i] = model.h_eval(x)
        x = model.f_eval(x, u[k])
    return nrms(y[n_lag:], y_hat)


def train(dataset: Dataset, cfg: TrainConfig) -> Tuple[AnnSsModel, TrainReport]:
    """Identify a model on the estimation split with validation-selected
    checkpointing; deterministic under the seed.

    Aborts with NumericalError (reporting the epoch) if the loss diverges.
    """
    t_start = time.perf_counter()
    nu = dataset.u.shape[1]
    ny = dataset.y.shape[1]
    u_est, y_est = dataset.split("est")
    norm = IoNorm(
        u_mean=np.mean(u_est, axis=0),
        u_scale=_safe_scale(np.std(u_est, axis=0)),
        y_mean=np.mean(y_est, axis=0),
        y_scale=_safe_scale(np.std(y_est, axis=0)),
    )

    rng = np.random.default_rng(cfg.seed)
    hidden = [cfg.hidden_width] * cfg.hidden_layers
    enc_in = cfg.nb * nu + (cfg.na + 1) * ny
    params: Dict[str, NetParams] = {
        "encoder": _init_params([enc_in, *hidden, cfg.nx], rng),
        # small output layer keeps early truncated rollouts contractive
        "f": _init_params([cfg.nx + nu, *hidden, cfg.nx], rng, output_scale=0.25),
        "h": _init_params([cfg.nx, *hidden, ny], rng),
    }
    opt = _Adam(params, cfg.learning_rate)
    report = TrainReport(n_parameters=sum(
        w.size + b.size for net in params.values() for w, b in net))

    val_batch = _validation_batch(dataset, cfg, norm)
    best_params = copy.deepcopy(params)

    for epoch in range(cfg.epochs):
        batches = make_batches(dataset, cfg.trunc_len, cfg.na, cfg.nb,
                               cfg.batch_size, seed=cfg.seed + 1 + epoch, norm=norm)
        epoch_loss = 0.0
        for batch in batches:
            try:
                loss, grads = _rollout_loss_and_grads(params, batch)
            except NumericalError as exc:
                raise NumericalError(f"training diverged in epoch {epoch}: {exc}") from exc
            _clip_gradients(grads, cfg.grad_clip)
            opt.step(params, grads)
            epoch_loss += loss
        report.train_loss.append(epoch_loss / max(len(batches), 1))
        val_loss = _rollout_loss_and_grads(params, val_batch, with_grads=False)[0]
        report.val_loss.append(val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_params = copy.deepcopy(params)

    model = AnnSsModel(
        f_net=_params_to_net(best_params["f"]),
        h_net=_params_to_net(best_params["h"]),
        encoder_net=_params_to_net(best_params["encoder"]),
        nx=cfg.nx, nu=nu, ny=ny, na=cfg.na, nb=cfg.nb, io_norm=norm,
    )
    try:
        report.test_nrms = freerun_nrms(model, dataset, "test")
    except ValueError:
        report.test_nrms = np.nan  # degenerate/tiny test split
    report.wall_time_s = time.perf_counter() - t_start
    return model, report


def _safe_scale(std: np.ndarray) -> np.ndarray:
    return np.where(std > 1e-12, std, 1.0)


def _validation_batch(dataset: Dataset, cfg: TrainConfig, norm: IoNorm) -> Batch:
    u_val, y_val = dataset.split("val")
    if norm is not None:
        u_val = (u_val - norm.u_mean) / norm.u_scale
        y_val = (y_val - norm.y_mean) / norm.y_scale
    starts = valid_starts(len(u_val), cfg.trunc_len, max(cfg.na, cfg.nb))
    if len(starts) > cfg.val_windows:
        starts = starts[np.linspace(0, len(starts) - 1, cfg.val_windows).astype(int)]
    return _window_batch(u_val, y_val, starts, cfg.trunc_len, cfg.na, cfg.nb)
