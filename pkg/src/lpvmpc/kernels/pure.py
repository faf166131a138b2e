"""NumPy implementation of the MLP evaluation kernels.

Semantics are identical to the compiled backend (``lpvmpc.kernels._core``):
feedforward evaluation, exact forward-mode Jacobians, and composite-Simpson
integration of the Jacobian along the ray ``lam * p`` for ``lam`` in [0, 1].
The ray integration is vectorized over the quadrature nodes so this fallback
stays usable inside the control loop.
"""

import numpy as np

ACT_LINEAR = 0
ACT_TANH = 1
ACT_RELU = 2


def _apply_act(code, a):
    if code == ACT_TANH:
        return np.tanh(a)
    if code == ACT_RELU:
        return np.maximum(a, 0.0)
    return a


def _act_derivative(code, a, post):
    # 'post' is the already-activated value; reused where cheaper (tanh).
    if code == ACT_TANH:
        return 1.0 - post * post
    if code == ACT_RELU:
        # midpoint subgradient at the kink
        d = (a > 0.0).astype(np.float64)
        d[a == 0.0] = 0.5
        return d
    return np.ones_like(a)


class MlpKernel:
    """Evaluation kernel bound to one fixed set of layer parameters."""

    def __init__(self, weights, biases, acts):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.acts = list(acts)
        self.n_in = self.weights[0].shape[1]
        self.n_out = self.weights[-1].shape[0]

    def forward(self, z):
        z = np.asarray(z, dtype=np.float64)
        for w, b, act in zip(self.weights, self.biases, self.acts):
            z = _apply_act(act, w @ z + b)
        return z

    def forward_batch(self, zs):
        zs = np.asarray(zs, dtype=np.float64)
        for w, b, act in zip(self.weights, self.biases, self.acts):
            zs = _apply_act(act, zs @ w.T + b)
        return zs

    def value_and_jacobian(self, z):
        z = np.asarray(z, dtype=np.float64)
        jac = np.eye(self.n_in)
        for w, b, act in zip(self.weights, self.biases, self.acts):
            a = w @ z + b
            jac = w @ jac
            z = _apply_act(act, a)
            if act != ACT_LINEAR:
                jac *= _act_derivative(act, a, z)[:, None]
        return z, jac

    def jacobian_batch(self, zs):
        """Values and Jacobians for a batch of inputs, shapes (n, out), (n, out, in)."""
        zs = np.asarray(zs, dtype=np.float64)
        n = zs.shape[0]
        jac = np.broadcast_to(np.eye(self.n_in), (n, self.n_in, self.n_in)).copy()
        for w, b, act in zip(self.weights, self.biases, self.acts):
            a = zs @ w.T + b
            jac = w @ jac  # broadcasts to (n, out, n_in)
            zs = _apply_act(act, a)
            if act != ACT_LINEAR:
                jac *= _act_derivative(act, a, zs)[:, :, None]
        return zs, jac

    def simpson_jacobian(self, p, subintervals):
        """Composite-Simpson integral of the Jacobian along ``lam * p``, lam in [0, 1].

        ``subintervals`` must be even; nodes are processed in ascending lam
        order so results are reproducible bit-for-bit.
        """
        p = np.asarray(p, dtype=np.float64)
        m = int(subintervals)
        lam = np.linspace(0.0, 1.0, m + 1)
        wts = np.empty(m + 1)
        wts[0] = wts[-1] = 1.0
        wts[1:-1:2] = 4.0
        wts[2:-1:2] = 2.0
        wts *= 1.0 / (3.0 * m)
        _, jacs = self.jacobian_batch(lam[:, None] * p[None, :])
        return np.tensordot(wts, jacs, axes=1)


def make_kernel(weights, biases, acts):
    return MlpKernel(weights, biases, acts)
