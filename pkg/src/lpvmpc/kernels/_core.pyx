# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP evaluation kernels.

One MlpKernel instance packs the layer parameters of a single network into
contiguous storage; forward passes, forward-mode Jacobians and the
composite-Simpson ray integration then run as plain C loops (no temporary
allocations in the quadrature inner loop, GIL released). Networks in this
package are narrow (widths <= 64, inputs <= ~10), a regime where loop
kernels beat BLAS-backed NumPy by an order of magnitude per call.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh as c_tanh

cnp.import_array()

ACT_LINEAR = 0
ACT_TANH = 1
ACT_RELU = 2

DEF _ACT_LINEAR = 0
DEF _ACT_TANH = 1
DEF _ACT_RELU = 2


cdef class MlpKernel:
    """Evaluation kernel bound to one fixed set of layer parameters."""

    cdef double[::1] params      # W0 (row-major), b0, W1, b1, ...
    cdef int[::1] w_off
    cdef int[::1] b_off
    cdef int[::1] sizes          # in_0, out_0, out_1, ... (n_layers + 1)
    cdef int[::1] act_codes
    cdef readonly int n_layers
    cdef readonly int n_in
    cdef readonly int n_out
    cdef int max_width

    def __init__(self, weights, biases, acts):
        cdef int n_layers = len(weights)
        if n_layers == 0:
            raise ValueError("at least one layer required")
        sizes = [int(weights[0].shape[1])]
        total = 0
        w_off = []
        b_off = []
        for w, b in zip(weights, biases):
            w_off.append(total)
            total += w.shape[0] * w.shape[1]
            b_off.append(total)
            total += w.shape[0]
            sizes.append(int(w.shape[0]))
        params = np.empty(total, dtype=np.float64)
        for i, (w, b) in enumerate(zip(weights, biases)):
            params[w_off[i]:w_off[i] + w.size] = np.ascontiguousarray(w, dtype=np.float64).ravel()
            params[b_off[i]:b_off[i] + b.size] = np.asarray(b, dtype=np.float64)
        self.params = params
        self.w_off = np.asarray(w_off, dtype=np.int32)
        self.b_off = np.asarray(b_off, dtype=np.int32)
        self.sizes = np.asarray(sizes, dtype=np.int32)
        self.act_codes = np.asarray([int(a) for a in acts], dtype=np.int32)
        self.n_layers = n_layers
        self.n_in = sizes[0]
        self.n_out = sizes[n_layers]
        self.max_width = max(sizes)

    # ------------------------------------------------------------------
    # internal C routines; buf_a/buf_b are caller-provided scratch of size
    # max_width (values) and max_width*n_in (Jacobians) so concurrent calls
    # on the same kernel stay thread-safe.
    # ------------------------------------------------------------------

    cdef void _forward_c(self, const double* z, double* out,
                         double* buf_a, double* buf_b) noexcept nogil:
        cdef int layer, i, j, n_in, n_out, act
        cdef const double* w
        cdef const double* b
        cdef double* cur = buf_a
        cdef double* nxt = buf_b
        cdef double* tmp
        cdef double acc
        for i in range(self.sizes[0]):
            cur[i] = z[i]
        for layer in range(self.n_layers):
            n_in = self.sizes[layer]
            n_out = self.sizes[layer + 1]
            act = self.act_codes[layer]
            w = &self.params[self.w_off[layer]]
            b = &self.params[self.b_off[layer]]
            for i in range(n_out):
                acc = b[i]
                for j in range(n_in):
                    acc += w[i * n_in + j] * cur[j]
                if act == _ACT_TANH:
                    acc = c_tanh(acc)
                elif act == _ACT_RELU:
                    acc = acc if acc > 0.0 else 0.0
                nxt[i] = acc
            tmp = cur
            cur = nxt
            nxt = tmp
        for i in range(self.n_out):
            out[i] = cur[i]

    cdef void _value_and_jacobian_c(self, const double* z, double* val, double* jac,
                                    double* v_a, double* v_b,
                                    double* j_a, double* j_b) noexcept nogil:
        # jac is row-major (n_out, n_in); j_a/j_b are (max_width, n_in) scratch.
        cdef int layer, i, j, k, n_in, n_out, act, nin0
        cdef const double* w
        cdef const double* b
        cdef double* cur = v_a
        cdef double* nxt = v_b
        cdef double* jcur = j_a
        cdef double* jnxt = j_b
        cdef double* tmp
        cdef double acc, d, post
        nin0 = self.sizes[0]
        for i in range(nin0):
            cur[i] = z[i]
            for j in range(nin0):
                jcur[i * nin0 + j] = 1.0 if i == j else 0.0
        for layer in range(self.n_layers):
            n_in = self.sizes[layer]
            n_out = self.sizes[layer + 1]
            act = self.act_codes[layer]
            w = &self.params[self.w_off[layer]]
            b = &self.params[self.b_off[layer]]
            for i in range(n_out):
                acc = b[i]
                for j in range(n_in):
                    acc += w[i * n_in + j] * cur[j]
                for k in range(nin0):
                    d = 0.0
                    for j in range(n_in):
                        d += w[i * n_in + j] * jcur[j * nin0 + k]
                    jnxt[i * nin0 + k] = d
                if act == _ACT_TANH:
                    post = c_tanh(acc)
                    d = 1.0 - post * post
                    nxt[i] = post
                    for k in range(nin0):
                        jnxt[i * nin0 + k] *= d
                elif act == _ACT_RELU:
                    if acc > 0.0:
                        nxt[i] = acc
                    else:
                        nxt[i] = 0.0
                        d = 0.5 if acc == 0.0 else 0.0
                        for k in range(nin0):
                            jnxt[i * nin0 + k] *= d
                else:
                    nxt[i] = acc
            tmp = cur
            cur = nxt
            nxt = tmp
            tmp = jcur
            jcur = jnxt
            jnxt = tmp
        for i in range(self.n_out):
            val[i] = cur[i]
            for k in range(nin0):
                jac[i * nin0 + k] = jcur[i * nin0 + k]

    # ------------------------------------------------------------------
    # Python-facing API (matches lpvmpc.kernels.pure.MlpKernel)
    # ------------------------------------------------------------------

    def forward(self, z):
        z_arr = np.ascontiguousarray(z, dtype=np.float64)
        if z_arr.shape[0] != self.n_in:
            raise ValueError("input size mismatch")
        out = np.empty(self.n_out)
        scratch = np.empty(2 * self.max_width)
        cdef double[::1] zv = z_arr
        cdef double[::1] ov = out
        cdef double[::1] sv = scratch
        with nogil:
            self._forward_c(&zv[0], &ov[0], &sv[0], &sv[self.max_width])
        return out

    def forward_batch(self, zs):
        zs_arr = np.ascontiguousarray(zs, dtype=np.float64)
        cdef Py_ssize_t n = zs_arr.shape[0]
        out = np.empty((n, self.n_out))
        scratch = np.empty(2 * self.max_width)
        cdef double[:, ::1] zv = zs_arr
        cdef double[:, ::1] ov = out
        cdef double[::1] sv = scratch
        cdef Py_ssize_t r
        with nogil:
            for r in range(n):
                self._forward_c(&zv[r, 0], &ov[r, 0], &sv[0], &sv[self.max_width])
        return out

    def value_and_jacobian(self, z):
        z_arr = np.ascontiguousarray(z, dtype=np.float64)
        if z_arr.shape[0] != self.n_in:
            raise ValueError("input size mismatch")
        val = np.empty(self.n_out)
        jac = np.empty((self.n_out, self.n_in))
        vs = np.empty(2 * self.max_width)
        js = np.empty(2 * self.max_width * self.n_in)
        cdef double[::1] zv = z_arr
        cdef double[::1] valv = val
        cdef double[:, ::1] jv = jac
        cdef double[::1] vsv = vs
        cdef double[::1] jsv = js
        with nogil:
            self._value_and_jacobian_c(&zv[0], &valv[0], &jv[0, 0],
                                       &vsv[0], &vsv[self.max_width],
                                       &jsv[0], &jsv[self.max_width * self.n_in])
        return val, jac

    def jacobian_batch(self, zs):
        zs_arr = np.ascontiguousarray(zs, dtype=np.float64)
        cdef Py_ssize_t n = zs_arr.shape[0]
        vals = np.empty((n, self.n_out))
        jacs = np.empty((n, self.n_out, self.n_in))
        vs = np.empty(2 * self.max_width)
        js = np.empty(2 * self.max_width * self.n_in)
        cdef double[:, ::1] zv = zs_arr
        cdef double[:, ::1] valv = vals
        cdef double[:, :, ::1] jv = jacs
        cdef double[::1] vsv = vs
        cdef double[::1] jsv = js
        cdef Py_ssize_t r
        with nogil:
            for r in range(n):
                self._value_and_jacobian_c(&zv[r, 0], &valv[r, 0], &jv[r, 0, 0],
                                           &vsv[0], &vsv[self.max_width],
                                           &jsv[0], &jsv[self.max_width * self.n_in])
        return vals, jacs

    def simpson_jacobian(self, p, subintervals):
        """Composite-Simpson integral of the Jacobian along ``lam * p``, lam in [0, 1].

        Nodes are accumulated in ascending lam order (fixed reduction order).
        """
        p_arr = np.ascontiguousarray(p, dtype=np.float64)
        if p_arr.shape[0] != self.n_in:
            raise ValueError("input size mismatch")
        cdef int m = int(subintervals)
        if m < 2 or m % 2 != 0:
            raise ValueError("subintervals must be a positive even count")
        acc = np.zeros((self.n_out, self.n_in))
        val = np.empty(self.n_out)
        jac = np.empty((self.n_out, self.n_in))
        znode = np.empty(self.n_in)
        vs = np.empty(2 * self.max_width)
        js = np.empty(2 * self.max_width * self.n_in)
        cdef double[:, ::1] accv = acc
        cdef double[::1] pv = p_arr
        cdef double[::1] zv = znode
        cdef double[::1] valv = val
        cdef double[:, ::1] jv = jac
        cdef double[::1] vsv = vs
        cdef double[::1] jsv = js
        cdef int node, i, k
        cdef double lam, wt, h = 1.0 / m
        with nogil:
            for node in range(m + 1):
                lam = node * h
                if node == 0 or node == m:
                    wt = h / 3.0
                elif node % 2 == 1:
                    wt = 4.0 * h / 3.0
                else:
                    wt = 2.0 * h / 3.0
                for i in range(self.n_in):
                    zv[i] = lam * pv[i]
                self._value_and_jacobian_c(&zv[0], &valv[0], &jv[0, 0],
                                           &vsv[0], &vsv[self.max_width],
                                           &jsv[0], &jsv[self.max_width * self.n_in])
                for i in range(self.n_out):
                    for k in range(self.n_in):
                        accv[i, k] += wt * jv[i, k]
        return acc


def make_kernel(weights, biases, acts):
    return MlpKernel(weights, biases, acts)
