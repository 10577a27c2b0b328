"""Numeric inner loops.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with the same signature. The module-level names dispatch to one of them
according to :data:`propulsion_lab._jit.JIT_ENABLED`; both implementations are
also reachable through :data:`jit_impl` and :data:`numpy_impl` so tests and the
benchmark can compare them directly.

Pooling modes are passed as small integers (see :data:`POOL_MODES`).
"""

from types import SimpleNamespace

import numpy as np

from ._jit import JIT_ENABLED, njit

POOL_MODES = {"average": 0, "max": 1, "min": 2, "l2": 3}


# ----------------------------------------------------------------------------
# numba versions
# ----------------------------------------------------------------------------


@njit
def _propulsion_forward_jit(v, z, k):
    rows, cols = v.shape
    zk = np.empty(cols, dtype=v.dtype)
    for j in range(cols):
        zk[j] = z[j] ** k
    out = np.empty_like(v)
    for i in range(rows):
        for j in range(cols):
            out[i, j] = v[i, j] * zk[j]
    return out


@njit
def _propulsion_backward_jit(g, v, z, k):
    rows, cols = v.shape
    gv = np.empty_like(v)
    gz = np.zeros(cols, dtype=v.dtype)
    zk = np.empty(cols, dtype=v.dtype)
    dz = np.zeros(cols, dtype=v.dtype)
    for j in range(cols):
        zk[j] = z[j] ** k
        if k > 0:
            dz[j] = k * z[j] ** (k - 1)
    for i in range(rows):
        for j in range(cols):
            gv[i, j] = g[i, j] * zk[j]
            gz[j] += g[i, j] * v[i, j]
    for j in range(cols):
        gz[j] *= dz[j]
    return gv, gz


@njit
def _pool_forward_jit(stack, mode):
    p, n = stack.shape
    out = np.empty(n, dtype=stack.dtype)
    idx = np.zeros(n, dtype=np.int64)
    for j in range(n):
        if mode == 0:
            base = stack[0, j]
            acc = 0.0
            for i in range(1, p):
                acc += stack[i, j] - base
            out[j] = base + acc / p
        elif mode == 1 or mode == 2:
            best = stack[0, j]
            arg = 0
            for i in range(1, p):
                x = stack[i, j]
                if (mode == 1 and x > best) or (mode == 2 and x < best):
                    best = x
                    arg = i
            out[j] = best
            idx[j] = arg
        else:
            acc = 0.0
            for i in range(p):
                acc += stack[i, j] * stack[i, j]
            out[j] = np.sqrt(acc / p)
    return out, idx


@njit
def _pool_backward_jit(g, stack, out, idx, mode):
    p, n = stack.shape
    gs = np.zeros_like(stack)
    for j in range(n):
        if mode == 0:
            for i in range(p):
                gs[i, j] = g[j] / p
        elif mode == 1 or mode == 2:
            gs[idx[j], j] = g[j]
        else:
            if out[j] > 0.0:
                for i in range(p):
                    gs[i, j] = g[j] * stack[i, j] / (p * out[j])
    return gs


@njit
def _average_ranks_jit(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for m in range(i, j + 1):
            ranks[order[m]] = r
        i = j + 1
    return ranks


@njit
def _jl_deviations_jit(theta, xi, xj):
    t, d, _ = theta.shape
    dev = np.empty(t, dtype=np.float64)
    for s in range(t):
        proj = 0.0
        for r in range(d):
            a = 0.0
            b = 0.0
            for c in range(d):
                a += theta[s, r, c] * xi[s, c]
                b += theta[s, r, c] * xj[s, c]
            proj += a * b
        raw = 0.0
        for c in range(d):
            raw += xi[s, c] * xj[s, c]
        dev[s] = abs(proj - raw)
    return dev


# ----------------------------------------------------------------------------
# numpy versions
# ----------------------------------------------------------------------------


def _propulsion_forward_np(v, z, k):
    return v * z**k


def _propulsion_backward_np(g, v, z, k):
    gv = g * z**k
    if k == 0:
        return gv, np.zeros_like(z)
    gz = k * z ** (k - 1) * np.sum(g * v, axis=0)
    return gv, gz


def _pool_forward_np(stack, mode):
    p, n = stack.shape
    idx = np.zeros(n, dtype=np.int64)
    if mode == 0:
        # offset from the first candidate: identical inputs give that input back bit-exactly
        base = stack[0]
        out = base + np.sum(stack[1:] - base, axis=0) / p
    elif mode == 1:
        idx = np.argmax(stack, axis=0)
        out = stack[idx, np.arange(n)]
    elif mode == 2:
        idx = np.argmin(stack, axis=0)
        out = stack[idx, np.arange(n)]
    else:
        out = np.sqrt(np.sum(stack * stack, axis=0) / p)
    return out, idx.astype(np.int64)


def _pool_backward_np(g, stack, out, idx, mode):
    p, n = stack.shape
    if mode == 0:
        return np.broadcast_to(g / p, stack.shape).copy()
    if mode in (1, 2):
        gs = np.zeros_like(stack)
        gs[idx, np.arange(n)] = g
        return gs
    safe = np.where(out > 0, out, 1.0)
    return np.where(out > 0, g * stack / (p * safe), 0.0)


def _average_ranks_np(x):
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    n = len(x)
    ranks = np.empty(n, dtype=np.float64)
    # run boundaries of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], n] - 1
    for s, e in zip(starts, ends):
        ranks[order[s : e + 1]] = 0.5 * (s + e) + 1.0
    return ranks


def _jl_deviations_np(theta, xi, xj):
    a = np.einsum("trc,tc->tr", theta, xi)
    b = np.einsum("trc,tc->tr", theta, xj)
    return np.abs(np.einsum("tr,tr->t", a, b) - np.einsum("tc,tc->t", xi, xj))


jit_impl = SimpleNamespace(
    propulsion_forward=_propulsion_forward_jit,
    propulsion_backward=_propulsion_backward_jit,
    pool_forward=_pool_forward_jit,
    pool_backward=_pool_backward_jit,
    average_ranks=_average_ranks_jit,
    jl_deviations=_jl_deviations_jit,
)

numpy_impl = SimpleNamespace(
    propulsion_forward=_propulsion_forward_np,
    propulsion_backward=_propulsion_backward_np,
    pool_forward=_pool_forward_np,
    pool_backward=_pool_backward_np,
    average_ranks=_average_ranks_np,
    jl_deviations=_jl_deviations_np,
)

active = jit_impl if JIT_ENABLED else numpy_impl


def propulsion_forward(v, z, k):
    """Rows of ``v`` (2-D) scaled by ``z**k``."""
    return active.propulsion_forward(np.ascontiguousarray(v), np.ascontiguousarray(z), int(k))


def propulsion_backward(g, v, z, k):
    """Returns ``(grad_v, grad_z)`` for :func:`propulsion_forward`."""
    return active.propulsion_backward(
        np.ascontiguousarray(g), np.ascontiguousarray(v), np.ascontiguousarray(z), int(k)
    )


def pool_forward(stack, mode):
    """Pools a ``(p, n)`` stack along axis 0. Returns ``(out, argidx)``."""
    return active.pool_forward(np.ascontiguousarray(stack), int(mode))


def pool_backward(g, stack, out, idx, mode):
    return active.pool_backward(
        np.ascontiguousarray(g), np.ascontiguousarray(stack), out, idx, int(mode)
    )


def average_ranks(x):
    """1-based ranks, tied values share the mean of their positions."""
    return active.average_ranks(np.ascontiguousarray(x, dtype=np.float64))


def jl_deviations(theta, xi, xj):
    """``|<theta x_i, theta x_j> - <x_i, x_j>|`` for a batch of trials."""
    return active.jl_deviations(
        np.ascontiguousarray(theta, dtype=np.float64),
        np.ascontiguousarray(xi, dtype=np.float64),
        np.ascontiguousarray(xj, dtype=np.float64),
    )
