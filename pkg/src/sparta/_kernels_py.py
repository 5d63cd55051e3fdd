"""NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``SPARTA_PURE_PYTHON=1``.
The scatter, gather and Adam kernels must agree bitwise with ``_kernels.pyx``;
every scalar argument arrives already cast to float32 by the caller.
"""

import numpy as np

BACKEND = "python"


def scatter_add(flat, idx, vals, sign):
    if sign > 0:
        flat[idx] += vals
    else:
        flat[idx] -= vals


def scatter_set(flat, idx, vals):
    flat[idx] = vals


def gather(flat, idx):
    return flat[idx]


def adam_update(p, g, m, v, lr, beta1, beta2, omb1, omb2, bc1, bc2, eps, decay):
    if decay != np.float32(1.0):
        p *= decay
    m *= beta1
    m += omb1 * g
    v *= beta2
    v += omb2 * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    p -= (lr * mhat) / (np.sqrt(vhat) + eps)


def _round_robin(n):
    # Brent-Luk tournament: n-1 rounds of n/2 disjoint column pairs.
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_singular_values(a, tol=1e-15, max_sweeps=80):
    """Singular values of a 2-D float64 array by one-sided Jacobi, descending."""
    a = np.array(a, dtype=np.float64, copy=True)
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    n = a.shape[1]
    if n == 0:
        return np.zeros(0)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = (gamma != 0.0) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            # a denormal gamma overflows zeta to inf, which correctly gives t = 0
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p].copy(), a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
        if not rotated:
            break
    return np.sort(np.sqrt(np.einsum("ij,ij->j", a, a)))[::-1]
