"""Shared numeric kernels: seeded RNG, Hermitian eigensolver, matrix
exponential, and conjugate gradient.

Everything operates on dense numpy arrays at the small dimensions used by
the simulator (state dim <= 6, superoperator dim <= 36).
"""
from collections import namedtuple

import numpy as np

from .errors import ArgumentError, NumericalError

_TWO_PI = 2.0 * np.pi


class Rng:
    """Seeded generator with a fixed normal transform.

    Uniform, integer, and permutation draws come from numpy's PCG64 stream.
    Normal draws are produced by the polar Box-Muller transform built on the
    same uniform stream, so the full draw sequence is pinned by this class
    rather than by numpy's internal Gaussian algorithm.
    """

    def __init__(self, seed):
        self.gen = np.random.Generator(np.random.PCG64(int(seed)))
        self._spare = []

    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        count = 1 if size is None else int(np.prod(size))
        out = np.empty(count)
        filled = 0
        while self._spare and filled < count:
            out[filled] = self._spare.pop()
            filled += 1
        while filled < count:
            # generate in blocks; polar rejection keeps ~78.5% of pairs
            need_pairs = max(8, int((count - filled) * 0.7) + 2)
            u = 2.0 * self.gen.random(need_pairs) - 1.0
            v = 2.0 * self.gen.random(need_pairs) - 1.0
            s = u * u + v * v
            ok = (s > 0.0) & (s < 1.0)
            u, v, s = u[ok], v[ok], s[ok]
            f = np.sqrt(-2.0 * np.log(s) / s)
            pair = np.empty(2 * s.size)
            pair[0::2] = u * f
            pair[1::2] = v * f
            take = min(pair.size, count - filled)
            out[filled:filled + take] = pair[:take]
            filled += take
            for z in pair[take:][::-1]:
                self._spare.append(z)
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)


def adjoint(m):
    return m.conj().T


def hermitian_eigs(m, tol=1e-14, max_sweeps=100):
    """Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvector columns). Iterates full
    sweeps until the off-diagonal Frobenius norm drops below `tol`.
    """
    m = np.asarray(m, dtype=complex)
    n = m.shape[0]
    if m.shape != (n, n):
        raise ArgumentError("hermitian_eigs needs a square matrix")
    if n and np.abs(m - m.conj().T).max() > 1e-10:
        raise ArgumentError("matrix is not Hermitian within 1e-10")
    a = 0.5 * (m + m.conj().T)
    v = np.eye(n, dtype=complex)
    # scale-aware stopping: tol is relative to the overall matrix norm
    scale = max(np.linalg.norm(a), 1.0)
    # summing |a_pq|^2 directly avoids the catastrophic cancellation of
    # the ||A||^2 - ||diag||^2 form, whose noise floor sqrt(eps)*scale
    # would sit far above tol*scale
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a[off_mask])
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                g = a[p, q]
                # Elements this small cannot keep the off-norm above the
                # stopping threshold; zeroing them (a perturbation below
                # tol * scale in total) avoids overflow in 1/|g|.
                if abs(g) <= tol * scale / (n * n):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                tau = (a[q, q].real - a[p, p].real) / (2.0 * abs(g))
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                u = g / abs(g)
                # columns update: [p q] <- [p q] @ [[c, s u],[-s conj(u), c]]
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * np.conj(u) * col_q
                a[:, q] = s * u * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * u * row_q
                a[q, :] = s * np.conj(u) * row_p + c * row_q
                col_p = v[:, p].copy()
                col_q = v[:, q].copy()
                v[:, p] = c * col_p - s * np.conj(u) * col_q
                v[:, q] = s * u * col_p + c * col_q
    else:
        off = np.linalg.norm(a[off_mask])
        if off > tol * scale:
            raise NumericalError(
                f"Jacobi sweep limit reached, off-norm {off:.3e}")
    w = np.diag(a).real
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


# degree-13 Pade coefficients for the matrix exponential
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)
_PADE13_THETA = 5.371920351148152


def expm(m):
    """Matrix exponential by scaling and squaring with a degree-13 Pade
    approximant."""
    a = np.asarray(m)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ArgumentError("expm needs a square matrix")
    if not np.isfinite(a).all():
        raise NumericalError("expm input has non-finite entries")
    norm = np.linalg.norm(a, 1) if n else 0.0
    squarings = 0
    if norm > _PADE13_THETA:
        squarings = int(np.ceil(np.log2(norm / _PADE13_THETA)))
        a = a / (2.0 ** squarings)
    b = _PADE13
    ident = np.eye(n, dtype=a.dtype if np.iscomplexobj(a) else float)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    w = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    try:
        f = np.linalg.solve(w - u, w + u)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"expm Pade solve failed: {exc}") from exc
    for _ in range(squarings):
        f = f @ f
    if not np.isfinite(f).all():
        raise NumericalError("expm overflowed")
    return f


CgResult = namedtuple("CgResult", ["x", "residual_norm", "iterations"])


def conjugate_gradient(apply_a, b, iters=10, tol=1e-10):
    """Solve A x = b for symmetric positive definite A given as a callback.

    Runs at most `iters` iterations, returning the iterate with the smallest
    residual norm seen (CG residuals are not monotone in exact arithmetic
    plus damping, so the best one is tracked explicitly).
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    bnorm = float(np.sqrt(b @ b))
    if bnorm == 0.0:
        return CgResult(x, 0.0, 0)
    best_x = x.copy()
    best_res = np.sqrt(rs)
    k = 0
    for k in range(1, iters + 1):
        ap = apply_a(p)
        denom = float(p @ ap)
        if denom <= 0.0 or not np.isfinite(denom):
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        if not np.isfinite(r).all():
            raise NumericalError("conjugate gradient produced non-finite "
                                 "iterates")
        rs_new = float(r @ r)
        res = np.sqrt(rs_new)
        if res < best_res:
            best_res = res
            best_x = x.copy()
        if res <= tol * bnorm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CgResult(best_x, best_res, k)
