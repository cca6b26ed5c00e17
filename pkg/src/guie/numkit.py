"""Dense float64 helpers, the seeded random stream and a Jacobi eigensolver.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import numpy as np

NORM_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValueError(f"{name} has a non-finite entry at {tuple(int(i) for i in bad)}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape checking.

    Delegates to numpy's ``@``; for a fixed build and inputs the summation
    order, and therefore the result, is fixed.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def l2_normalize_rows(m, tol: float = NORM_TOL) -> np.ndarray:
    m = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    small = np.flatnonzero(norms < tol)
    if small.size:
        raise ValueError(f"row {int(small[0])} has norm {norms[small[0]]:.3g} < {tol:g}")
    return m / norms[:, None]


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of a circle-method tournament: n-1 rounds of disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def symmetric_eig(s, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round touch disjoint rows/columns and can be
    applied together. Iteration stops once the off-diagonal Frobenius norm
    drops below ``tol * ||S||_F``.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted
    descending and eigenvectors as columns. Each eigenvector is signed so
    that its largest-magnitude entry is positive.
    """
    s = as_matrix(s, "s")
    n, n2 = s.shape
    if n != n2:
        raise ValueError(f"symmetric_eig needs a square matrix, got {s.shape}")
    check_finite(s, "s")
    a = 0.5 * (s + s.T)
    vt = np.eye(n)  # eigenvectors as rows while iterating
    scale = np.linalg.norm(a)
    rounds = _round_robin(n) if n > 1 else []

    def off(x):
        # summed directly; ||A||^2 - ||diag||^2 cancels catastrophically near convergence
        o = x.copy()
        np.fill_diagonal(o, 0.0)
        return np.linalg.norm(o)

    def rotate_rows(x, p, q, c, sn):
        xp, xq = x[p], x[q]
        x[p], x[q] = c[:, None] * xp - sn[:, None] * xq, sn[:, None] * xp + c[:, None] * xq

    for _ in range(max_sweeps):
        if off(a) <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            app, aqq = a[p, p], a[q, q]
            theta = (aqq - app) / (2.0 * np.where(active, apq, 1.0))
            sgn = np.where(theta >= 0, 1.0, -1.0)
            t = np.where(active, sgn / (np.abs(theta) + np.sqrt(theta * theta + 1.0)), 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            # A <- J^T A J with J[p,p]=J[q,q]=c, J[p,q]=s, J[q,p]=-s; J^T A J is
            # symmetric, so it equals J^T (J^T A)^T and only row updates are needed.
            rotate_rows(a, p, q, c, sn)
            a = np.ascontiguousarray(a.T)
            rotate_rows(a, p, q, c, sn)
            rotate_rows(vt, p, q, c, sn)

    v = vt.T
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivot, np.arange(n)] < 0, -1.0, 1.0)
    return w, v * signs


class RngStream:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator, which is specified and
    reproducible across platforms. Gaussians come from the Box-Muller
    transform of PCG64 uniforms so the whole draw path is pinned here.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def gaussian(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def bernoulli(self, shape, p: float) -> np.ndarray:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli probability must be in [0, 1], got {p}")
        return (self._gen.random(shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def rng_draw(stream: RngStream, shape, distribution: str = "uniform", p: float = 0.5) -> np.ndarray:
    if distribution == "uniform":
        return stream.uniform(shape)
    if distribution == "gaussian":
        return stream.gaussian(shape)
    if distribution == "bernoulli":
        return stream.bernoulli(shape, p)
    raise ValueError(f"unknown distribution {distribution!r}")
