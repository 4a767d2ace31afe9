"""Dense numerical primitives shared across the package.

Everything operates on float64 numpy arrays. Randomness flows through
:class:`RngStream`, a thin seeded wrapper over numpy's PCG64 generator whose
child streams are derived from ``(seed, label)`` so independent components
never share draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "ConvergenceError",
    "DegenerateClusteringError",
    "RngStream",
    "ZeroNormError",
    "as_matrix",
    "calinski_harabasz",
    "cosine_similarity",
    "gaussian",
    "kmeans",
    "l2_norm",
    "lloyd",
    "softmax",
    "top_singular_vector",
    "wcss",
]


class ConvergenceError(RuntimeError):
    """Iterative routine ran out of iterations; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class ZeroNormError(ValueError):
    pass


class DegenerateClusteringError(ValueError):
    pass


def _label_key(label) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """Seeded random stream.

    Normal draws use numpy's ziggurat sampler on a PCG64 bit generator, which
    is reproducible across platforms for a fixed seed. The stream is
    single-owner; hand a :meth:`child` to anything that runs separately.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_label_key(p) for p in _path]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label) -> "RngStream":
        return RngStream(self.seed, self._path + (label,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def gaussian(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self._path!r})"


def gaussian(rng: RngStream) -> float:
    """One standard normal draw."""
    return float(rng.gaussian())


def as_matrix(x, name="matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def softmax(v, axis=-1):
    """Max-subtracted softmax along ``axis`` (last axis by default)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _fix_sign(v):
    nz = np.flatnonzero(v)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def top_singular_vector(M, tol: float = 1e-8, max_iter: int = 1000):
    """Dominant right singular vector and value of ``M``.

    Power iteration on the Gram matrix ``M.T @ M``. The returned vector has
    unit norm and its first nonzero component positive.

    Raises
    ------
    ValueError
        If ``M`` is all zeros or ``tol`` is not positive.
    ConvergenceError
        If successive iterates still differ by ``tol`` or more after
        ``max_iter`` steps. The last iterate is attached as ``.last``.
    """
    M = as_matrix(M, "M")
    if tol <= 0:
        raise ValueError("tol must be positive")
    gram = M.T @ M
    if not np.any(gram):
        raise ValueError("top singular vector of a zero matrix is undefined")

    # Deterministic start; mixing through the Gram matrix keeps it off the
    # dominant eigenvector's orthogonal complement except in measure-zero cases.
    start = np.random.default_rng(0x5EED).standard_normal(gram.shape[0])
    v = gram @ start
    if not np.any(v):
        v = gram[np.argmax(np.sum(gram * gram, axis=0))]
    v = _fix_sign(v / np.linalg.norm(v))

    for _ in range(max_iter):
        w = gram @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            raise ConvergenceError("iterate collapsed into the null space", last=v)
        w = _fix_sign(w / nw)
        if np.linalg.norm(w - v) < tol:
            return w, float(np.linalg.norm(M @ w))
        v = w
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps", last=v)


def wcss(points, assignment, centroids) -> float:
    """Within-cluster sum of squared distances."""
    points = as_matrix(points, "points")
    diff = points - np.asarray(centroids)[np.asarray(assignment)]
    return float(np.sum(diff * diff))


def _sq_dists(points, centroids):
    # |x|^2 - 2 x.c + |c|^2, clipped against cancellation
    d = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def lloyd(points, centroids, max_iter: int = 100):
    """Lloyd iterations from the given centroids.

    Returns ``(assignment, centroids, history)`` where ``history`` lists the
    WCSS after every assignment step. An emptied cluster is reseeded at the
    point farthest from its current centroid.
    """
    points = as_matrix(points, "points")
    centroids = np.array(centroids, dtype=np.float64)
    c = centroids.shape[0]
    history = []
    assignment = None
    for _ in range(max_iter):
        d = _sq_dists(points, centroids)
        new_assignment = np.argmin(d, axis=1)
        counts = np.bincount(new_assignment, minlength=c)
        if np.any(counts == 0):
            own = d[np.arange(len(points)), new_assignment]
            for j in np.flatnonzero(counts == 0):
                movable = counts[new_assignment] > 1
                far = int(np.argmax(np.where(movable, own, -1.0)))
                counts[new_assignment[far]] -= 1
                counts[j] = 1
                new_assignment[far] = j
                centroids[j] = points[far]
                own[far] = 0.0
        history.append(wcss(points, new_assignment, centroids))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, points)
        centroids = sums / counts[:, None]
    history.append(wcss(points, assignment, centroids))
    return assignment, centroids, history


def seed_points(points, c: int, rng: RngStream):
    """Pick ``c`` distinct data points, each drawn with probability proportional
    to its squared distance from the points already picked (D^2 seeding).

    Falls back to a uniform draw once every remaining point coincides with a
    pick.
    """
    n = points.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, c):
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0.0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.uniform() * total, side="right"))
            nxt = min(nxt, n - 1)
            if nxt in chosen:
                nxt = int(np.flatnonzero(d2 > 0)[-1])
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(0, free.size)])
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return np.array(chosen)


def kmeans(points, c: int, rng: RngStream, restarts: int = 10, max_iter: int = 100, init="d2"):
    """Best-of-``restarts`` Lloyd k-means from seeded random data points.

    ``init="d2"`` picks starting points by D^2 seeding; ``"random"`` picks
    them uniformly. Returns ``(assignment, centroids)``.
    """
    points = as_matrix(points, "points")
    n = points.shape[0]
    if c < 1 or c > n:
        raise ValueError(f"need 1 <= c <= n, got c={c}, n={n}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if init not in ("d2", "random"):
        raise ValueError(f"unknown init {init!r}")
    best = None
    for _ in range(restarts):
        if init == "d2":
            start = points[seed_points(points, c, rng)]
        else:
            start = points[rng.choice(n, size=c, replace=False)]
        assignment, centroids, history = lloyd(points, start, max_iter)
        score = history[-1]
        if best is None or score < best[0]:
            best = (score, assignment, centroids)
    return best[1], best[2]


def calinski_harabasz(points, assignment) -> float:
    """Between-cluster over within-cluster dispersion, scaled by (n-c)/(c-1)."""
    points = as_matrix(points, "points")
    assignment = np.asarray(assignment)
    n = points.shape[0]
    if assignment.shape != (n,):
        raise ValueError("assignment length must equal the number of points")
    labels, inverse = np.unique(assignment, return_inverse=True)
    c = labels.size
    if c < 2:
        raise DegenerateClusteringError("need at least two clusters")
    if n <= c:
        raise DegenerateClusteringError("need more points than clusters")
    counts = np.bincount(inverse)
    sums = np.zeros((c, points.shape[1]))
    np.add.at(sums, inverse, points)
    centroids = sums / counts[:, None]
    grand = points.mean(axis=0)
    ssb = float(np.sum(counts * np.sum((centroids - grand) ** 2, axis=1)))
    ssw = float(np.sum((points - centroids[inverse]) ** 2))
    if ssw == 0.0:
        raise DegenerateClusteringError("within-cluster dispersion is zero")
    return (ssb / (c - 1)) / (ssw / (n - c))
