"""Lloyd's k-means with k-means++ seeding, plus the one-hot cluster feature bundle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ClusterConfigError(ValueError):
    pass


@dataclass
class KMeansModel:
    centroids: np.ndarray
    seed: int
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_iter": self.n_iter,
            "inertia_history": self.inertia_history,
            "centroids": self.centroids.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KMeansModel":
        return cls(np.asarray(d["centroids"], dtype=np.float64), int(d["seed"]),
                   list(d.get("inertia_history", [])), int(d.get("n_iter", 0)))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # |x|^2 - 2 x.c + |c|^2, clamped against round-off
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, n):
        total = closest.sum()
        if total <= 0:
            # all remaining mass sits on chosen centers; take any unchosen point
            i = int(np.argmax(closest))
        else:
            i = int(rng.choice(len(x), p=closest / total))
        centers.append(x[i])
        closest = np.minimum(closest, _sq_dists(x, x[i][None, :])[:, 0])
    return np.array(centers)


def kmeans_assign(model: KMeansModel, vectors) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest cluster index."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    return np.argmin(_sq_dists(x, model.centroids), axis=1)


def kmeans_fit(vectors, n: int = 10, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansModel:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ClusterConfigError("vectors must be a 2-D array")
    if n < 1:
        raise ClusterConfigError("need at least one cluster")
    if len(x) < n:
        raise ClusterConfigError(f"{len(x)} vectors cannot form {n} clusters")
    rng = np.random.default_rng(seed)
    c = _plus_plus(x, n, rng)
    model = KMeansModel(c, seed)
    prev = np.inf
    for it in range(max_iter):
        d = _sq_dists(x, c)
        assign = np.argmin(d, axis=1)
        own = d[np.arange(len(x)), assign]
        inertia = float(own.sum())
        model.inertia_history.append(inertia)
        model.n_iter = it + 1
        if prev - inertia < tol:
            break
        prev = inertia
        counts = np.bincount(assign, minlength=n)
        new = np.zeros_like(c)
        np.add.at(new, assign, x)
        taken = set()
        for j in range(n):
            if counts[j]:
                new[j] /= counts[j]
                continue
            # empty cluster: reseed from the point worst served by its centroid
            order = np.argsort(-own, kind="stable")
            i = next(int(i) for i in order if int(i) not in taken)
            taken.add(i)
            new[j] = x[i]
        c = new
        model.centroids = c
    return model


def bundle_cluster_features(top_features, cluster_id: int, n: int) -> np.ndarray:
    """Flattened outer product of ``top_features`` with the one-hot cluster id.

    Works on a single feature vector ``[l]`` or a batch ``[rows, l]`` (with
    ``cluster_id`` then an int or an array of per-row ids).
    """
    f = np.asarray(top_features, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    cid = np.broadcast_to(np.asarray(cluster_id, dtype=np.int64), (len(f),))
    if np.any(cid < 0) or np.any(cid >= n):
        raise IndexError(f"cluster id out of range 0..{n - 1}")
    l = f.shape[1]
    out = np.zeros((len(f), l * n))
    cols = cid[:, None] * l + np.arange(l)[None, :]
    out[np.arange(len(f))[:, None], cols] = f
    return out[0] if single else out
