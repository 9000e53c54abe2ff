"""Latency filtering, trust-weighted spectral clustering, client assignment.

Stage (i) keeps, per edge server, the clients whose round-trip latency is
within the threshold. Stage (ii) runs normalized-Laplacian spectral
clustering on the trust-weighted affinity A[n, n'] = w_n * w_n' *
exp(-gamma * R(n, n')). Stage (iii) merges clusters whose mean trust falls
below the floor into the nearest high-trust cluster (smallest symmetric KL
between pooled centroids) or, when an edge has no high-trust cluster,
excludes their members. Clients feasible for several edges go to the lowest-
latency edge whose surviving clusters contain them.

Everything is deterministic: the k-means stage is seeded from the run seed
combined with the sorted candidate ids, and candidates are always processed
in sorted id order, so permuting the input order cannot change the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .fingerprint import DivergenceMatrix, Fingerprint, pooled_centroid, sym_kl
from .seeding import derive_seed

EXCLUDED_OUT_OF_RANGE = "out-of-range"
EXCLUDED_LOW_TRUST = "low-trust"

DEFAULT_MAX_CLUSTERS = 4


@dataclass(frozen=True)
class Topology:
    """Client-edge round-trip latencies plus the link budget."""

    latency_ms: np.ndarray          # (N, K)
    max_latency_ms: float
    bandwidth_bytes_per_s: float

    def __post_init__(self) -> None:
        lat = np.asarray(self.latency_ms, dtype=np.float64)
        object.__setattr__(self, "latency_ms", lat)
        if lat.ndim != 2:
            raise ConfigError(f"latency matrix must be (N, K), got {lat.shape}")
        if (lat < 0).any():
            raise ConfigError("latencies must be >= 0")
        if self.max_latency_ms <= 0:
            raise ConfigError(f"max_latency_ms must be > 0, got {self.max_latency_ms}")
        if self.bandwidth_bytes_per_s <= 0:
            raise ConfigError(
                f"bandwidth_bytes_per_s must be > 0, got {self.bandwidth_bytes_per_s}")

    @property
    def n_clients(self) -> int:
        return self.latency_ms.shape[0]

    @property
    def n_edges(self) -> int:
        return self.latency_ms.shape[1]


@dataclass
class AffinityMatrix:
    """Trust-weighted affinity over one edge's candidate set (ids sorted)."""

    values: np.ndarray
    client_ids: tuple[int, ...]
    gamma: float


@dataclass
class ClusterAssignment:
    """Final client-to-edge mapping plus per-edge cluster statistics."""

    clusters: dict[int, frozenset[int]]      # edge -> member client ids
    excluded: dict[int, str]                 # client -> reason
    edge_trust: dict[int, float]             # mean member trust per edge
    edge_coherence: dict[int, float]         # mean pairwise divergence per edge

    def edge_of(self, client: int) -> int | None:
        for k, members in self.clusters.items():
            if client in members:
                return k
        return None

    @property
    def assigned(self) -> frozenset[int]:
        out: set[int] = set()
        for members in self.clusters.values():
            out |= members
        return frozenset(out)


def feasible_servers(topology: Topology, client: int) -> set[int]:
    """Edges whose round-trip latency is within the threshold (inclusive)."""
    row = topology.latency_ms[client]
    return {k for k in range(topology.n_edges) if row[k] <= topology.max_latency_ms}


def affinity(candidates, trust: np.ndarray, div: DivergenceMatrix,
             gamma: float) -> AffinityMatrix:
    """A[n, n'] = w_n * w_n' * exp(-gamma * R(n, n')) over the candidate set."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    ids = tuple(sorted(int(c) for c in candidates))
    idx = np.array(ids, dtype=np.intp)
    w = np.asarray(trust, dtype=np.float64)[idx]
    r = div.values[np.ix_(idx, idx)]
    values = np.outer(w, w) * np.exp(-gamma * r)
    return AffinityMatrix(values=values, client_ids=ids, gamma=float(gamma))


def _eigengap_k(evals: np.ndarray, cap: int) -> int:
    """Cluster count = position of the largest gap among the leading eigenvalues."""
    cap = max(1, min(cap, evals.size - 1))
    gaps = evals[1:cap + 1] - evals[:cap]
    return int(np.argmax(gaps)) + 1


def _kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Seeded k-means++ plus Lloyd iterations; ties break on lowest index."""
    n = points.shape[0]
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    for c in range(1, k):
        d2 = np.min(((points[:, None, :] - centers[None, :c, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers[c] = points[rng.integers(n)]
            continue
        centers[c] = points[rng.choice(n, p=d2 / total)]
    labels = np.full(n, -1, dtype=np.intp)
    for _ in range(100):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_labels = np.argmin(d2, axis=1)
        for c in range(k):
            # re-seat an emptied cluster on the current worst-fit point
            if not (new_labels == c).any():
                worst = int(np.argmax(d2[np.arange(n), new_labels]))
                new_labels[worst] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            sel = labels == c
            if sel.any():
                centers[c] = points[sel].mean(axis=0)
    return labels


def spectral_cluster(aff: AffinityMatrix, n_clusters: int | None = None,
                     seed: int = 0,
                     max_clusters: int = DEFAULT_MAX_CLUSTERS) -> list[set[int]]:
    """Normalized-Laplacian spectral clustering of one candidate set.

    Cluster count comes from `n_clusters` or the eigengap heuristic capped at
    `max_clusters`. Candidate sets with fewer than 2 members come back as the
    trivial singleton partition.
    """
    ids = aff.client_ids
    m = len(ids)
    if m < 2:
        return [{i} for i in ids]
    a = np.asarray(aff.values, dtype=np.float64)
    if a.shape != (m, m) or np.abs(a - a.T).max() > 1e-10 or (a < 0).any():
        raise InputError("affinity matrix must be square, symmetric, non-negative")
    deg = a.sum(axis=1)
    deg = np.where(deg > 0, deg, 1.0)
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(m) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    evals, evecs = np.linalg.eigh(lap)
    k = int(n_clusters) if n_clusters else _eigengap_k(evals, max_clusters)
    k = max(1, min(k, m))
    if k == 1:
        return [set(ids)]
    emb = evecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms > 0, norms, 1.0)
    labels = _kmeans(emb, k, seed=derive_seed("spectral-kmeans", seed, ids))
    clusters = [set(np.array(ids)[labels == c]) for c in range(k)]
    return [{int(i) for i in c} for c in clusters if c]


def merge_low_trust(clusters: list[set[int]], trust: np.ndarray,
                    fingerprints: list[Fingerprint],
                    w_min: float) -> tuple[list[set[int]], dict[int, str]]:
    """Fold clusters with mean trust below w_min into the nearest high-trust one.

    Nearest = smallest symmetric KL between pooled Gaussian centroids. Targets
    are chosen against the pre-merge high-trust centroids (single pass). With
    no high-trust cluster available every low-trust member is excluded.
    """
    w = np.asarray(trust, dtype=np.float64)
    mean_trust = [float(w[sorted(c)].mean()) for c in clusters]
    low = [i for i, wt in enumerate(mean_trust) if wt < w_min]
    high = [i for i, wt in enumerate(mean_trust) if wt >= w_min]
    if not low:
        return [set(c) for c in clusters], {}
    if not high:
        return [], {n: EXCLUDED_LOW_TRUST for c in clusters for n in c}
    centroids = {i: pooled_centroid([fingerprints[n] for n in sorted(clusters[i])])
                 for i in range(len(clusters))}
    merged = {i: set(clusters[i]) for i in high}
    for i in low:
        dists = [(sym_kl(centroids[i], centroids[j]), j) for j in high]
        _, target = min(dists)
        merged[target] |= clusters[i]
    return [merged[i] for i in high], {}


def assign_clients(topology: Topology, fingerprints: list[Fingerprint],
                   trust: np.ndarray, div: DivergenceMatrix, gamma: float,
                   w_min: float, seed: int, n_clusters: int | None = None,
                   max_clusters: int = DEFAULT_MAX_CLUSTERS) -> ClusterAssignment:
    """Run stages (i)-(iii) per edge and resolve multi-edge candidacy.

    A client surviving on several edges goes to the feasible edge with the
    lowest latency (ties to the lowest edge id). A client surviving nowhere is
    excluded: out-of-range when no edge was feasible, low-trust otherwise.
    """
    n = topology.n_clients
    if len(fingerprints) != n or len(trust) != n or div.n_clients != n:
        raise InputError("topology, fingerprints, trust and divergences disagree on N")

    survivors_by_edge: dict[int, set[int]] = {}
    for k in range(topology.n_edges):
        cand = sorted(c for c in range(n) if topology.latency_ms[c, k]
                      <= topology.max_latency_ms)
        if not cand:
            continue
        aff = affinity(cand, trust, div, gamma)
        clusters = spectral_cluster(aff, n_clusters=n_clusters, seed=seed,
                                    max_clusters=max_clusters)
        kept, _ = merge_low_trust(clusters, trust, fingerprints, w_min)
        survivors_by_edge[k] = set().union(*kept) if kept else set()

    members: dict[int, set[int]] = {k: set() for k in range(topology.n_edges)}
    excluded: dict[int, str] = {}
    for c in range(n):
        feasible = feasible_servers(topology, c)
        surviving = sorted(k for k, surv in survivors_by_edge.items() if c in surv)
        if not feasible:
            excluded[c] = EXCLUDED_OUT_OF_RANGE
        elif not surviving:
            excluded[c] = EXCLUDED_LOW_TRUST
        else:
            best = min(surviving, key=lambda k: (topology.latency_ms[c, k], k))
            members[best].add(c)

    clusters = {k: frozenset(v) for k, v in members.items() if v}
    if not clusters:
        raise ConfigError("clustering excluded every client; no run can start")

    edge_trust: dict[int, float] = {}
    edge_coherence: dict[int, float] = {}
    w = np.asarray(trust, dtype=np.float64)
    for k, group in clusters.items():
        ids = sorted(group)
        edge_trust[k] = float(w[ids].mean())
        if len(ids) < 2:
            edge_coherence[k] = 0.0
        else:
            sub = div.values[np.ix_(ids, ids)]
            m = len(ids)
            edge_coherence[k] = float(sub.sum() / (m * (m - 1)))
    return ClusterAssignment(clusters=clusters, excluded=excluded,
                             edge_trust=edge_trust, edge_coherence=edge_coherence)
