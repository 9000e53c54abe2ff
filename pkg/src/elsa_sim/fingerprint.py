"""Behavioral fingerprints: probe set, Gaussian sentence statistics, trust.

Every client runs the same public probe sequences through its full local
model and keeps the position-0 sentence embeddings. A client's fingerprint is
the empirical Gaussian (mean, covariance) of those embeddings; pairwise
behavioral distance is the symmetrized KL divergence between fingerprints,
and the trust score is exp(-(inverse confidence) - (mean divergence)).

Covariances are ridged before any factorization: the probe count is usually
smaller than the hidden dimension, so the raw covariance is singular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ConfigError, InputError, NumericError

RIDGE_FLOOR = 1e-6
RIDGE_REL = 1e-3


@dataclass(frozen=True)
class ProbeSet:
    """Shared reference inputs; identical across all clients in a run."""

    inputs: np.ndarray   # (Q, seq_len) token ids
    seed: int

    @property
    def n_probes(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Fingerprint:
    """Gaussian sentence-embedding profile of one client.

    `embeddings` is None only for pooled cluster centroids, which never feed
    trust scoring.
    """

    mean: np.ndarray                 # (D,)
    cov: np.ndarray                  # (D, D), unridged
    ridge: float
    embeddings: np.ndarray | None    # (Q, D)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def ridged_cov(self) -> np.ndarray:
        return self.cov + self.ridge * np.eye(self.dim)


@dataclass
class DivergenceMatrix:
    """Pairwise symmetric KL divergences; symmetric, zero diagonal, >= 0."""

    values: np.ndarray   # (N, N)

    @property
    def n_clients(self) -> int:
        return self.values.shape[0]

    def row_mean(self, n: int) -> float:
        """Mean divergence from client n to every other client."""
        row = np.delete(self.values[n], n)
        return float(row.mean()) if row.size else 0.0


def build_probe_set(seed: int, n_probes: int, seq_len: int, vocab_size: int) -> ProbeSet:
    """Seeded synthetic probe sequences drawn uniformly from the vocabulary."""
    if n_probes < 2:
        raise ConfigError(f"need at least 2 probes for a covariance, got {n_probes}")
    rng = np.random.default_rng(seed)
    inputs = rng.integers(0, vocab_size, size=(n_probes, seq_len), dtype=np.int64)
    return ProbeSet(inputs=inputs, seed=int(seed))


def extract_fingerprint(state: model.SplitModelState, probes: ProbeSet,
                        ridge_floor: float = RIDGE_FLOOR,
                        ridge_rel: float = RIDGE_REL) -> Fingerprint:
    """Gaussian over the client's sentence embeddings of the probe set.

    The forward uses the client's complete local model (all blocks with its
    current adapters). Covariance is the biased empirical estimate; the ridge
    is max(ridge_floor, ridge_rel * mean diagonal) so the Gaussian always has
    a valid density.
    """
    t = model.cls_embeddings(state, probes.inputs)
    if not np.isfinite(t).all():
        raise NumericError("non-finite probe embeddings")
    mean = t.mean(axis=0)
    centered = t - mean
    cov = centered.T @ centered / t.shape[0]
    ridge = max(ridge_floor, ridge_rel * float(np.trace(cov)) / t.shape[1])
    return Fingerprint(mean=mean, cov=cov, ridge=ridge, embeddings=t)


def kl_gauss(f_a: Fingerprint, f_b: Fingerprint) -> float:
    """Closed-form KL(a || b) between the ridged Gaussians.

    Computed from Cholesky factors (no explicit inverse): the trace term is
    ||Lb^-1 La||_F^2, the quadratic term ||Lb^-1 (mu_b - mu_a)||^2, and the
    log-determinants come from the factor diagonals.
    """
    if f_a.dim != f_b.dim:
        raise InputError(f"dimension mismatch: {f_a.dim} vs {f_b.dim}")
    try:
        la = np.linalg.cholesky(f_a.ridged_cov())
        lb = np.linalg.cholesky(f_b.ridged_cov())
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance not positive definite after ridging: {exc}") from exc
    x = np.linalg.solve(lb, la)
    trace_term = float((x * x).sum())
    y = np.linalg.solve(lb, f_b.mean - f_a.mean)
    quad = float(y @ y)
    logdet = 2.0 * float(np.log(np.diag(lb)).sum() - np.log(np.diag(la)).sum())
    return 0.5 * (trace_term - f_a.dim + logdet + quad)


def sym_kl(f_a: Fingerprint, f_b: Fingerprint) -> float:
    """KL(a || b) + KL(b || a); symmetric in its arguments by construction."""
    return kl_gauss(f_a, f_b) + kl_gauss(f_b, f_a)


def divergence_matrix(fingerprints: list[Fingerprint]) -> DivergenceMatrix:
    n = len(fingerprints)
    if n < 2:
        raise InputError(f"need at least 2 fingerprints, got {n}")
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = sym_kl(fingerprints[i], fingerprints[j])
            values[i, j] = values[j, i] = d
    return DivergenceMatrix(values=values)


def pooled_centroid(fingerprints: list[Fingerprint]) -> Fingerprint:
    """Cluster centroid: mean of means, mean of covariances, mean ridge."""
    if not fingerprints:
        raise InputError("cannot pool an empty cluster")
    return Fingerprint(
        mean=np.mean([f.mean for f in fingerprints], axis=0),
        cov=np.mean([f.cov for f in fingerprints], axis=0),
        ridge=float(np.mean([f.ridge for f in fingerprints])),
        embeddings=None,
    )


def trust_scores(fingerprints: list[Fingerprint], div: DivergenceMatrix,
                 normalized: bool = True,
                 divergence_weight: float = 1.0) -> np.ndarray:
    """exp(-(inverse confidence) - w * (mean divergence)) per client, in (0, 1].

    The confidence term is the mean inverse embedding norm over the probes;
    the divergence term is the client's mean row of the divergence matrix.
    With `normalized` each term is divided by its population mean first (raw
    KL values can be orders of magnitude larger than inverse norms); a term
    whose population mean is zero is left as is.

    `divergence_weight` balances the two terms after normalization; 1.0 gives
    them equal weight. Under strong label skew the divergence term's spread
    across honest clients is legitimate heterogeneity rather than
    unreliability, and down-weighting it (the pipeline default is 0.25) lets
    the confidence term identify label-noise clients.
    """
    n = len(fingerprints)
    if div.n_clients != n:
        raise InputError(f"divergence matrix is {div.n_clients} x {div.n_clients}, "
                         f"expected {n}")
    inv_conf = np.empty(n)
    for i, f in enumerate(fingerprints):
        if f.embeddings is None:
            raise InputError("trust scoring needs raw probe embeddings")
        norms = np.linalg.norm(f.embeddings, axis=1)
        if (norms == 0).any():
            raise NumericError(f"zero-norm probe embedding for client {i}")
        inv_conf[i] = float(np.mean(1.0 / norms))
    mean_div = np.array([div.row_mean(i) for i in range(n)])
    if normalized:
        if inv_conf.mean() > 0:
            inv_conf = inv_conf / inv_conf.mean()
        if mean_div.mean() > 0:
            mean_div = mean_div / mean_div.mean()
    return np.exp(-inv_conf - divergence_weight * mean_div)


def trust_score(n: int, fingerprints: list[Fingerprint], div: DivergenceMatrix,
                normalized: bool = True, divergence_weight: float = 1.0) -> float:
    """Single-client view of `trust_scores` (the terms need population means)."""
    return float(trust_scores(fingerprints, div, normalized=normalized,
                              divergence_weight=divergence_weight)[n])
