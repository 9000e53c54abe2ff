"""Subspace orthogonal perturbation and count-sketch compression.

The privacy transform rotates each hidden vector only inside the top-r
singular subspace of recent sentence embeddings: Q = U V U^T + (I - U U^T)
with U the top-r right singular vectors and V a client-seeded random
orthogonal matrix. Q is orthogonal, so gradients flow through it exactly
(transpose on the way back) and the orthogonal complement is left untouched.

Compression stacks a count sketch on top: Y hash rows of Z buckets, bucket
and sign hashes derived from a keyed 64-bit avalanche mixer so both ends of
the channel can regenerate them from (salt, client, round, row). Decode takes
the per-coordinate median over rows (mean of the central pair for even Y).
The compression ratio is rho = D / (Y * Z).

Wire format of one sketched vector (used for byte accounting, never for real
transport): header of five little-endian uint32 {Y, Z, D, round, client},
then Y*Z values row-major at `bytes_per_value` bytes each. Byte counts in the
cost model exclude the header.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DecodeError, InputError
from .model import Activation
from .seeding import derive_seed

CHANNEL_MODES = ("direct", "gaussian-noise", "sketch-only", "ssop+sketch")
GAUSS_NOISE_STD = 0.5  # variance 0.25

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over uint64 lanes (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        x = x ^ (x >> np.uint64(30))
        x = x * _MIX1
        x = x ^ (x >> np.uint64(27))
        x = x * _MIX2
        x = x ^ (x >> np.uint64(31))
    return x


def _row_seed(salt: bytes, client_id: int, round_idx: int, row: int, tag: str) -> np.uint64:
    raw = b"%b|%d|%d|%d|%s" % (salt, client_id, round_idx, row, tag.encode())
    return np.uint64(int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little"))


@dataclass(eq=False)
class SketchParams:
    """Sketch geometry plus the derived bucket/sign tables.

    The tables are a pure function of (salt, client_id, round_idx) so the
    receiving edge regenerates them without any extra exchange.
    """

    n_rows: int          # Y, number of hash rows
    n_buckets: int       # Z, buckets per row
    dim: int             # D, vector dimension being sketched
    salt: bytes
    client_id: int
    round_idx: int = 0
    bucket_of: np.ndarray = field(init=False, repr=False)
    sign_of: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_rows < 1 or self.n_buckets < 1 or self.dim < 1:
            raise ConfigError(
                f"sketch geometry must be positive: n_rows={self.n_rows}, "
                f"n_buckets={self.n_buckets}, dim={self.dim}"
            )
        coords = np.arange(self.dim, dtype=np.uint64)
        buckets = np.empty((self.n_rows, self.dim), dtype=np.int64)
        signs = np.empty((self.n_rows, self.dim), dtype=np.float64)
        with np.errstate(over="ignore"):
            for j in range(self.n_rows):
                sb = _row_seed(self.salt, self.client_id, self.round_idx, j, "bucket")
                ss = _row_seed(self.salt, self.client_id, self.round_idx, j, "sign")
                buckets[j] = (_mix64(sb + (coords + np.uint64(1)) * _GOLDEN)
                              % np.uint64(self.n_buckets)).astype(np.int64)
                signs[j] = np.where(
                    _mix64(ss + (coords + np.uint64(1)) * _GOLDEN) & np.uint64(1), 1.0, -1.0)
        self.bucket_of = buckets
        self.sign_of = signs

    @property
    def ratio(self) -> float:
        return compression_ratio(self.dim, self.n_rows, self.n_buckets)

    def matches(self, other: "SketchParams") -> bool:
        return (self.n_rows == other.n_rows and self.n_buckets == other.n_buckets
                and self.dim == other.dim and self.salt == other.salt
                and self.client_id == other.client_id and self.round_idx == other.round_idx)


@dataclass
class Sketch:
    values: np.ndarray   # (Y, Z)
    params: SketchParams


@dataclass
class PerturbationBasis:
    """Per-client rotation material: subspace U, in-subspace rotation V, full Q."""

    u: np.ndarray        # (D, r), orthonormal columns
    v: np.ndarray        # (r, r), orthogonal
    q: np.ndarray        # (D, D), orthogonal; identity on the complement of span(U)
    rank: int
    salt: bytes
    client_id: int
    degenerate: bool = False


def compression_ratio(dim: int, n_rows: int, n_buckets: int) -> float:
    """rho = D / (Y * Z)."""
    if dim <= 0 or n_rows <= 0 or n_buckets <= 0:
        raise InputError(f"all sketch sizes must be positive: {dim}, {n_rows}, {n_buckets}")
    return dim / (n_rows * n_buckets)


# -- subspace perturbation ---------------------------------------------------


def fit_subspace(samples: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    """Top-`rank` right singular vectors of the sample matrix (Q x D).

    Column signs follow a fixed convention (largest-magnitude entry positive).
    When `rank` exceeds the numerical rank of the samples the basis is padded
    with the deterministic orthonormal completion from the full SVD and the
    second return value flags the fit as degenerate.
    """
    j = np.asarray(samples, dtype=np.float64)
    if j.ndim != 2:
        raise InputError(f"sample matrix must be 2-D, got shape {j.shape}")
    if not np.isfinite(j).all():
        raise InputError("sample matrix contains non-finite values")
    dim = j.shape[1]
    if not (1 <= rank <= dim):
        raise InputError(f"rank must be in [1, {dim}], got {rank}")
    _, s, vt = np.linalg.svd(j, full_matrices=True)
    u = vt[:rank].T.copy()
    for c in range(rank):
        lead = np.argmax(np.abs(u[:, c]))
        if u[lead, c] < 0:
            u[:, c] = -u[:, c]
    effective = int(np.sum(s > (s[0] * 1e-12))) if s.size and s[0] > 0 else 0
    return u, rank > effective


def gen_rotation(salt: bytes, client_id: int, rank: int) -> np.ndarray:
    """Client-specific random orthogonal matrix: QR of a seeded Gaussian draw.

    The seed is Hash(salt || client_id); the R-diagonal sign fix makes the
    factorization unique, so the draw is deterministic and Haar-distributed.
    """
    if rank < 1:
        raise InputError(f"rank must be >= 1, got {rank}")
    seed = derive_seed("ssop-rotation", salt, client_id)
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((rank, rank))
    q, r = np.linalg.qr(phi)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def build_perturbation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Q = U V U^T + (I - U U^T): rotate inside span(U), fix the complement."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dim, rank = u.shape
    if v.shape != (rank, rank):
        raise InputError(f"rotation shape {v.shape} does not match rank {rank}")
    if np.abs(u.T @ u - np.eye(rank)).max() > 1e-8:
        raise InputError("subspace basis is not orthonormal")
    if np.abs(v.T @ v - np.eye(rank)).max() > 1e-8:
        raise InputError("rotation is not orthogonal")
    uut = u @ u.T
    return u @ v @ u.T + np.eye(dim) - uut


def build_basis(samples: np.ndarray, rank: int, salt: bytes,
                client_id: int) -> PerturbationBasis:
    u, degenerate = fit_subspace(samples, rank)
    v = gen_rotation(salt, client_id, rank)
    q = build_perturbation(u, v)
    return PerturbationBasis(u=u, v=v, q=q, rank=rank, salt=salt,
                             client_id=client_id, degenerate=degenerate)


def perturb(h: Activation, q: np.ndarray) -> Activation:
    """Apply the rotation to every token-position vector; mask unchanged."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (h.hidden_dim, h.hidden_dim):
        raise InputError(f"perturbation shape {q.shape} does not match hidden "
                         f"dim {h.hidden_dim}")
    return Activation(h.values @ q.T, h.mask.copy())


# -- count sketch -------------------------------------------------------------


def _encode_rows(rows: np.ndarray, params: SketchParams) -> np.ndarray:
    """(m, D) -> (m, Y, Z) sketches under shared hash tables."""
    m = rows.shape[0]
    y, z, d = params.n_rows, params.n_buckets, params.dim
    contrib = rows[:, None, :] * params.sign_of[None, :, :]          # (m, Y, D)
    flat_idx = ((np.arange(m)[:, None, None] * y
                 + np.arange(y)[None, :, None]) * z
                + params.bucket_of[None, :, :])
    out = np.zeros(m * y * z, dtype=np.float64)
    np.add.at(out, flat_idx.ravel(), contrib.ravel())
    return out.reshape(m, y, z)


def _decode_rows(sk_values: np.ndarray, params: SketchParams) -> np.ndarray:
    """(m, Y, Z) -> (m, D): per-coordinate median across the Y rows."""
    rows = np.arange(params.n_rows)
    est = params.sign_of[None, :, :] * sk_values[:, rows[:, None], params.bucket_of]
    return np.median(est, axis=1)


def sketch_encode(h: np.ndarray, params: SketchParams) -> Sketch:
    """Row j, bucket u accumulates sign_j(d) * h_d over coordinates hashing to u."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.dim,):
        raise InputError(f"vector shape {h.shape} does not match sketch dim {params.dim}")
    return Sketch(_encode_rows(h[None, :], params)[0], params)


def sketch_decode(sk: Sketch, dim: int) -> np.ndarray:
    """Median-of-rows estimate of each coordinate (mean of central pair for even Y)."""
    if dim != sk.params.dim:
        raise DecodeError(f"decode dim {dim} does not match sketch dim {sk.params.dim}")
    if sk.values.shape != (sk.params.n_rows, sk.params.n_buckets):
        raise DecodeError(f"sketch values shape {sk.values.shape} does not match params")
    return _decode_rows(sk.values[None, :, :], sk.params)[0]


def sketch_roundtrip(values: np.ndarray, params: SketchParams) -> np.ndarray:
    """Encode + decode every trailing-dim vector of an array; shape preserved."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape[-1] != params.dim:
        raise InputError(f"trailing dim {arr.shape[-1]} does not match sketch "
                         f"dim {params.dim}")
    flat = arr.reshape(-1, params.dim)
    return _decode_rows(_encode_rows(flat, params), params).reshape(arr.shape)


def sketch_to_bytes(sk: Sketch, bytes_per_value: int = 4) -> bytes:
    """Documented wire layout; header excluded from all byte accounting."""
    p = sk.params
    header = b"".join(int(x).to_bytes(4, "little") for x in
                      (p.n_rows, p.n_buckets, p.dim, p.round_idx, p.client_id))
    payload = np.ascontiguousarray(sk.values, dtype=np.float64).tobytes()
    if bytes_per_value == 4:
        payload = np.ascontiguousarray(sk.values, dtype=np.float32).tobytes()
    return header + payload


# -- composed channel ---------------------------------------------------------


def channel_forward(h: Activation, basis: PerturbationBasis | None,
                    params: SketchParams | None, mode: str) -> Activation:
    """What the receiving party observes after the mode's transform.

    direct: identity. gaussian-noise: seeded N(0, 0.25) added per element.
    sketch-only: count-sketch encode + decode. ssop+sketch: rotate inside the
    semantic subspace, then sketch.
    """
    if mode == "direct":
        return h.copy()
    if mode == "gaussian-noise":
        if params is None:
            raise InputError("gaussian-noise mode needs sketch params for seed material")
        rng = np.random.default_rng(
            derive_seed("chan-noise", params.salt, params.client_id, params.round_idx))
        return Activation(h.values + rng.normal(0.0, GAUSS_NOISE_STD, size=h.values.shape),
                          h.mask.copy())
    if mode == "sketch-only":
        if params is None:
            raise InputError("sketch-only mode needs sketch params")
        return Activation(sketch_roundtrip(h.values, params), h.mask.copy())
    if mode == "ssop+sketch":
        if basis is None or params is None:
            raise InputError("ssop+sketch mode needs a basis and sketch params")
        return Activation(sketch_roundtrip(perturb(h, basis.q).values, params),
                          h.mask.copy())
    raise ConfigError(f"unknown channel mode {mode!r}; expected one of {CHANNEL_MODES}")
