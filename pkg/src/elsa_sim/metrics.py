"""Synthetic data, heterogeneous partitioning, comm cost model, privacy eval,
and the convergence-bound calculator.

The corpus stands in for real text: each sequence carries a handful of
class-marker tokens (ids below n_classes) amid uniform noise tokens, and the
label is the marker class, so a majority-marker rule solves the clean task
perfectly while the toy model has to learn it from position-0 features.

Partitioning reproduces the experimental heterogeneity recipe: samples are
pooled per edge group, client shares within a pool grow linearly with the
client index (quantity skew), per-client class mixes are Dirichlet draws
(label skew), and poisoned clients get a fraction of labels flipped to a
uniformly random wrong class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .codec import PerturbationBasis, SketchParams, channel_forward
from .errors import ConfigError, InputError, UnavailableError
from .model import Activation, ModelConfig, SplitModelState
from .seeding import derive_seed

MARKER_FRACTION = 0.375
_PARTITION_RETRIES = 10


@dataclass
class LabeledDataset:
    """Token sequences with one class label each; source_idx tracks provenance."""

    tokens: np.ndarray        # (n, seq_len) int64
    labels: np.ndarray        # (n,) int64
    source_idx: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or self.labels.shape != (self.tokens.shape[0],):
            raise InputError(
                f"tokens {self.tokens.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        src = self.source_idx[idx] if self.source_idx is not None else idx.copy()
        return LabeledDataset(self.tokens[idx].copy(), self.labels[idx].copy(), src)


@dataclass(frozen=True)
class PartitionSpec:
    """Heterogeneity recipe: Dirichlet label skew, index-linear quantity skew
    (client n's share of its edge pool is proportional to n + 1), poisoning."""

    alpha: float
    poisoned: frozenset[int] = frozenset()
    flip_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"dirichlet alpha must be > 0, got {self.alpha}")
        if not (0.0 <= self.flip_fraction <= 1.0):
            raise ConfigError(f"flip_fraction must be in [0, 1], got {self.flip_fraction}")
        object.__setattr__(self, "poisoned", frozenset(int(p) for p in self.poisoned))


@dataclass(frozen=True)
class CommModel:
    """Constants of the transport cost model."""

    bytes_per_value: float = 4.0   # wire size per transmitted value (FP32)
    seq_len: int = 16
    ratio: float = 1.0             # compression ratio rho
    bandwidth_bytes_per_s: float = 6.25e6
    batch_size: int = 8
    lora_bytes: float = 0.0        # per-edge adapter upload size

    def __post_init__(self) -> None:
        if min(self.bytes_per_value, self.seq_len, self.ratio,
               self.bandwidth_bytes_per_s, self.batch_size) <= 0:
            raise ConfigError("all comm-model constants must be positive")
        if self.lora_bytes < 0:
            raise ConfigError("lora_bytes must be >= 0")


@dataclass
class PrivacyReport:
    """Reconstruction and token-identification metrics for one channel mode."""

    cos_sim: float
    mse: float
    token_acc: float
    mode: str
    ratio: float | None = None
    subspace_rank: int | None = None
    n_positions: int = 0
    n_skipped: int = 0


@dataclass(frozen=True)
class BoundInputs:
    """Inputs to the stationarity bound: smoothness, initial gap, local noise
    (SGD variance plus smoothness-scaled codec error), non-IID bias, rounds."""

    lipschitz: float
    gap: float
    sigma_local_sq: float
    sigma2_sq: float
    n_rounds: int

    def __post_init__(self) -> None:
        if min(self.lipschitz, self.gap, self.sigma_local_sq, self.sigma2_sq) < 0:
            raise InputError("bound inputs must be >= 0")
        if self.n_rounds < 1:
            raise InputError(f"n_rounds must be >= 1, got {self.n_rounds}")


# -- synthetic corpus ---------------------------------------------------------


def make_synthetic_corpus(seed: int, vocab_size: int, seq_len: int, n_classes: int,
                          n_samples: int,
                          marker_fraction: float = MARKER_FRACTION) -> LabeledDataset:
    """Class-marker sequences: label c plants the marker token c at a fixed
    number of random positions; every other position is a noise token.

    Position 0 always carries the sentence-slot token (highest vocab id), the
    read-out position for classification and fingerprinting; markers and noise
    occupy positions 1 onward.
    """
    if n_classes > vocab_size // 4:
        raise ConfigError(
            f"n_classes must be <= vocab_size / 4: n_classes={n_classes}, "
            f"vocab_size={vocab_size}"
        )
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    rng.shuffle(labels)
    # noise ids in [n_classes, vocab_size - 1); the top id is the sentence slot
    tokens = rng.integers(n_classes, vocab_size - 1, size=(n_samples, seq_len),
                          dtype=np.int64)
    tokens[:, 0] = model.sentence_slot_token(vocab_size)
    n_markers = max(1, round(marker_fraction * (seq_len - 1)))
    for i in range(n_samples):
        pos = 1 + rng.choice(seq_len - 1, size=n_markers, replace=False)
        tokens[i, pos] = labels[i]
    return LabeledDataset(tokens, labels, np.arange(n_samples, dtype=np.intp))


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights`, exact sum."""
    raw = weights / weights.sum() * total
    out = np.floor(raw).astype(np.int64)
    short = total - int(out.sum())
    if short > 0:
        order = np.argsort(-(raw - out), kind="stable")
        out[order[:short]] += 1
    return out


def _try_partition(dataset: LabeledDataset, n_clients: int, n_edges: int,
                   spec: PartitionSpec, seed: int) -> list[LabeledDataset] | None:
    rng = np.random.default_rng(seed)
    n_classes = int(dataset.labels.max()) + 1
    total = len(dataset)

    # edge pools: clients grouped round-robin, pool sizes as even as possible
    pool_sizes = _largest_remainder(np.ones(n_edges), total)
    group_of = np.arange(n_clients) % n_edges
    sizes = np.zeros(n_clients, dtype=np.int64)
    for k in range(n_edges):
        members = np.where(group_of == k)[0]
        if members.size == 0:
            continue
        sizes[members] = _largest_remainder((members + 1).astype(np.float64),
                                            int(pool_sizes[k]))
    if (sizes == 0).any():
        return None

    proportions = rng.dirichlet(np.full(n_classes, spec.alpha), size=n_clients)
    class_pools = [list(rng.permutation(np.where(dataset.labels == c)[0]))
                   for c in range(n_classes)]

    shards_idx: list[list[int]] = [[] for _ in range(n_clients)]
    shortfall = np.zeros(n_clients, dtype=np.int64)
    for n in range(n_clients):
        want = _largest_remainder(proportions[n] + 1e-12, int(sizes[n]))
        for c in range(n_classes):
            take = min(int(want[c]), len(class_pools[c]))
            shards_idx[n].extend(class_pools[c][:take])
            class_pools[c] = class_pools[c][take:]
            shortfall[n] += int(want[c]) - take
    leftovers = list(rng.permutation([i for pool in class_pools for i in pool]))
    for n in range(n_clients):
        take, leftovers = leftovers[:int(shortfall[n])], leftovers[int(shortfall[n]):]
        shards_idx[n].extend(take)
    if any(len(s) == 0 for s in shards_idx):
        return None

    shards = [dataset.subset(np.array(sorted(idx), dtype=np.intp)) for idx in shards_idx]
    for n in spec.poisoned:
        if not (0 <= n < n_clients):
            raise ConfigError(f"poisoned client id {n} out of range [0, {n_clients})")
        shard = shards[n]
        n_flip = int(round(spec.flip_fraction * len(shard)))
        flip_at = rng.choice(len(shard), size=n_flip, replace=False)
        for i in flip_at:
            wrong = [c for c in range(n_classes) if c != shard.labels[i]]
            shard.labels[i] = wrong[rng.integers(len(wrong))]
    return shards


def partition_data(dataset: LabeledDataset, n_clients: int, n_edges: int,
                   spec: PartitionSpec) -> list[LabeledDataset]:
    """Quantity-skewed, Dirichlet-label-skewed shards; conservation is exact.

    An attempt that leaves any client empty is re-drawn with an incremented
    sub-seed, a bounded number of times.
    """
    if n_clients < 1 or n_edges < 1:
        raise ConfigError(f"need n_clients >= 1 and n_edges >= 1, got "
                          f"{n_clients}, {n_edges}")
    for attempt in range(_PARTITION_RETRIES):
        shards = _try_partition(dataset, n_clients, n_edges, spec,
                                seed=derive_seed("partition", spec.seed, attempt))
        if shards is not None:
            return shards
    raise ConfigError(
        f"could not build non-empty shards for {n_clients} clients from "
        f"{len(dataset)} samples after {_PARTITION_RETRIES} attempts"
    )


# -- communication model ------------------------------------------------------


def comm_cost(comm: CommModel, n_edges: int, clusters: dict[int, frozenset[int]],
              rounds_per_global: int, hidden_dim: int,
              batch_of: dict[int, int] | None = None) -> float:
    """Bytes of one global round: activation exchanges both ways for every
    member's batches plus one adapter upload per edge.

    (2 * rho_rounds * zeta * mu * D / rho) * sum_k sum_{n in N_k} B_n
    + K * lora_bytes
    """
    total_batch = 0.0
    for members in clusters.values():
        for n in members:
            total_batch += batch_of[n] if batch_of is not None else comm.batch_size
    per_value = (2.0 * rounds_per_global * comm.bytes_per_value * comm.seq_len
                 * hidden_dim / comm.ratio)
    return per_value * total_batch + n_edges * comm.lora_bytes


def comm_time(comm: CommModel, rounds_per_global: int, batch_size: int,
              hidden_dim: int) -> float:
    """Seconds one client spends on the wire per global round."""
    return (2.0 * rounds_per_global * batch_size * comm.seq_len
            * comm.bytes_per_value * hidden_dim / comm.ratio) / comm.bandwidth_bytes_per_s


def total_time(n_rounds: int, per_client_times) -> float:
    """Wall-clock model until convergence: rounds times the straggler."""
    times = list(per_client_times)
    if not times:
        raise InputError("total_time needs at least one per-client time")
    if n_rounds < 0:
        raise InputError(f"n_rounds must be >= 0, got {n_rounds}")
    return n_rounds * max(times)


# -- privacy evaluation -------------------------------------------------------


def attacker_token_table(public_state: SplitModelState) -> np.ndarray:
    """Nearest-neighbour reference for the token attack: each vocabulary token
    forwarded alone through the public frozen Part 1, position-0 vector kept."""
    v = public_state.cfg.vocab_size
    tokens = np.zeros((v, 1), dtype=np.int64)
    tokens[:, 0] = np.arange(v)
    act = model.forward_part1(public_state, tokens)
    return act.values[:, 0, :].copy()


def privacy_eval(h_orig: Activation, h_observed: Activation, tokens: np.ndarray,
                 attacker_table: np.ndarray, mode: str = "",
                 ratio: float | None = None,
                 subspace_rank: int | None = None) -> PrivacyReport:
    """Reconstruction similarity plus token recovery over valid positions.

    cos_sim and mse compare observed rows against the originals; token_acc is
    the fraction of positions whose argmax-cosine match in the attacker table
    is the true token. Zero-norm rows are skipped and counted.
    """
    if h_orig.values.shape != h_observed.values.shape:
        raise InputError(f"shape mismatch: {h_orig.values.shape} vs "
                         f"{h_observed.values.shape}")
    d = h_orig.hidden_dim
    orig = h_orig.values.reshape(-1, d)
    obs = h_observed.values.reshape(-1, d)
    valid = h_orig.mask.reshape(-1)
    toks = np.asarray(tokens).reshape(-1)
    if toks.shape[0] != orig.shape[0]:
        raise InputError(f"tokens cover {toks.shape[0]} positions, activations "
                         f"{orig.shape[0]}")
    orig, obs, toks = orig[valid], obs[valid], toks[valid]

    norms_o = np.linalg.norm(orig, axis=1)
    norms_b = np.linalg.norm(obs, axis=1)
    keep = (norms_o > 0) & (norms_b > 0)
    n_skipped = int((~keep).sum())
    orig, obs = orig[keep], obs[keep]
    toks = toks[keep]
    if orig.shape[0] == 0:
        raise InputError("no valid positions to evaluate")

    cos = float(np.mean(np.sum(orig * obs, axis=1)
                        / (norms_o[keep] * norms_b[keep])))
    mse = float(np.mean((orig - obs) ** 2))
    table = np.asarray(attacker_table, dtype=np.float64)
    table_n = table / np.maximum(np.linalg.norm(table, axis=1, keepdims=True), 1e-30)
    obs_n = obs / norms_b[keep][:, None]
    guesses = np.argmax(obs_n @ table_n.T, axis=1)
    token_acc = float(np.mean(guesses == toks))
    return PrivacyReport(cos_sim=cos, mse=mse, token_acc=token_acc, mode=mode,
                         ratio=ratio, subspace_rank=subspace_rank,
                         n_positions=int(orig.shape[0]), n_skipped=n_skipped)


def run_privacy_attack(public_state: SplitModelState, sequences: LabeledDataset,
                       mode: str, basis: PerturbationBasis | None,
                       params: SketchParams | None) -> PrivacyReport:
    """One Table-style row: victim Part 1 activations through the channel, then
    both attacks against the observation."""
    h_orig = model.forward_part1(public_state, sequences.tokens)
    h_obs = channel_forward(h_orig, basis, params, mode)
    table = attacker_token_table(public_state)
    return privacy_eval(h_orig, h_obs, sequences.tokens, table, mode=mode,
                        ratio=params.ratio if params is not None else None,
                        subspace_rank=basis.rank if basis is not None else None)


# -- convergence bound --------------------------------------------------------


def theorem_bound(b: BoundInputs) -> float:
    """4 L gap / sqrt(G) + sigma_local^2 / sqrt(G) + sigma_2^2."""
    root = np.sqrt(float(b.n_rounds))
    return 4.0 * b.lipschitz * b.gap / root + b.sigma_local_sq / root + b.sigma2_sq


# -- empirical gradient-norm trace --------------------------------------------


@dataclass
class RunArtifacts:
    """Per-round adapter snapshots plus what is needed to re-evaluate them."""

    model_cfg: ModelConfig
    model_seed: int
    theta_history: list[dict[str, np.ndarray]] = field(default_factory=list)
    pooled: LabeledDataset | None = None


def grad_norm_trace(artifacts: RunArtifacts | None) -> np.ndarray:
    """Squared norm of the full-batch pooled gradient at each logged round."""
    if artifacts is None or not artifacts.theta_history or artifacts.pooled is None:
        raise UnavailableError("gradient logging was disabled for this run")
    state = model.init_model(artifacts.model_cfg, artifacts.model_seed)
    out = np.empty(len(artifacts.theta_history))
    for i, snap in enumerate(artifacts.theta_history):
        state.load_snapshot(snap)
        _, grads = model.monolithic_grads(state, artifacts.pooled.tokens,
                                          artifacts.pooled.labels)
        out[i] = float(sum(np.sum(g * g) for g in grads.values()))
    return out
