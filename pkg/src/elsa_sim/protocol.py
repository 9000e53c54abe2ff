"""End-to-end orchestration: warm-up, clustering, split rounds, aggregation.

One run: build the corpus, partition it across clients, warm each client up
locally so its behavioral fingerprint reflects its data, cluster clients onto
edge servers by trust-weighted spectral clustering, then loop global rounds.
Within a global round every cluster member performs `rounds_per_global` split
rounds against its edge (Part 1 and Part 3 + head client-side, Part 2
edge-side, boundary traffic through the configured channel), each edge
consolidates its clients' adapters weighted by data size, and the cloud
combines edge adapters with coherence/trust weights alpha_k =
mean_trust / (1 + mean_divergence), normalized. Training stops when the
flattened global adapter vector moves by at most the convergence threshold,
or at the round cap.

FedAvg baselines share the corpus, partition and model: every client (or a
uniformly random subset, trust-blind) trains the full adapter set locally and
a single server averages by data size. No split, no compression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import clustering, codec, fingerprint, metrics, model
from .clustering import ClusterAssignment, Topology
from .codec import PerturbationBasis, SketchParams
from .errors import (AggregationError, ConfigError, InputError, ProtocolError,
                     SimError)
from .metrics import CommModel, LabeledDataset, PartitionSpec, RunArtifacts
from .model import Activation, ModelConfig, SplitModelState, SplitTape
from .seeding import derive_salt, derive_seed

TRAINING_MODES = ("direct", "gaussian-noise", "sketch-only", "ssop+sketch")


@dataclass(frozen=True)
class RunConfig:
    """Everything one run depends on; a run is a pure function of this."""

    model: ModelConfig
    n_clients: int
    n_edges: int
    topology: Topology
    partition: PartitionSpec
    n_samples: int = 2000
    n_eval: int = 256
    rounds_per_global: int = 2
    lr: float = 0.05
    batch_size: int = 8
    max_global_rounds: int = 25
    conv_threshold: float = 1e-4
    warmup_steps: int = 320
    probe_count: int = 16
    refingerprint_every: int = 0
    gamma: float | None = None          # None: 1 / median off-diagonal divergence
    w_min: float = 0.08
    n_clusters: int | None = None
    max_clusters: int = clustering.DEFAULT_MAX_CLUSTERS
    normalized_trust: bool = True
    trust_divergence_weight: float = 0.25
    normalize_coherence: bool = True
    codec_mode: str = "direct"
    sketch_rows: int = 2
    sketch_buckets: int = 16
    subspace_rank: int = 8
    compress_gradients: bool = True
    aggregate_head: bool = True
    bytes_per_value: float = 4.0
    fedavg_subset_fraction: float = 0.5
    log_gradients: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds_per_global < 1:
            raise ConfigError(f"rounds_per_global must be >= 1, got "
                              f"{self.rounds_per_global}")
        if self.conv_threshold <= 0 or self.lr <= 0:
            raise ConfigError(
                f"conv_threshold and lr must be > 0: conv_threshold="
                f"{self.conv_threshold}, lr={self.lr}"
            )
        if self.batch_size < 1 or self.max_global_rounds < 1:
            raise ConfigError("batch_size and max_global_rounds must be >= 1")
        if self.codec_mode not in TRAINING_MODES:
            raise ConfigError(f"codec_mode must be one of {TRAINING_MODES}, "
                              f"got {self.codec_mode!r}")
        if self.topology.n_clients != self.n_clients or \
                self.topology.n_edges != self.n_edges:
            raise ConfigError(
                f"topology is {self.topology.n_clients} x {self.topology.n_edges}, "
                f"config says {self.n_clients} x {self.n_edges}"
            )
        if not (0.0 < self.fedavg_subset_fraction <= 1.0):
            raise ConfigError("fedavg_subset_fraction must be in (0, 1]")

    @property
    def sketch_active(self) -> bool:
        return self.codec_mode in ("sketch-only", "ssop+sketch")

    @property
    def wire_ratio(self) -> float:
        """Effective compression ratio of the activation wire."""
        if self.sketch_active:
            return codec.compression_ratio(self.model.hidden_dim, self.sketch_rows,
                                           self.sketch_buckets)
        return 1.0


@dataclass
class RoundRecord:
    round_index: int
    train_loss: float
    eval_accuracy: float
    theta_delta: float            # nan on the first comparable-free round
    comm_bytes: float             # closed-form cost model for this round
    comm_time_s: float            # straggler time for this round
    elapsed_s: float              # cumulative simulated communication time
    bytes_activations: float      # counted on the wire
    bytes_gradients: float


@dataclass
class TrainingLog:
    records: list[RoundRecord]
    converged: bool
    method: str
    artifacts: RunArtifacts | None = None

    @property
    def n_rounds(self) -> int:
        return len(self.records)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].eval_accuracy if self.records else float("nan")


class TrainingChannel:
    """Per-client boundary transport: perturbation, sketching, byte counting.

    Activations go client->edge (optionally rotated, then sketched) and
    edge->client (sketched); boundary gradients retrace both hops, sketched
    when gradient compression is on. The client undoes the rotation on its
    returned gradient (transpose multiply), which keeps the chain rule exact;
    the edge never sees the rotation. `invert_at_edge` is an ablation oracle
    that hands the edge the un-rotated activation instead.
    """

    def __init__(self, client_id: int, hidden_dim: int, bytes_per_value: float,
                 perturb: bool = False, sketch: bool = False,
                 sketch_rows: int = 2, sketch_buckets: int = 16,
                 noise_std: float = 0.0, compress_gradients: bool = True,
                 basis: PerturbationBasis | None = None, salt: bytes = b"",
                 invert_at_edge: bool = False, seed: int = 0) -> None:
        if perturb and basis is None:
            raise ConfigError("perturbing channel needs a perturbation basis")
        self.client_id = client_id
        self.hidden_dim = hidden_dim
        self.bytes_per_value = float(bytes_per_value)
        self.perturb = perturb
        self.sketch = sketch
        self.sketch_rows = sketch_rows
        self.sketch_buckets = sketch_buckets
        self.noise_std = noise_std
        self.compress_gradients = compress_gradients
        self.basis = basis
        self.salt = salt
        self.invert_at_edge = invert_at_edge
        self.params: SketchParams | None = None
        self._noise_rng = np.random.default_rng(
            derive_seed("train-noise", seed, client_id))
        self.set_round(0)

    @classmethod
    def from_mode(cls, mode: str, **kwargs) -> "TrainingChannel":
        if mode not in TRAINING_MODES:
            raise ConfigError(f"unknown channel mode {mode!r}")
        return cls(perturb=(mode == "ssop+sketch"),
                   sketch=(mode in ("sketch-only", "ssop+sketch")),
                   noise_std=codec.GAUSS_NOISE_STD if mode == "gaussian-noise" else 0.0,
                   **kwargs)

    def set_round(self, round_idx: int) -> None:
        if self.sketch:
            self.params = SketchParams(self.sketch_rows, self.sketch_buckets,
                                       self.hidden_dim, self.salt, self.client_id,
                                       round_idx)

    def _wire_bytes(self, values: np.ndarray) -> float:
        n_vectors = values.size // self.hidden_dim
        per_vector = (self.sketch_rows * self.sketch_buckets if self.sketch
                      else self.hidden_dim)
        return n_vectors * per_vector * self.bytes_per_value

    def _transport(self, values: np.ndarray) -> np.ndarray:
        if self.sketch:
            assert self.params is not None
            values = codec.sketch_roundtrip(values, self.params)
        if self.noise_std > 0:
            values = values + self._noise_rng.normal(0.0, self.noise_std,
                                                     size=values.shape)
        return values

    def uplink(self, act: Activation) -> tuple[Activation, float]:
        values = act.values
        if self.perturb:
            assert self.basis is not None
            values = values @ self.basis.q.T
        out = self._transport(values)
        if self.perturb and self.invert_at_edge:
            out = out @ self.basis.q
        return Activation(out, act.mask.copy()), self._wire_bytes(values)

    def downlink(self, act: Activation) -> tuple[Activation, float]:
        return (Activation(self._transport(act.values), act.mask.copy()),
                self._wire_bytes(act.values))

    def _grad_hop(self, grad: np.ndarray) -> tuple[np.ndarray, float]:
        if self.sketch and self.compress_gradients:
            assert self.params is not None
            return codec.sketch_roundtrip(grad, self.params), self._wire_bytes(grad)
        n_vectors = grad.size // self.hidden_dim
        return grad, n_vectors * self.hidden_dim * self.bytes_per_value

    def grad_to_edge(self, grad: np.ndarray) -> tuple[np.ndarray, float]:
        return self._grad_hop(grad)

    def grad_to_client(self, grad: np.ndarray) -> tuple[np.ndarray, float]:
        out, nbytes = self._grad_hop(grad)
        if self.perturb and not self.invert_at_edge:
            out = out @ self.basis.q
        return out, nbytes


@dataclass
class ClientRuntime:
    client_id: int
    state: SplitModelState
    shard: LabeledDataset
    batch_rng: np.random.Generator
    channel: TrainingChannel | None = None

    def sample_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.shard)
        idx = self.batch_rng.choice(n, size=min(batch_size, n), replace=False)
        return self.shard.tokens[idx], self.shard.labels[idx]


@dataclass
class EdgeRuntime:
    edge_id: int
    state: SplitModelState
    members: tuple[int, ...]


# -- single operations --------------------------------------------------------


def local_split_round(client: ClientRuntime, edge: EdgeRuntime,
                      batch_tokens: np.ndarray, batch_labels: np.ndarray,
                      lr: float) -> tuple[float, dict[str, float]]:
    """One split forward/backward plus one SGD step on each side.

    Returns the batch loss and the wire bytes of all four boundary transfers.
    """
    if client.channel is None:
        raise ProtocolError(f"client {client.client_id} has no channel "
                            f"(not assigned to an edge)")
    ch = client.channel
    tape = SplitTape()
    act_up = model.forward_part1(client.state, batch_tokens, tape=tape)
    act_up_rx, b_up = ch.uplink(act_up)
    act_down = model.forward_part2(edge.state, act_up_rx, tape=tape)
    act_down_rx, b_down = ch.downlink(act_down)
    _, loss = model.forward_part3_loss(client.state, act_down_rx, batch_labels,
                                       tape=tape)
    g3, grad_h_down = tape.backward_part3()
    grad_h_down_rx, b_gup = ch.grad_to_edge(grad_h_down)
    g2, grad_h_up = tape.backward_part2(grad_h_down_rx)
    grad_h_up_rx, b_gdown = ch.grad_to_client(grad_h_up)
    g1 = tape.backward_part1(grad_h_up_rx)
    model.sgd_step(client.state, {**g1, **g3}, lr)
    model.sgd_step(edge.state, g2, lr)
    return loss, {"up": b_up, "down": b_down, "grad_up": b_gup, "grad_down": b_gdown}


def edge_consolidate(edge: EdgeRuntime, clients: list[ClientRuntime],
                     include_head: bool = True) -> dict[str, np.ndarray]:
    """Edge adapter package: data-size-weighted client parts 1/3 (+ head),
    plus the edge's own shared Part 2 adapters."""
    if not clients:
        raise InputError(f"edge {edge.edge_id} has no clients to consolidate")
    sizes = np.array([len(c.shard) for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    out: dict[str, np.ndarray] = {}
    for w, c in zip(weights, clients):
        for name, value in c.state.snapshot(parts=(1, 3),
                                            include_head=include_head).items():
            out[name] = out.get(name, 0.0) + w * value
    out.update(edge.state.snapshot(parts=(2,), include_head=False))
    return out


def compute_alpha(coherence: float, mean_trust: float) -> float:
    """Edge aggregation weight: mean trust shrunk by intra-cluster divergence."""
    if coherence < 0:
        raise InputError(f"coherence must be >= 0, got {coherence}")
    if mean_trust <= 0:
        raise InputError(f"mean trust must be > 0, got {mean_trust}")
    return mean_trust / (1.0 + coherence)


def normalize_alphas(alphas: dict[int, float]) -> dict[int, float]:
    total = sum(alphas.values())
    if not alphas or total <= 0:
        raise AggregationError("all aggregation weights are zero")
    return {k: a / total for k, a in alphas.items()}


def global_aggregate(theta_by_edge: dict[int, dict[str, np.ndarray]],
                     alphas: dict[int, float]) -> dict[str, np.ndarray]:
    """Element-wise convex combination of the per-edge adapter packages."""
    if set(theta_by_edge) != set(alphas):
        raise AggregationError("edges in theta and alphas disagree")
    keys = None
    out: dict[str, np.ndarray] = {}
    for k in sorted(theta_by_edge):
        theta = theta_by_edge[k]
        if keys is None:
            keys = set(theta)
            out = {name: np.zeros_like(np.asarray(v, dtype=np.float64))
                   for name, v in theta.items()}
        if set(theta) != keys:
            raise AggregationError("adapter names differ across edges")
        for name, value in theta.items():
            if value.shape != out[name].shape:
                raise AggregationError(f"shape mismatch for {name!r}")
            out[name] += alphas[k] * value
    return out


def _flatten(theta: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(theta[k], dtype=np.float64).ravel()
                           for k in sorted(theta)])


def check_convergence(theta: dict[str, np.ndarray],
                      theta_prev: dict[str, np.ndarray] | None,
                      threshold: float) -> bool:
    """True iff the flattened adapter vector moved by at most the threshold.
    The first round has no predecessor and never converges."""
    if theta_prev is None:
        return False
    return float(np.linalg.norm(_flatten(theta) - _flatten(theta_prev))) <= threshold


# -- shared run scaffolding ----------------------------------------------------


@dataclass
class _RunData:
    train: LabeledDataset
    eval_set: LabeledDataset
    shards: list[LabeledDataset]
    init_state: SplitModelState


@dataclass
class ClusteringResult:
    """Outputs of the pre-training stage: profiles, scores and the mapping."""

    assignment: ClusterAssignment
    fingerprints: list[fingerprint.Fingerprint]
    divergences: fingerprint.DivergenceMatrix
    trust: np.ndarray
    gamma: float
    data: _RunData


def build_probes(seed: int, n_probes: int, cfg: ModelConfig) -> fingerprint.ProbeSet:
    """Task-like probe set: sequences planted with markers of mixed classes.

    Uniform random token sequences barely excite the class features that local
    fine-tuning shapes, which leaves fingerprints insensitive to behavior at
    this scale. Probes carrying markers of several classes (the analog of
    probing with general benchmark text) make every usefully-trained client
    respond on every probe, whatever its label skew.
    """
    if n_probes < 2:
        raise ConfigError(f"need at least 2 probes, got {n_probes}")
    rng = np.random.default_rng(seed)
    mu, v, c = cfg.seq_len, cfg.vocab_size, cfg.n_classes
    toks = rng.integers(c, v - 1, size=(n_probes, mu), dtype=np.int64)
    toks[:, 0] = model.sentence_slot_token(v)
    n_markers = max(1, round(metrics.MARKER_FRACTION * (mu - 1)))
    for i in range(n_probes):
        pos = 1 + rng.choice(mu - 1, size=n_markers, replace=False)
        toks[i, pos] = rng.integers(0, c, size=n_markers)
    return fingerprint.ProbeSet(inputs=toks, seed=int(seed))


def _prepare_data(config: RunConfig,
                  shards: list[LabeledDataset] | None) -> _RunData:
    cfg = config.model
    corpus = metrics.make_synthetic_corpus(
        derive_seed("corpus", config.seed), cfg.vocab_size, cfg.seq_len,
        cfg.n_classes, config.n_samples + config.n_eval)
    train = corpus.subset(np.arange(config.n_samples))
    eval_set = corpus.subset(np.arange(config.n_samples,
                                       config.n_samples + config.n_eval))
    if shards is None:
        shards = metrics.partition_data(train, config.n_clients, config.n_edges,
                                        config.partition)
    init_state = model.init_model(cfg, derive_seed("model", config.seed))
    return _RunData(train, eval_set, shards, init_state)


def _pooled(shards: list[LabeledDataset]) -> LabeledDataset:
    return LabeledDataset(np.concatenate([s.tokens for s in shards]),
                          np.concatenate([s.labels for s in shards]))


def _eval_accuracy(scratch: SplitModelState, theta: dict[str, np.ndarray],
                   eval_set: LabeledDataset) -> float:
    scratch.load_snapshot(theta)
    pred = model.predict(scratch, eval_set.tokens)
    return float(np.mean(pred == eval_set.labels))


def _auto_gamma(div: fingerprint.DivergenceMatrix) -> float:
    off = div.values[~np.eye(div.n_clients, dtype=bool)]
    med = float(np.median(off))
    return 1.0 / med if med > 0 else 1.0


# -- full runs -----------------------------------------------------------------


def fingerprint_and_cluster(config: RunConfig,
                            shards: list[LabeledDataset] | None = None
                            ) -> ClusteringResult:
    """Warm-up, fingerprint extraction, trust scoring and client assignment."""
    data = _prepare_data(config, shards)
    cfg = config.model
    probes = build_probes(derive_seed("probe", config.seed), config.probe_count,
                          cfg)

    # local warm-up: fingerprints must reflect each client's own data. All
    # clients advance in one batched graph; small shards fill their batch by
    # sampling with replacement.
    trainer = model.MultiClientTrainer(data.init_state, config.n_clients)
    rngs = [np.random.default_rng(derive_seed("warmup", config.seed, n))
            for n in range(config.n_clients)]
    b = config.batch_size
    for _ in range(config.warmup_steps):
        toks = np.empty((config.n_clients, b, cfg.seq_len), dtype=np.int64)
        labels = np.empty((config.n_clients, b), dtype=np.int64)
        for n, (rng, shard) in enumerate(zip(rngs, data.shards)):
            idx = rng.choice(len(shard), size=b, replace=len(shard) < b)
            toks[n] = shard.tokens[idx]
            labels[n] = shard.labels[idx]
        trainer.step(toks, labels, config.lr)
    fps = [fingerprint.extract_fingerprint(trainer.client_state(n), probes)
           for n in range(config.n_clients)]

    div = fingerprint.divergence_matrix(fps)
    trust = fingerprint.trust_scores(
        fps, div, normalized=config.normalized_trust,
        divergence_weight=config.trust_divergence_weight)
    gamma = config.gamma if config.gamma is not None else _auto_gamma(div)
    try:
        assignment = clustering.assign_clients(
            config.topology, fps, trust, div, gamma, config.w_min,
            seed=derive_seed("cluster", config.seed),
            n_clusters=config.n_clusters, max_clusters=config.max_clusters)
    except ConfigError as exc:
        raise ProtocolError(f"clustering left no participants: {exc}") from exc
    return ClusteringResult(assignment=assignment, fingerprints=fps,
                            divergences=div, trust=trust, gamma=gamma, data=data)


def run_elsa(config: RunConfig,
             shards: list[LabeledDataset] | None = None) -> TrainingLog:
    """Fingerprint, cluster, then trust-weighted hierarchical split training."""
    stage = fingerprint_and_cluster(config, shards)
    data = stage.data
    cfg = config.model
    fps, div, trust = stage.fingerprints, stage.divergences, stage.trust
    assignment = stage.assignment
    probes = build_probes(derive_seed("probe", config.seed), config.probe_count,
                          cfg)

    # split deployment starts from the shared init; warm-up was for profiling
    salt = derive_salt("ssop-salt", config.seed)
    clients: dict[int, ClientRuntime] = {}
    for n in sorted(assignment.assigned):
        basis = None
        if config.codec_mode == "ssop+sketch":
            emb = fps[n].embeddings
            assert emb is not None
            basis = codec.build_basis(emb, config.subspace_rank, salt, n)
        channel = TrainingChannel.from_mode(
            config.codec_mode, client_id=n, hidden_dim=cfg.hidden_dim,
            bytes_per_value=config.bytes_per_value,
            sketch_rows=config.sketch_rows, sketch_buckets=config.sketch_buckets,
            compress_gradients=config.compress_gradients, basis=basis, salt=salt,
            seed=config.seed)
        clients[n] = ClientRuntime(
            client_id=n, state=data.init_state.clone(), shard=data.shards[n],
            batch_rng=np.random.default_rng(derive_seed("batch", config.seed, n)),
            channel=channel)
    edges = {k: EdgeRuntime(edge_id=k, state=data.init_state.clone(),
                            members=tuple(sorted(members)))
             for k, members in sorted(assignment.clusters.items())}

    lora_bytes = data.init_state.n_adapter_values(
        (1, 2, 3), include_head=config.aggregate_head) * config.bytes_per_value
    comm = CommModel(bytes_per_value=config.bytes_per_value, seq_len=cfg.seq_len,
                     ratio=config.wire_ratio,
                     bandwidth_bytes_per_s=config.topology.bandwidth_bytes_per_s,
                     batch_size=config.batch_size, lora_bytes=lora_bytes)
    round_bytes_model = metrics.comm_cost(comm, config.n_edges, assignment.clusters,
                                          config.rounds_per_global, cfg.hidden_dim)
    per_client_time = metrics.comm_time(comm, config.rounds_per_global,
                                        config.batch_size, cfg.hidden_dim)

    scratch = data.init_state.clone()
    artifacts = RunArtifacts(model_cfg=cfg, model_seed=data.init_state.seed,
                             pooled=_pooled(data.shards)) \
        if config.log_gradients else None

    records: list[RoundRecord] = []
    theta_prev: dict[str, np.ndarray] | None = None
    converged = False
    elapsed = 0.0
    try:
        for g in range(1, config.max_global_rounds + 1):
            if config.refingerprint_every > 0 and g > 1 \
                    and (g - 1) % config.refingerprint_every == 0:
                for n, client in clients.items():
                    fps[n] = fingerprint.extract_fingerprint(client.state, probes)
                div = fingerprint.divergence_matrix(fps)
                trust = fingerprint.trust_scores(
                    fps, div, normalized=config.normalized_trust,
                    divergence_weight=config.trust_divergence_weight)
                assignment = clustering.ClusterAssignment(
                    clusters=assignment.clusters, excluded=assignment.excluded,
                    edge_trust={k: float(trust[sorted(m)].mean())
                                for k, m in assignment.clusters.items()},
                    edge_coherence={
                        k: _mean_pairwise(div, sorted(m))
                        for k, m in assignment.clusters.items()})

            losses: list[float] = []
            bytes_act = 0.0
            bytes_grad = 0.0
            for n in clients:
                clients[n].channel.set_round(g)
            for k, edge in edges.items():
                order = list(edge.members)
                np.random.default_rng(
                    derive_seed("order", config.seed, g, k)).shuffle(order)
                for n in order:
                    client = clients[n]
                    for _ in range(config.rounds_per_global):
                        toks, labels = client.sample_batch(config.batch_size)
                        loss, nbytes = local_split_round(client, edge, toks,
                                                         labels, config.lr)
                        losses.append(loss)
                        bytes_act += nbytes["up"] + nbytes["down"]
                        bytes_grad += nbytes["grad_up"] + nbytes["grad_down"]

            theta_by_edge = {k: edge_consolidate(edge, [clients[n] for n in
                                                        edge.members],
                                                 include_head=config.aggregate_head)
                             for k, edge in edges.items()}
            coherence = _aggregation_coherence(assignment, edges,
                                               config.normalize_coherence)
            alphas = normalize_alphas(
                {k: compute_alpha(coherence[k], assignment.edge_trust[k])
                 for k in edges})
            theta_g = global_aggregate(theta_by_edge, alphas)
            for client in clients.values():
                client.state.load_snapshot(theta_g)
            for edge in edges.values():
                edge.state.load_snapshot(theta_g)

            eval_theta = dict(theta_g)
            if not config.aggregate_head:
                # heads stay personal; evaluate with their data-size-weighted mean
                sizes = np.array([len(clients[n].shard) for n in sorted(clients)],
                                 dtype=np.float64)
                w = sizes / sizes.sum()
                eval_theta["head.w"] = sum(
                    wi * clients[n].state.snapshot((), True)["head.w"]
                    for wi, n in zip(w, sorted(clients)))
            acc = _eval_accuracy(scratch, eval_theta, data.eval_set)

            delta = (float(np.linalg.norm(_flatten(theta_g) - _flatten(theta_prev)))
                     if theta_prev is not None else float("nan"))
            elapsed += per_client_time
            records.append(RoundRecord(
                round_index=g, train_loss=float(np.mean(losses)),
                eval_accuracy=acc, theta_delta=delta,
                comm_bytes=round_bytes_model, comm_time_s=per_client_time,
                elapsed_s=elapsed, bytes_activations=bytes_act,
                bytes_gradients=bytes_grad))
            if artifacts is not None:
                artifacts.theta_history.append(
                    {k: v.copy() for k, v in theta_g.items()})
            converged = check_convergence(theta_g, theta_prev,
                                          config.conv_threshold)
            theta_prev = theta_g
            if converged:
                break
    except SimError as exc:
        exc.partial_records = records  # type: ignore[attr-defined]
        raise
    return TrainingLog(records=records, converged=converged, method="elsa",
                       artifacts=artifacts)


def _mean_pairwise(div: fingerprint.DivergenceMatrix, ids: list[int]) -> float:
    if len(ids) < 2:
        return 0.0
    sub = div.values[np.ix_(ids, ids)]
    m = len(ids)
    return float(sub.sum() / (m * (m - 1)))


def _aggregation_coherence(assignment: ClusterAssignment,
                           edges: dict[int, EdgeRuntime],
                           normalize: bool) -> dict[int, float]:
    """Coherence values feeding the aggregation weights.

    Raw mean pairwise divergences vary over orders of magnitude, which turns
    1/(1 + coherence) into a winner-take-all weight favoring singleton
    clusters (whose internal divergence is identically zero). Normalizing by
    the mean over multi-member edges keeps the factor a modest modifier, and
    singletons carry no internal evidence so they sit at the neutral value.
    """
    raw = {k: assignment.edge_coherence[k] for k in edges}
    if not normalize:
        return raw
    multi = [raw[k] for k in edges if len(assignment.clusters[k]) >= 2]
    scale = float(np.mean(multi)) if multi else 0.0
    if scale <= 0:
        return {k: 0.0 for k in edges}
    return {k: (raw[k] / scale if len(assignment.clusters[k]) >= 2 else 1.0)
            for k in edges}


def run_fedavg(config: RunConfig, random_clients: bool = False,
               shards: list[LabeledDataset] | None = None) -> TrainingLog:
    """Single-server data-size-weighted adapter averaging over all clients, or
    over a uniformly random trust-blind subset when `random_clients` is set."""
    data = _prepare_data(config, shards)
    cfg = config.model
    states = {n: data.init_state.clone() for n in range(config.n_clients)}
    batch_rngs = {n: np.random.default_rng(derive_seed("batch", config.seed, n))
                  for n in range(config.n_clients)}
    subset_rng = np.random.default_rng(derive_seed("fedavg-subset", config.seed))
    scratch = data.init_state.clone()

    theta = data.init_state.snapshot((1, 2, 3), include_head=True)
    lora_bytes = data.init_state.n_adapter_values((1, 2, 3), True) \
        * config.bytes_per_value
    per_client_time = 2.0 * lora_bytes / config.topology.bandwidth_bytes_per_s
    artifacts = RunArtifacts(model_cfg=cfg, model_seed=data.init_state.seed,
                             pooled=_pooled(data.shards)) \
        if config.log_gradients else None

    records: list[RoundRecord] = []
    theta_prev: dict[str, np.ndarray] | None = None
    converged = False
    elapsed = 0.0
    method = "fedavg-random" if random_clients else "fedavg"
    for g in range(1, config.max_global_rounds + 1):
        if random_clients:
            size = max(1, round(config.fedavg_subset_fraction * config.n_clients))
            members = sorted(subset_rng.choice(config.n_clients, size=size,
                                               replace=False).tolist())
        else:
            members = list(range(config.n_clients))

        losses = []
        snaps = []
        sizes = []
        for n in members:
            st = states[n]
            st.load_snapshot(theta)
            shard = data.shards[n]
            for _ in range(config.rounds_per_global):
                idx = batch_rngs[n].choice(len(shard),
                                           size=min(config.batch_size, len(shard)),
                                           replace=False)
                losses.append(model.monolithic_step(st, shard.tokens[idx],
                                                    shard.labels[idx], config.lr))
            snaps.append(st.snapshot((1, 2, 3), True))
            sizes.append(float(len(shard)))
        weights = np.array(sizes) / sum(sizes)
        theta = {name: sum(w * s[name] for w, s in zip(weights, snaps))
                 for name in snaps[0]}

        acc = _eval_accuracy(scratch, theta, data.eval_set)
        delta = (float(np.linalg.norm(_flatten(theta) - _flatten(theta_prev)))
                 if theta_prev is not None else float("nan"))
        # adapter up+download per participant; no activation traffic off-split
        round_bytes = 2.0 * len(members) * lora_bytes
        elapsed += per_client_time
        records.append(RoundRecord(
            round_index=g, train_loss=float(np.mean(losses)), eval_accuracy=acc,
            theta_delta=delta, comm_bytes=round_bytes,
            comm_time_s=per_client_time, elapsed_s=elapsed,
            bytes_activations=0.0, bytes_gradients=0.0))
        if artifacts is not None:
            artifacts.theta_history.append({k: v.copy() for k, v in theta.items()})
        converged = check_convergence(theta, theta_prev, config.conv_threshold)
        theta_prev = theta
        if converged:
            break
    return TrainingLog(records=records, converged=converged, method=method,
                       artifacts=artifacts)
