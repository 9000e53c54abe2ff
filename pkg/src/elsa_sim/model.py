"""Tiny split transformer: frozen backbone, trainable low-rank adapters, task head.

A pre-layer-norm transformer encoder over a toy vocabulary, classifying each
sequence from the position-0 ("CLS analog") hidden state. The blocks are
partitioned into three parts: Part 1 (blocks 1..p) and Part 3 (the final o
blocks plus the head) run on a client, Part 2 (the middle q blocks) runs on an
edge server. Forward activations and backward boundary gradients cross the two
part boundaries; `SplitTape` records one split forward so the boundary
gradients can be routed (and compressed) by the caller before each backward
stage runs.

Trainable parameters are the per-block (A, B) adapter pairs on the query and
value projections, plus the head. B starts at zero, so a fresh model computes
exactly the frozen backbone function.

Init draws token embeddings with a geometrically decaying per-dimension scale
and projects positional/attention/MLP contributions onto the same profile, so
hidden states concentrate energy in the leading dimensions the way trained
transformer embeddings do. The subspace-perturbation codec relies on that
anisotropy; see codec.py.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError, UsageError

# Matmuls here are tiny; thread synchronization costs more than it buys, and
# a fixed thread count keeps reductions bitwise reproducible.
torch.set_num_threads(1)

LN_EPS = 1e-5
MLP_RATIO = 4

# Per-dimension scale profile: dim d is drawn at scale exp(-d / EMBED_DECAY).
EMBED_DECAY = 3.0
POS_SCALE = 0.05
ATTN_OUT_SCALE = 0.35
MLP_OUT_SCALE = 0.35
HEAD_INIT_SCALE = 0.1

# Toy vocabulary layout: [class markers | noise tokens | sentence slot].
#
# The highest vocabulary id is the sentence-slot token: datasets place it at
# position 0, and its embedding row is kept near zero so the position-0 state
# is dominated by attention-mixed sequence content rather than a fixed
# backbone vector. Sentence-embedding norms then track how strongly a model
# has learned to amplify its inputs, which the trust score's confidence term
# measures.
#
# The first n_classes ids are the class markers; their embeddings share a
# common component on top of their class-specific draws, the way task words
# share linguistic structure. Training on consistent labels amplifies that
# shared direction coherently, so usefully-trained models drift together in
# fingerprint space while label-noise models do not.
SENTENCE_SLOT_SCALE = 0.05
MARKER_SHARED_WEIGHT = 1.0


def sentence_slot_token(vocab_size: int) -> int:
    return vocab_size - 1

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int
    hidden_dim: int
    n_blocks: int
    n_heads: int
    lora_rank: int
    split: tuple[int, int, int]
    n_classes: int
    dtype: str = "float64"

    def __post_init__(self) -> None:
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        p, q, o = self.split if len(self.split) == 3 else (0, 0, 0)
        if len(self.split) != 3 or p < 1 or q < 1 or o < 1:
            raise ConfigError(f"split must be three counts >= 1, got split={self.split}")
        if p + q + o != self.n_blocks:
            raise ConfigError(
                f"split must sum to n_blocks: split={self.split} sums to {p + q + o}, "
                f"n_blocks={self.n_blocks}"
            )
        if not (1 <= self.lora_rank < self.hidden_dim):
            raise ConfigError(
                f"lora_rank must be in [1, hidden_dim): lora_rank={self.lora_rank}, "
                f"hidden_dim={self.hidden_dim}"
            )
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim must be divisible by n_heads: hidden_dim={self.hidden_dim}, "
                f"n_heads={self.n_heads}"
            )
        if self.vocab_size < 2 or self.seq_len < 1 or self.n_classes < 2:
            raise ConfigError(
                f"vocab_size>=2, seq_len>=1, n_classes>=2 required: vocab_size="
                f"{self.vocab_size}, seq_len={self.seq_len}, n_classes={self.n_classes}"
            )
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}: dtype={self.dtype}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def part_blocks(self, part: int) -> range:
        """Zero-based block indices owned by part 1, 2 or 3."""
        p, q, o = self.split
        if part == 1:
            return range(0, p)
        if part == 2:
            return range(p, p + q)
        if part == 3:
            return range(p + q, p + q + o)
        raise InputError(f"part must be 1, 2 or 3, got {part}")


@dataclass
class Activation:
    """Boundary hidden state: values (..., seq_len, hidden) plus validity mask.

    The mask marks non-padding positions; it travels with the values through
    every channel transform untouched. A leading batch axis is optional.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim not in (2, 3):
            raise InputError(f"activation values must be 2-D or 3-D, got {self.values.shape}")
        if self.mask.shape != self.values.shape[:-1]:
            raise InputError(
                f"mask shape {self.mask.shape} does not match values {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise NumericError("activation contains non-finite values")

    @property
    def hidden_dim(self) -> int:
        return self.values.shape[-1]

    def copy(self) -> "Activation":
        return Activation(self.values.copy(), self.mask.copy())


@dataclass
class BlockWeights:
    """Frozen backbone tensors of one transformer block."""

    ln1_g: torch.Tensor
    ln1_b: torch.Tensor
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    ln2_g: torch.Tensor
    ln2_b: torch.Tensor
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor

    def tensors(self) -> list[torch.Tensor]:
        return [self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo,
                self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2]


@dataclass
class BlockAdapters:
    """Trainable (A, B) pairs on the query and value projections of one block."""

    a_q: torch.Tensor
    b_q: torch.Tensor
    a_v: torch.Tensor
    b_v: torch.Tensor


@dataclass
class SplitModelState:
    """Full model owned by one party; parts select which blocks it evaluates."""

    cfg: ModelConfig
    seed: int
    emb: torch.Tensor
    pos: torch.Tensor
    blocks: list[BlockWeights]
    adapters: list[BlockAdapters]
    head_w: torch.Tensor

    # -- parameter plumbing ------------------------------------------------

    def adapter_items(self, parts: tuple[int, ...] = (1, 2, 3),
                      include_head: bool = True) -> list[tuple[str, torch.Tensor]]:
        """Canonically ordered (name, tensor) pairs of trainable parameters."""
        items: list[tuple[str, torch.Tensor]] = []
        for part in sorted(parts):
            for i in self.cfg.part_blocks(part):
                ad = self.adapters[i]
                items.append((f"block{i:02d}.q.a", ad.a_q))
                items.append((f"block{i:02d}.q.b", ad.b_q))
                items.append((f"block{i:02d}.v.a", ad.a_v))
                items.append((f"block{i:02d}.v.b", ad.b_v))
        if include_head:
            items.append(("head.w", self.head_w))
        return items

    def snapshot(self, parts: tuple[int, ...] = (1, 2, 3),
                 include_head: bool = True) -> dict[str, np.ndarray]:
        return {name: t.detach().numpy().copy() for name, t in
                self.adapter_items(parts, include_head)}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        by_name = dict(self.adapter_items())
        for name, value in snap.items():
            if name not in by_name:
                raise InputError(f"unknown adapter name {name!r}")
            with torch.no_grad():
                by_name[name].copy_(torch.as_tensor(value, dtype=by_name[name].dtype))

    def adapter_vector(self, parts: tuple[int, ...] = (1, 2, 3),
                       include_head: bool = True) -> np.ndarray:
        return np.concatenate([t.detach().numpy().ravel()
                               for _, t in self.adapter_items(parts, include_head)])

    def n_adapter_values(self, parts: tuple[int, ...] = (1, 2, 3),
                         include_head: bool = True) -> int:
        return sum(t.numel() for _, t in self.adapter_items(parts, include_head))

    def clone(self) -> "SplitModelState":
        """New state with fresh adapter/head tensors; backbone tensors shared."""
        ads = [BlockAdapters(*(t.detach().clone().requires_grad_(True)
                               for t in (a.a_q, a.b_q, a.a_v, a.b_v)))
               for a in self.adapters]
        return replace(self, adapters=ads,
                       head_w=self.head_w.detach().clone().requires_grad_(True))

    def backbone_digest(self) -> str:
        """Byte-level digest of every frozen tensor; must never change."""
        h = hashlib.blake2b(digest_size=16)
        for t in [self.emb, self.pos]:
            h.update(t.detach().numpy().tobytes())
        for blk in self.blocks:
            for t in blk.tensors():
                h.update(t.detach().numpy().tobytes())
        return h.hexdigest()


def init_model(cfg: ModelConfig, seed: int) -> SplitModelState:
    """Deterministic weights for (cfg, seed); adapters start with B = 0.

    The zero B factors make the adapter contribution vanish, so a fresh model
    reproduces the frozen backbone output exactly.
    """
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    dt = cfg.torch_dtype
    d, v, mu = cfg.hidden_dim, cfg.vocab_size, cfg.seq_len

    def randn(*shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dt)

    profile = torch.exp(-torch.arange(d, dtype=torch.float64) / EMBED_DECAY).to(dt)
    emb = randn(v, d) * profile
    # class markers: equal parts shared "markerness" direction and a
    # class-specific direction. The specifics are orthogonalized against the
    # shared direction and each other: the profile concentrates energy in few
    # dimensions, so raw draws can come out nearly collinear for unlucky
    # seeds, which would make the classes indistinguishable.
    shared = randn(d) * profile
    basis = [shared / torch.linalg.norm(shared)]
    marker_norm = torch.linalg.norm(profile)
    for c in range(cfg.n_classes):
        vec = randn(d) * profile
        for b in basis:
            vec = vec - (b @ vec) * b
        vec = vec / torch.linalg.norm(vec)
        basis.append(vec)
        emb[c] = (MARKER_SHARED_WEIGHT * basis[0] + vec) \
            / math.sqrt(1.0 + MARKER_SHARED_WEIGHT ** 2) * marker_norm
    emb[sentence_slot_token(v)] *= SENTENCE_SLOT_SCALE
    pos = randn(mu, d) * profile * POS_SCALE

    blocks: list[BlockWeights] = []
    adapters: list[BlockAdapters] = []
    r = cfg.lora_rank
    a_span = 1.0 / math.sqrt(d)
    for _ in range(cfg.n_blocks):
        blocks.append(BlockWeights(
            ln1_g=torch.ones(d, dtype=dt), ln1_b=torch.zeros(d, dtype=dt),
            wq=randn(d, d) / math.sqrt(d),
            wk=randn(d, d) / math.sqrt(d),
            wv=randn(d, d) / math.sqrt(d),
            wo=randn(d, d) / math.sqrt(d) * profile * ATTN_OUT_SCALE,
            ln2_g=torch.ones(d, dtype=dt), ln2_b=torch.zeros(d, dtype=dt),
            w1=randn(d, MLP_RATIO * d) / math.sqrt(d),
            b1=torch.zeros(MLP_RATIO * d, dtype=dt),
            w2=randn(MLP_RATIO * d, d) / math.sqrt(MLP_RATIO * d) * profile * MLP_OUT_SCALE,
            b2=torch.zeros(d, dtype=dt),
        ))
        adapters.append(BlockAdapters(
            a_q=((torch.rand(r, d, generator=gen, dtype=torch.float64) * 2 - 1)
                 * a_span).to(dt).requires_grad_(True),
            b_q=torch.zeros(d, r, dtype=dt, requires_grad=True),
            a_v=((torch.rand(r, d, generator=gen, dtype=torch.float64) * 2 - 1)
                 * a_span).to(dt).requires_grad_(True),
            b_v=torch.zeros(d, r, dtype=dt, requires_grad=True),
        ))

    state = SplitModelState(
        cfg=cfg, seed=int(seed), emb=emb, pos=pos, blocks=blocks, adapters=adapters,
        head_w=(randn(d, cfg.n_classes)
                * (HEAD_INIT_SCALE / math.sqrt(d))).requires_grad_(True),
    )
    for t in [state.emb, state.pos]:
        t.requires_grad_(False)
    return state


# -- forward internals -----------------------------------------------------


def _block_forward(x: torch.Tensor, mask: torch.Tensor, blk: BlockWeights,
                   ad: BlockAdapters, n_heads: int) -> torch.Tensor:
    """One pre-LN block. Heads split the feature axis into (n_heads, head_dim),
    head_dim fastest. Masked positions are excluded as attention keys only."""
    bsz, mu, d = x.shape
    dh = d // n_heads

    h = F.layer_norm(x, (d,), blk.ln1_g, blk.ln1_b, eps=LN_EPS)
    q = h @ blk.wq + (h @ ad.a_q.T) @ ad.b_q.T
    k = h @ blk.wk
    v = h @ blk.wv + (h @ ad.a_v.T) @ ad.b_v.T
    q = q.view(bsz, mu, n_heads, dh).transpose(1, 2)
    k = k.view(bsz, mu, n_heads, dh).transpose(1, 2)
    v = v.view(bsz, mu, n_heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    att = F.softmax(scores, dim=-1)
    mixed = (att @ v).transpose(1, 2).reshape(bsz, mu, d)
    x = x + mixed @ blk.wo

    h2 = F.layer_norm(x, (d,), blk.ln2_g, blk.ln2_b, eps=LN_EPS)
    x = x + F.gelu(h2 @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
    return x


def _run_blocks(state: SplitModelState, x: torch.Tensor, mask: torch.Tensor,
                block_range: range) -> torch.Tensor:
    for i in block_range:
        x = _block_forward(x, mask, state.blocks[i], state.adapters[i], state.cfg.n_heads)
    return x


def _prepare_tokens(state: SplitModelState,
                    tokens: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Validate, pad to seq_len, return (tokens, mask) batched plus squeeze flag."""
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr, squeeze = arr[None, :], True
    elif arr.ndim == 2:
        squeeze = False
    else:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError("tokens must be integer ids")
    mu = state.cfg.seq_len
    if arr.shape[1] > mu:
        raise InputError(f"sequence length {arr.shape[1]} exceeds seq_len {mu}")
    if arr.size and (arr.min() < 0 or arr.max() >= state.cfg.vocab_size):
        raise InputError(
            f"token id out of range [0, {state.cfg.vocab_size}): "
            f"min={arr.min()}, max={arr.max()}"
        )
    mask = np.zeros((arr.shape[0], mu), dtype=bool)
    mask[:, :arr.shape[1]] = True
    padded = np.zeros((arr.shape[0], mu), dtype=np.int64)
    padded[:, :arr.shape[1]] = arr
    return torch.from_numpy(padded), torch.from_numpy(mask), squeeze


def _to_activation(t: torch.Tensor, mask: torch.Tensor, squeeze: bool) -> Activation:
    values = t.detach().numpy().copy()
    m = mask.numpy().copy()
    if squeeze:
        values, m = values[0], m[0]
    return Activation(values, m)


def _from_activation(act: Activation, state: SplitModelState,
                     requires_grad: bool) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if act.values.shape[-2] != state.cfg.seq_len or act.hidden_dim != state.cfg.hidden_dim:
        raise InputError(
            f"activation shape {act.values.shape} does not match "
            f"(seq_len={state.cfg.seq_len}, hidden_dim={state.cfg.hidden_dim})"
        )
    squeeze = act.values.ndim == 2
    values = act.values[None] if squeeze else act.values
    mask = act.mask[None] if squeeze else act.mask
    t = torch.as_tensor(values, dtype=state.cfg.torch_dtype)
    if requires_grad:
        t.requires_grad_(True)
    return t, torch.from_numpy(np.ascontiguousarray(mask)), squeeze


class SplitTape:
    """Records one split forward so backward can run stage by stage.

    backward_part3 -> (part-3 + head gradients, boundary grad at the Part 3
    input); backward_part2 consumes the routed boundary grad and yields the
    Part 2 gradients plus the grad at the Part 2 input; backward_part1 closes
    the chain. Each stage may run once.
    """

    def __init__(self) -> None:
        self._p1_out: torch.Tensor | None = None
        self._p1_state: SplitModelState | None = None
        self._p2_in: torch.Tensor | None = None
        self._p2_out: torch.Tensor | None = None
        self._p2_state: SplitModelState | None = None
        self._p3_in: torch.Tensor | None = None
        self._p3_state: SplitModelState | None = None
        self._loss: torch.Tensor | None = None
        self._done = {1: False, 2: False, 3: False}

    # recording hooks used by the forward ops
    def record_part1(self, out: torch.Tensor, state: SplitModelState) -> None:
        self._p1_out, self._p1_state = out, state

    def record_part2(self, inp: torch.Tensor, out: torch.Tensor,
                     state: SplitModelState) -> None:
        self._p2_in, self._p2_out, self._p2_state = inp, out, state

    def record_part3(self, inp: torch.Tensor, loss: torch.Tensor,
                     state: SplitModelState) -> None:
        self._p3_in, self._loss, self._p3_state = inp, loss, state

    def _grads(self, output: torch.Tensor, items: list[tuple[str, torch.Tensor]],
               boundary: torch.Tensor | None,
               grad_output: torch.Tensor | None) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        tensors = [t for _, t in items] + ([boundary] if boundary is not None else [])
        grads = torch.autograd.grad(output, tensors, grad_outputs=grad_output)
        named = {name: g.detach().numpy().copy() for (name, _), g in zip(items, grads)}
        bgrad = grads[-1].detach().numpy().copy() if boundary is not None else None
        return named, bgrad

    def backward_part3(self) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._loss is None or self._p3_state is None:
            raise UsageError("backward_part3 before forward_part3_loss")
        if self._done[3]:
            raise UsageError("backward_part3 already ran on this tape")
        self._done[3] = True
        items = self._p3_state.adapter_items(parts=(3,), include_head=True)
        named, bgrad = self._grads(self._loss, items, self._p3_in, None)
        assert bgrad is not None
        return named, bgrad

    def backward_part2(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._p2_out is None or self._p2_state is None:
            raise UsageError("backward_part2 before forward_part2")
        if self._done[2]:
            raise UsageError("backward_part2 already ran on this tape")
        self._done[2] = True
        go = torch.as_tensor(np.asarray(grad_out), dtype=self._p2_out.dtype)
        if go.shape != self._p2_out.shape:
            go = go.reshape(self._p2_out.shape)
        items = self._p2_state.adapter_items(parts=(2,), include_head=False)
        named, bgrad = self._grads(self._p2_out, items, self._p2_in, go)
        assert bgrad is not None
        return named, bgrad

    def backward_part1(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        if self._p1_out is None or self._p1_state is None:
            raise UsageError("backward_part1 before forward_part1")
        if self._done[1]:
            raise UsageError("backward_part1 already ran on this tape")
        self._done[1] = True
        go = torch.as_tensor(np.asarray(grad_out), dtype=self._p1_out.dtype)
        if go.shape != self._p1_out.shape:
            go = go.reshape(self._p1_out.shape)
        items = self._p1_state.adapter_items(parts=(1,), include_head=False)
        named, _ = self._grads(self._p1_out, items, None, go)
        return named


@dataclass
class BackwardResult:
    """All trainable gradients plus the two boundary gradients."""

    grads: dict[str, np.ndarray]
    grad_part3_input: np.ndarray
    grad_part2_input: np.ndarray


# -- public forward/backward ops --------------------------------------------


def forward_part1(state: SplitModelState, tokens: np.ndarray,
                  tape: SplitTape | None = None) -> Activation:
    """Blocks 1..p on embedded tokens; output is the uplink boundary state."""
    toks, mask, squeeze = _prepare_tokens(state, tokens)
    x = state.emb[toks] + state.pos[None, :, :]
    x = _run_blocks(state, x, mask, state.cfg.part_blocks(1))
    if tape is not None:
        tape.record_part1(x, state)
    return _to_activation(x, mask, squeeze)


def forward_part2(state: SplitModelState, h_in: Activation,
                  tape: SplitTape | None = None) -> Activation:
    """The middle q blocks, evaluated on whatever the channel delivered."""
    x_in, mask, squeeze = _from_activation(act=h_in, state=state, requires_grad=tape is not None)
    x = _run_blocks(state, x_in, mask, state.cfg.part_blocks(2))
    if tape is not None:
        tape.record_part2(x_in, x, state)
    return _to_activation(x, mask, squeeze)


def forward_part3_loss(state: SplitModelState, h_in: Activation, labels: np.ndarray,
                       tape: SplitTape | None = None) -> tuple[np.ndarray, float]:
    """Final o blocks plus head; returns (logits, mean cross-entropy loss)."""
    x_in, mask, squeeze = _from_activation(act=h_in, state=state, requires_grad=tape is not None)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (x_in.shape[0],):
        raise InputError(f"labels shape {y.shape} does not match batch {x_in.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= state.cfg.n_classes):
        raise InputError(f"label out of range [0, {state.cfg.n_classes})")
    x = _run_blocks(state, x_in, mask, state.cfg.part_blocks(3))
    logits = _head_logits(state, x)
    loss = F.cross_entropy(logits, torch.from_numpy(y.astype(np.int64)))
    if tape is not None:
        tape.record_part3(x_in, loss, state)
    out = logits.detach().numpy().copy()
    return (out[0] if squeeze else out), float(loss.detach())


def backward_split(tape: SplitTape) -> BackwardResult:
    """Full backward with identity boundary routing (the uncompressed path)."""
    g3, grad_h_down = tape.backward_part3()
    g2, grad_h_up = tape.backward_part2(grad_h_down)
    g1 = tape.backward_part1(grad_h_up)
    return BackwardResult(grads={**g1, **g2, **g3},
                          grad_part3_input=grad_h_down,
                          grad_part2_input=grad_h_up)


def sgd_step(state: SplitModelState, grads: dict[str, np.ndarray], lr: float) -> None:
    """Plain SGD on the named adapter/head tensors present in `grads`."""
    by_name = dict(state.adapter_items())
    with torch.no_grad():
        for name, g in grads.items():
            if name not in by_name:
                raise InputError(f"unknown parameter name {name!r}")
            t = by_name[name]
            t.sub_(torch.as_tensor(g, dtype=t.dtype), alpha=lr)


# -- monolithic (unsplit) paths ---------------------------------------------


def _head_logits(state: SplitModelState, x: torch.Tensor) -> torch.Tensor:
    # bias-free head on the raw position-0 state: confident predictions then
    # require amplified sentence embeddings, which both the trust score's
    # confidence term and the fingerprint geometry rely on
    return x[:, 0, :] @ state.head_w


def _full_forward(state: SplitModelState, tokens: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    toks, mask, _ = _prepare_tokens(state, tokens)
    x = state.emb[toks] + state.pos[None, :, :]
    x = _run_blocks(state, x, mask, range(state.cfg.n_blocks))
    return x, mask

def full_forward_loss(state: SplitModelState, tokens: np.ndarray,
                      labels: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """All blocks in one graph; the monolithic reference for the split path."""
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    x, _ = _full_forward(state, tokens)
    logits = _head_logits(state, x)
    loss = F.cross_entropy(logits, torch.from_numpy(y))
    return logits, loss


def monolithic_grads(state: SplitModelState, tokens: np.ndarray,
                     labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    _, loss = full_forward_loss(state, tokens, labels)
    items = state.adapter_items()
    grads = torch.autograd.grad(loss, [t for _, t in items])
    return float(loss.detach()), {name: g.detach().numpy().copy()
                                  for (name, _), g in zip(items, grads)}


def monolithic_step(state: SplitModelState, tokens: np.ndarray, labels: np.ndarray,
                    lr: float) -> float:
    loss, grads = monolithic_grads(state, tokens, labels)
    sgd_step(state, grads, lr)
    return loss


def predict(state: SplitModelState, tokens: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        x, _ = _full_forward(state, tokens)
        logits = _head_logits(state, x)
    return logits.numpy().argmax(axis=1)


def cls_embeddings(state: SplitModelState, tokens: np.ndarray) -> np.ndarray:
    """Position-0 hidden states after the full local forward (all blocks,
    this state's adapters); the sentence-level representation."""
    with torch.no_grad():
        x, _ = _full_forward(state, tokens)
    out = x[:, 0, :].numpy().copy()
    if not np.isfinite(out).all():
        raise NumericError("non-finite sentence embeddings")
    return out


# -- many clients in one graph ------------------------------------------------


class MultiClientTrainer:
    """Trains one adapter set per client against the shared frozen backbone.

    All clients advance in lock-step inside a single batched graph: adapters
    are stacked along a leading client axis, losses are per-client means, and
    their sum backpropagates into exactly the per-client gradients the serial
    path would produce (clients never interact). Used for the local warm-up,
    where stepping twenty tiny models one by one is interpreter-bound.
    """

    def __init__(self, state: SplitModelState, n_clients: int) -> None:
        self.cfg = state.cfg
        self.state = state
        self.n_clients = n_clients
        names = [name for name, _ in state.adapter_items()]
        base = dict(state.adapter_items())
        self.params = {
            name: base[name].detach().clone().unsqueeze(0)
            .repeat((n_clients,) + (1,) * base[name].dim())
            .requires_grad_(True)
            for name in names
        }

    def _block_multi(self, x: torch.Tensor, i: int) -> torch.Tensor:
        """x: (n_clients, batch, seq, hidden); per-client adapters on q/v."""
        blk = self.state.blocks[i]
        n, b, mu, d = x.shape
        heads = self.cfg.n_heads
        dh = d // heads
        a_q = self.params[f"block{i:02d}.q.a"]
        b_q = self.params[f"block{i:02d}.q.b"]
        a_v = self.params[f"block{i:02d}.v.a"]
        b_v = self.params[f"block{i:02d}.v.b"]

        h = F.layer_norm(x, (d,), blk.ln1_g, blk.ln1_b, eps=LN_EPS)
        q = h @ blk.wq + torch.einsum("nbmr,ndr->nbmd",
                                      torch.einsum("nbmd,nrd->nbmr", h, a_q), b_q)
        k = h @ blk.wk
        v = h @ blk.wv + torch.einsum("nbmr,ndr->nbmd",
                                      torch.einsum("nbmd,nrd->nbmr", h, a_v), b_v)
        q = q.view(n * b, mu, heads, dh).transpose(1, 2)
        k = k.view(n * b, mu, heads, dh).transpose(1, 2)
        v = v.view(n * b, mu, heads, dh).transpose(1, 2)
        att = F.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(n, b, mu, d)
        x = x + mixed @ blk.wo
        h2 = F.layer_norm(x, (d,), blk.ln2_g, blk.ln2_b, eps=LN_EPS)
        return x + F.gelu(h2 @ blk.w1 + blk.b1) @ blk.w2 + blk.b2

    def step(self, tokens: np.ndarray, labels: np.ndarray, lr: float) -> np.ndarray:
        """One SGD step for every client; tokens (n, batch, seq) must be
        full-length sequences. Returns the per-client losses."""
        n, b, mu = tokens.shape
        if n != self.n_clients or mu != self.cfg.seq_len:
            raise InputError(f"expected ({self.n_clients}, batch, "
                             f"{self.cfg.seq_len}) tokens, got {tokens.shape}")
        toks = torch.from_numpy(np.ascontiguousarray(tokens, dtype=np.int64))
        x = self.state.emb[toks] + self.state.pos[None, None, :, :]
        for i in range(self.cfg.n_blocks):
            x = self._block_multi(x, i)
        logits = torch.einsum("nbd,ndc->nbc", x[:, :, 0, :],
                              self.params["head.w"])
        y = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))
        per_client = F.cross_entropy(
            logits.reshape(n * b, -1), y.reshape(n * b),
            reduction="none").view(n, b).mean(dim=1)
        total = per_client.sum()
        grads = torch.autograd.grad(total, list(self.params.values()))
        with torch.no_grad():
            for tensor, grad in zip(self.params.values(), grads):
                tensor.sub_(grad, alpha=lr)
        return per_client.detach().numpy().copy()

    def client_state(self, client: int) -> SplitModelState:
        """Standalone state holding this client's current adapters."""
        out = self.state.clone()
        out.load_snapshot({name: tensor[client].detach().numpy()
                           for name, tensor in self.params.items()})
        return out
