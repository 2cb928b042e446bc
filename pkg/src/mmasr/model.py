"""Decoder-only transformer over the joint discrete vocabulary.

Input layout of one assembled sequence::

    [task prompt] [tag_A A...] [tag_I I...] [tag_L L...] [tag_O O...] [BOS] [target...] [EOS]

Only the target words and EOS contribute to the loss.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .channels import INPUT_ORDER, TASKS, Vocabulary

CHECKPOINT_MAGIC = b"MMASRCK1"
CHECKPOINT_VERSION = 1


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 768
    vocab_size: int = 213
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form: V*d + P*d + L*(4d^2 + 2*d*f + 9d + f) + 2d + V.

    Token and position embeddings, per layer two LayerNorms (2d each), fused
    QKV (3d^2+3d), output projection (d^2+d) and the MLP (2df+f+d), then the
    final LayerNorm and the output bias; the output matrix is tied to the
    token embedding.
    """
    d, f, V, P, L = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len, cfg.n_layers
    return V * d + P * d + L * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d + V


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, key_mask=None, past=None, return_probs: bool = False):
        """``key_mask`` (B, T_past+T) marks valid keys; ``past`` is a cached (k, v)."""
        B, T, C = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, h, C // h).transpose(1, 2)
        k = k.view(B, T, h, C // h).transpose(1, 2)
        v = v.view(B, T, h, C // h).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        S = k.shape[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(C // h)
        allowed = torch.ones(T, S, dtype=torch.bool, device=x.device).tril(diagonal=S - T)
        if key_mask is not None:
            # a query always sees itself so padded rows stay finite
            own = torch.zeros(T, S, dtype=torch.bool, device=x.device)
            own[:, S - T:] = torch.eye(T, dtype=torch.bool, device=x.device)
            allowed = (allowed & key_mask[:, None, None, :]) | own
        scores = scores.masked_fill(~allowed, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        out = (self.drop(probs) @ v).transpose(1, 2).reshape(B, T, C)
        out = self.proj(out)
        if return_probs:
            return out, probs
        return out, (k, v)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, key_mask=None, past=None):
        a, kv = self.attn(self.ln1(x), key_mask, past)
        x = x + self.drop(a)
        x = x + self.drop(self.fc2(F.gelu(self.fc1(self.ln2(x)))))
        return x, kv


class DecoderLM(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "ln" in name.split(".")[-2]:
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)
            # scaled residual projections (GPT-2 style)
            for blk in self.blocks:
                for lin in (blk.attn.proj, blk.fc2):
                    lin.weight.mul_(1.0 / math.sqrt(2 * self.cfg.n_layers))

    def forward(self, ids: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Next-token logits of shape ``(B, T, V)``; position t sees ids[..t]."""
        if ids.dim() == 1:
            ids = ids[None]
        T = ids.shape[1]
        logits, _ = self.forward_cached(ids, torch.arange(T, device=ids.device)[None], key_mask)
        return logits

    def forward_cached(self, ids, positions, key_mask=None, past=None):
        """Forward over new tokens ``ids`` given cached keys/values ``past``.

        ``positions`` (B, T) are absolute position ids; ``key_mask`` covers
        cached plus new keys.  Returns logits and the extended cache.
        """
        B, T = ids.shape
        if T == 0:
            raise ValueError("empty input")
        if int(positions.max()) >= self.cfg.max_seq_len:
            raise SequenceTooLong(f"position {int(positions.max())} exceeds max_seq_len={self.cfg.max_seq_len}")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise ValueError("token id outside the vocabulary")
        x = self.drop(self.tok_emb(ids) + self.pos_emb(positions))
        cache = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, key_mask, None if past is None else past[i])
            cache.append(kv)
        x = self.ln_f(x)
        return x @ self.tok_emb.weight.T + self.head_bias, cache


@dataclass
class AssembledSequence:
    ids: list[int]
    loss_mask: list[bool]
    segments: list[tuple[str, tuple[int, int]]]
    prefix_len: int
    example_id: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def prefix(self) -> list[int]:
        """Everything up to and including BOS."""
        return self.ids[:self.prefix_len]


def assemble(example, vocab: Vocabulary, task: str = "asr", max_seq_len: int | None = None) -> AssembledSequence:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    present = [m for m in INPUT_ORDER if m in example.streams]
    if not present:
        raise ValueError(f"example {example.id} has no input streams")
    if task == "asr" and "A" not in present:
        raise ValueError(f"example {example.id}: ASR needs an audio stream")
    if task == "lip_to_text" and "L" not in present:
        raise ValueError(f"example {example.id}: lip_to_text needs a lip stream")
    ids = [vocab.prompt(task, present)]
    for m in present:
        ids.append(vocab.tag(m))
        ids.extend(example.streams[m].ids)
    ids.append(vocab.bos)
    prefix_len = len(ids)
    target = list(example.target.ids)
    if not target or target[-1] != vocab.eos:
        raise ValueError(f"example {example.id}: target must end with EOS")
    ids.extend(target)
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise SequenceTooLong(f"example {example.id}: assembled length {len(ids)} > max_seq_len {max_seq_len}")
    mask = [False] * prefix_len + [True] * len(target)
    return AssembledSequence(ids, mask, [("T", (prefix_len, len(ids)))], prefix_len, example.id)


def pad_batch(seqs: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to the longest sequence; returns ids and a validity mask."""
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    valid = torch.zeros((len(seqs), T), dtype=torch.bool)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = torch.tensor(s, dtype=torch.long)
        valid[b, :len(s)] = True
    return ids, valid


def normalized_loss(logits: torch.Tensor, ids: torch.Tensor, segments: list[list[tuple[str, tuple[int, int]]]]) -> torch.Tensor:
    """Length-normalized multi-segment cross-entropy.

    Token at position t is predicted from logits[t-1].  Each segment's CE is
    averaged over its tokens, segments are averaged per sequence and
    sequences averaged over the batch, so segment lengths carry no weight.
    """
    B, T, _ = logits.shape
    nll = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1),
                          reduction="none").view(B, T - 1)
    weights = torch.zeros(B, T - 1, dtype=logits.dtype)
    for b, segs in enumerate(segments):
        if not segs:
            raise ValueError(f"sequence {b} has no loss positions")
        for _, (start, end) in segs:
            if start < 1 or end <= start or end > T:
                raise ValueError(f"bad loss segment {(start, end)} in sequence {b}")
            weights[b, start - 1:end - 1] += 1.0 / ((end - start) * len(segs) * B)
    return (weights * nll).sum()


def sequence_loss(model: DecoderLM, batch: list[AssembledSequence], pad_id: int = 0) -> torch.Tensor:
    for s in batch:
        if not any(s.loss_mask):
            raise ValueError(f"sequence {s.example_id!r} has no masked positions")
    ids, valid = pad_batch([s.ids for s in batch], pad_id)
    logits = model(ids, valid)
    return normalized_loss(logits, ids, [s.segments for s in batch])


@torch.no_grad()
def greedy_decode(model: DecoderLM, prefixes: list[list[int]], max_new: int, eos_id: int,
                  pad_id: int = 0, batch_size: int = 64) -> list[list[int]]:
    """Argmax decoding (ties -> lowest id) until EOS or ``max_new`` tokens.

    Returned sequences exclude the terminating EOS.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    was_training = model.training
    model.eval()
    out: list[list[int]] = []
    try:
        for lo in range(0, len(prefixes), batch_size):
            out.extend(_decode_chunk(model, prefixes[lo:lo + batch_size], max_new, eos_id, pad_id))
    finally:
        model.train(was_training)
    return out


def _decode_chunk(model, prefixes, max_new, eos_id, pad_id):
    # left-pad so every row appends at the same column; positions skip the pads
    B = len(prefixes)
    lengths = torch.tensor([len(p) for p in prefixes])
    T = int(lengths.max())
    max_new = min(max_new, model.cfg.max_seq_len - int(lengths.min()))
    ids = torch.full((B, T), pad_id, dtype=torch.long)
    valid = torch.zeros((B, T), dtype=torch.bool)
    for b, p in enumerate(prefixes):
        ids[b, T - len(p):] = torch.tensor(p, dtype=torch.long)
        valid[b, T - len(p):] = True
    positions = (valid.long().cumsum(1) - 1).clamp(min=0)
    logits, cache = model.forward_cached(ids, positions, valid)
    last = logits[:, -1]
    generated: list[list[int]] = [[] for _ in range(B)]
    active = torch.ones(B, dtype=torch.bool)
    pos = lengths.clone()
    for step in range(max_new):
        nxt = last.argmax(dim=-1)
        for b in active.nonzero().flatten().tolist():
            tok = int(nxt[b])
            if tok == eos_id or pos[b] >= model.cfg.max_seq_len:
                active[b] = False
            else:
                generated[b].append(tok)
        if not active.any() or step == max_new - 1:
            break
        valid = torch.cat([valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        feed = torch.where(active, nxt, torch.full_like(nxt, pad_id))[:, None]
        logits, cache = model.forward_cached(feed, pos.clamp(max=model.cfg.max_seq_len - 1)[:, None], valid, cache)
        last = logits[:, -1]
        pos += 1
    return generated


@torch.no_grad()
def greedy_decode_reference(model: DecoderLM, prefix: list[int], max_new: int, eos_id: int) -> list[int]:
    """Uncached single-sequence greedy decoding (recomputes the whole prefix each step)."""
    ids = list(prefix)
    out: list[int] = []
    for _ in range(max_new):
        if len(ids) >= model.cfg.max_seq_len:
            break
        tok = int(model(torch.tensor(ids)[None])[0, -1].argmax())
        if tok == eos_id:
            break
        ids.append(tok)
        out.append(tok)
    return out


@dataclass
class ModelCheckpoint:
    """Serializable model state.

    File layout: 8-byte magic ``MMASRCK1``, little-endian uint32 header length,
    UTF-8 JSON header (format version, config, vocab hash, tensor table,
    metadata), then every tensor as raw little-endian float32 in header order.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: str = ""
    metadata: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] | None = None

    @classmethod
    def from_model(cls, model: DecoderLM, vocab_hash: str = "", metadata: dict | None = None,
                   optimizer: dict[str, np.ndarray] | None = None) -> "ModelCheckpoint":
        params = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, params, vocab_hash, dict(metadata or {}), optimizer)

    def to_model(self) -> DecoderLM:
        model = DecoderLM(self.config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model

    def to_bytes(self) -> bytes:
        tensors = list(self.params.items())
        if self.optimizer:
            tensors += [(f"optim.{k}", v) for k, v in self.optimizer.items()]
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "vocab_hash": self.vocab_hash,
            "metadata": self.metadata,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(hbytes)))
        buf.write(hbytes)
        for _, v in tensors:
            buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        off = 12 + hlen
        params, optim = {}, {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(t["shape"]).astype(np.float32)
            off += 4 * n
            if t["name"].startswith("optim."):
                optim[t["name"][6:]] = arr
            else:
                params[t["name"]] = arr
        if off != len(data):
            raise ValueError("checkpoint has trailing or missing bytes")
        return cls(ModelConfig(**header["config"]), params, header["vocab_hash"],
                   header["metadata"], optim or None)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}")
        return cls.from_bytes(path.read_bytes())

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())
        return h.hexdigest()
