"""Embedding layers and the transformer visit encoders."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from .numerics import ConfigError, LayerNorm, ShapeError, dropout, softmax
from .vocab import CLS_ID, PAD_ID, Vocab, VocabError


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 2
    ffn: int = 128
    dropout: float = 0.1
    max_len: int = 128
    freeze_prefix: int = 0
    norm: str = "post"

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden width {self.hidden} not divisible by {self.n_heads} heads")
        if not 0 <= self.freeze_prefix <= self.n_layers:
            raise ConfigError(f"freeze_prefix {self.freeze_prefix} outside [0, {self.n_layers}]")
        if self.norm not in ("post", "pre"):
            raise ConfigError(f"norm must be 'post' or 'pre', got {self.norm!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SequenceBatch:
    ids: torch.Tensor  # [B, S] long
    segments: torch.Tensor  # [B, S] long
    mask: torch.Tensor  # [B, S] bool, True = real token
    modality: str

    def __post_init__(self):
        if self.ids.shape != self.mask.shape or self.ids.shape != self.segments.shape:
            raise ShapeError("ids/segments/mask shapes differ")
        if self.ids.shape[1] == 0 or not bool((self.ids[:, 0] == CLS_ID).all()):
            raise ShapeError("position 0 of every row must be [CLS]")
        if not bool(self.mask[:, 0].all()):
            raise ShapeError("[CLS] position must be unmasked")

    @property
    def shape(self):
        return tuple(self.ids.shape)

    def replace_ids(self, ids: torch.Tensor) -> "SequenceBatch":
        return SequenceBatch(ids, self.segments, self.mask, self.modality)


def make_batch(rows: Sequence[Sequence[str]], vocab: Vocab, modality: str, max_len: int,
               strict: bool = False) -> SequenceBatch:
    """Prepend [CLS], truncate to ``max_len`` and right-pad with [PAD]."""
    seqs = [[CLS_ID] + [vocab.id(s, strict=strict) for s in row][: max_len - 1] for row in rows]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = torch.as_tensor(s)
        mask[r, : len(s)] = True
    return SequenceBatch(ids, torch.zeros_like(ids), mask, modality)


@dataclass
class EncodedVisit:
    z: torch.Tensor  # [B, S, H]
    mask: torch.Tensor  # [B, S]
    attn_maps: list[torch.Tensor] | None = None  # per layer [B, heads, S, S]

    @property
    def cls(self) -> torch.Tensor:
        return self.z[:, 0, :]


def _check_ids(ids: torch.Tensor, size: int, what: str) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= size):
        raise VocabError(f"{what} id out of range [0, {size})")


class TextEmbedding(nn.Module):
    """Token + segment + learned absolute position embeddings."""

    def __init__(self, vocab_size: int, hidden: int, max_len: int, n_segments: int = 2):
        super().__init__()
        self.token = nn.Parameter(torch.empty(vocab_size, hidden).normal_(0.0, 0.02))
        self.segment = nn.Parameter(torch.empty(n_segments, hidden).normal_(0.0, 0.02))
        self.position = nn.Parameter(torch.empty(max_len, hidden).normal_(0.0, 0.02))

    def forward(self, batch: SequenceBatch) -> torch.Tensor:
        return embed_text(batch, self.token, self.segment, self.position)


def embed_text(batch: SequenceBatch, token: torch.Tensor, segment: torch.Tensor, position: torch.Tensor):
    _check_ids(batch.ids, token.shape[0], "token")
    _check_ids(batch.segments, segment.shape[0], "segment")
    seq_len = batch.ids.shape[1]
    if seq_len > position.shape[0]:
        raise ShapeError(f"sequence length {seq_len} exceeds max_len {position.shape[0]}")
    return token[batch.ids] + segment[batch.segments] + position[:seq_len][None, :, :]


def embed_codes(batch: SequenceBatch, code_table: torch.Tensor) -> torch.Tensor:
    """Plain lookup into the full code table (specials + ontology leaves); no positions."""
    _check_ids(batch.ids, code_table.shape[0], "code")
    return code_table[batch.ids]


class Linear(nn.Module):
    """``x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(n_in, n_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        h = cfg.hidden
        self.cfg = cfg
        self.q, self.k, self.v, self.o = (Linear(h, h) for _ in range(4))
        self.ln1, self.ln2 = LayerNorm(h), LayerNorm(h)
        self.ff1, self.ff2 = Linear(h, cfg.ffn), Linear(cfg.ffn, h)

    def attention(self, x, mask):
        b, s, h = x.shape
        nh = self.cfg.n_heads
        hd = h // nh
        split = lambda t: t.view(b, s, nh, hd).transpose(1, 2)  # [B, nh, S, hd]
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        weights = softmax(scores, axis=-1, mask=mask[:, None, None, :])
        ctx = (weights @ v).transpose(1, 2).reshape(b, s, h)
        return self.o(ctx), weights

    def ffn(self, x):
        return self.ff2(torch.nn.functional.gelu(self.ff1(x)))

    def forward(self, x, mask, gen=None):
        rate, train = self.cfg.dropout, self.training
        if self.cfg.norm == "post":
            a, w = self.attention(x, mask)
            x = self.ln1(x + dropout(a, rate, gen, train))
            x = self.ln2(x + dropout(self.ffn(x), rate, gen, train))
        else:
            a, w = self.attention(self.ln1(x), mask)
            x = x + dropout(a, rate, gen, train)
            x = x + dropout(self.ffn(self.ln2(x)), rate, gen, train)
        return x, w


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))

    def forward(self, x, mask, capture: bool = False, gen: torch.Generator | None = None) -> EncodedVisit:
        return encode(x, mask, self, capture=capture, gen=gen)


def encode(embedded: torch.Tensor, mask: torch.Tensor, encoder: TransformerEncoder,
           capture: bool = False, gen: torch.Generator | None = None) -> EncodedVisit:
    if embedded.shape[-1] != encoder.cfg.hidden:
        raise ShapeError(f"input width {embedded.shape[-1]} != encoder width {encoder.cfg.hidden}")
    if not bool(mask.any(dim=1).all()):
        raise ShapeError("empty sequence: a row has no unmasked positions")
    x = embedded
    maps = [] if capture else None
    for layer in encoder.layers:
        x, w = layer(x, mask, gen)
        if capture:
            maps.append(w.detach())
    return EncodedVisit(x, mask, maps)
