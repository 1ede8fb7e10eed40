"""Model wiring: towers, fusion, prediction heads, presets, checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import VisitRecord
from .encoders import (EncodedVisit, EncoderConfig, Linear, SequenceBatch, TextEmbedding,
                       TransformerEncoder, embed_codes, make_batch)
from .fusion import MODES, AugmentedReps, CrossModalFusion, fuse_visit
from .numerics import ConfigError, LayerNorm, dropout
from .ontology import CodeTable, OntologyTree
from .vocab import SPECIALS, CodeVocab, TokenVocab

STREAMS = ("codes", "diag", "med")


@dataclass(frozen=True)
class ModelConfig:
    text: EncoderConfig
    code: EncoderConfig
    ont_dim: int = 8
    ont_heads: int = 4
    gat_slope: float = 0.2
    ancestor_scope: str = "all"
    fusion: str = "cross"
    shared_code_encoder: bool = True
    shared_mlm_head: bool = False
    mlm_transform: bool = False
    contrastive: bool = False
    cl_proj_dim: int = 32
    cl_cosine: bool = True

    def __post_init__(self):
        if self.ont_dim * self.ont_heads != self.code.hidden:
            raise ConfigError(
                f"model.ont_dim * model.ont_heads = {self.ont_dim * self.ont_heads} must equal "
                f"model.code_hidden = {self.code.hidden}")
        if self.fusion not in MODES:
            raise ConfigError(f"model.fusion must be one of {MODES}, got {self.fusion!r}")
        if self.shared_mlm_head and self.text.hidden != self.code.hidden:
            raise ConfigError("model.shared_mlm_head needs equal text and code widths")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(text=EncoderConfig(**d.pop("text")), code=EncoderConfig(**d.pop("code")), **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(
        text=EncoderConfig(n_layers=2, hidden=64, n_heads=2, ffn=256, dropout=0.0, max_len=128),
        code=EncoderConfig(n_layers=2, hidden=32, n_heads=2, ffn=128, dropout=0.0, max_len=61),
        ont_dim=8, ont_heads=4,
    ),
    "paper": ModelConfig(
        text=EncoderConfig(n_layers=12, hidden=768, n_heads=12, ffn=3072, dropout=0.1, max_len=512,
                           freeze_prefix=10),
        code=EncoderConfig(n_layers=2, hidden=300, n_heads=2, ffn=1200, dropout=0.1, max_len=61),
        ont_dim=75, ont_heads=4,
    ),
}


class MLP(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.l1, self.l2 = Linear(n_in, n_in), Linear(n_in, n_out)

    def forward(self, x):
        return self.l2(torch.tanh(self.l1(x)))


class PredictionHead(nn.Module):
    """Optional dense + GELU + LayerNorm transform, then a linear map over the code vocabulary."""

    def __init__(self, n_in: int, n_out: int, transform: bool):
        super().__init__()
        self.transform = nn.Sequential(Linear(n_in, n_in), nn.GELU(), LayerNorm(n_in)) if transform else None
        self.decoder = Linear(n_in, n_out)

    @property
    def weight(self):
        return self.decoder.weight

    def forward(self, x):
        return self.decoder(x if self.transform is None else self.transform(x))


class Towers(nn.Module):
    """Everything between raw ids and token-level encodings, for both modalities."""

    def __init__(self, cfg: ModelConfig, token_vocab: TokenVocab, code_vocab: CodeVocab, ontology: OntologyTree):
        super().__init__()
        self.cfg = cfg
        self.text_embed = TextEmbedding(len(token_vocab), cfg.text.hidden, cfg.text.max_len)
        self.text_encoder = TransformerEncoder(cfg.text)
        self.code_table = CodeTable(ontology, code_vocab, cfg.code.hidden, cfg.ont_heads,
                                    cfg.gat_slope, cfg.ancestor_scope)
        if cfg.shared_code_encoder:
            self.code_encoder = TransformerEncoder(cfg.code)
        else:
            self.code_encoders = nn.ModuleDict({s: TransformerEncoder(cfg.code) for s in STREAMS})

    def encoder_for(self, stream: str) -> TransformerEncoder:
        return self.code_encoder if self.cfg.shared_code_encoder else self.code_encoders[stream]

    def forward(self, text: SequenceBatch, codes: dict[str, SequenceBatch], capture=False, gen=None):
        train = self.training
        e_w = dropout(self.text_embed(text), self.cfg.text.dropout, gen, train)
        enc_text = self.text_encoder(e_w, text.mask, capture, gen)
        table = self.code_table()
        enc_codes = {}
        for name, b in codes.items():
            e_c = dropout(embed_codes(b, table), self.cfg.code.dropout, gen, train)
            enc_codes[name] = self.encoder_for(name)(e_c, b.mask, capture, gen)
        return enc_text, enc_codes


@dataclass
class VisitBatch:
    visits: list[VisitRecord]
    text: SequenceBatch
    codes: dict[str, SequenceBatch]

    @property
    def visit_ids(self) -> list[str]:
        return [v.visit_id for v in self.visits]


def stream_codes(v: VisitRecord, stream: str) -> tuple[str, ...]:
    if stream == "codes":
        return v.diag_codes + v.med_codes
    if stream == "diag":
        return v.diag_codes
    if stream == "med":
        return v.med_codes
    raise ConfigError(f"unknown code stream {stream!r}")


class FusionModel(nn.Module):
    def __init__(self, cfg: ModelConfig, token_vocab: TokenVocab, code_vocab: CodeVocab, ontology: OntologyTree):
        super().__init__()
        self.cfg = cfg
        self.token_vocab, self.code_vocab, self.ontology = token_vocab, code_vocab, ontology
        h_w, h_c, n_codes = cfg.text.hidden, cfg.code.hidden, len(code_vocab)
        self.towers = Towers(cfg, token_vocab, code_vocab, ontology)
        self.fusion = CrossModalFusion(h_w, h_c)
        self.t2c_head = PredictionHead(h_w, n_codes, cfg.mlm_transform)
        self.c2c_head = self.t2c_head if cfg.shared_mlm_head else PredictionHead(h_c, n_codes, cfg.mlm_transform)
        self.task_heads = nn.ModuleDict()
        if cfg.contrastive:
            self.cl_text = MLP(h_w, cfg.cl_proj_dim)
            self.cl_code = MLP(h_c, cfg.cl_proj_dim)
            self.momentum = nn.ModuleDict({
                "towers": copy.deepcopy(self.towers),
                "cl_text": copy.deepcopy(self.cl_text),
                "cl_code": copy.deepcopy(self.cl_code),
            })
            self.momentum.requires_grad_(False)
        self.dropout_gen = torch.Generator().manual_seed(0)

    # -- batching
    def collate(self, visits: Sequence[VisitRecord], streams: Sequence[str] = ("codes",)) -> VisitBatch:
        visits = list(visits)
        text = make_batch([v.text_tokens for v in visits], self.token_vocab, "text", self.cfg.text.max_len)
        codes = {s: make_batch([stream_codes(v, s) for v in visits], self.code_vocab, s, self.cfg.code.max_len)
                 for s in streams}
        return VisitBatch(visits, text, codes)

    # -- forward
    def encode(self, batch: VisitBatch, capture: bool = False):
        return self.towers(batch.text, batch.codes, capture, self.dropout_gen)

    def forward(self, batch: VisitBatch, mode: str | None = None, capture: bool = False):
        return forward_visit(self, batch, mode, capture)

    def add_task_head(self, name: str, n_in: int, n_out: int, seed: int) -> Linear:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            head = Linear(n_in, n_out).to(self.t2c_head.weight.dtype)
        self.task_heads[name] = head
        return head

    # -- momentum copy
    def live_momentum_pairs(self):
        for key in ("towers", "cl_text", "cl_code"):
            live = dict(getattr(self, key).named_parameters())
            for n, p in self.momentum[key].named_parameters():
                yield live[n], p

    @torch.no_grad()
    def momentum_update(self, m: float) -> None:
        if m == 1.0:
            return
        for live, mom in self.live_momentum_pairs():
            mom.mul_(m).add_(live, alpha=1.0 - m)

    def apply_freeze(self) -> None:
        for tower_cfg, embed, encoder in (
            (self.cfg.text, self.towers.text_embed, self.towers.text_encoder),
        ):
            p = tower_cfg.freeze_prefix
            embed.requires_grad_(p == 0)
            for i, layer in enumerate(encoder.layers):
                layer.requires_grad_(i >= p)
        p = self.cfg.code.freeze_prefix
        self.towers.code_table.requires_grad_(p == 0)
        encs = [self.towers.code_encoder] if self.cfg.shared_code_encoder else list(self.towers.code_encoders.values())
        for enc in encs:
            for i, layer in enumerate(enc.layers):
                layer.requires_grad_(i >= p)


def forward_visit(model: FusionModel, batch: VisitBatch, mode: str | None = None, capture: bool = False):
    """Ontology embedding, both towers, then cross-modal fusion of every stream."""
    mode = mode or model.cfg.fusion
    enc_text, enc_codes = model.encode(batch, capture)
    reps = fuse_visit(enc_text, enc_codes, model.fusion, mode)
    return (enc_text, enc_codes), reps


def build_model(cfg: ModelConfig, token_vocab: TokenVocab, code_vocab: CodeVocab, ontology: OntologyTree,
                seed: int = 0, dtype: torch.dtype = torch.float32) -> FusionModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = FusionModel(cfg, token_vocab, code_vocab, ontology)
    model.to(dtype)
    model.dropout_gen.manual_seed(seed)
    model.apply_freeze()
    return model


def expected_param_count(cfg: ModelConfig, n_tokens: int, n_codes: int, n_nodes: dict[str, int],
                         task_heads: dict[str, tuple[int, int]] | None = None) -> int:
    """Closed-form parameter count (momentum copy included when enabled)."""

    def encoder(c: EncoderConfig) -> int:
        h, f = c.hidden, c.ffn
        return c.n_layers * (4 * (h * h + h) + 2 * 2 * h + h * f + f + f * h + h)

    def gat(w: int) -> int:
        return w * w + 2 * w + w  # weight, att_src + att_dst (heads*head_width each), bias

    h_w, h_c = cfg.text.hidden, cfg.code.hidden
    text = n_tokens * h_w + 2 * h_w + cfg.text.max_len * h_w + encoder(cfg.text)
    code_table = len(SPECIALS) * h_c + sum(n * h_c + 2 * gat(h_c) for n in n_nodes.values())
    code_enc = encoder(cfg.code) * (1 if cfg.shared_code_encoder else len(STREAMS))
    towers = text + code_table + code_enc
    fusion = (h_c * h_w + h_w) + (h_w * h_c + h_c)
    def head(w: int) -> int:
        return w * n_codes + n_codes + (w * w + 3 * w if cfg.mlm_transform else 0)

    heads = head(h_w) + (0 if cfg.shared_mlm_head else head(h_c))
    total = towers + fusion + heads
    if cfg.contrastive:
        p = cfg.cl_proj_dim
        mlps = (h_w * h_w + h_w + h_w * p + p) + (h_c * h_c + h_c + h_c * p + p)
        total += mlps + (towers + mlps)  # live projections, then the momentum copy
    for n_in, n_out in (task_heads or {}).values():
        total += n_in * n_out + n_out
    return total


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"EHRFUSE\x00"
FORMAT_VERSION = 1
_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _dtype_name(t: torch.Tensor) -> str:
    for name, (dt, _) in _DTYPES.items():
        if t.dtype == dt:
            return name
    raise CheckpointError(f"unsupported dtype {t.dtype}")


def save_checkpoint(model: FusionModel, path: str | Path, optimizer=None, extra: dict | None = None) -> Path:
    """Header JSON + raw little-endian tensors; see ``load_checkpoint``."""
    tensors: list[tuple[str, torch.Tensor]] = [(n, p.detach()) for n, p in model.named_parameters()]
    seen = {n for n, _ in tensors}
    # parameters shared between modules (e.g. a shared MLM head) are listed once by named_parameters
    opt_meta = None
    if optimizer is not None:
        opt_meta = {k: getattr(optimizer, k) for k in ("step", "lr", "beta1", "beta2", "eps", "weight_decay")}
        for n in sorted(optimizer.m):
            tensors.append((f"optim.m.{n}", optimizer.m[n]))
            tensors.append((f"optim.v.{n}", optimizer.v[n]))
    index, chunks, offset = [], [], 0
    for name, t in tensors:
        dname = _dtype_name(t)
        raw = t.cpu().contiguous().numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": dname, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config_digest": model.cfg.digest(),
        "vocab_digests": {"token": model.token_vocab.digest(), "code": model.code_vocab.digest()},
        "config": model.cfg.to_json(),
        "token_vocab": model.token_vocab.to_json(),
        "code_vocab": model.code_vocab.to_json(),
        "ontology": model.ontology.to_json(),
        "task_heads": {k: list(h.weight.shape) for k, h in model.task_heads.items()},
        "tensors": index,
        "optimizer": opt_meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(payload)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')} != supported {FORMAT_VERSION}")
    payload = blob[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: payload digest mismatch (truncated or modified)")
    tensors = {}
    for e in header["tensors"]:
        dt, np_dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(payload, dtype=np_dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header, tensors


def load_checkpoint(path: str | Path, expect_config_digest: str | None = None):
    """Rebuild model (and optimizer state, if saved) from a checkpoint.

    Returns ``(model, optimizer_or_None, header)``.
    """
    from .numerics import AdamState

    header, tensors = read_checkpoint(path)
    if expect_config_digest is not None and header["config_digest"] != expect_config_digest:
        raise CheckpointVersionError(f"{path}: config digest {header['config_digest'][:12]} does not match "
                                     f"expected {expect_config_digest[:12]}")
    cfg = ModelConfig.from_json(header["config"])
    if cfg.digest() != header["config_digest"]:
        raise CorruptCheckpointError(f"{path}: stored config does not match its digest")
    tv = TokenVocab.from_json(header["token_vocab"])
    cv = CodeVocab.from_json(header["code_vocab"])
    if tv.digest() != header["vocab_digests"]["token"] or cv.digest() != header["vocab_digests"]["code"]:
        raise CorruptCheckpointError(f"{path}: vocabulary digest mismatch")
    onto = OntologyTree.from_json(header["ontology"])
    dtype = tensors[header["tensors"][0]["name"]].dtype if header["tensors"] else torch.float32
    model = build_model(cfg, tv, cv, onto, dtype=dtype)
    for name, (n_in, n_out) in header["task_heads"].items():
        model.add_task_head(name, n_in, n_out, seed=0)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                raise CorruptCheckpointError(f"{path}: missing tensor {name}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CorruptCheckpointError(f"{path}: shape mismatch for {name}")
            p.copy_(tensors[name])
    opt = None
    if header["optimizer"] is not None:
        opt = AdamState(**header["optimizer"])
        for name in params:
            if f"optim.m.{name}" in tensors:
                opt.m[name] = tensors[f"optim.m.{name}"].clone()
                opt.v[name] = tensors[f"optim.v.{name}"].clone()
    return model, opt, header


def load_text_tower(model: FusionModel, path: str | Path) -> list[str]:
    """Copy text embedding and text encoder weights from a checkpoint in this format."""
    _, tensors = read_checkpoint(path)
    loaded = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith(("towers.text_embed.", "towers.text_encoder.")) and name in tensors:
                if tuple(tensors[name].shape) != tuple(p.shape):
                    raise CheckpointError(f"text tower shape mismatch for {name}")
                p.copy_(tensors[name])
                loaded.append(name)
    return loaded
