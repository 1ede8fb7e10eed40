"""Masked-code pre-training (text-to-code, code-to-code) and the contrastive extension."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import VisitRecord, split_items
from .encoders import Linear
from .encoders import SequenceBatch
from .model import FusionModel, VisitBatch, stream_codes
from .numerics import AdamState, ConfigError, NumericError, adam_step, check_finite, param_groups, softmax
from .vocab import MASK_ID, SPECIALS

MASKED, KEPT, RANDOM = "MASKED", "KEPT", "RANDOM"
N_SPECIAL = len(SPECIALS)


class EmptyMaskError(ValueError):
    """A loss was requested on a batch without any masked position."""


@dataclass
class MaskedCodeBatch:
    ids: torch.Tensor  # [B, S] after corruption
    positions: list[list[int]]
    labels: list[list[int]]
    actions: list[list[str]]
    skipped_rows: int = 0

    @property
    def n_masked(self) -> int:
        return sum(len(p) for p in self.positions)

    def flat(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(row index, position, label) for every masked slot, row-major."""
        rows = [r for r, ps in enumerate(self.positions) for _ in ps]
        pos = [p for ps in self.positions for p in ps]
        lab = [l for ls in self.labels for l in ls]
        as_long = lambda x: torch.as_tensor(x, dtype=torch.long)
        return as_long(rows), as_long(pos), as_long(lab)


def apply_mask(ids: torch.Tensor, pad_mask: torch.Tensor, rate: float, rng: np.random.Generator,
               random_pool: Sequence[int], force_one: bool = True) -> MaskedCodeBatch:
    """BERT-style corruption of a code id matrix.

    Eligible = unpadded, non-special ids. Each eligible token is selected with
    probability ``rate``; a row whose draw selects nothing gets one uniformly
    chosen forced selection. Selected tokens become [MASK] (80%), stay (10%)
    or become a random non-special code (10%).
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"mask rate must lie in (0, 1), got {rate}")
    pool = np.asarray(random_pool, dtype=np.int64)
    if pool.size == 0:
        raise ConfigError("random replacement pool is empty")
    ids_np = ids.numpy()
    eligible = pad_mask.numpy() & (ids_np >= N_SPECIAL)
    selected = (rng.random(ids_np.shape) < rate) & eligible
    out = ids_np.copy()
    positions, labels, actions = [], [], []
    skipped = 0
    for r in range(ids_np.shape[0]):
        elig = np.flatnonzero(eligible[r])
        if elig.size == 0:
            skipped += 1
            positions.append([]), labels.append([]), actions.append([])
            continue
        sel = np.flatnonzero(selected[r])
        if sel.size == 0 and force_one:
            sel = np.array([elig[rng.integers(elig.size)]])
        u = rng.random(sel.size)
        rand_codes = pool[rng.integers(pool.size, size=sel.size)]
        acts = []
        for p, x, rc in zip(sel, u, rand_codes):
            if x < 0.8:
                out[r, p] = MASK_ID
                acts.append(MASKED)
            elif x < 0.9:
                acts.append(KEPT)
            else:
                out[r, p] = rc
                acts.append(RANDOM)
        positions.append([int(p) for p in sel])
        labels.append([int(ids_np[r, p]) for p in sel])
        actions.append(acts)
    return MaskedCodeBatch(torch.from_numpy(out), positions, labels, actions, skipped)


def code_pool(model: FusionModel) -> list[int]:
    return list(range(N_SPECIAL, len(model.code_vocab)))


def masked_code_ce(reps: torch.Tensor, masked: MaskedCodeBatch, head: Linear) -> torch.Tensor:
    """Mean cross-entropy over masked slots; each slot is predicted from its row's rep."""
    if masked.n_masked == 0:
        raise EmptyMaskError("loss undefined: batch has no masked positions")
    rows, _, labels = masked.flat()
    logits = head(reps)[rows]
    return torch.nn.functional.cross_entropy(logits, labels)


def t2c_loss(a_text: torch.Tensor, masked: MaskedCodeBatch, head: Linear) -> torch.Tensor:
    return masked_code_ce(a_text, masked, head)


def c2c_loss(a_code: torch.Tensor, masked: MaskedCodeBatch, head: Linear) -> torch.Tensor:
    return masked_code_ce(a_code, masked, head)


# ---------------------------------------------------------------------------
# contrastive extension

@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    alpha: float = 0.4
    momentum: float = 0.995
    queue_size: int = 0
    weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"contrastive.tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"contrastive.alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError(f"contrastive.momentum must lie in (0, 1], got {self.momentum}")
        if self.queue_size < 0:
            raise ConfigError("contrastive.queue_size must be >= 0")


@dataclass
class ContrastiveState:
    cfg: ContrastiveConfig
    queue_text: torch.Tensor | None = None  # [K, P] momentum text features
    queue_code: torch.Tensor | None = None

    def enqueue(self, text_m: torch.Tensor, code_m: torch.Tensor) -> None:
        k = self.cfg.queue_size
        if k == 0:
            return
        cat = lambda q, x: x.detach() if q is None else torch.cat([x.detach(), q])
        self.queue_text = cat(self.queue_text, text_m)[:k]
        self.queue_code = cat(self.queue_code, code_m)[:k]


def _features(mlp, x, cosine: bool):
    f = mlp(x)
    return torch.nn.functional.normalize(f, dim=-1) if cosine else f


def contrastive_loss(text_f, code_f, text_m, code_m, tau: float, alpha: float,
                     queue_text=None, queue_code=None) -> torch.Tensor:
    """Soft-target InfoNCE in both directions.

    ``text_f``/``code_f`` are live projected features [B, P]; ``text_m``/``code_m``
    the momentum features. Candidates are the in-batch momentum features
    followed by any queued ones. Target = (1-alpha) * one-hot(pair) +
    alpha * softmax(momentum similarities / tau).
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    cand_code = code_m if queue_code is None else torch.cat([code_m, queue_code])
    cand_text = text_m if queue_text is None else torch.cat([text_m, queue_text])
    b, m = text_f.shape[0], cand_code.shape[0]
    if m < 2:
        raise ConfigError("contrastive pool needs at least 2 candidates")
    hard = torch.zeros(b, m, dtype=text_f.dtype)
    hard[torch.arange(b), torch.arange(b)] = 1.0
    with torch.no_grad():
        soft_t2c = softmax(text_m @ cand_code.T / tau)
        soft_c2t = softmax(code_m @ cand_text.T / tau)
    tgt_t2c = (1.0 - alpha) * hard + alpha * soft_t2c
    tgt_c2t = (1.0 - alpha) * hard + alpha * soft_c2t
    l_t2c = -(tgt_t2c * torch.log_softmax(text_f @ cand_code.T / tau, dim=1)).sum(1).mean()
    l_c2t = -(tgt_c2t * torch.log_softmax(code_f @ cand_text.T / tau, dim=1)).sum(1).mean()
    return 0.5 * (l_t2c + l_c2t)


# ---------------------------------------------------------------------------
# step and loop

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 5e-4
    mask_rate: float = 0.15
    patience: int = 5
    eval_fraction: float = 0.2
    w_t2c: float = 1.0
    w_c2c: float = 1.0
    stream: str = "codes"
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    warmup_fraction: float = 0.05
    independent_masks: bool = False
    contrastive: ContrastiveConfig | None = None

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"pretrain.lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("pretrain epochs/batch_size/patience out of range")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("pretrain.eval_fraction must lie in (0, 1)")


def pretrain_losses(model: FusionModel, batch: VisitBatch, masked: MaskedCodeBatch, cfg: PretrainConfig,
                    cl_state: ContrastiveState | None = None, mode: str | None = None,
                    masked_c2c: MaskedCodeBatch | None = None) -> dict:
    """Forward one corrupted batch and return every loss component as tensors.

    ``masked_c2c`` gives the code-to-code objective its own corruption (and a
    second forward pass); by default both objectives share ``masked``.
    """
    stream = cfg.stream
    corrupt = lambda mb: VisitBatch(batch.visits, batch.text, {stream: batch.codes[stream].replace_ids(mb.ids)})
    corrupted = corrupt(masked)
    (enc_text, enc_codes), reps = model(corrupted, mode)
    reps_c2c = reps if masked_c2c is None else model(corrupt(masked_c2c), mode)[1]
    out = {
        "t2c": t2c_loss(reps.a_text[stream], masked, model.t2c_head),
        "c2c": c2c_loss(reps_c2c.a_code[stream], masked if masked_c2c is None else masked_c2c, model.c2c_head),
    }
    total = cfg.w_t2c * out["t2c"] + cfg.w_c2c * out["c2c"]
    if cl_state is not None:
        cosine = model.cfg.cl_cosine
        text_f = _features(model.cl_text, enc_text.cls, cosine)
        code_f = _features(model.cl_code, enc_codes[stream].cls, cosine)
        towers_m = model.momentum["towers"]
        towers_m.train(model.training)
        with torch.no_grad():
            m_text, m_codes = towers_m(corrupted.text, corrupted.codes, gen=model.dropout_gen)
            text_m = _features(model.momentum["cl_text"], m_text.cls, cosine)
            code_m = _features(model.momentum["cl_code"], m_codes[stream].cls, cosine)
        c = cl_state.cfg
        out["cl"] = contrastive_loss(text_f, code_f, text_m, code_m, c.tau, c.alpha,
                                     cl_state.queue_text, cl_state.queue_code)
        out["_momentum_feats"] = (text_m, code_m)
        total = total + c.weight * out["cl"]
    out["total"] = total
    return out


def pretrain_step(model: FusionModel, batch: VisitBatch, opt: AdamState, cfg: PretrainConfig,
                  rng: np.random.Generator, cl_state: ContrastiveState | None = None) -> dict[str, float]:
    """Mask, forward, backward, Adam, momentum update. Raises before any update on a NaN loss."""
    stream_batch = batch.codes[cfg.stream]
    masked = apply_mask(stream_batch.ids, stream_batch.mask, cfg.mask_rate, rng, code_pool(model))
    masked_c2c = (apply_mask(stream_batch.ids, stream_batch.mask, cfg.mask_rate, rng, code_pool(model))
                  if cfg.independent_masks else None)
    losses = pretrain_losses(model, batch, masked, cfg, cl_state, masked_c2c=masked_c2c)
    if not math.isfinite(losses["total"].item()):
        raise NumericError("non-finite pre-training loss; parameters left unmodified")
    groups = param_groups(model)
    losses["total"].backward()
    adam_step(groups, opt)
    if cl_state is not None:
        model.momentum_update(cl_state.cfg.momentum)
        cl_state.enqueue(*losses["_momentum_feats"])
    return {k: v.item() for k, v in losses.items() if not k.startswith("_")}


def scheduled_lr(base: float, step: int, total: int, schedule: str, warmup_fraction: float) -> float:
    """Learning rate for 1-based ``step`` out of ``total``; "linear" warms up then decays to zero."""
    if schedule == "constant" or total <= 0:
        return base
    warm = max(1, int(round(warmup_fraction * total)))
    if step <= warm:
        return base * step / warm
    return base * max(0.0, (total - step + 1) / (total - warm + 1))


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent per-purpose generators derived from one master seed."""
    names = ("split", "shuffle", "mask", "eval_mask")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


@dataclass
class PretrainResult:
    history: list[dict]
    best_epoch: int
    stopped_epoch: int
    train_visits: list[VisitRecord]
    eval_visits: list[VisitRecord]
    optimizer: AdamState


def evaluate_pretrain(model: FusionModel, visits: Sequence[VisitRecord], cfg: PretrainConfig, seed: int,
                      cl_cfg: ContrastiveConfig | None = None) -> dict[str, float]:
    """Eval-mode loss with a fixed corruption (same seed every call)."""
    rng = np.random.default_rng(seed)
    was = model.training
    model.eval()
    sums: dict[str, float] = {}
    n = 0
    with torch.no_grad():
        for i in range(0, len(visits), cfg.batch_size):
            chunk = visits[i: i + cfg.batch_size]
            batch = model.collate(chunk, (cfg.stream,))
            sb = batch.codes[cfg.stream]
            masked = apply_mask(sb.ids, sb.mask, cfg.mask_rate, rng, code_pool(model))
            if masked.n_masked == 0:
                continue
            state = ContrastiveState(cl_cfg) if cl_cfg is not None and len(chunk) >= 2 else None
            losses = pretrain_losses(model, batch, masked, cfg, state)
            for k, v in losses.items():
                if not k.startswith("_"):
                    sums[k] = sums.get(k, 0.0) + v.item() * len(chunk)
            n += len(chunk)
    model.train(was)
    return {k: v / n for k, v in sums.items()}


def pretrain_split(visits: Sequence[VisitRecord], eval_fraction: float, seed: int):
    """Train/held-out partition used by ``pretrain_loop`` for a given seed."""
    visits = [v for v in visits if v.codes]
    rngs = rng_streams(seed)
    train, held, _ = split_items(visits, (1.0 - eval_fraction, eval_fraction, 0.0),
                                 int(rngs["split"].integers(2**31)))
    if not train:
        raise ConfigError("pre-training set is empty")
    return train, held or train


def pretrain_loop(model: FusionModel, visits: Sequence[VisitRecord], cfg: PretrainConfig, seed: int = 0,
                  log=None, optimizer: AdamState | None = None) -> PretrainResult:
    """Epoch-shuffled training with early stopping on eval loss; restores the best state.

    Passing ``optimizer`` continues from saved moment estimates (resume).
    """
    train, held = pretrain_split(visits, cfg.eval_fraction, seed)
    rngs = rng_streams(seed)
    eval_seed = int(rngs["eval_mask"].integers(2**31))
    opt = optimizer if optimizer is not None else AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    cl_state = ContrastiveState(cfg.contrastive) if cfg.contrastive is not None else None
    if cl_state is not None and not model.cfg.contrastive:
        raise ConfigError("contrastive pre-training needs a model built with contrastive=True")

    history = []
    ev = evaluate_pretrain(model, held, cfg, eval_seed, cfg.contrastive)
    history.append({"epoch": 0, **{f"train_{k}": float("nan") for k in ev}, **{f"eval_{k}": v for k, v in ev.items()}})
    best, best_epoch, bad = ev["total"], 0, 0
    best_state = copy.deepcopy(model.state_dict())
    stopped = 0
    total_steps = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    step0 = opt.step
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rngs["shuffle"].permutation(len(train))
        sums: dict[str, float] = {}
        n = 0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train[j] for j in order[i: i + cfg.batch_size]]
            if cl_state is not None and len(chunk) < 2 and cl_state.queue_text is None:
                continue
            opt.lr = scheduled_lr(cfg.lr, opt.step - step0 + 1, total_steps, cfg.lr_schedule, cfg.warmup_fraction)
            losses = pretrain_step(model, model.collate(chunk, (cfg.stream,)), opt, cfg, rngs["mask"], cl_state)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
            n += len(chunk)
        ev = evaluate_pretrain(model, held, cfg, eval_seed, cfg.contrastive)
        row = {"epoch": epoch, **{f"train_{k}": v / n for k, v in sums.items()},
               **{f"eval_{k}": v for k, v in ev.items()}}
        history.append(row)
        stopped = epoch
        if log:
            log(row)
        if ev["total"] < best:
            best, best_epoch, bad = ev["total"], epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad > cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return PretrainResult(history, best_epoch, stopped, train, held, opt)


# ---------------------------------------------------------------------------
# diagnostics on a trained model

def leave_one_out(visits: Sequence[VisitRecord], model: FusionModel, seed: int, stream: str = "codes",
                  every: bool = False):
    """Hide one code slot with [MASK].

    ``every=False`` hides one random slot per visit; ``every=True`` emits one
    row per (visit, code slot). Returns ``(batch, owner visit index, hidden
    positions, labels)``.
    """
    rng = np.random.default_rng(seed)
    base = model.collate(visits, (stream,))
    sb = base.codes[stream]
    rows, owner, pos, lab = [], [], [], []
    for r in range(sb.ids.shape[0]):
        elig = np.flatnonzero((sb.mask[r] & (sb.ids[r] >= N_SPECIAL)).numpy())
        picks = elig if every else [elig[rng.integers(elig.size)]]
        for p in picks:
            ids = sb.ids[r].clone()
            lab.append(int(ids[p]))
            ids[p] = MASK_ID
            rows.append(ids)
            owner.append(r)
            pos.append(int(p))
    idx = torch.as_tensor(owner, dtype=torch.long)
    text = SequenceBatch(base.text.ids[idx], base.text.segments[idx], base.text.mask[idx], "text")
    codes = SequenceBatch(torch.stack(rows), sb.segments[idx], sb.mask[idx], stream)
    masked = VisitBatch([base.visits[o] for o in owner], text, {stream: codes})
    return masked, owner, pos, lab


def _visits_with_codes(visits, stream):
    return [v for v in visits if stream_codes(v, stream)]


@torch.no_grad()
def masked_code_accuracy(model: FusionModel, visits: Sequence[VisitRecord], seed: int = 0, mode: str | None = None,
                         exclude_visible: bool = True, every: bool = True, stream: str = "codes",
                         batch_size: int = 128) -> dict:
    """Top-1 accuracy of recovering a hidden code via each head.

    With ``exclude_visible`` the candidates are codes not already present in
    the visible input (the hidden code is, by construction, absent from it).
    """
    visits = _visits_with_codes(visits, stream)
    model.eval()
    hits = {"t2c": 0, "c2c": 0}
    n = 0
    for i in range(0, len(visits), batch_size):
        batch, _, _, lab = leave_one_out(visits[i: i + batch_size], model, seed + i, stream, every)
        _, reps = model(batch, mode)
        sb = batch.codes[stream]
        target = torch.as_tensor(lab)
        for name, rep, head in (("t2c", reps.a_text[stream], model.t2c_head),
                                ("c2c", reps.a_code[stream], model.c2c_head)):
            logits = head(rep).clone()
            logits[:, :N_SPECIAL] = -math.inf
            if exclude_visible:
                visible = torch.zeros_like(logits, dtype=torch.bool)
                visible.scatter_(1, torch.where(sb.mask, sb.ids, 0), True)
                visible[:, :N_SPECIAL] = False
                logits[visible] = -math.inf
            hits[name] += int((logits.argmax(1) == target).sum())
        n += len(lab)
    return {"t2c": hits["t2c"] / n, "c2c": hits["c2c"] / n, "n": n}


@torch.no_grad()
def cue_alignment(model: FusionModel, visits: Sequence[VisitRecord], cues_for, seed: int = 0,
                  every: bool = True, stream: str = "codes", batch_size: int = 128) -> dict:
    """Share of hidden codes whose prediction context (code [CLS] over text) peaks on one of its cue tokens.

    The [CLS] slot of the text is not a candidate.
    """
    visits = _visits_with_codes(visits, stream)
    model.eval()
    hit = n = 0
    for i in range(0, len(visits), batch_size):
        batch, _, _, lab = leave_one_out(visits[i: i + batch_size], model, seed + i, stream, every)
        _, reps = model(batch, "cross")
        w = reps.code_over_text[stream].masked_fill(~batch.text.mask, -1.0)
        w[:, 0] = -1.0
        peak = w.argmax(1)
        for r, v in enumerate(batch.visits):
            if v.text_tokens[int(peak[r]) - 1] in cues_for(model.code_vocab.string(lab[r])):
                hit += 1
        n += len(lab)
    return {"rate": hit / n, "n": n}
