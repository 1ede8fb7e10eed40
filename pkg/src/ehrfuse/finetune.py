"""Downstream heads (drug recommendation, ICD coding, readmission), metrics and ratio sweeps."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import DRUG_REC_SPLIT, VISIT_SPLIT, Cohort, PatientHistory, VisitRecord, split_items
from .encoders import Linear
from .model import FusionModel
from .numerics import AdamState, ConfigError, ShapeError, adam_step, param_groups
from .pretrain import scheduled_lr

TASKS = ("drug_rec", "icd", "readmission")
PAPER_LR = {"drug_rec": 5e-5, "readmission": 2e-5, "icd": 1e-5}
DESK_LR = {"drug_rec": 1e-2, "readmission": 1e-2, "icd": 1e-2}
PROB_CLIP = 1e-7


class UndefinedMetricError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics

def auc_binary(scores, labels) -> float:
    """ROC-AUC via average ranks; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative example")
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0  # 1-based average rank of each distinct value
    rank_sum = avg_rank[inv][y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def binary_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    return {"auc": auc_binary(s, y), "accuracy": float((pred == y).mean()), "f1": _f1(tp, fp, fn)}


def macro_auc(scores, labels) -> float:
    """Mean per-label AUC over labels where both classes occur."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    aucs = [auc_binary(s[:, j], y[:, j]) for j in range(y.shape[1]) if 0 < y[:, j].sum() < y.shape[0]]
    if not aucs:
        raise UndefinedMetricError("no label has both classes present")
    return float(np.mean(aucs))


def example_scores(pred, truth) -> tuple[float, float, float]:
    """(example F1, example Jaccard, subset accuracy); empty-vs-empty counts as 1."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    inter = (p & t).sum(1)
    union = (p | t).sum(1)
    size = p.sum(1) + t.sum(1)
    f1 = np.where(size == 0, 1.0, 2 * inter / np.maximum(size, 1))
    jac = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    subset = (p == t).all(1)
    return float(f1.mean()), float(jac.mean()), float(subset.mean())


@dataclass
class MetricReport:
    task: str
    seed: int
    f1: float
    accuracy: float
    auc: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"task": self.task, "seed": self.seed, "f1": self.f1, "accuracy": self.accuracy,
                "auc": self.auc, **self.extra}


def compute_metrics(scores, labels, task_kind: str, task: str = "", seed: int = 0,
                    threshold: float = 0.5) -> MetricReport:
    if task_kind == "binary":
        m = binary_metrics(scores, labels, threshold)
        return MetricReport(task, seed, m["f1"], m["accuracy"], m["auc"])
    if task_kind == "multilabel":
        s = np.asarray(scores, dtype=np.float64)
        f1, jac, subset = example_scores(s >= threshold, labels)
        return MetricReport(task, seed, f1, jac, macro_auc(s, labels), {"subset_accuracy": subset})
    raise ConfigError(f"unknown task kind {task_kind!r}")


@dataclass
class MetricSummary:
    task: str
    runs: list[MetricReport]
    mean: dict[str, float]
    std: dict[str, float]

    def formatted(self) -> dict[str, str]:
        """Percentages as ``mean (std)``."""
        return {k: f"{100 * self.mean[k]:.2f} ({100 * self.std[k]:.2f})" for k in ("auc", "f1", "accuracy")}

    def to_json(self) -> dict:
        return {"task": self.task, "runs": [r.to_json() for r in self.runs], "mean": self.mean,
                "std": self.std, "formatted": self.formatted()}


def aggregate(reports: Sequence[MetricReport]) -> MetricSummary:
    """Mean and population standard deviation across seeds."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = ("auc", "f1", "accuracy")
    vals = {k: np.array([getattr(r, k) for r in reports]) for k in keys}
    return MetricSummary(reports[0].task, list(reports), {k: float(v.mean()) for k, v in vals.items()},
                         {k: float(v.std()) for k, v in vals.items()})


# ---------------------------------------------------------------------------
# heads and losses

def _bce_logits(logits, targets):
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")


def bce(probs, targets, clip: float = PROB_CLIP):
    """Element-wise binary cross-entropy on probabilities, clipped away from 0 and 1."""
    p = probs.clamp(clip, 1.0 - clip)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log1p(-p))


@dataclass
class DrugRecInput:
    """History reps for visits 1..t-1 plus the current visit's diagnosis-stream code rep."""

    text_diag: torch.Tensor  # [t-1, H_w]
    text_med: torch.Tensor  # [t-1, H_w]
    code_diag: torch.Tensor  # [t-1, H_c]
    code_med: torch.Tensor  # [t-1, H_c]
    current_diag: torch.Tensor  # [H_c]

    def features(self) -> torch.Tensor:
        if self.text_diag.shape[0] < 1:
            raise InsufficientHistoryError("drug recommendation needs at least one previous visit")
        means = [x.mean(0) for x in (self.text_diag, self.text_med, self.code_diag, self.code_med)]
        return torch.cat(means + [self.current_diag])


def drug_rec_width(model: FusionModel) -> int:
    return 2 * model.cfg.text.hidden + 3 * model.cfg.code.hidden


def drug_rec_predict(inp: DrugRecInput, head: Linear) -> torch.Tensor:
    return torch.sigmoid(head(inp.features()))


def drug_rec_loss(preds: Sequence[torch.Tensor], targets: Sequence[torch.Tensor], from_logits: bool = False):
    """Per patient: mean over t of element-mean BCE; then mean over patients."""
    per_patient = []
    for p, y in zip(preds, targets, strict=True):
        if p.shape != y.shape:
            raise ShapeError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")
        elem = _bce_logits(p, y) if from_logits else bce(p, y)
        per_patient.append(elem.mean(dim=-1).mean())
    return torch.stack(per_patient).mean()


def icd_predict_and_loss(a_text, a_code, head: Linear, targets, from_logits: bool = False):
    """Sigmoid head over [a_text ; a_code]; loss sums BCE over labels, averaged over examples."""
    logits = head(torch.cat([a_text, a_code], dim=-1))
    if logits.shape != targets.shape:
        raise ShapeError(f"{logits.shape[-1]} outputs vs {targets.shape[-1]} label columns")
    probs = torch.sigmoid(logits)
    elem = _bce_logits(logits, targets) if from_logits else bce(probs, targets)
    return probs, elem.sum(-1).mean()


def readmission_predict_and_loss(a_text, a_code, head: Linear, labels, from_logits: bool = False):
    """Scalar probability per visit; loss is the BCE summed over the batch."""
    logits = head(torch.cat([a_text, a_code], dim=-1)).squeeze(-1)
    if logits.shape != labels.shape:
        raise ShapeError("one label per visit expected")
    probs = torch.sigmoid(logits)
    elem = _bce_logits(logits, labels) if from_logits else bce(probs, labels)
    return probs, elem.sum()


# ---------------------------------------------------------------------------
# task plumbing: units -> head inputs

@dataclass
class TaskSpec:
    name: str
    kind: str  # "binary" | "multilabel"
    streams: tuple[str, ...]
    label_codes: list[str]

    def n_out(self) -> int:
        return 1 if self.kind == "binary" else len(self.label_codes)


def task_spec(task: str, model: FusionModel) -> TaskSpec:
    cv = model.code_vocab
    if task == "drug_rec":
        return TaskSpec(task, "multilabel", ("diag", "med"), cv.codes_of_kind("med"))
    if task == "icd":
        return TaskSpec(task, "multilabel", ("med",), cv.codes_of_kind("diag"))
    if task == "readmission":
        return TaskSpec(task, "binary", ("codes",), [])
    raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")


def head_width(spec: TaskSpec, model: FusionModel) -> int:
    if spec.name == "drug_rec":
        return drug_rec_width(model)
    return model.cfg.text.hidden + model.cfg.code.hidden


def task_units(cohort: Cohort, task: str) -> list:
    if task == "drug_rec":
        units = [p for p in cohort.patients if len(p.visits) >= 2]
        if not units:
            raise ConfigError("drug recommendation needs patients with at least two visits")
        return units
    if task == "readmission":
        units = [v for v in cohort.visits() if v.readmit_label is not None]
        if not units:
            raise ConfigError("cohort has no readmission labels")
        return units
    if task == "icd":
        return cohort.visits()
    raise ConfigError(f"unknown task {task!r}")


def _multi_hot(codes: Sequence[str], index: dict[str, int], dtype) -> torch.Tensor:
    y = torch.zeros(len(index), dtype=dtype)
    for c in codes:
        if c in index:
            y[index[c]] = 1.0
    return y


def task_inputs(model: FusionModel, spec: TaskSpec, units: Sequence, mode: str):
    """Head inputs X, targets Y and the owning-unit index of each example row."""
    dtype = model.t2c_head.weight.dtype
    index = {c: i for i, c in enumerate(spec.label_codes)}
    if spec.name == "drug_rec":
        visits = [v for p in units for v in p.visits]
        _, reps = model(model.collate(visits, spec.streams), mode)
        per_visit = [reps.a_text["diag"], reps.a_text["med"], reps.a_code["diag"], reps.a_code["med"]]
        xs, ys, owner = [], [], []
        row = 0
        for u, p in enumerate(units):
            rows = slice(row, row + len(p.visits))
            blocks = [b[rows] for b in per_visit]
            cur = reps.a_code["diag"][rows]
            for t in range(1, len(p.visits)):
                inp = DrugRecInput(*(b[:t] for b in blocks), current_diag=cur[t])
                xs.append(inp.features())
                ys.append(_multi_hot(p.visits[t].med_codes, index, dtype))
                owner.append(u)
            row += len(p.visits)
        return torch.stack(xs), torch.stack(ys), torch.as_tensor(owner)
    stream = spec.streams[0]
    _, reps = model(model.collate(units, spec.streams), mode)
    x = torch.cat([reps.a_text[stream], reps.a_code[stream]], dim=-1)
    if spec.kind == "binary":
        y = torch.as_tensor([float(bool(v.readmit_label)) for v in units], dtype=dtype)
    else:
        y = torch.stack([_multi_hot(v.icd_labels or v.diag_codes, index, dtype) for v in units])
    return x, y, torch.arange(len(units))


def task_loss(spec: TaskSpec, logits: torch.Tensor, y: torch.Tensor, owner: torch.Tensor) -> torch.Tensor:
    if spec.name == "drug_rec":
        groups = [logits[owner == u] for u in torch.unique(owner)]
        targets = [y[owner == u] for u in torch.unique(owner)]
        return drug_rec_loss(groups, targets, from_logits=True)
    if spec.name == "icd":
        return _bce_logits(logits, y).sum(-1).mean()
    return _bce_logits(logits.squeeze(-1), y).sum()


# ---------------------------------------------------------------------------
# runners

@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "readmission"
    lr: float | None = None
    epochs: int = 30
    batch_size: int = 32
    patience: int = 5
    mode: str = "cross"
    ratio: float = 1.0
    split_seed: int = 0
    tune_towers: bool = False
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"finetune.task must be one of {TASKS}, got {self.task!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"finetune.ratio must lie in (0, 1], got {self.ratio}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("finetune epochs/batch_size/patience out of range")

    @property
    def learning_rate(self) -> float:
        return DESK_LR[self.task] if self.lr is None else self.lr


def task_split(units: Sequence, task: str, seed: int):
    ratios = DRUG_REC_SPLIT if task == "drug_rec" else VISIT_SPLIT
    return split_items(units, ratios, seed)


def nested_subset(items: Sequence, ratio: float, seed: int) -> list:
    """Per-seed random prefix of size round(ratio * n), kept in original order.

    For a fixed seed, a smaller ratio always yields a subset of a larger one.
    """
    n = len(items)
    k = n if ratio >= 1.0 else int(math.floor(ratio * n + 0.5))
    if k < 2:
        raise ConfigError(f"training ratio {ratio} leaves {k} example(s); need at least 2")
    if k == n:
        return list(items)
    perm = np.random.default_rng([seed, 7]).permutation(n)
    return [items[i] for i in sorted(perm[:k])]


@dataclass
class FinetuneResult:
    report: MetricReport
    history: list[dict]
    best_epoch: int
    n_train: int


def _scores(spec: TaskSpec, logits: torch.Tensor) -> np.ndarray:
    p = torch.sigmoid(logits.detach()).double().numpy()
    return p[:, 0] if spec.kind == "binary" else p


def _eval_metrics(spec, logits, y, seed) -> MetricReport:
    labels = y.detach().numpy()
    return compute_metrics(_scores(spec, logits), labels, spec.kind, spec.name, seed)


def finetune_run(pretrained: FusionModel, cohort: Cohort, cfg: FinetuneConfig, seed: int) -> FinetuneResult:
    """Fine-tune one task head (and optionally the towers) and report test metrics.

    The split is fixed by ``cfg.split_seed``; ``seed`` drives head init,
    training subset, shuffling and dropout. Early stopping tracks validation
    AUC and restores the best state before testing.
    """
    spec = task_spec(cfg.task, pretrained)
    train, valid, test = task_split(task_units(cohort, cfg.task), cfg.task, cfg.split_seed)
    train = nested_subset(train, cfg.ratio, seed)
    if not valid or not test:
        raise ConfigError(f"{cfg.task}: split leaves an empty validation or test set")

    model = copy.deepcopy(pretrained)
    model.dropout_gen.manual_seed(seed)
    head = model.add_task_head(cfg.task, head_width(spec, model), spec.n_out(), seed)
    if not cfg.tune_towers:
        model.requires_grad_(False)
        head.requires_grad_(True)
    rng = np.random.default_rng([seed, 11])
    opt = AdamState(lr=cfg.learning_rate)
    groups = [g for g in param_groups(model) if g.trainable]

    cache = {}
    if not cfg.tune_towers:
        model.eval()
        with torch.no_grad():
            for name, units in (("train", train), ("valid", valid), ("test", test)):
                cache[name] = _batched_inputs(model, spec, units, cfg.mode)

    def inputs(name, units):
        if name in cache:
            return cache[name]
        with torch.no_grad():
            model.eval()
            out = _batched_inputs(model, spec, units, cfg.mode)
        return out

    history = []
    best_auc, best_epoch, bad = -math.inf, 0, 0
    best_state = copy.deepcopy(model.state_dict())
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        running, n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i: i + cfg.batch_size]
            if cfg.tune_towers:
                model.train()
                x, y, owner = task_inputs(model, spec, [train[j] for j in idx], cfg.mode)
            else:
                x_all, y_all, owner_all = cache["train"]
                sel = torch.isin(owner_all, torch.as_tensor(idx))
                x, y, owner = x_all[sel], y_all[sel], owner_all[sel]
            loss = task_loss(spec, head(x), y, owner)
            loss.backward()
            opt.lr = scheduled_lr(cfg.learning_rate, opt.step + 1, total, cfg.lr_schedule, 0.05)
            adam_step(groups, opt)
            running += loss.item()
            n += 1
        xv, yv, _ = inputs("valid", valid)
        with torch.no_grad():
            val = _safe_auc(spec, head(xv), yv)
        history.append({"epoch": epoch, "train_loss": running / n, "valid_auc": val})
        if val > best_auc:
            best_auc, best_epoch, bad = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad > cfg.patience:
                break
    model.load_state_dict(best_state)
    xt, yt, _ = inputs("test", test)
    with torch.no_grad():
        report = _eval_metrics(spec, head(xt), yt, seed)
    report.extra.update({"ratio": cfg.ratio, "mode": cfg.mode})
    return FinetuneResult(report, history, best_epoch, len(train))


def _safe_auc(spec, logits, y) -> float:
    try:
        return _eval_metrics(spec, logits, y, 0).auc
    except UndefinedMetricError:
        return -_bce_logits(logits.reshape(y.shape), y).mean().item()


def _batched_inputs(model, spec, units, mode, batch_size: int = 64):
    xs, ys, owners = [], [], []
    offset = 0
    for i in range(0, len(units), batch_size):
        x, y, o = task_inputs(model, spec, units[i: i + batch_size], mode)
        xs.append(x), ys.append(y), owners.append(o + offset)
        offset += len(units[i: i + batch_size])
    return torch.cat(xs), torch.cat(ys), torch.cat(owners)


def finetune_seeds(pretrained: FusionModel, cohort: Cohort, cfg: FinetuneConfig,
                   seeds: Sequence[int]) -> MetricSummary:
    return aggregate([finetune_run(pretrained, cohort, cfg, s).report for s in seeds])


def ratio_sweep(pretrained: FusionModel, cohort: Cohort, cfg: FinetuneConfig, ratios: Sequence[float],
                seeds: Sequence[int]) -> list[dict]:
    """One fine-tune per (ratio, seed) from the same pre-trained weights.

    Returns CSV-ready rows ``task, ratio, seed, auc, f1, accuracy``.
    """
    rows = []
    for ratio in ratios:
        for seed in seeds:
            r = finetune_run(pretrained, cohort, _with(cfg, ratio=ratio), seed).report
            rows.append({"task": cfg.task, "ratio": ratio, "seed": seed, "auc": r.auc, "f1": r.f1,
                         "accuracy": r.accuracy})
    return rows


def _with(cfg: FinetuneConfig, **kw) -> FinetuneConfig:
    d = asdict(cfg)
    d.update(kw)
    return FinetuneConfig(**d)
