"""Named self-checks: gradients, mask statistics, attention, metrics, invariances, persistence.

Each check returns a ``CheckResult``; ``run_checks`` collects them into a
JSON-serialisable report. ``fault`` enables a deliberate defect (see
``numerics.inject_fault``) so the harness can demonstrate that it notices.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import GeneratorConfig, generate_synthetic_cohort
from .finetune import (DrugRecInput, auc_binary, compute_metrics, drug_rec_predict, example_scores, task_inputs,
                       task_loss, task_spec, head_width)
from .fusion import fuse_visit
from .model import PRESETS, CorruptCheckpointError, build_model, load_checkpoint, save_checkpoint
from .numerics import AdamState, adam_step, grad_check, inject_fault, param_groups
from .pretrain import (ContrastiveConfig, ContrastiveState, PretrainConfig, apply_mask, code_pool,
                       contrastive_loss, pretrain_losses, pretrain_step)
from .vocab import CLS_ID, PAD_ID

TINY_WORLD = GeneratorConfig(n_patients=6, n_visits=14, multi_visit_fraction=0.5, n_diag=12, n_med=8,
                             n_escalation_meds=2, n_filler=12, conditions_per_visit=(1, 3),
                             filler_per_visit=(2, 5))
GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "seconds": round(self.seconds, 3), "detail": self.detail}


def tiny_setup(contrastive: bool = False, dtype=torch.float64, seed: int = 0, preset: str = "desk", **model_kw):
    cohort = generate_synthetic_cohort(TINY_WORLD, seed=seed)
    cfg = replace(PRESETS[preset], contrastive=contrastive, **model_kw)
    model = build_model(cfg, cohort.token_vocab, cohort.code_vocab, cohort.ontology, seed=seed, dtype=dtype)
    return cohort, model


def _grad_summary(report) -> dict:
    trainable = [e for e in report if e.trainable]
    frozen = [e for e in report if not e.trainable]
    worst = max(trainable, key=lambda e: e.max_rel_error)
    return {
        "groups": len(report),
        "max_rel_error": worst.max_rel_error,
        "worst_group": worst.name,
        "frozen_max_abs_grad": max((e.max_abs_analytic for e in frozen), default=0.0),
        "passed_groups": sum(e.passed(GRAD_TOL) for e in trainable),
        "trainable_groups": len(trainable),
    }


def check_grad_pretrain(contrastive: bool, samples: int = 3) -> CheckResult:
    cohort, model = tiny_setup(contrastive=contrastive)
    model.eval()
    visits = [v for v in cohort.visits() if len(v.codes) >= 2][:2]
    batch = model.collate(visits)
    sb = batch.codes["codes"]
    masked = apply_mask(sb.ids, sb.mask, 0.5, np.random.default_rng(0), code_pool(model))
    cl = ContrastiveConfig() if contrastive else None
    cfg = PretrainConfig(contrastive=cl)
    state = ContrastiveState(cl) if contrastive else None
    loss_fn = lambda: pretrain_losses(model, batch, masked, cfg, state)["total"]
    report = grad_check(loss_fn, param_groups(model), samples=samples, floor=GRAD_FLOOR)
    s = _grad_summary(report)
    ok = s["max_rel_error"] < GRAD_TOL and s["frozen_max_abs_grad"] == 0.0
    return CheckResult(f"grad_check_pretrain{'_contrastive' if contrastive else ''}", ok, s)


def check_grad_tasks(samples: int = 2) -> CheckResult:
    cohort, model = tiny_setup()
    model.eval()
    details, ok = {}, True
    for task in ("drug_rec", "icd", "readmission"):
        spec = task_spec(task, model)
        head = model.add_task_head(task, head_width(spec, model), spec.n_out(), seed=1)
        units = [p for p in cohort.patients if len(p.visits) >= 2][:2] if task == "drug_rec" else cohort.visits()[:3]

        def loss_fn():
            x, y, owner = task_inputs(model, spec, units, "cross")
            return task_loss(spec, head(x), y, owner)

        report = grad_check(loss_fn, param_groups(model), samples=samples, floor=GRAD_FLOOR)
        s = _grad_summary(report)
        details[task] = s
        ok &= s["max_rel_error"] < GRAD_TOL
        del model.task_heads[task]
    return CheckResult("grad_check_tasks", ok, details)


def mask_statistics(n_tokens: int, rate: float = 0.15, seed: int = 0, row_len: int = 60) -> dict:
    rng = np.random.default_rng(seed)
    n_rows = math.ceil(n_tokens / row_len)
    pool = list(range(4, 104))
    counts = {"eligible": 0, "selected": 0, "MASKED": 0, "KEPT": 0, "RANDOM": 0, "rows": 0}
    for start in range(0, n_rows, 2000):
        rows = min(2000, n_rows - start)
        ids = torch.as_tensor(rng.integers(4, 104, size=(rows, row_len + 1)))
        ids[:, 0] = CLS_ID
        pad = torch.ones_like(ids, dtype=torch.bool)
        mb = apply_mask(ids, pad, rate, rng, pool)
        counts["eligible"] += rows * row_len
        counts["rows"] += rows
        for acts in mb.actions:
            counts["selected"] += len(acts)
            for a in acts:
                counts[a] += 1
    sel = counts["selected"]
    return {"eligible": counts["eligible"], "selected_fraction": sel / counts["eligible"],
            "masked": counts["MASKED"] / sel, "kept": counts["KEPT"] / sel, "random": counts["RANDOM"] / sel}


def check_mask_statistics(n_tokens: int = 1_000_000) -> CheckResult:
    s = mask_statistics(n_tokens)
    ok = (abs(s["selected_fraction"] - 0.15) <= 0.005 and abs(s["masked"] - 0.8) <= 0.01
          and abs(s["kept"] - 0.1) <= 0.01 and abs(s["random"] - 0.1) <= 0.01)
    return CheckResult("mask_statistics", ok, s)


def _random_batch(model, rng, cohort):
    visits = list(rng.choice(np.array(cohort.visits(), dtype=object), size=int(rng.integers(1, 5))))
    return model.collate(visits, ("diag", "med"))


def check_attention_normalization(trials: int = 1000) -> CheckResult:
    cohort, model = tiny_setup(dtype=torch.float64)
    model.eval()
    rng = np.random.default_rng(0)
    worst, worst_masked = 0.0, 0.0
    with torch.no_grad():
        for t in range(trials):
            if t % 100 == 0:
                for p in model.parameters():
                    p.copy_(torch.as_tensor(rng.normal(0, 0.5, size=tuple(p.shape))))
            batch = _random_batch(model, rng, cohort)
            (enc_t, enc_c), reps = model(batch, "cross", capture=True)
            pairs = [(w, enc_t.mask) for w in enc_t.attn_maps]
            for s, e in enc_c.items():
                pairs += [(w, e.mask) for w in e.attn_maps]
                pairs.append((reps.text_over_code[s], e.mask))
                pairs.append((reps.code_over_text[s], enc_t.mask))
            for w, mask in pairs:
                keep = mask[:, None, None, :] if w.dim() == 4 else mask
                worst = max(worst, float((w.sum(-1) - 1.0).abs().max()))
                worst_masked = max(worst_masked, float(w.masked_fill(keep, 0.0).abs().max()))
    return CheckResult("attention_normalization", worst <= 1e-6 and worst_masked == 0.0,
                       {"trials": trials, "max_row_sum_error": worst, "max_weight_on_padding": worst_masked})


def check_uniform_head_baseline() -> CheckResult:
    cohort, model = tiny_setup()
    model.eval()
    with torch.no_grad():
        for head in (model.t2c_head, model.c2c_head):
            for p in head.parameters():
                p.zero_()
    batch = model.collate(cohort.visits()[:4])
    sb = batch.codes["codes"]
    masked = apply_mask(sb.ids, sb.mask, 0.15, np.random.default_rng(0), code_pool(model))
    with torch.no_grad():
        losses = pretrain_losses(model, batch, masked, PretrainConfig())
    target = math.log(len(model.code_vocab))
    err = max(abs(losses["t2c"].item() - target), abs(losses["c2c"].item() - target))
    return CheckResult("uniform_head_baseline", err <= 1e-9,
                       {"ln_vocab": target, "t2c": losses["t2c"].item(), "c2c": losses["c2c"].item()})


def brute_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def check_metric_oracles(trials: int = 1000) -> CheckResult:
    rng = np.random.default_rng(0)
    mismatches, monotone_fail, n_auc = 0, 0, 0
    for _ in range(trials):
        n, l = int(rng.integers(2, 21)), int(rng.integers(1, 6))
        scores = rng.integers(0, 6, size=(n, l)) / 5.0  # coarse grid forces ties
        labels = rng.random((n, l)) < 0.5
        for j in range(l):
            if 0 < labels[:, j].sum() < n:
                n_auc += 1
                a = auc_binary(scores[:, j], labels[:, j])
                mismatches += a != brute_auc(scores[:, j], labels[:, j])
                monotone_fail += a != auc_binary(np.exp(3 * scores[:, j]) - 7, labels[:, j])
        pred = scores >= 0.5
        f1, jac, _ = example_scores(pred, labels)
        bf1, bjac = [], []
        for r in range(n):
            p, t = set(np.flatnonzero(pred[r])), set(np.flatnonzero(labels[r]))
            bf1.append(1.0 if not p and not t else 2 * len(p & t) / (len(p) + len(t)))
            bjac.append(1.0 if not p | t else len(p & t) / len(p | t))
        mismatches += abs(f1 - float(np.mean(bf1))) > 1e-12
        mismatches += abs(jac - float(np.mean(bjac))) > 1e-12
    return CheckResult("metric_oracles", mismatches == 0 and monotone_fail == 0,
                       {"trials": trials, "auc_cases": n_auc, "mismatches": int(mismatches),
                        "monotone_failures": int(monotone_fail)})


def check_contrastive_identities(steps: int = 100) -> CheckResult:
    g = torch.Generator().manual_seed(0)
    norm = lambda x: torch.nn.functional.normalize(x, dim=-1)
    t, c, tm, cm = (norm(torch.randn(6, 5, generator=g, dtype=torch.float64)) for _ in range(4))
    hard = 0.5 * (torch.nn.functional.cross_entropy(t @ cm.T / 0.07, torch.arange(6))
                  + torch.nn.functional.cross_entropy(c @ tm.T / 0.07, torch.arange(6)))
    alpha0 = abs(contrastive_loss(t, c, tm, cm, 0.07, 0.0).item() - hard.item())
    big_tau = abs(contrastive_loss(t, c, tm, cm, 1e6, 0.4).item() - math.log(6))

    cohort, model = tiny_setup(contrastive=True, dtype=torch.float32)
    before = [p.detach().clone() for p in model.momentum.parameters()]
    live_before = [p.detach().clone() for p in model.cl_text.parameters()]
    cfg = PretrainConfig(contrastive=ContrastiveConfig(momentum=1.0))
    state = ContrastiveState(cfg.contrastive)
    opt = AdamState(lr=1e-3)
    rng = np.random.default_rng(0)
    visits = [v for v in cohort.visits() if v.codes]
    model.train()
    for s in range(steps):
        chunk = [visits[(s * 4 + k) % len(visits)] for k in range(4)]
        pretrain_step(model, model.collate(chunk), opt, cfg, rng, state)
    moved = max(float((a - b).abs().max()) for a, b in zip(before, model.momentum.parameters()))
    live_moved = max(float((a - b.detach()).abs().max()) for a, b in zip(live_before, model.cl_text.parameters()))
    ok = alpha0 <= 1e-10 and big_tau <= 1e-3 and moved == 0.0
    return CheckResult("contrastive_identities", ok,
                       {"alpha0_error": alpha0, "large_tau_error": big_tau, "momentum_drift_m1": moved,
                        "steps": steps, "live_params_moved": live_moved > 0})


def check_invariances() -> CheckResult:
    cohort, model = tiny_setup()
    model.eval()
    d = {}
    enc = model.towers.code_encoder
    table = model.towers.code_table()
    with torch.no_grad():
        # code-encoder permutation equivariance (no positions on the code side)
        v = max(cohort.visits(), key=lambda v: len(v.codes))
        b = model.collate([v]).codes["codes"]
        perm = torch.cat([torch.zeros(1, dtype=torch.long), 1 + torch.randperm(b.ids.shape[1] - 1,
                                                                               generator=torch.Generator().manual_seed(0))])
        z = enc(table[b.ids], b.mask).z
        zp = enc(table[b.ids[:, perm]], b.mask[:, perm]).z
        d["permutation_equivariance"] = float((z[:, perm] - zp).abs().max())
        # padding invariance
        ids = torch.cat([b.ids, torch.full((1, 5), PAD_ID)], 1)
        mask = torch.cat([b.mask, torch.zeros(1, 5, dtype=torch.bool)], 1)
        d["padding_invariance"] = float((enc(table[ids], mask).z[:, : b.ids.shape[1]] - z).abs().max())
        # history-order invariance of drug recommendation
        spec = task_spec("drug_rec", model)
        head = model.add_task_head("drug_rec", head_width(spec, model), spec.n_out(), seed=0)
        g = torch.Generator().manual_seed(1)
        h_w, h_c = model.cfg.text.hidden, model.cfg.code.hidden
        hist = [torch.randn(4, w, generator=g, dtype=torch.float64) for w in (h_w, h_w, h_c, h_c)]
        cur = torch.randn(h_c, generator=g, dtype=torch.float64)
        p0 = drug_rec_predict(DrugRecInput(*hist, current_diag=cur), head)
        order = torch.tensor([2, 0, 3, 1])
        p1 = drug_rec_predict(DrugRecInput(*(x[order] for x in hist), current_diag=cur), head)
        d["history_order"] = float((p0 - p1).abs().max())
        # ablation independence from the other modality
        vs = cohort.visits()[:3]
        b1 = model.collate(vs)
        b2 = model.collate([replace(x, text_tokens=tuple(reversed(x.text_tokens)) + ("w000",)) for x in vs])
        r1 = model(b1, "ablation")[1]
        r2 = model(b2, "ablation")[1]
        d["ablation_code_independent_of_text"] = float((r1.a_code["codes"] - r2.a_code["codes"]).abs().max())
    # frozen prefix: zero gradient on embeddings and first layer
    _, fm = tiny_setup(preset="desk")
    fm = build_model(replace(fm.cfg, text=replace(fm.cfg.text, freeze_prefix=1)), fm.token_vocab, fm.code_vocab,
                     fm.ontology, seed=0, dtype=torch.float64)
    fm.eval()
    batch = fm.collate(cohort.visits()[:3])
    _, reps = fm(batch)
    (reps.a_text["codes"].sum() + reps.a_code["codes"].sum()).backward()
    frozen = [(n, p) for n, p in fm.named_parameters() if not p.requires_grad]
    d["frozen_groups"] = len(frozen)
    d["frozen_grad_max"] = max((0.0 if p.grad is None else float(p.grad.abs().max()) for _, p in frozen), default=0.0)
    ok = (d["permutation_equivariance"] <= 1e-6 and d["padding_invariance"] <= 1e-6 and d["history_order"] <= 1e-6
          and d["ablation_code_independent_of_text"] == 0.0 and d["frozen_groups"] > 0 and d["frozen_grad_max"] == 0.0)
    return CheckResult("invariances", ok, d)


def check_checkpoint_roundtrip() -> CheckResult:
    cohort, model = tiny_setup(dtype=torch.float32)
    model.eval()
    batch = model.collate(cohort.visits()[:4])
    with torch.no_grad():
        before = model(batch)[1]
    d = {}
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(model, Path(tmp) / "m.ckpt", AdamState())
        loaded, _, _ = load_checkpoint(path)
        loaded.eval()
        with torch.no_grad():
            after = loaded(batch)[1]
        d["identical"] = bool(torch.equal(before.a_text["codes"], after.a_text["codes"])
                              and torch.equal(before.a_code["codes"], after.a_code["codes"]))
        blob = path.read_bytes()
        (Path(tmp) / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
        try:
            load_checkpoint(Path(tmp) / "cut.ckpt")
            d["truncation_detected"] = False
        except CorruptCheckpointError:
            d["truncation_detected"] = True
    _, desk = tiny_setup(dtype=torch.float32)
    with tempfile.TemporaryDirectory() as tmp:
        d["desk_bytes"] = save_checkpoint(desk, Path(tmp) / "d.ckpt").stat().st_size
    ok = d["identical"] and d["truncation_detected"] and d["desk_bytes"] < 10 * 2**20
    return CheckResult("checkpoint_roundtrip", ok, d)


CHECKS = {
    "grad_check_pretrain": lambda o: check_grad_pretrain(False, o.get("grad_samples", 3)),
    "grad_check_pretrain_contrastive": lambda o: check_grad_pretrain(True, o.get("grad_samples", 3)),
    "grad_check_tasks": lambda o: check_grad_tasks(o.get("grad_samples", 3)),
    "mask_statistics": lambda o: check_mask_statistics(o.get("mask_tokens", 1_000_000)),
    "attention_normalization": lambda o: check_attention_normalization(o.get("attention_trials", 1000)),
    "uniform_head_baseline": lambda o: check_uniform_head_baseline(),
    "metric_oracles": lambda o: check_metric_oracles(o.get("metric_trials", 1000)),
    "contrastive_identities": lambda o: check_contrastive_identities(),
    "invariances": lambda o: check_invariances(),
    "checkpoint_roundtrip": lambda o: check_checkpoint_roundtrip(),
}


def run_checks(names=None, fault: str | None = None, options: dict | None = None) -> dict:
    options = options or {}
    results = []
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        for name in names or CHECKS:
            t0 = time.perf_counter()
            try:
                res = CHECKS[name](options)
            except Exception as e:  # a crashing check is a failed check
                res = CheckResult(name, False, {"error": f"{type(e).__name__}: {e}"})
            res.seconds = time.perf_counter() - t0
            results.append(res)
    return {"passed": all(r.passed for r in results), "fault": fault,
            "checks": [r.to_json() for r in results]}
