"""Command-line entry point: ``ehrfuse <command> [--config run.toml] ...``.

Anything that changes results lives in the config file; flags pick the
command and the paths. ``--task`` and ``--fusion`` are shorthands for the
matching config keys and end up in the echoed config like any other key.

Exit codes: 0 success, 1 verification failure, 2 usage/config/input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, load_config
from .data import Cohort, GeneratorConfig, IngestError, SyntheticWorld, generate_synthetic_cohort, ingest_mimic_like
from .data import read_jsonl, _parse_visit
from .finetune import TASKS, aggregate, finetune_run, ratio_sweep
from .fusion import MODES, attention_records
from .model import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .numerics import _FAULTS, ConfigError, NumericError
from .pretrain import cue_alignment, masked_code_accuracy, pretrain_loop, pretrain_split

log = logging.getLogger("ehrfuse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
UNIFORM_TOL = 0.05


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _dump_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_csv(rows: list[dict], path: Path, columns: list[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})
    return path


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "task", None):
        over["finetune.task"] = args.task
    if getattr(args, "fusion", None):
        over["model.fusion"] = args.fusion
    return cfg.with_overrides(**{k.replace(".", "__"): v for k, v in over.items()}) if over else cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg["out_dir"])


def _load_cohort(cfg: RunConfig, data: str | None) -> Cohort:
    if data:
        return ingest_mimic_like(data, cfg["data.max_text_len"], cfg["data.max_code_len"])
    if cfg["data.source"] == "ingest":
        if not cfg["data.path"]:
            raise ConfigError("data.source = 'ingest' needs data.path")
        return ingest_mimic_like(cfg["data.path"], cfg["data.max_text_len"], cfg["data.max_code_len"])
    if cfg["data.source"] != "synthetic":
        raise ConfigError(f"data.source must be 'synthetic' or 'ingest', got {cfg['data.source']!r}")
    return generate_synthetic_cohort(cfg.generator_config(), cfg["seed"])


def _world(cohort: Cohort) -> SyntheticWorld | None:
    man = cohort.generator_manifest or {}
    if man.get("generator") != "synthetic":
        return None
    return SyntheticWorld(GeneratorConfig.from_json(man["config"]))


def _load_compatible(path: str, cfg: RunConfig):
    """Load a checkpoint whose model config matches the run config up to the fusion mode."""
    model, opt, header = load_checkpoint(path)
    want = cfg.model_config().to_json()
    have = dict(header["config"])
    want.pop("fusion"), have.pop("fusion")
    if want != have:
        diff = sorted(k for k in set(want) | set(have) if want.get(k) != have.get(k))
        raise CheckpointError(f"{path}: checkpoint model config differs from the run config in {diff}")
    return model, opt, header


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    cohort = generate_synthetic_cohort(cfg.generator_config(), cfg["seed"])
    cohort.save(out)
    cfg.write_echo(out)
    log.info("wrote %d visits for %d patients to %s", cohort.n_visits, len(cohort.patients), out)
    return EXIT_OK


def _uniform_check(history: list[dict], n_codes: int) -> dict:
    ref = math.log(n_codes)
    row = history[0]
    out = {"ln_vocab": ref}
    for k in ("t2c", "c2c"):
        v = row.get(f"eval_{k}")
        out[k] = v
        out[f"{k}_rel_dev"] = abs(v - ref) / ref
    out["ok"] = all(out[f"{k}_rel_dev"] <= UNIFORM_TOL for k in ("t2c", "c2c"))
    return out


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    cohort = _load_cohort(cfg, args.data)
    pcfg = cfg.pretrain_config()
    opt = None
    if args.resume:
        model, opt, _ = load_checkpoint(args.resume, expect_config_digest=cfg.model_config().digest())
    else:
        model = build_model(cfg.model_config(), cohort.token_vocab, cohort.code_vocab, cohort.ontology,
                            seed=cfg["seed"], dtype=cfg.torch_dtype())
    cfg.write_echo(out)
    t0 = time.perf_counter()
    res = pretrain_loop(model, cohort.visits(), pcfg, seed=cfg["seed"], optimizer=opt,
                        log=lambda row: log.info("epoch %d eval total %.4f", row["epoch"], row["eval_total"]))
    log.info("pre-training took %.1fs (best epoch %d)", time.perf_counter() - t0, res.best_epoch)

    check = _uniform_check(res.history, len(model.code_vocab))
    if not args.resume and not check["ok"]:
        log.warning("epoch-0 eval loss deviates from ln|CodeVocab| by more than %.0f%%: %s", UNIFORM_TOL * 100, check)

    rows = [{"epoch": r["epoch"],
             **{f"{split}_{name}": r.get(f"{split}_{key}", "")
                for split in ("train", "eval")
                for name, key in (("L", "total"), ("L_T2C", "t2c"), ("L_C2C", "c2c"), ("L_cl", "cl"))
                if f"{split}_{key}" in r}}
            for r in res.history]
    _write_csv(rows, out / "loss_history.csv")
    save_checkpoint(model, out / "checkpoint.bin", res.optimizer,
                    extra={"best_epoch": res.best_epoch, "seed": cfg["seed"]})
    _dump_json({"best_epoch": res.best_epoch, "stopped_epoch": res.stopped_epoch,
                "n_train": len(res.train_visits), "n_eval": len(res.eval_visits), "uniform_check": check},
               out / "pretrain_summary.json")
    from .plots import plot_loss_history

    plot_loss_history(res.history, out / "loss_history.png")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    cohort = _load_cohort(cfg, args.data)
    model, _, _ = _load_compatible(args.checkpoint, cfg)
    fcfg = cfg.finetune_config()
    seeds = cfg["finetune.seeds"]
    if not seeds:
        raise ConfigError("finetune.seeds is empty")
    cfg.write_echo(out)
    from .plots import plot_metric_summary, plot_ratio_sweep

    tag = f"{fcfg.task}_{fcfg.mode}"
    if cfg["finetune.ratios"]:
        rows = ratio_sweep(model, cohort, fcfg, [float(r) for r in cfg["finetune.ratios"]], seeds)
        _write_csv(rows, out / f"sweep_{tag}.csv", ["task", "ratio", "seed", "auc", "f1", "accuracy"])
        plot_ratio_sweep(rows, out / f"sweep_{tag}.png")
        return EXIT_OK
    reports = [finetune_run(model, cohort, fcfg, s).report for s in seeds]
    summary = aggregate(reports)
    doc = {**summary.to_json(), "mode": fcfg.mode}
    _dump_json(doc, out / f"metrics_{tag}.json")
    plot_metric_summary({tag: doc}, out / f"metrics_{tag}.png")
    print(f"{fcfg.task} ({fcfg.mode}): " + "  ".join(f"{k} {v}" for k, v in summary.formatted().items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    cohort = _load_cohort(cfg, args.data)
    model, _, _ = _load_compatible(args.checkpoint, cfg)
    _, held = pretrain_split(cohort.visits(), cfg["pretrain.eval_fraction"], cfg["seed"])
    doc = {"n_visits": len(held), "masked_code_accuracy": masked_code_accuracy(model, held, mode=cfg["model.fusion"])}
    world = _world(cohort)
    if world is not None and cfg["model.fusion"] == "cross":
        doc["cue_alignment"] = cue_alignment(model, held, world.cues_for)
    _dump_json(doc, out / "eval.json")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import CHECKS, run_checks

    cfg = _resolve(args)
    names = args.only or None
    unknown = sorted(set(names or []) - set(CHECKS))
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; known: {sorted(CHECKS)}")
    opts = {"grad_samples": cfg["verify.grad_samples"], "mask_tokens": cfg["verify.mask_tokens"],
            "attention_trials": cfg["verify.attention_trials"]}
    report = run_checks(names, fault=args.inject_fault, options=opts)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}  ({c['seconds']:.1f}s)")
    if args.out:
        _dump_json(report, Path(args.out) / "verify_report.json")
    else:
        print(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_attn_dump(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    visits = []
    for lineno, rec in read_jsonl(args.visits):
        v = _parse_visit(rec, f"{args.visits}:{lineno}")
        if not v.text_tokens or not v.codes:
            log.warning("skipping %s: empty text or code modality", v.visit_id)
            continue
        visits.append(v)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    model.eval()
    with open(out, "w", encoding="utf-8") as fh, torch.no_grad():
        for i in range(0, len(visits), 64):
            chunk = visits[i: i + 64]
            batch = model.collate(chunk, (args.stream,))
            _, reps = model(batch, "cross")
            text_toks = [[model.token_vocab.string(int(t)) for t in row[m]]
                         for row, m in zip(batch.text.ids, batch.text.mask)]
            sb = batch.codes[args.stream]
            code_toks = [[model.code_vocab.string(int(t)) for t in row[m]] for row, m in zip(sb.ids, sb.mask)]
            for rec in attention_records(batch.visit_ids, text_toks, code_toks, reps, args.stream):
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
                n += 1
    log.info("wrote %d attention rows to %s", n, out)
    if args.plot and n:
        from .plots import plot_attention

        first = json.loads(out.read_text(encoding="utf-8").splitlines()[0])
        plot_attention(first, out.with_suffix(".png"))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ehrfuse", description="Multimodal (text + codes) EHR pre-training toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="TOML run config (flat dotted or nested keys)")
        if out:
            sp.add_argument("--out", help="output directory (default: out_dir from the config)")

    sp = sub.add_parser("generate", help="write a synthetic cohort (visits.jsonl, ontology.json, manifest.json)")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("pretrain", help="masked-code pre-training; writes checkpoint + loss history")
    common(sp)
    sp.add_argument("--data", help="cohort directory or JSONL file (overrides data.source)")
    sp.add_argument("--resume", help="continue from a checkpoint with the same model config")
    sp.add_argument("--fusion", choices=MODES)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune a task head over the configured seeds")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--fusion", choices=MODES)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="masked-code accuracy and cue alignment on the held-out visits")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--fusion", choices=MODES)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify", help="run the numerical and invariance checks")
    common(sp)
    sp.add_argument("--inject-fault", choices=sorted(_FAULTS))
    sp.add_argument("--only", nargs="+", metavar="CHECK")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attn-dump", help="export cross-modal attention rows as JSONL")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--visits", required=True, help="visit JSONL in the ingest format")
    sp.add_argument("--out", required=True, help="output JSONL path")
    sp.add_argument("--stream", default="codes", choices=("codes", "diag", "med"))
    sp.add_argument("--plot", action="store_true", help="also render the first row as PNG")
    sp.set_defaults(func=cmd_attn_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, IngestError, CheckpointError, OSError) as e:
        print(f"ehrfuse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"ehrfuse: numerical failure: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
