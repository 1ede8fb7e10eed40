"""Run configuration: flat dotted keys in a TOML file, every key defaulted."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import GeneratorConfig
from .numerics import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "UMMX_SEED"

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out_dir": "runs/default",
    # data
    "data.source": "synthetic",  # "synthetic" | "ingest"
    "data.path": "",
    "data.max_text_len": 512,
    "data.max_code_len": 61,
    "data.n_patients": 500,
    "data.n_visits": 2000,
    "data.multi_visit_fraction": 0.6,
    "data.n_diag": 120,
    "data.n_med": 40,
    "data.n_escalation_meds": 10,
    "data.n_filler": 220,
    "data.conditions_per_visit": [1, 4],
    "data.filler_per_visit": [8, 16],
    "data.persist_prob": 0.5,
    "data.severe_prob": 0.3,
    "data.p_cue": 1.0,
    "data.p_cue_med": -1.0,  # negative: same as data.p_cue
    "data.noise_token_rate": 0.0,
    "data.distractor_rate": 0.0,
    "data.readmit_threshold": 1,
    "data.label_noise": 0.0,
    "data.escalation": True,
    # model
    "model.preset": "desk",
    "model.fusion": "cross",
    "model.dtype": "float32",
    "model.dropout": -1.0,  # negative: preset value
    "model.norm": "",  # empty: preset value
    "model.text_layers": 0,  # 0: preset value
    "model.code_layers": 0,
    "model.freeze_prefix": -1,  # negative: preset value
    "model.ancestor_scope": "all",
    "model.shared_code_encoder": True,
    "model.shared_mlm_head": False,
    # pre-training
    "pretrain.epochs": 50,
    "pretrain.batch_size": 8,
    "pretrain.lr": 1e-3,
    "pretrain.lr_schedule": "linear",
    "pretrain.warmup_fraction": 0.05,
    "pretrain.weight_decay": 0.0,
    "pretrain.mask_rate": 0.15,
    "pretrain.patience": 5,
    "pretrain.eval_fraction": 0.2,
    "pretrain.w_t2c": 1.0,
    "pretrain.w_c2c": 1.0,
    "pretrain.independent_masks": False,
    # contrastive extension
    "contrastive.enabled": False,
    "contrastive.tau": 0.07,
    "contrastive.alpha": 0.4,
    "contrastive.momentum": 0.995,
    "contrastive.queue_size": 0,
    "contrastive.weight": 1.0,
    "contrastive.proj_dim": 32,
    # fine-tuning
    "finetune.task": "readmission",
    "finetune.seeds": [0, 1, 2, 3, 4],
    "finetune.lr": -1.0,  # negative: per-task desk default
    "finetune.epochs": 30,
    "finetune.batch_size": 32,
    "finetune.patience": 5,
    "finetune.ratios": [],
    "finetune.split_seed": 0,
    "finetune.tune_towers": False,
    "finetune.lr_schedule": "constant",
    # verification
    "verify.grad_samples": 3,
    "verify.mask_tokens": 1_000_000,
    "verify.attention_trials": 1000,
}


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported type")


class RunConfig:
    """Resolved flat mapping plus typed views for each module."""

    def __init__(self, values: dict):
        self.values = dict(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **kw) -> "RunConfig":
        return resolve({**self.values, **{k.replace("__", "."): v for k, v in kw.items()}}, env={})

    def echo(self) -> str:
        """One ``key = value`` line per key; the output parses back as TOML."""
        return "".join(f"{k} = {json.dumps(self.values[k])}\n" for k in sorted(self.values))

    def write_echo(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "resolved_config.toml"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.echo(), encoding="utf-8")
        return path

    # -- typed views
    def generator_config(self) -> GeneratorConfig:
        v = self.values
        p_med = v["data.p_cue_med"]
        cfg = GeneratorConfig(
            n_patients=v["data.n_patients"], n_visits=v["data.n_visits"],
            multi_visit_fraction=v["data.multi_visit_fraction"], n_diag=v["data.n_diag"],
            n_med=v["data.n_med"], n_escalation_meds=v["data.n_escalation_meds"], n_filler=v["data.n_filler"],
            conditions_per_visit=tuple(v["data.conditions_per_visit"]),
            filler_per_visit=tuple(v["data.filler_per_visit"]),
            persist_prob=v["data.persist_prob"], severe_prob=v["data.severe_prob"], p_cue=v["data.p_cue"],
            p_cue_med=None if p_med < 0 else p_med, noise_token_rate=v["data.noise_token_rate"],
            distractor_rate=v["data.distractor_rate"], readmit_threshold=v["data.readmit_threshold"],
            label_noise=v["data.label_noise"], escalation=v["data.escalation"],
        )
        cfg.validate()
        return cfg

    def model_config(self):
        from .model import PRESETS, ModelConfig

        v = self.values
        if v["model.preset"] not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {v['model.preset']!r}")
        base = PRESETS[v["model.preset"]]
        text, code = base.text, base.code
        if v["model.dropout"] >= 0:
            text, code = replace(text, dropout=v["model.dropout"]), replace(code, dropout=v["model.dropout"])
        if v["model.norm"]:
            text, code = replace(text, norm=v["model.norm"]), replace(code, norm=v["model.norm"])
        if v["model.text_layers"] > 0:
            text = replace(text, n_layers=v["model.text_layers"])
        if v["model.code_layers"] > 0:
            code = replace(code, n_layers=v["model.code_layers"])
        if v["model.freeze_prefix"] >= 0:
            text = replace(text, freeze_prefix=v["model.freeze_prefix"])
        return replace(base, text=text, code=code, fusion=v["model.fusion"],
                       ancestor_scope=v["model.ancestor_scope"],
                       shared_code_encoder=v["model.shared_code_encoder"],
                       shared_mlm_head=v["model.shared_mlm_head"],
                       contrastive=v["contrastive.enabled"], cl_proj_dim=v["contrastive.proj_dim"])

    def contrastive_config(self):
        from .pretrain import ContrastiveConfig

        v = self.values
        if not v["contrastive.enabled"]:
            return None
        return ContrastiveConfig(tau=v["contrastive.tau"], alpha=v["contrastive.alpha"],
                                 momentum=v["contrastive.momentum"], queue_size=v["contrastive.queue_size"],
                                 weight=v["contrastive.weight"])

    def pretrain_config(self):
        from .pretrain import PretrainConfig

        v = self.values
        return PretrainConfig(
            epochs=v["pretrain.epochs"], batch_size=v["pretrain.batch_size"], lr=v["pretrain.lr"],
            mask_rate=v["pretrain.mask_rate"], patience=v["pretrain.patience"],
            eval_fraction=v["pretrain.eval_fraction"], w_t2c=v["pretrain.w_t2c"], w_c2c=v["pretrain.w_c2c"],
            weight_decay=v["pretrain.weight_decay"], lr_schedule=v["pretrain.lr_schedule"],
            warmup_fraction=v["pretrain.warmup_fraction"],
            independent_masks=v["pretrain.independent_masks"], contrastive=self.contrastive_config(),
        )

    def finetune_config(self, task: str | None = None, mode: str | None = None):
        from .finetune import FinetuneConfig

        v = self.values
        return FinetuneConfig(
            task=task or v["finetune.task"], lr=None if v["finetune.lr"] < 0 else v["finetune.lr"],
            epochs=v["finetune.epochs"], batch_size=v["finetune.batch_size"], patience=v["finetune.patience"],
            mode=mode or v["model.fusion"], split_seed=v["finetune.split_seed"],
            tune_towers=v["finetune.tune_towers"], lr_schedule=v["finetune.lr_schedule"],
        )

    def torch_dtype(self):
        import torch

        try:
            return {"float32": torch.float32, "float64": torch.float64}[self.values["model.dtype"]]
        except KeyError:
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.values['model.dtype']!r}")


def resolve(overrides: dict, env: dict | None = None) -> RunConfig:
    """Apply ``overrides`` (flat or nested) on top of the defaults; reject unknown keys."""
    flat = _flatten(overrides)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = dict(DEFAULTS)
    for k, v in flat.items():
        values[k] = _coerce(k, v, DEFAULTS[k])
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return RunConfig(values)


def load_config(path: str | Path | None = None, env: dict | None = None) -> RunConfig:
    if path is None:
        return resolve({}, env)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})") from None
    return resolve(doc, env)
