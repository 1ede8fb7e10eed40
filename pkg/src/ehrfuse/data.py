"""Visit records, the synthetic cohort generator, JSONL ingestion and splits."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numerics import ConfigError
from .ontology import OntologyTree, build_ontology
from .vocab import CodeVocab, TokenVocab, build_code_vocab, build_token_vocab

log = logging.getLogger(__name__)

MAX_TEXT_LEN = 512
MAX_CODE_LEN = 61


class IngestError(ValueError):
    pass


class EmptyCohortError(IngestError):
    pass


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    visit_index: int
    text_tokens: tuple[str, ...]
    diag_codes: tuple[str, ...]
    med_codes: tuple[str, ...]
    readmit_label: bool | None = None
    icd_labels: tuple[str, ...] | None = None

    @property
    def visit_id(self) -> str:
        return f"{self.patient_id}:{self.visit_index}"

    @property
    def codes(self) -> tuple[str, ...]:
        return self.diag_codes + self.med_codes

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "visit_index": self.visit_index,
            "text_tokens": list(self.text_tokens),
            "diag_codes": list(self.diag_codes),
            "med_codes": list(self.med_codes),
            "readmit_label": self.readmit_label,
            "icd_labels": None if self.icd_labels is None else list(self.icd_labels),
        }

    @classmethod
    def from_json(cls, d: dict) -> "VisitRecord":
        icd = d.get("icd_labels")
        return cls(
            patient_id=str(d["patient_id"]),
            visit_index=int(d["visit_index"]),
            text_tokens=tuple(d["text_tokens"]),
            diag_codes=tuple(d["diag_codes"]),
            med_codes=tuple(d["med_codes"]),
            readmit_label=d.get("readmit_label"),
            icd_labels=None if icd is None else tuple(icd),
        )


def _dedupe(seq: Iterable[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(seq))


def truncate_visit(v: VisitRecord, max_text_len: int = MAX_TEXT_LEN, max_code_len: int = MAX_CODE_LEN) -> VisitRecord:
    """Clip to the lengths that leave room for the leading [CLS] of each sequence.

    Diagnoses are kept ahead of medications when the code budget runs out.
    """
    text = v.text_tokens[: max_text_len - 1]
    diag = _dedupe(v.diag_codes)[: max_code_len - 1]
    med = tuple(c for c in _dedupe(v.med_codes) if c not in diag)[: max_code_len - 1 - len(diag)]
    if (text, diag, med) == (v.text_tokens, v.diag_codes, v.med_codes):
        return v
    return VisitRecord(v.patient_id, v.visit_index, text, diag, med, v.readmit_label, v.icd_labels)


@dataclass
class PatientHistory:
    patient_id: str
    visits: list[VisitRecord]

    def __post_init__(self):
        if not self.visits:
            raise IngestError(f"patient {self.patient_id} has no visits")
        idx = [v.visit_index for v in self.visits]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise IngestError(f"patient {self.patient_id}: visit indices not strictly increasing {idx}")


@dataclass
class Cohort:
    patients: list[PatientHistory]
    token_vocab: TokenVocab
    code_vocab: CodeVocab
    ontology: OntologyTree
    generator_manifest: dict | None = None
    ingest_stats: dict = field(default_factory=dict)

    def visits(self) -> list[VisitRecord]:
        return [v for p in self.patients for v in p.visits]

    @property
    def n_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)

    def multi_visit_patients(self) -> list[PatientHistory]:
        return [p for p in self.patients if len(p.visits) >= 2]

    def with_patients(self, patients: list[PatientHistory]) -> "Cohort":
        """Same vocabularies and ontology over a subset of patients."""
        return Cohort(patients, self.token_vocab, self.code_vocab, self.ontology, self.generator_manifest)

    def to_jsonl(self) -> str:
        lines = [json.dumps(v.to_json(), ensure_ascii=False, separators=(",", ":")) for v in self.visits()]
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "visits.jsonl").write_text(self.to_jsonl(), encoding="utf-8")
        self.ontology.save(out / "ontology.json")
        if self.generator_manifest is not None:
            (out / "manifest.json").write_text(
                json.dumps(self.generator_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out


def build_vocabs(visits: Iterable[VisitRecord]) -> tuple[TokenVocab, CodeVocab]:
    visits = list(visits)
    if not visits:
        raise EmptyCohortError("cannot build vocabularies from an empty cohort")
    tokens = build_token_vocab(v.text_tokens for v in visits)
    codes = build_code_vocab((v.diag_codes for v in visits), (v.med_codes for v in visits))
    return tokens, codes


def group_patients(visits: Iterable[VisitRecord]) -> list[PatientHistory]:
    by_pid: dict[str, list[VisitRecord]] = {}
    for v in visits:
        by_pid.setdefault(v.patient_id, []).append(v)
    return [PatientHistory(pid, sorted(vs, key=lambda v: v.visit_index)) for pid, vs in by_pid.items()]


# ---------------------------------------------------------------------------
# synthetic cohort


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic cohort.

    Every diagnosis code is one latent condition. A condition prescribes a
    base medication; when flagged severe it also prescribes an escalation
    medication. Text carries a cue word per code (with probability
    ``p_cue``), a severity word per severe condition, mentions of
    ``distractor_rate`` (Poisson mean) inactive conditions, and filler.
    With ``escalation=False`` severity leaves no trace in the codes, so the
    readmission label (severe-condition count) needs the text for severity
    and the codes to tell active conditions from distractor mentions.
    """

    n_patients: int = 500
    n_visits: int = 2000
    multi_visit_fraction: float = 0.6
    n_diag: int = 120
    n_med: int = 40
    n_escalation_meds: int = 10
    n_filler: int = 220
    conditions_per_visit: tuple[int, int] = (1, 4)
    filler_per_visit: tuple[int, int] = (8, 16)
    persist_prob: float = 0.5
    severe_prob: float = 0.3
    p_cue: float = 1.0
    p_cue_med: float | None = None
    noise_token_rate: float = 0.0
    distractor_rate: float = 0.0
    readmit_threshold: int = 1
    label_noise: float = 0.0
    escalation: bool = True

    def validate(self) -> None:
        if not 0.0 < self.p_cue <= 1.0:
            raise ConfigError(f"p_cue must lie in (0, 1], got {self.p_cue}")
        if self.n_med <= self.n_escalation_meds:
            raise ConfigError("need more medications than escalation medications")
        lo, hi = self.conditions_per_visit
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad conditions_per_visit {self.conditions_per_visit}")
        if self.n_diag < hi:
            raise ConfigError(f"n_diag={self.n_diag} smaller than the per-visit condition count {hi}")
        if self.n_med - self.n_escalation_meds < 1 or self.n_filler < 1:
            raise ConfigError("vocabulary sizes too small")
        n_single = self.n_single
        if self.n_visits < n_single + 2 * (self.n_patients - n_single):
            raise ConfigError("n_visits too small for the requested multi-visit patients")
        for name in ("multi_visit_fraction", "persist_prob", "severe_prob", "noise_token_rate", "label_noise"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if self.p_cue_med is not None and not 0.0 <= self.p_cue_med <= 1.0:
            raise ConfigError(f"p_cue_med must lie in [0, 1], got {self.p_cue_med}")

    @property
    def n_single(self) -> int:
        return int(round(self.n_patients * (1.0 - self.multi_visit_fraction)))

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class SyntheticWorld:
    """Fixed code/cue assignments shared by every visit of a generated cohort."""

    cfg: GeneratorConfig

    def diag(self, c: int) -> str:
        return f"D{c:03d}"

    def base_med(self, c: int) -> str:
        return f"M{c % (self.cfg.n_med - self.cfg.n_escalation_meds):02d}"

    def escalation_med(self, c: int) -> str:
        n_base = self.cfg.n_med - self.cfg.n_escalation_meds
        return f"M{n_base + c % self.cfg.n_escalation_meds:02d}"

    @staticmethod
    def dx_cue(c: int) -> str:
        return f"dx{c:03d}"

    @staticmethod
    def sev_cue(c: int) -> str:
        return f"sev{c:03d}"

    @staticmethod
    def rx_cue(code: str) -> str:
        return "rx" + code[1:]

    @staticmethod
    def filler(i: int) -> str:
        return f"w{i:03d}"

    def cue_lookup(self) -> dict[str, str]:
        """Cue word -> the code it announces (the lookup decoder)."""
        table = {}
        for c in range(self.cfg.n_diag):
            table[self.dx_cue(c)] = self.diag(c)
            table[self.sev_cue(c)] = self.diag(c)
        for j in range(self.cfg.n_med):
            code = f"M{j:02d}"
            table[self.rx_cue(code)] = code
        return table

    def cues_for(self, code: str) -> set[str]:
        return {w for w, c in self.cue_lookup().items() if c == code}


def decode_codes_from_text(tokens: Sequence[str], lookup: dict[str, str]) -> set[str]:
    return {lookup[t] for t in tokens if t in lookup}


def _visit_counts(cfg: GeneratorConfig, rng: np.random.Generator) -> list[int]:
    n_single = cfg.n_single
    n_multi = cfg.n_patients - n_single
    counts = [1] * n_single
    if n_multi:
        extra = cfg.n_visits - n_single - 2 * n_multi
        counts += list(2 + rng.multinomial(extra, np.full(n_multi, 1.0 / n_multi)))
    elif cfg.n_visits != n_single:
        raise ConfigError("n_visits must equal n_patients when there are no multi-visit patients")
    order = rng.permutation(cfg.n_patients)
    return [int(counts[i]) for i in order]


def generate_synthetic_cohort(cfg: GeneratorConfig, seed: int) -> Cohort:
    """Deterministic in ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    world = SyntheticWorld(cfg)
    p_cue_med = cfg.p_cue if cfg.p_cue_med is None else cfg.p_cue_med
    lo, hi = cfg.conditions_per_visit
    flo, fhi = cfg.filler_per_visit
    patients = []
    for p, n_vis in enumerate(_visit_counts(cfg, rng)):
        pid = f"P{p:05d}"
        active: list[int] = []
        visits = []
        for t in range(1, n_vis + 1):
            k = int(rng.integers(lo, hi + 1))
            kept = [c for c in active if rng.random() < cfg.persist_prob][:k]
            pool = np.setdiff1d(np.arange(cfg.n_diag), kept)
            fresh = rng.choice(pool, size=k - len(kept), replace=False)
            active = kept + [int(c) for c in fresh]
            severe = [c for c in active if rng.random() < cfg.severe_prob]

            diag = tuple(world.diag(c) for c in active)
            meds = []
            for c in active:
                meds.append(world.base_med(c))
                if c in severe and cfg.escalation:
                    meds.append(world.escalation_med(c))
            meds = _dedupe(meds)

            words = []
            for c in active:
                if rng.random() < cfg.p_cue:
                    words.append(world.dx_cue(c))
                if c in severe:
                    words.append(world.sev_cue(c))
            for m in meds:
                if rng.random() < p_cue_med:
                    words.append(world.rx_cue(m))
            n_distract = int(rng.poisson(cfg.distractor_rate)) if cfg.distractor_rate > 0 else 0
            if n_distract:
                others = np.setdiff1d(np.arange(cfg.n_diag), active)
                for c in rng.choice(others, size=min(n_distract, len(others)), replace=False):
                    words.append(world.dx_cue(int(c)))
                    if rng.random() < cfg.severe_prob:
                        words.append(world.sev_cue(int(c)))
            if cfg.noise_token_rate > 0:
                words = [world.filler(int(rng.integers(cfg.n_filler))) if rng.random() < cfg.noise_token_rate else w
                         for w in words]
            n_fill = int(rng.integers(flo, fhi + 1))
            words += [world.filler(int(i)) for i in rng.integers(0, cfg.n_filler, size=n_fill)]
            words = [words[i] for i in rng.permutation(len(words))]

            label = len(severe) >= cfg.readmit_threshold
            if cfg.label_noise > 0 and rng.random() < cfg.label_noise:
                label = not label
            v = VisitRecord(pid, t, tuple(words), diag, meds, bool(label), tuple(sorted(diag)))
            visits.append(truncate_visit(v))
        patients.append(PatientHistory(pid, visits))

    tokens, codes = build_vocabs(v for p in patients for v in p.visits)
    ontology = build_ontology(codes, "synthetic-3-level")
    manifest = {"generator": "synthetic", "seed": int(seed), "config": cfg.to_json()}
    return Cohort(patients, tokens, codes, ontology, manifest)


# ---------------------------------------------------------------------------
# ingestion


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise IngestError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


_REQUIRED = ("patient_id", "visit_index", "text_tokens", "diag_codes", "med_codes")


def _parse_visit(rec: dict, where: str) -> VisitRecord:
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise IngestError(f"{where}: missing fields {missing}")
    for k in ("text_tokens", "diag_codes", "med_codes"):
        if not isinstance(rec[k], list) or not all(isinstance(x, str) for x in rec[k]):
            raise IngestError(f"{where}: {k} must be a list of strings")
    if not isinstance(rec["visit_index"], int) or rec["visit_index"] < 0:
        raise IngestError(f"{where}: visit_index must be a non-negative integer")
    if rec.get("readmit_label") not in (None, True, False):
        raise IngestError(f"{where}: readmit_label must be boolean or null")
    icd = rec.get("icd_labels")
    if icd is not None and (not isinstance(icd, list) or not all(isinstance(x, str) for x in icd)):
        raise IngestError(f"{where}: icd_labels must be a list of strings or null")
    if any(not c for c in rec["diag_codes"] + rec["med_codes"]):
        raise IngestError(f"{where}: empty code string")
    return VisitRecord.from_json(rec)


def ingest_mimic_like(path: str | Path, max_text_len: int = MAX_TEXT_LEN,
                      max_code_len: int = MAX_CODE_LEN, ontology: OntologyTree | None = None) -> Cohort:
    """Load visit JSONL (a file, or a directory of ``*.jsonl``) into a cohort.

    Visits missing text or codes are dropped and counted in
    ``cohort.ingest_stats["dropped_unpaired"]``. If the directory holds an
    ``ontology.json`` (or one is passed), it is used; otherwise codes are
    grouped by prefix.
    """
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    if not files:
        raise EmptyCohortError(f"no JSONL files under {path}")
    kept, dropped, truncated = [], 0, 0
    for f in files:
        for lineno, rec in read_jsonl(f):
            v = _parse_visit(rec, f"{f}:{lineno}")
            if not v.text_tokens or not (v.diag_codes or v.med_codes):
                dropped += 1
                continue
            t = truncate_visit(v, max_text_len, max_code_len)
            truncated += t is not v
            kept.append(t)
    if not kept:
        raise EmptyCohortError(f"no paired visits in {path} ({dropped} dropped)")
    patients = group_patients(kept)
    tokens, codes = build_vocabs(kept)
    if ontology is None and path.is_dir() and (path / "ontology.json").exists():
        ontology = OntologyTree.load(path / "ontology.json")
    if ontology is None:
        ontology = build_ontology(codes, "prefix-grouping")
    manifest = None
    if path.is_dir() and (path / "manifest.json").exists():
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    stats = {"dropped_unpaired": dropped, "truncated": truncated, "kept": len(kept)}
    log.info("ingested %d visits from %s (%d dropped, %d truncated)", len(kept), path, dropped, truncated)
    return Cohort(patients, tokens, codes, ontology, manifest, stats)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    unit: str = "visit"

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError(f"split ratios must be three non-negative numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {sum(self.ratios)}")
        if self.unit not in ("patient", "visit"):
            raise ConfigError(f"split unit must be 'patient' or 'visit', got {self.unit!r}")


DRUG_REC_SPLIT = (0.85, 0.05, 0.10)
VISIT_SPLIT = (0.8, 0.1, 0.1)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(math.floor(n * ratios[0] + 0.5))
    n_valid = int(math.floor(n * ratios[1] + 0.5))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    return n_train, n_valid, n - n_train - n_valid


def split_items(items: Sequence, ratios: Sequence[float], seed: int) -> tuple[list, list, list]:
    perm = np.random.default_rng(seed).permutation(len(items))
    a, b, _ = split_sizes(len(items), ratios)
    pick = lambda ix: [items[i] for i in sorted(ix)]
    return pick(perm[:a]), pick(perm[a:a + b]), pick(perm[a + b:])


def split_cohort(cohort: Cohort, spec: SplitSpec):
    """Partition at ``spec.unit``.

    Patient splits return three cohorts; visit splits return three visit lists
    (visits from one patient may then land in different splits, which is the
    intended usage for single-visit tasks).
    """
    if spec.unit == "patient":
        parts = split_items(cohort.patients, spec.ratios, spec.seed)
        return tuple(cohort.with_patients(p) for p in parts)
    return split_items(cohort.visits(), spec.ratios, spec.seed)


def code_frequencies(visits: Iterable[VisitRecord]) -> Counter:
    return Counter(c for v in visits for c in v.codes)
