import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrfuse.baseline import bag_of_tokens, fit_logistic, predict_logistic
from ehrfuse.data import (
    DRUG_REC_SPLIT, EmptyCohortError, GeneratorConfig, IngestError, PatientHistory, SplitSpec, SyntheticWorld,
    VisitRecord, build_vocabs, decode_codes_from_text, generate_synthetic_cohort, ingest_mimic_like, split_cohort,
    split_items, split_sizes, truncate_visit,
)
from ehrfuse.finetune import auc_binary
from ehrfuse.numerics import ConfigError
from ehrfuse.vocab import SPECIALS, CodeVocab, Vocab, VocabError, build_code_vocab, build_token_vocab

SMALL = GeneratorConfig(n_patients=40, n_visits=120, n_diag=20, n_med=10, n_escalation_meds=3, n_filler=30)


@pytest.fixture(scope="module")
def desk():
    cfg = GeneratorConfig()
    return cfg, generate_synthetic_cohort(cfg, seed=0)


# vocabularies

def test_empty_token_stream_gives_specials_only():
    v = build_token_vocab([])
    assert len(v) == 4 and v.itos == list(SPECIALS)


def test_vocab_order_is_frequency_then_lexicographic():
    v = build_token_vocab([["b", "a", "c"], ["c", "b"], ["c"]])
    assert v.entries == ["c", "b", "a"]
    v = build_token_vocab([["z", "y"]])
    assert v.entries == ["y", "z"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.text(min_size=1, max_size=4), max_size=6), max_size=6))
def test_vocab_is_a_bijection(streams):
    streams = [[t for t in s if t not in SPECIALS] for s in streams]
    v = build_token_vocab(streams)
    for i in range(len(v)):
        assert v.id(v.string(i)) == i
    for s in v.entries:
        assert v.string(v.id(s)) == s


def test_unknown_and_out_of_range():
    v = build_token_vocab([["a"]])
    assert v.id("zzz") == v.unk_id
    with pytest.raises(VocabError):
        v.id("zzz", strict=True)
    with pytest.raises(VocabError):
        v.string(99)
    with pytest.raises(VocabError):
        Vocab(["[CLS]"])


def test_code_vocab_kinds_and_json():
    cv = build_code_vocab([["D1", "D2"], ["D2"]], [["M1"]])
    assert cv.codes_of_kind("diag") == ["D2", "D1"] and cv.codes_of_kind("med") == ["M1"]
    back = CodeVocab.from_json(json.loads(json.dumps(cv.to_json())))
    assert back == cv and back.digest() == cv.digest()
    with pytest.raises(VocabError):
        build_code_vocab([[""]], [])


def test_desk_scale_vocab(desk):
    _, c = desk
    assert len(c.code_vocab.codes_of_kind("med")) == 40
    assert len(c.code_vocab.codes_of_kind("diag")) == 120


# generator

def test_generator_is_deterministic():
    a = generate_synthetic_cohort(SMALL, 3).to_jsonl()
    b = generate_synthetic_cohort(SMALL, 3).to_jsonl()
    assert a == b
    assert a != generate_synthetic_cohort(SMALL, 4).to_jsonl()


def test_default_cohort_size(desk):
    _, c = desk
    assert len(c.patients) == 500 and c.n_visits == 2000
    assert c.generator_manifest["seed"] == 0


def test_every_code_has_a_cue(desk):
    cfg, c = desk
    world = SyntheticWorld(cfg)
    for v in c.visits():
        for code in v.codes:
            assert world.cues_for(code) & set(v.text_tokens)


def test_lookup_decoder_recovers_all_codes(desk):
    cfg, c = desk
    lookup = SyntheticWorld(cfg).cue_lookup()
    assert all(decode_codes_from_text(v.text_tokens, lookup) == set(v.codes) for v in c.visits())


def test_visit_invariants(desk):
    _, c = desk
    for p in c.patients:
        idx = [v.visit_index for v in p.visits]
        assert idx == sorted(set(idx))
        for v in p.visits:
            assert len(set(v.codes)) == len(v.codes)
            assert len(v.text_tokens) <= 511 and len(v.codes) <= 60
            assert all(code in c.code_vocab for code in v.codes)
            assert all(t in c.token_vocab for t in v.text_tokens)


def test_readmission_label_rule(desk):
    cfg, c = desk
    world = SyntheticWorld(cfg)
    for v in c.visits():
        severe = sum(world.sev_cue(int(d[1:])) in v.text_tokens for d in v.diag_codes)
        assert v.readmit_label == (severe >= cfg.readmit_threshold)


def test_label_noise_flips_some_labels():
    clean = generate_synthetic_cohort(SMALL, 0)
    noisy = generate_synthetic_cohort(GeneratorConfig(**{**SMALL.to_json(), "conditions_per_visit": (1, 4),
                                                          "filler_per_visit": (8, 16), "label_noise": 0.3}), 0)
    flips = [a.readmit_label != b.readmit_label for a, b in zip(clean.visits(), noisy.visits())]
    assert 0 < np.mean(flips) < 0.6


def test_escalation_switch_removes_severity_from_codes():
    cfg = GeneratorConfig(**{**SMALL.to_json(), "conditions_per_visit": (1, 4), "filler_per_visit": (8, 16),
                             "escalation": False})
    world = SyntheticWorld(cfg)
    c = generate_synthetic_cohort(cfg, 0)
    esc = {world.escalation_med(i) for i in range(cfg.n_diag)}
    assert not any(set(v.med_codes) & esc for v in c.visits())
    assert any(v.readmit_label for v in c.visits())


def test_next_visit_meds_follow_previous_diagnoses(desk):
    cfg, c = desk
    world = SyntheticWorld(cfg)
    hits = tot = 0
    for p in c.multi_visit_patients():
        for a, b in zip(p.visits, p.visits[1:]):
            for d in a.diag_codes:
                tot += 1
                hits += world.base_med(int(d[1:])) in b.med_codes
    assert hits / tot > 0.4


@pytest.mark.parametrize("kw", [{"p_cue": 0.0}, {"n_diag": 3}, {"n_med": 5, "n_escalation_meds": 5},
                                {"n_visits": 10}, {"severe_prob": 1.5}])
def test_generator_config_errors(kw):
    with pytest.raises(ConfigError):
        generate_synthetic_cohort(GeneratorConfig(**kw), 0)


def test_logistic_oracle_on_readmission(desk):
    cfg, c = desk
    words = sorted(SyntheticWorld(cfg).cue_lookup())
    train, _, test = split_items(c.visits(), (0.8, 0.1, 0.1), 0)
    w, b = fit_logistic(bag_of_tokens(train, words), torch.tensor([v.readmit_label for v in train]))
    p = predict_logistic(bag_of_tokens(test, words), w, b)
    assert auc_binary(p.numpy(), [v.readmit_label for v in test]) > 0.95


# truncation and ingestion

def _rec(pid="p1", idx=1, text=("a", "b"), diag=("D1",), med=("M1",), **kw):
    return {"patient_id": pid, "visit_index": idx, "text_tokens": list(text), "diag_codes": list(diag),
            "med_codes": list(med), "readmit_label": None, "icd_labels": None, **kw}


def _write(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")
    return path


def test_truncation_reserves_cls():
    v = VisitRecord("p", 1, tuple(f"t{i}" for i in range(600)), tuple(f"D{i}" for i in range(50)),
                    tuple(f"M{i}" for i in range(30)))
    t = truncate_visit(v)
    assert len(t.text_tokens) == 511
    assert len(t.diag_codes) == 50 and len(t.med_codes) == 10


def test_ingest_single_visit(tmp_path):
    c = ingest_mimic_like(_write(tmp_path / "v.jsonl", [_rec()]))
    assert len(c.patients) == 1 and c.n_visits == 1
    assert c.generator_manifest is None


def test_ingest_drops_unpaired(tmp_path):
    c = ingest_mimic_like(_write(tmp_path / "v.jsonl", [_rec(), _rec(idx=2, diag=(), med=()), _rec(idx=3, text=())]))
    assert c.n_visits == 1 and c.ingest_stats["dropped_unpaired"] == 2


def test_ingest_truncates_text(tmp_path):
    c = ingest_mimic_like(_write(tmp_path / "v.jsonl", [_rec(text=[f"w{i}" for i in range(600)])]))
    assert len(c.visits()[0].text_tokens) == 511
    assert c.ingest_stats["truncated"] == 1


def test_ingest_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps(_rec()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(IngestError, match=":2:"):
        ingest_mimic_like(p)
    _write(p, [_rec(visit_index="one")])
    with pytest.raises(IngestError):
        ingest_mimic_like(p)
    _write(p, [{"patient_id": "x"}])
    with pytest.raises(IngestError, match="missing"):
        ingest_mimic_like(p)


def test_ingest_empty_result(tmp_path):
    with pytest.raises(EmptyCohortError):
        ingest_mimic_like(_write(tmp_path / "v.jsonl", [_rec(diag=(), med=())]))


def test_save_then_ingest_round_trip(tmp_path):
    c = generate_synthetic_cohort(SMALL, 1)
    c.save(tmp_path)
    back = ingest_mimic_like(tmp_path)
    assert back.to_jsonl() == c.to_jsonl()
    assert back.ontology.to_json() == c.ontology.to_json()
    assert back.generator_manifest == c.generator_manifest


def test_patient_history_order_enforced():
    v = VisitRecord("p", 2, ("a",), ("D",), ())
    with pytest.raises(IngestError):
        PatientHistory("p", [v, VisitRecord("p", 1, ("a",), ("D",), ())])
    with pytest.raises(IngestError):
        PatientHistory("p", [])


def test_build_vocabs_empty():
    with pytest.raises(EmptyCohortError):
        build_vocabs([])


# splits

def test_split_sizes_examples():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    assert DRUG_REC_SPLIT == (0.85, 0.05, 0.10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 300), st.integers(0, 2**31 - 1),
       st.sampled_from([(0.8, 0.1, 0.1), (0.85, 0.05, 0.10), (0.5, 0.5, 0.0), (1 / 3, 1 / 3, 1 / 3)]))
def test_split_is_a_partition(n, seed, ratios):
    items = list(range(n))
    parts = split_items(items, ratios, seed)
    flat = [x for p in parts for x in p]
    assert sorted(flat) == items
    for size, r in zip(map(len, parts), ratios):
        assert abs(size - n * r) <= 1 + 1e-9
    assert parts == split_items(items, ratios, seed)


def test_split_spec_validation():
    with pytest.raises(ConfigError):
        SplitSpec(ratios=(0.85, 0.5, 0.1))
    with pytest.raises(ConfigError):
        SplitSpec(unit="ward")


def test_patient_split_does_not_leak():
    c = generate_synthetic_cohort(SMALL, 0)
    parts = split_cohort(c, SplitSpec(unit="patient", seed=2))
    ids = [{p.patient_id for p in part.patients} for part in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == len(c.patients)
