import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrfuse.encoders import EncodedVisit, Linear
from ehrfuse.fusion import CrossModalFusion, EmptyContextError, attention_records, cross_modal_attend, fuse_visit
from ehrfuse.numerics import ConfigError, ShapeError

pytestmark = pytest.mark.usefixtures("float64_default")


def _enc(b, s, h, seed, mask=None):
    z = torch.randn(b, s, h, generator=torch.Generator().manual_seed(seed))
    return EncodedVisit(z, torch.ones(b, s, dtype=torch.bool) if mask is None else mask)


def test_hand_case_matches_arbitrary_precision():
    mpmath.mp.dps = 40
    q = [0.3, -1.2]
    toks = [[0.5, 2.0], [-1.0, 0.25]]
    W = [[0.7, -0.4], [0.1, 0.9]]
    bias = [0.05, -0.2]
    proj = Linear(2, 2)
    with torch.no_grad():
        proj.weight.copy_(torch.tensor(W))
        proj.bias.copy_(torch.tensor(bias))
    out, w = cross_modal_attend(torch.tensor([q]), torch.tensor([toks]), torch.ones(1, 2, dtype=torch.bool), proj,
                                return_weights=True)

    mp = mpmath.mpf
    kv = [[mp(t[0]) * W[0][c] + mp(t[1]) * W[1][c] + bias[c] for c in range(2)] for t in toks]
    scores = [sum(mp(q[c]) * k[c] for c in range(2)) / mpmath.sqrt(2) for k in kv]
    e = [mpmath.exp(s) for s in scores]
    alpha = [v / sum(e) for v in e]
    ref = [sum(alpha[j] * kv[j][c] for j in range(2)) + q[c] for c in range(2)]
    assert np.allclose(w[0].detach().numpy(), [float(a) for a in alpha], atol=1e-10, rtol=0)
    assert np.allclose(out[0].detach().numpy(), [float(r) for r in ref], atol=1e-10, rtol=0)


def test_single_unmasked_token_gets_all_weight():
    q = torch.randn(1, 3)
    toks = torch.randn(1, 4, 3)
    mask = torch.tensor([[False, False, True, False]])
    out, w = cross_modal_attend(q, toks, mask, return_weights=True)
    assert w[0].tolist() == [0.0, 0.0, 1.0, 0.0]
    assert torch.allclose(out, toks[:, 2] + q, atol=1e-15)


def test_identical_keys_give_uniform_weights():
    toks = torch.randn(1, 1, 4).expand(1, 3, 4)
    _, w = cross_modal_attend(torch.randn(1, 4), toks, torch.ones(1, 3, dtype=torch.bool), return_weights=True)
    assert torch.allclose(w, torch.full((1, 3), 1 / 3), atol=1e-15)


def test_all_masked_context_is_an_error():
    with pytest.raises(EmptyContextError):
        cross_modal_attend(torch.randn(2, 3), torch.randn(2, 2, 3), torch.tensor([[True, False], [False, False]]))


def test_width_mismatch_needs_projection():
    with pytest.raises(ShapeError):
        cross_modal_attend(torch.randn(1, 3), torch.randn(1, 2, 5), torch.ones(1, 2, dtype=torch.bool))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 10_000))
def test_residual_is_exact(b, s, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(b, 4, generator=g)
    toks = torch.randn(b, s, 4, generator=g)
    mask = torch.ones(b, s, dtype=torch.bool)
    out, w = cross_modal_attend(q, toks, mask, return_weights=True)
    ctx = (w[:, None, :] @ toks).squeeze(1)
    assert torch.equal(out, ctx + q)
    assert torch.allclose(w.sum(-1), torch.ones(b), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(5))), st.integers(0, 10_000))
def test_permuting_context_permutes_weights(perm, seed):
    g = torch.Generator().manual_seed(seed)
    q, toks = torch.randn(1, 4, generator=g), torch.randn(1, 5, 4, generator=g)
    mask = torch.ones(1, 5, dtype=torch.bool)
    a, wa = cross_modal_attend(q, toks, mask, return_weights=True)
    b, wb = cross_modal_attend(q, toks[:, list(perm)], mask, return_weights=True)
    assert torch.allclose(a, b, atol=1e-12)
    assert torch.allclose(wa[:, list(perm)], wb, atol=1e-15)


def _pair(seed=0):
    torch.manual_seed(seed)
    fusion = CrossModalFusion(6, 4)
    text = _enc(2, 5, 6, seed)
    codes = {"diag": _enc(2, 3, 4, seed + 1), "med": _enc(2, 4, 4, seed + 2)}
    return fusion, text, codes


def test_ablation_returns_raw_cls_rows():
    fusion, text, codes = _pair()
    reps = fuse_visit(text, codes, fusion, "ablation")
    assert torch.equal(reps.a_text["diag"], text.cls)
    for s in codes:
        assert torch.equal(reps.a_code[s], codes[s].cls)
    assert not reps.text_over_code and not reps.code_over_text


def test_ablation_ignores_other_modality():
    fusion, text, codes = _pair()
    other = {k: EncodedVisit(torch.randn_like(v.z) * 50, v.mask) for k, v in codes.items()}
    a = fuse_visit(text, codes, fusion, "ablation")
    b = fuse_visit(text, other, fusion, "ablation")
    assert torch.equal(a.a_text["med"], b.a_text["med"])


def test_zero_other_and_zero_projection_leave_query():
    fusion, text, codes = _pair()
    with torch.no_grad():
        for p in fusion.parameters():
            p.zero_()
    zeros = {k: EncodedVisit(torch.zeros_like(v.z), v.mask) for k, v in codes.items()}
    zero_text = EncodedVisit(torch.zeros_like(text.z), text.mask)
    reps = fuse_visit(text, zeros, fusion, "cross")
    assert torch.equal(reps.a_text["diag"], text.cls)
    reps = fuse_visit(zero_text, codes, fusion, "cross")
    assert torch.equal(reps.a_code["med"], codes["med"].cls)


def test_cross_mode_streams_are_separate_and_sized():
    fusion, text, codes = _pair()
    reps = fuse_visit(text, codes, fusion, "cross")
    assert set(reps.a_text) == set(reps.a_code) == {"diag", "med"}
    assert reps.a_text["diag"].shape == (2, 6) and reps.a_code["med"].shape == (2, 4)
    assert not torch.equal(reps.a_code["diag"], reps.a_code["med"])
    for w in list(reps.text_over_code.values()) + list(reps.code_over_text.values()):
        assert torch.allclose(w.sum(-1), torch.ones(2), atol=1e-12)


def test_unknown_mode_and_batch_mismatch():
    fusion, text, codes = _pair()
    with pytest.raises(ConfigError):
        fuse_visit(text, codes, fusion, "late")
    with pytest.raises(ShapeError):
        fuse_visit(text, {"diag": _enc(3, 2, 4, 0)}, fusion, "cross")


def test_attention_records_format():
    fusion, text, codes = _pair()
    reps = fuse_visit(text, {"diag": codes["diag"]}, fusion, "cross")
    recs = attention_records(["a", "b"], [["[CLS]", "x", "y", "z", "w"]] * 2, [["[CLS]", "D1", "D2"]] * 2,
                             reps, "diag")
    assert len(recs) == 4
    assert {r["direction"] for r in recs} == {"text_over_code", "code_over_text"}
    for r in recs:
        assert set(r) == {"visit_id", "direction", "source_tokens", "weights"}
        assert len(r["weights"]) == len(r["source_tokens"])
        assert math.isclose(sum(r["weights"]), 1.0, abs_tol=1e-6)
