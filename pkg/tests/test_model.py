from dataclasses import replace

import pytest
import torch

from ehrfuse.data import generate_synthetic_cohort
from ehrfuse.model import (PRESETS, CheckpointVersionError, CorruptCheckpointError, build_model,
                           expected_param_count, load_checkpoint, load_text_tower, param_digest,
                           read_checkpoint, save_checkpoint)
from ehrfuse.numerics import AdamState, ConfigError, adam_step, param_groups
from ehrfuse.verify import TINY_WORLD, tiny_setup
from hand_oracle import end_to_end_gaps


def _nodes(model):
    return {k: e.node_table.shape[0] for k, e in model.towers.code_table.kinds.items()}


# ---------------------------------------------------------------- census and construction

@pytest.mark.parametrize("kw", [{}, {"mlm_transform": True}, {"contrastive": True},
                                {"shared_code_encoder": False}, {"mlm_transform": True, "contrastive": True}])
def test_desk_parameter_census(kw):
    cohort, model = tiny_setup(**kw)
    model.add_task_head("readmission", 96, 1, seed=0)
    n = sum(p.numel() for p in model.parameters())
    want = expected_param_count(model.cfg, len(cohort.token_vocab), len(cohort.code_vocab), _nodes(model),
                                {"readmission": (96, 1)})
    assert n == want


def test_shared_head_census():
    cfg = replace(PRESETS["desk"], text=replace(PRESETS["desk"].text, hidden=32), shared_mlm_head=True)
    cohort = generate_synthetic_cohort(TINY_WORLD, seed=0)
    model = build_model(cfg, cohort.token_vocab, cohort.code_vocab, cohort.ontology)
    n = sum(p.numel() for p in model.parameters())
    assert n == expected_param_count(cfg, len(cohort.token_vocab), len(cohort.code_vocab), _nodes(model))
    assert model.t2c_head is model.c2c_head


@pytest.fixture(scope="module")
def paper_model():
    cohort = generate_synthetic_cohort(TINY_WORLD, seed=0)
    return cohort, build_model(PRESETS["paper"], cohort.token_vocab, cohort.code_vocab, cohort.ontology)


def test_paper_parameter_census_and_freeze(paper_model):
    cohort, model = paper_model
    n = sum(p.numel() for p in model.parameters())
    assert n == expected_param_count(model.cfg, len(cohort.token_vocab), len(cohort.code_vocab), _nodes(model))
    frozen = {name for name, p in model.named_parameters() if not p.requires_grad}
    assert all(name.startswith("towers.text_") for name in frozen)
    assert any(name.startswith("towers.text_embed.") for name in frozen)
    for i in range(12):
        layer = {p.requires_grad for p in model.towers.text_encoder.layers[i].parameters()}
        assert layer == ({False} if i < 10 else {True})


def test_paper_shapes(paper_model):
    cohort, model = paper_model
    model.eval()
    with torch.no_grad():
        _, reps = model(model.collate(cohort.visits()[:2], ("diag", "med")))
    assert reps.a_text["diag"].shape == (2, 768) and reps.a_code["med"].shape == (2, 300)


def test_freeze_prefix_zero_trains_everything():
    _, model = tiny_setup()
    assert all(g.trainable for g in param_groups(model) if not g.name.startswith("momentum."))


def test_same_seed_same_digest():
    assert param_digest(tiny_setup(seed=0)[1]) == param_digest(tiny_setup(seed=0)[1])
    cohort = generate_synthetic_cohort(TINY_WORLD, seed=0)
    a = build_model(PRESETS["desk"], cohort.token_vocab, cohort.code_vocab, cohort.ontology, seed=1)
    b = build_model(PRESETS["desk"], cohort.token_vocab, cohort.code_vocab, cohort.ontology, seed=2)
    assert param_digest(a) != param_digest(b)


def test_width_mismatch_names_key():
    with pytest.raises(ConfigError, match="model.ont_dim"):
        replace(PRESETS["desk"], ont_dim=5)
    with pytest.raises(ConfigError, match="model.fusion"):
        replace(PRESETS["desk"], fusion="late")


def test_no_parameter_aliasing():
    _, model = tiny_setup(shared_code_encoder=False, contrastive=True)
    ptrs = [p.data_ptr() for _, p in model.named_parameters(remove_duplicate=False)]
    assert len(ptrs) == len(set(ptrs))


# ---------------------------------------------------------------- hand-sized composition oracle

def test_end_to_end_hand_oracle():
    gaps = end_to_end_gaps()
    assert max(gaps.values()) < 1e-8, gaps


def test_ablation_gradient_sparsity():
    cohort, model = tiny_setup()
    batch = model.collate(cohort.visits()[:3])
    _, reps = model(batch, "ablation")
    # a plain sum of a layer-normed row is constant in its input; weight it instead
    weights = torch.randn(reps.a_code["codes"].shape, generator=torch.Generator().manual_seed(0))
    (reps.a_code["codes"] * weights).sum().backward()
    for name, p in model.named_parameters():
        touched = p.grad is not None and bool(p.grad.abs().sum() > 0)
        if name.startswith(("towers.text_", "fusion.", "t2c_head", "c2c_head")):
            assert not touched, name
        if name.startswith("towers.code_encoder."):
            assert touched, name


def test_forward_is_pure():
    cohort, model = tiny_setup()
    batch = model.collate(cohort.visits()[:4], ("diag", "med"))
    _, a = model(batch)
    _, b = model(batch)
    for s in ("diag", "med"):
        assert torch.equal(a.a_text[s], b.a_text[s]) and torch.equal(a.a_code[s], b.a_code[s])


# ---------------------------------------------------------------- checkpoints

def _outputs(model, cohort):
    model.eval()
    with torch.no_grad():
        _, reps = model(model.collate(cohort.visits()[:5], ("codes", "diag")))
    return reps


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cohort, model = tiny_setup(dtype=torch.float32, contrastive=True)
    model.add_task_head("icd", 96, 7, seed=4)
    opt = AdamState(lr=1e-3)
    batch = model.collate(cohort.visits()[:3])
    model(batch)[1].a_text["codes"].sum().backward()
    adam_step(param_groups(model), opt)
    path = save_checkpoint(model, tmp_path / "m.bin", opt, extra={"epoch": 3})
    loaded, opt2, header = load_checkpoint(path, expect_config_digest=model.cfg.digest())
    assert header["extra"] == {"epoch": 3}
    assert opt2.step == 1 and opt2.m.keys() == opt.m.keys()
    assert all(torch.equal(opt.m[k], opt2.m[k]) and torch.equal(opt.v[k], opt2.v[k]) for k in opt.m)
    a, b = _outputs(model, cohort), _outputs(loaded, cohort)
    for s in ("codes", "diag"):
        assert torch.equal(a.a_text[s], b.a_text[s]) and torch.equal(a.a_code[s], b.a_code[s])
    assert torch.equal(model.task_heads["icd"].weight, loaded.task_heads["icd"].weight)
    assert param_digest(model) == param_digest(loaded)


def test_desk_checkpoint_size(tmp_path):
    cohort = generate_synthetic_cohort(replace(TINY_WORLD, n_diag=120, n_med=40, n_escalation_meds=10,
                                               n_filler=220, conditions_per_visit=(1, 4)), seed=0)
    model = build_model(PRESETS["desk"], cohort.token_vocab, cohort.code_vocab, cohort.ontology)
    path = save_checkpoint(model, tmp_path / "desk.bin", AdamState())
    assert path.stat().st_size < 10 * 2**20


def test_truncated_checkpoint(tmp_path):
    _, model = tiny_setup()
    path = save_checkpoint(model, tmp_path / "m.bin")
    blob = path.read_bytes()
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        (tmp_path / "cut.bin").write_bytes(blob[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "cut.bin")


def test_flipped_payload_byte(tmp_path):
    _, model = tiny_setup()
    blob = bytearray(save_checkpoint(model, tmp_path / "m.bin").read_bytes())
    blob[-5] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        read_checkpoint(tmp_path / "bad.bin")


def test_version_and_digest_mismatch(tmp_path):
    _, model = tiny_setup()
    path = save_checkpoint(model, tmp_path / "m.bin")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path, expect_config_digest="0" * 64)
    blob = path.read_bytes()
    patched = blob.replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "v.bin").write_bytes(patched)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.bin")


def test_text_tower_injection(tmp_path):
    cohort = generate_synthetic_cohort(TINY_WORLD, seed=0)
    donor, target = (build_model(PRESETS["desk"], cohort.token_vocab, cohort.code_vocab, cohort.ontology, seed=s)
                     for s in (5, 6))
    path = save_checkpoint(donor, tmp_path / "donor.bin")
    names = load_text_tower(target, path)
    assert names and all(n.startswith("towers.text_") for n in names)
    assert torch.equal(target.towers.text_embed.token, donor.towers.text_embed.token)
    assert not torch.equal(target.towers.code_table.specials, donor.towers.code_table.specials)
