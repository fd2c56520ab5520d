import json

import numpy as np
import pytest
import torch

from nodulesynth.critics import CriticConfig
from nodulesynth.generator import GeneratorConfig
from nodulesynth.patches import phantom_dataset
from nodulesynth.training import (
    GanConfig,
    _batch_indices,
    init_train_state,
    load_train_state,
    phase_of,
    save_train_state,
    synthesize_dataset,
    train,
    train_step,
)
from nodulesynth.volume_io import LABEL_BENIGN, LABEL_MALIGNANT

PATCH_SHAPE = (16, 16, 8)


def tiny_config(**overrides) -> GanConfig:
    base = dict(
        generator=GeneratorConfig(base_channels=2, depth=1, max_channels=4),
        critic_local=CriticConfig(
            base_channels=2, depth=1, input_kind="local", local_shape=(8, 8, 4), max_channels=4
        ),
        critic_global=CriticConfig(base_channels=2, depth=1, input_kind="global", max_channels=4),
        critic_steps_per_gen_step=2,
        recon_only_steps=2,
        adv_start_step=2,
        cls_start_step=4,
        total_steps=6,
        batch_size=2,
        seed=0,
    )
    base.update(overrides)
    return GanConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return phantom_dataset(6, 0.5, seed=0, shape=PATCH_SHAPE)


def test_config_phase_ordering_enforced():
    with pytest.raises(ValueError, match="phase boundaries"):
        tiny_config(adv_start_step=5, cls_start_step=4)
    with pytest.raises(ValueError, match="critic_steps"):
        tiny_config(critic_steps_per_gen_step=0)


def test_config_json_roundtrip_and_unknown_keys():
    cfg = tiny_config()
    again = GanConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ValueError, match="unknown keys"):
        GanConfig.from_dict({"total_steps": 5, "bogus": 1})
    with pytest.raises(ValueError, match="weights"):
        GanConfig.from_dict({"weights": {"lambda_zap": 2.0}})


def test_phase_of():
    cfg = tiny_config()
    assert [phase_of(s, cfg) for s in range(6)] == [1, 1, 2, 2, 3, 3]


def test_phase1_leaves_critics_untouched(tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    before = [p.clone() for p in state.critic_local.parameters()]
    before += [p.clone() for p in state.critic_global.parameters()]
    state, report = train_step(state, tiny_data[:2], cfg)
    after = list(state.critic_local.parameters()) + list(state.critic_global.parameters())
    for p, q in zip(before, after):
        assert torch.equal(p, q)
    assert report.l_adv_local == 0.0 and report.l_d_total == 0.0
    assert report.l_cls_d == 0.0 and report.l_cls_g == 0.0
    assert report.l_recon > 0


def test_phase2_runs_configured_critic_updates(tiny_data):
    cfg = tiny_config(critic_steps_per_gen_step=5)
    state = init_train_state(cfg)
    state.step = cfg.adv_start_step  # jump into phase 2
    calls = []
    original = state.opt_d.step

    def counting_step(*a, **k):
        calls.append(1)
        return original(*a, **k)

    state.opt_d.step = counting_step
    train_step(state, tiny_data[:2], cfg)
    assert len(calls) == 5


def test_cls_terms_zero_before_cls_start(tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    state.step = cfg.adv_start_step  # phase 2
    state, report = train_step(state, tiny_data[:2], cfg)
    assert report.l_cls_d == 0.0 and report.l_cls_g == 0.0
    assert report.l_adv_global != 0.0
    state.step = cfg.cls_start_step  # phase 3
    state, report = train_step(state, tiny_data[:2], cfg)
    assert report.l_cls_d != 0.0 and report.l_cls_g != 0.0


def test_active_terms_only_grow(tiny_data):
    """Phase monotonicity observed through the loss reports of a full run."""
    cfg = tiny_config()
    state = init_train_state(cfg)
    active_sets = []
    for s in range(cfg.total_steps):
        state, rep = train_step(state, tiny_data[:2], cfg)
        active = {
            name
            for name, value in vars(rep).items()
            if value != 0.0 and name not in ("l_g_total", "l_d_total")
        }
        active_sets.append(active)
    for earlier, later in zip(active_sets, active_sets[1:]):
        assert earlier <= later


def test_nan_batch_aborts_naming_term(tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    import copy

    poisoned = [copy.deepcopy(s) for s in tiny_data[:2]]
    poisoned[0].raw[0, 0, 0] = np.nan
    with pytest.raises(RuntimeError, match="non-finite loss term 'l_masked'"):
        train_step(state, poisoned, cfg)


def test_train_zero_steps_writes_one_checkpoint(tmp_path, tiny_data):
    cfg = tiny_config(recon_only_steps=0, adv_start_step=0, cls_start_step=0, total_steps=0)
    state = train(tiny_data, cfg, tmp_path)
    assert state.step == 0
    ckpts = list((tmp_path / "checkpoints").iterdir())
    assert len(ckpts) == 1
    init = init_train_state(cfg)
    for (n, p), (_, q) in zip(
        state.generator.named_parameters(), init.generator.named_parameters()
    ):
        assert torch.equal(p, q), n


def test_train_writes_log_and_checkpoints(tmp_path, tiny_data):
    cfg = tiny_config()
    train(tiny_data, cfg, tmp_path)
    log_lines = [json.loads(l) for l in open(tmp_path / "train_log.ndjson")]
    assert [r["step"] for r in log_lines] == list(range(cfg.total_steps))
    assert all("wall_time" in r and "l_recon" in r for r in log_lines)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert f"step_{cfg.adv_start_step:06d}" in names
    assert f"step_{cfg.cls_start_step:06d}" in names
    assert f"step_{cfg.total_steps:06d}" in names


def test_resume_reproduces_reports(tmp_path, tiny_data):
    cfg = tiny_config(checkpoint_every=3)
    out_a = tmp_path / "full"
    train(tiny_data, cfg, out_a)
    log_a = {r["step"]: r for r in map(json.loads, open(out_a / "train_log.ndjson"))}

    out_b = tmp_path / "resumed"
    train(tiny_data, cfg, out_b, resume_from=out_a / "checkpoints" / "step_000003")
    log_b = [json.loads(l) for l in open(out_b / "train_log.ndjson")]
    assert log_b, "resumed run should continue past the checkpoint"
    for rec in log_b:
        ref = log_a[rec["step"]]
        for key, value in rec.items():
            if key == "wall_time":
                continue
            assert abs(value - ref[key]) <= 1e-6, key


def test_resume_rejects_mismatched_config(tmp_path, tiny_data):
    cfg = tiny_config()
    train(tiny_data, cfg, tmp_path)
    other = tiny_config(seed=99)
    with pytest.raises(ValueError, match="resume config"):
        train(tiny_data, other, tmp_path / "b", resume_from=tmp_path / "checkpoints" / "step_000006")


def test_state_roundtrip_next_step_identical(tmp_path, tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    for _ in range(2):
        state, _ = train_step(state, tiny_data[:2], cfg)
    save_train_state(state, tmp_path / "ck")
    clone = load_train_state(tmp_path / "ck")
    batch = tiny_data[2:4]
    state, rep_a = train_step(state, batch, cfg)
    clone, rep_b = train_step(clone, batch, cfg)
    assert rep_a == rep_b


def test_batch_indices_deterministic_and_in_range():
    for step in range(12):
        a = _batch_indices(10, 3, step, seed=5)
        b = _batch_indices(10, 3, step, seed=5)
        assert a == b
        assert len(a) == 3
        assert all(0 <= i < 10 for i in a)
    # dataset smaller than the batch: indices repeat but stay valid
    small = _batch_indices(2, 5, 0, seed=1)
    assert len(small) == 5
    assert set(small) <= {0, 1}


def test_monitor_sees_generator_output(tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    seen = {}
    train_step(state, tiny_data[:2], cfg, monitor=lambda e: seen.update(e))
    assert {"masked", "mask", "raw", "output"} <= set(seen)
    out = seen["output"]
    outside = seen["mask"] == 0
    assert torch.equal(out.composite[outside], seen["masked"][outside])


def test_running_averages_track_reports(tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    state, report = train_step(state, tiny_data[:2], cfg)
    assert state.running["l_recon"] == pytest.approx(report.l_recon)
    state, _ = train_step(state, tiny_data[:2], cfg)
    assert set(state.running) == set(vars(report))


# ---------------------------------------------------------------------------
# synthesize_dataset


def test_synthesize_empty_and_determinism(tiny_data):
    cfg = tiny_config()
    state = init_train_state(cfg)
    assert synthesize_dataset(state, tiny_data, LABEL_MALIGNANT, 0, seed=1) == []
    a = synthesize_dataset(state, tiny_data, LABEL_MALIGNANT, 5, seed=7)
    b = synthesize_dataset(state, tiny_data, LABEL_MALIGNANT, 5, seed=7)
    for s, t in zip(a, b):
        assert np.array_equal(s.raw, t.raw)
    c = synthesize_dataset(state, tiny_data, LABEL_MALIGNANT, 5, seed=8)
    assert any(not np.array_equal(s.raw, t.raw) for s, t in zip(a, c))


def test_synthesize_preserves_context_and_flags(tiny_data):
    state = init_train_state(tiny_config())
    sources = [s for s in tiny_data if s.label == LABEL_BENIGN]
    out = synthesize_dataset(state, sources, LABEL_MALIGNANT, 4, seed=3)
    assert len(out) == 4
    for sample in out:
        sample.validate()
        assert sample.label == LABEL_MALIGNANT
        assert sample.synthetic
        # context outside the mask comes from some source patch, bit-exact
        match = any(
            np.array_equal(sample.raw[src.mask == 0], src.raw[src.mask == 0])
            for src in sources
            if src.mask.shape == sample.mask.shape and np.array_equal(src.mask, sample.mask)
        )
        assert match


def test_synthesize_count_bookkeeping():
    """233 malignant sources + 463 synthetic = 696 malignant training patches."""
    state = init_train_state(tiny_config())
    sources = phantom_dataset(16, 0.5, seed=5, shape=PATCH_SHAPE)
    malignant = [s for s in sources if s.label == LABEL_MALIGNANT] * 30  # 240 sources
    malignant = malignant[:233]
    out = synthesize_dataset(state, malignant, LABEL_MALIGNANT, 463, seed=0, batch_size=32)
    assert len(malignant) + len(out) == 696


def test_synthesize_invalid_label(tiny_data):
    state = init_train_state(tiny_config())
    with pytest.raises(ValueError):
        synthesize_dataset(state, tiny_data, 0, 1, seed=0)
