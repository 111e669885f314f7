import numpy as np
import pytest

from multiref import checkpoint
from multiref.benchmark.dataset import GenSpec, GroupRecord, generate_dataset, make_splits
from multiref.denoiser import DenoiserConfig
from multiref.encoder import EncoderConfig
from multiref.model import ModelConfig
from multiref.training import (
    STAGE_PATTERNS,
    DropoutConfig,
    MissingCheckpointError,
    StagePlan,
    TrainingData,
    apply_condition_dropout,
    checkpoint_path,
    default_plan,
    draw_dropout,
    new_training_model,
    run_stage,
    sample_multi_ref_batch,
    single_ref_batch,
    square_example,
    subject_crop,
)

SMALL = ModelConfig(
    encoder=EncoderConfig(layers=2, dim=16, heads=2, num_ref_tokens=4, cond_dim=16),
    denoiser=DenoiserConfig(blocks=1, dim=16, heads=2, time_dim=16, cond_dim=16),
    lora_rank=2, T=50)


@pytest.fixture(scope="module")
def data():
    return TrainingData(make_splits(generate_dataset(GenSpec(groups=30, seed=5)),
                                    held_out_groups=4, held_in_groups=6))


def group_of(n, targets=None):
    imgs = [np.full((4, 4, 3), float(i) / 10) for i in range(n)]
    meta = [{"quality": True} for _ in range(n)]
    return GroupRecord("g", {}, imgs, [f"c{i}" for i in range(n)], meta, targets=targets or [True] * n)


def plan(stage, **kw):
    kw.setdefault("steps", 3)
    kw.setdefault("examples", 2)
    kw.setdefault("save_every", 0)
    return default_plan(stage, **kw)


# -- condition dropout -------------------------------------------------------------
def test_dropout_extremes(rng):
    assert draw_dropout(DropoutConfig(0, 0, 0), rng) == (False, False)
    assert all(draw_dropout(DropoutConfig(0, 0, 1), rng) == (True, True) for _ in range(100))
    assert apply_condition_dropout("t", "i", DropoutConfig(0, 0, 0), rng, ("T0", "I0")) == ("t", "i")
    assert apply_condition_dropout("t", "i", DropoutConfig(0, 0, 1), rng, lambda: ("T0", "I0")) == ("T0", "I0")


def test_dropout_rates_match_composition():
    rng = np.random.default_rng(0)
    draws = np.array([draw_dropout(DropoutConfig(), rng) for _ in range(100_000)])
    both = np.mean(draws[:, 0] & draws[:, 1])
    text_only = np.mean(draws[:, 0] & ~draws[:, 1])
    assert abs(both - (0.05 + 0.95 * 0.05 * 0.05)) < 0.005
    assert abs(text_only - 0.95 * 0.05 * 0.95) < 0.005


def test_dropout_config_validation():
    with pytest.raises(ValueError):
        DropoutConfig(p_text=1.5)


# -- example construction ---------------------------------------------------------------
def test_pair_group_gives_one_reference(rng):
    g = group_of(2)
    for _ in range(20):
        refs, target, _ = sample_multi_ref_batch(g, rng)
        assert len(refs) == 1 and not np.array_equal(refs[0], target)


def test_no_augmentation_keeps_order(rng):
    g = group_of(5, targets=[False, False, True, False, False])
    refs, target, caption = sample_multi_ref_batch(g, rng, augment=False)
    assert caption == "c2"
    assert [r[0, 0, 0] for r in refs] == [0.0, 0.1, 0.3, 0.4]


def test_targets_are_uniform():
    rng = np.random.default_rng(1)
    g = group_of(4)
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[int(round(sample_multi_ref_batch(g, rng)[1][0, 0, 0] * 10))] += 1
    assert np.all(np.abs(counts / 10_000 - 0.25) < 0.02)


def test_augmentation_truncates_within_bounds(rng):
    g = group_of(6)
    sizes = {len(sample_multi_ref_batch(g, rng)[0]) for _ in range(300)}
    assert sizes == {1, 2, 3, 4, 5}


def test_multi_ref_errors(rng):
    with pytest.raises(ValueError):
        sample_multi_ref_batch(group_of(1), rng)
    with pytest.raises(ValueError, match="eligible"):
        sample_multi_ref_batch(group_of(3, targets=[False] * 3), rng)


def test_crop_disabled_returns_target(rng):
    img = rng.uniform(-1, 1, (16, 16, 3))
    refs, target, _ = single_ref_batch((img, "x", {"bbox": [2, 2, 6, 6]}), rng, crop_prob=0.0)
    assert refs[0] is target


def test_crops_stay_inside_and_cover_subject(rng):
    for _ in range(500):
        h, w = rng.integers(8, 24, size=2)
        y0, x0 = rng.integers(0, h - 3), rng.integers(0, w - 3)
        y1, x1 = rng.integers(y0 + 1, h + 1), rng.integers(x0 + 1, w + 1)
        img = np.zeros((h, w, 3))
        window, (t, l, b, r) = subject_crop(img, (y0, x0, y1, x1), rng)
        assert 0 <= t < b <= h and 0 <= l < r <= w and window.shape[:2] == (b - t, r - l)
        if max(y1 - y0, x1 - x0) + 2 <= min(h, w):
            assert t <= y0 and l <= x0 and b >= y1 and r >= x1


def test_square_example_maps_box(rng):
    img = rng.uniform(-1, 1, (16, 20, 3))
    out, meta = square_example(img, {"bbox": [4, 6, 10, 12]}, 16)
    assert out.shape == (16, 16, 3)
    assert meta["bbox"] == [4, 4, 10, 10]


def test_training_view_excludes_evaluation_images(data):
    assert data.pairs and data.groups
    assert all(g.split != "held-out" for g in data.groups)
    assert all(img.shape == (16, 16, 3) for img, _, _ in data.pairs)


# -- plans and stages ---------------------------------------------------------------------
def test_plan_defaults():
    assert [default_plan(s).data for s in range(4)] == ["pairs", "pairs", "crops", "groups"]
    assert default_plan(1).trainable == STAGE_PATTERNS[1]
    with pytest.raises(ValueError):
        StagePlan(stage=4)
    with pytest.raises(ValueError):
        StagePlan(stage=1, data="video")


def test_trainable_sets():
    m = new_training_model(SMALL)
    names = {s: set(m.set_trainable(STAGE_PATTERNS[s])) for s in range(4)}
    assert all(n.startswith(("denoiser.", "text_cond.")) for n in names[0])
    assert not any(".adapter." in n or ".lora." in n for n in names[0])
    assert all(n.startswith("encoder.agg.") or n in ("encoder.ref_tokens",) or n.startswith("encoder.cond_proj.")
               or ".adapter." in n for n in names[1])
    assert any(n.startswith("encoder.vision.") for n in names[2]) and names[2] == names[3]
    assert not any(n.startswith("encoder.blocks.") for n in names[1])


def test_stage_needs_previous_checkpoint(data, tmp_path):
    with pytest.raises(MissingCheckpointError, match="stage1.ezrf"):
        run_stage(plan(2), data, tmp_path, SMALL)


def test_freeze_complement_is_bit_identical(data, tmp_path):
    for stage in range(4):
        m, _ = run_stage(plan(stage, steps=4), data, tmp_path, SMALL)
        before = checkpoint.load(checkpoint_path(tmp_path, stage - 1)) if stage else new_training_model(SMALL).state_dict()
        trainable = set(m.set_trainable(STAGE_PATTERNS[stage]))
        after = m.state_dict()
        if stage == 1:
            before = {k: v for k, v in before.items() if k.startswith(("denoiser.", "text_cond."))}
        for name, value in before.items():
            if name not in trainable:
                assert after[name].tobytes() == value.tobytes(), (stage, name)
        assert any(not np.array_equal(after[n], before.get(n, after[n] * 0 + 1e9)) for n in trainable)


def test_zero_steps_reproduce_input(data, tmp_path):
    run_stage(plan(0, steps=2), data, tmp_path, SMALL)
    for stage in (1, 2, 3):
        src = checkpoint.load(checkpoint_path(tmp_path, stage - 1))
        run_stage(plan(stage, steps=0), data, tmp_path, SMALL)
        out = checkpoint.load(checkpoint_path(tmp_path, stage))
        assert list(out) == list(src)
        assert all(out[k].tobytes() == src[k].tobytes() for k in src)


def test_resume_matches_uninterrupted_run(data, tmp_path):
    run_stage(plan(0, steps=1), data, tmp_path / "a", SMALL)
    run_stage(plan(0, steps=1), data, tmp_path / "b", SMALL)
    full, rows_full = run_stage(plan(1, steps=6), data, tmp_path / "a", SMALL)
    run_stage(plan(1, steps=3), data, tmp_path / "b", SMALL)
    resumed, rows_resumed = run_stage(plan(1, steps=6), data, tmp_path / "b", SMALL, resume=True)
    assert [r[2] for r in rows_full] == [r[2] for r in rows_resumed]
    a, b = full.state_dict(), resumed.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    log = (tmp_path / "b" / "stage1_loss.csv").read_text().splitlines()
    assert log[0] == "step,stage,loss,lr" and len(log) == 7
