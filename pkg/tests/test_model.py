import numpy as np
import pytest

from gradcheck import check_parameter_gradients
from multiref.autodiff import count_flops, default_dtype, no_grad
from multiref.denoiser import DenoiserConfig
from multiref.diffusion import GuidanceConfig, training_loss
from multiref.encoder import EncoderConfig
from multiref.model import ModelConfig, MultiRefModel

TINY = ModelConfig(
    encoder=EncoderConfig(layers=2, dim=8, heads=2, num_ref_tokens=4, cond_dim=8, max_image_side=8,
                          instruction="ab"),
    denoiser=DenoiserConfig(blocks=1, dim=8, heads=2, max_side=8, time_dim=8, cond_dim=8),
    image_side=8, lora_rank=2, T=20)


def randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data[...] = rng.normal(0, scale, p.shape)


@pytest.fixture
def tiny():
    m = MultiRefModel(TINY)
    m.install_adapters()
    m.install_lora()
    return m


def refs(rng, k, side=8):
    return [rng.uniform(-1, 1, (side, side, 3)) for _ in range(k)]


def test_end_to_end_gradients():
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        m = MultiRefModel(TINY)
        m.install_adapters()
        m.install_lora()
        randomize(m, rng)
        images = refs(rng, 2)
        x0 = rng.uniform(-1, 1, (2, 8, 8, 3))
        eps = rng.standard_normal(x0.shape)
        t = np.array([3, 15])

        def loss():
            c_t = m.text_condition("red circle")
            c_i = m.image_condition(images, "red circle")
            return training_loss(m.eps, x0, c_t, c_i, t, eps, m.schedule)

        b = m.denoiser.blocks[0].xattn
        params = [m.encoder.ref_tokens, m.encoder.agg[0].mlp.fc1.w, m.encoder.vision.proj_w,
                  m.encoder.cond_proj.mlp.fc2.w, b.adapter.wk.w, b.adapter.wv.w, b.wq.lora.a,
                  m.text_cond.word_emb]
        assert check_parameter_gradients(loss, params, max_entries=12) < 1e-4


@pytest.mark.parametrize("agg,k,rows", [("tokens", 3, 4), ("average", 3, 4), ("concat", 3, 12)])
def test_condition_rows_per_aggregation(tiny, rng, agg, k, rows):
    m = tiny.with_aggregation(agg)
    with no_grad():
        assert m.image_condition(refs(rng, k)).shape == (rows, 8)
    assert m.token_count(k) == rows


def test_with_aggregation_copies_weights(tiny):
    other = tiny.with_aggregation("average")
    for (n, a), (_, b) in zip(tiny.named_parameters(), other.named_parameters()):
        assert a is not b
        np.testing.assert_array_equal(a.data, b.data)


def test_null_conditions_shapes(tiny):
    with no_grad():
        c_t, c_i = tiny.null_conditions()
        again = tiny.null_conditions()
    assert c_t.shape == (1, 8) and c_i.shape == (4, 8)
    np.testing.assert_array_equal(c_i.data, again[1].data)


def test_sampling_is_deterministic_and_textonly_uses_black_null(tiny, rng):
    randomize(tiny.denoiser, rng, 0.1)
    g = GuidanceConfig(steps=5)
    a = tiny.sample([], "blue square", g, seed=4, num_samples=2)
    b = tiny.sample([], "blue square", g, seed=4, num_samples=2)
    assert a.shape == (2, 8, 8, 3) and a.tobytes() == b.tobytes()
    c = tiny.sample(refs(rng, 2), "blue square", g, seed=4, shape=(8, 4, 3))
    assert c.shape == (1, 8, 4, 3) and np.all(np.abs(c) <= 1)


def test_flop_tags(tiny, rng):
    with no_grad(), count_flops() as flops:
        c_t = tiny.text_condition("x")
        c_i = tiny.image_condition(refs(rng, 2))
        tiny.eps(np.zeros((1, 8, 8, 3)), [0], c_t, c_i)
    assert all(flops[tag] > 0 for tag in ("text", "encoder", "denoiser"))


def test_save_load_round_trip(tiny, tmp_path, rng):
    randomize(tiny, rng)
    path = tmp_path / "m.ezrf"
    tiny.save(path, extra={"train.step": np.array([3.0])})
    fresh = MultiRefModel(TINY)
    extra = fresh.load(path)
    assert fresh.has_adapters and fresh.has_lora
    assert list(extra) == ["train.step"]
    for (_, a), (_, b) in zip(tiny.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(aggregation="sum")
    with pytest.raises(ValueError):
        ModelConfig(encoder=EncoderConfig(cond_dim=32))
    assert ModelConfig().lora_rank == 32
