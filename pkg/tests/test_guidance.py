import pytest
import torch
from hypothesis import given, settings, strategies as st

from fusecast.guidance import gsg_blend, unconditional_context
from fusecast.nets import READER_BLOCKS

from conftest import randomize, tiny_config
from fusecast.nets import ForecastModel
from fusecast.pipeline import timestep_embedding


def test_blend_endpoints_exact():
    a, b = torch.randn(3, 4), torch.randn(3, 4)
    assert gsg_blend(a, b, 1.0) is a
    assert gsg_blend(a, b, 0.0) is b


def test_blend_hand_value():
    out = gsg_blend(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.8], dtype=torch.float64), 7.5)
    assert out.item() == pytest.approx(2.3, abs=1e-12)


def test_blend_shape_mismatch():
    with pytest.raises(ValueError):
        gsg_blend(torch.zeros(3), torch.zeros(4), 7.5)


@given(lam=st.floats(-20, 20, allow_nan=False), seed=st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_blend_affine_and_degenerate(lam, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(5, generator=g, dtype=torch.float64)
    b = torch.randn(5, generator=g, dtype=torch.float64)
    torch.testing.assert_close(gsg_blend(a, b, lam) - b, lam * (a - b), rtol=1e-12, atol=1e-12)
    assert torch.equal(gsg_blend(a, a, lam), a)


def test_unconditional_context_shapes_and_zeros():
    cfg = tiny_config(patch_len=16, D=32)
    ctx, prompt = unconditional_context(5, 6, cfg)
    widths = {"a": 16, "b": 8, "c": 4, "m": 2}
    tokens = {"a": 6, "b": 6, "c": 12, "m": 24}
    assert set(ctx) == {n for n, _ in READER_BLOCKS}
    for name, s in READER_BLOCKS:
        assert ctx[name].shape == (5, tokens[s], widths[s])
        assert not ctx[name].any()
    assert prompt.shape == (5, cfg.prompt_dim) and not prompt.any()


def test_unconditional_context_equals_omitted_context():
    cfg = tiny_config()
    model = randomize(ForecastModel(cfg).double().eval())
    y = torch.randn(4, 3, cfg.patch_len, dtype=torch.float64)
    te = timestep_embedding(torch.full((4,), 10), cfg.time_dim).double()
    ctx, prompt = unconditional_context(4, 3, cfg, torch.float64)
    assert torch.equal(model.denoise(y, te, prompt, ctx), model.denoise(y, te))
