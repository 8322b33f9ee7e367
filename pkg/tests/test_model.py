import weakref

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hvp.model import (
    NetSpec,
    PredictorState,
    VideoPredictor,
    composite,
)

SMALL = NetSpec(image_size=(16, 16), d=4, s=4, m=4, conv_widths=(8, 8), lstm_size=16)


def _model(spec=SMALL, seed=0):
    torch.manual_seed(seed)
    return VideoPredictor(spec).eval()


def _frames(*lead, spec=SMALL, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*lead, spec.channels, *spec.image_size, generator=g)


@settings(max_examples=15, deadline=None)
@given(
    size=st.sampled_from([16, 32]),
    blocks=st.integers(1, 2),
    d=st.integers(1, 8),
    m=st.integers(1, 6),
    noise_dim=st.integers(0, 3),
    use_van=st.booleans(),
)
def test_component_shape_contracts(size, blocks, d, m, noise_dim, use_van):
    widths = (4,) * blocks
    spec = NetSpec(image_size=(size, size), d=d, s=size // 2**blocks, m=m, conv_widths=widths,
                   lstm_size=5, noise_dim=noise_dim, use_van=use_van)
    model = VideoPredictor(spec)
    x = torch.rand(2, 3, size, size)
    e = model.encode_frame(x)
    assert e.shape == (2, d)
    z = model.van.f_enc(e)
    assert z.shape == (2, m, spec.s, spec.s)
    raw, mask = model.van.f_dec(z)
    assert raw.shape == x.shape and mask.shape == (2, 1, size, size)
    if use_van:
        assert model.van.f_img(x).shape == z.shape
        assert model.van.f_diff(z).shape == z.shape
        assert model.van.f_analogy(torch.cat([z, z], 1)).shape == z.shape
    else:
        assert model.van.reference(e, x) is None
    out = model.decode(e, e, x)
    for t in out:
        assert t.min() >= 0 and t.max() <= 1


def test_netspec_rejects_inconsistent_side():
    with pytest.raises(ValueError):
        NetSpec(image_size=(32, 32), s=4, conv_widths=(8, 8))
    with pytest.raises(ValueError):
        NetSpec(image_size=(32, 16))
    spec = NetSpec.for_image(64, d=8)
    assert spec.s == 8 and len(spec.conv_widths) == 3
    assert NetSpec.from_json(spec.to_json()) == spec


def test_encode_frame_deterministic_and_checked():
    model = _model()
    x = _frames(3)
    a, b = model.encode_frame(x), model.encode_frame(x)
    assert a.shape == (3, SMALL.d)
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        model.encode_frame(torch.rand(3, 3, 32, 32))


def test_predictor_step_contract():
    model = _model()
    state = model.predictor.initial_state(2, torch.zeros(1))
    e = torch.randn(2, SMALL.d)
    out1, s1 = model.predictor_step(e, state)
    out2, s2 = model.predictor_step(e, state)
    assert torch.equal(out1, out2) and torch.equal(s1.hidden, s2.hidden)
    assert out1.shape == (2, SMALL.d)
    assert isinstance(s1, PredictorState) and s1.cell.shape == (2, SMALL.lstm_size)
    with pytest.raises(ValueError):
        model.predictor_step(torch.randn(2, SMALL.d + 1), state)


def test_noise_changes_predictor_output():
    spec = NetSpec(**{**SMALL.to_json(), "image_size": (16, 16), "conv_widths": (8, 8), "noise_dim": 3})
    model = _model(spec)
    state = model.predictor.initial_state(1, torch.zeros(1))
    e = torch.randn(1, spec.d)
    a, _ = model.predictor_step(e, state, torch.zeros(1, 3))
    b, _ = model.predictor_step(e, state, torch.ones(1, 3))
    assert float((a - b).detach().norm()) > 0
    with pytest.raises(ValueError):
        model.predictor_step(e, state, torch.zeros(1, 2))
    assert _model().noise(2, 5, 1.0) is None
    assert model.noise(2, 5, 1.0).shape == (2, 5, 3)


def test_input_tap_c2_t5():
    model = _model()
    ctx = torch.randn(2, 2, SMALL.d)
    seen = []
    model.tap = lambda t, source, x: seen.append((t, source, x))
    outs = model.predict_encodings(ctx, 5)
    assert [(t, s) for t, s, _ in seen] == [
        (1, "encoder"), (2, "encoder"), (3, "predictor"), (4, "predictor"), (5, "predictor")
    ]
    assert torch.equal(seen[0][2], ctx[:, 0]) and torch.equal(seen[1][2], ctx[:, 1])
    # step t > C consumes the model's own output from step t-1
    for t in (3, 4, 5):
        assert torch.equal(seen[t - 1][2], outs[:, t - 2])


def test_horizon_equal_to_context_never_free_runs():
    model = _model()
    sources = []
    model.tap = lambda t, s, x: sources.append(s)
    out = model.predict_encodings(torch.randn(1, 3, SMALL.d), 3)
    assert out.shape == (1, 3, SMALL.d)
    assert sources == ["encoder"] * 3


def test_predict_encodings_errors():
    model = _model()
    with pytest.raises(ValueError):
        model.predict_encodings(torch.randn(1, 0, SMALL.d), 3)
    with pytest.raises(ValueError):
        model.predict_encodings(torch.randn(1, 3, SMALL.d), 2)


@pytest.mark.parametrize("mask_value", [0.0, 1.0])
def test_composite_selects_source_bit_exactly(mask_value):
    g = torch.Generator().manual_seed(0)
    raw, first = torch.rand(2, 3, 8, 8, generator=g), torch.rand(2, 3, 8, 8, generator=g)
    out = composite(raw, torch.full((2, 1, 8, 8), mask_value), first)
    assert torch.equal(out, raw if mask_value else first)


def test_composite_half_mask():
    out = composite(torch.ones(1, 3, 4, 4), torch.full((1, 1, 4, 4), 0.5), torch.zeros(1, 3, 4, 4))
    assert torch.equal(out, torch.full((1, 3, 4, 4), 0.5))


def test_composite_shape_errors():
    with pytest.raises(ValueError):
        composite(torch.rand(1, 3, 4, 4), torch.rand(1, 1, 4, 4), torch.rand(1, 3, 4, 5))
    with pytest.raises(ValueError):
        composite(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4))


def test_rollout_single_frame_and_determinism():
    model = _model()
    ctx = _frames(2, 3)
    one = model.rollout(ctx, 1)
    assert len(one) == 1 and one[0].composite.shape == (2, 3, 16, 16)
    a = model.rollout(ctx, 12)
    b = model.rollout(ctx, 12)
    assert all(torch.equal(x.composite, y.composite) for x, y in zip(a, b))
    # a longer rollout extends a shorter one
    assert torch.equal(model.rollout(ctx, 20)[11].composite, a[11].composite)


def test_rollout_encodes_only_context():
    model = _model()
    ctx = _frames(1, 3)
    inputs = []
    orig = model.encoder.forward
    model.encoder.forward = lambda x, **kw: (inputs.append(x), orig(x, **kw))[1]
    frames = model.rollout(ctx, 9)
    assert len(inputs) == 3
    for k, x in enumerate(inputs):
        assert torch.equal(x, ctx[:, k])
    for f in frames:
        assert not any(x.data_ptr() == f.composite.data_ptr() for x in inputs)


def _max_live_frames(model, ctx, horizon):
    live = []
    peak = 0
    with torch.no_grad():
        for out in model.iter_rollout(ctx, horizon):
            live.append(weakref.ref(out.composite))
            del out
            live = [r for r in live if r() is not None]
            peak = max(peak, len(live))
    return peak


def test_rollout_is_streaming():
    model = _model()
    ctx = _frames(1, 3)
    short, long = _max_live_frames(model, ctx, 256), _max_live_frames(model, ctx, 1024)
    assert short == long <= 1
