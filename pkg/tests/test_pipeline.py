import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from y2net import tensor as T
from y2net.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from y2net.frontend import DEFAULT_FRAME
from y2net.pipeline import (
    StreamingY2Net,
    Y2Net,
    Y2NetConfig,
    apply_mask,
    mask_gain,
    pack,
    unpack,
    valid_bins,
)
from y2net.ynet import YNetConfig

TINY = YNetConfig(F=4)


def tiny(seed=0, **kw):
    model = Y2Net(Y2NetConfig(aec=TINY, pf=TINY, **kw), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        if p.name.endswith(".b"):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(np.float32)
    return model


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(finite, finite, finite, finite)
def test_mask_never_amplifies(er, ei, mr, mi):
    e, m = complex(er, ei), complex(mr, mi)
    assert abs(apply_mask(np.array([e]), np.array([m]))[0]) <= abs(e) * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(finite, finite, finite, finite)
def test_mask_phase_adds(er, ei, mr, mi):
    e, m = complex(er, ei), complex(mr, mi)
    if abs(e) < 1e-6 or abs(m) < 1e-6:
        return
    s = apply_mask(np.array([e]), np.array([m]))[0]
    diff = np.angle(s) - np.angle(e) - np.angle(m)
    assert abs(np.angle(np.exp(1j * diff))) < 1e-9


def test_zero_mask_gives_zero():
    e = np.array([1 + 2j, -3.0, 0.5j])
    assert np.array_equal(apply_mask(e, np.zeros(3)), np.zeros(3))
    assert np.array_equal(mask_gain(np.zeros(2)), np.zeros(2))


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        apply_mask(np.ones(3), np.ones(4))


def test_gain_saturates_below_one():
    g = mask_gain(np.array([50.0, 50j, 1e-3]))
    assert np.allclose(np.abs(g[:2]), 1.0) and np.all(np.abs(g) <= 1.0)
    assert abs(g[2] - np.tanh(1e-3)) < 1e-15


def test_valid_bins():
    v = valid_bins(DEFAULT_FRAME)
    assert v.shape == (260, 2)
    assert v[257:].sum() == 0 and v[0, 1] == 0 and v[256, 1] == 0
    assert v[:257, 0].all() and v[1:256, 1].all()


def test_pack_unpack(rng):
    spec = rng.standard_normal((4, 257)) + 1j * rng.standard_normal((4, 257))
    assert np.allclose(unpack(pack(spec, dtype=np.float64)), spec)


def test_two_stage_signal_flow(rng):
    model = tiny()
    X = rng.standard_normal((6, 257)) + 1j * rng.standard_normal((6, 257))
    Y = rng.standard_normal((6, 257)) + 1j * rng.standard_normal((6, 257))
    out, _ = model.run(X, Y)
    Yr = unpack(pack(Y))
    assert np.allclose(out.E, Yr - out.D_hat, atol=1e-5)
    assert not out.D_hat[:, 0].imag.any() and not out.D_hat[:, -1].imag.any()
    assert np.allclose(out.S_hat, out.E * mask_gain(out.mask), atol=1e-5)
    assert np.all(np.abs(out.S_hat) <= np.abs(out.E) + 1e-5)


def test_padding_rows_masked(rng):
    model = tiny()
    Xf = rng.standard_normal((1, 3, 260, 2)).astype(np.float32)
    with T.no_grad():
        out, _ = model.forward_sequence(Xf, Xf)
    for key in ("D_hat", "mask"):
        assert not out[key].data[..., 257:, :].any()
        assert not out[key].data[..., 0, 1].any() and not out[key].data[..., 256, 1].any()


def test_pf_input_selection(rng):
    Xf = rng.standard_normal((1, 2, 260, 2)).astype(np.float32)
    Yf = rng.standard_normal((1, 2, 260, 2)).astype(np.float32)
    for choice, want in (("E,X", Xf), ("E,Dhat", None)):
        model = tiny(pf_inputs=choice)
        trace = {}
        with T.no_grad():
            out, _ = model.forward_sequence(Xf, Yf, trace=trace)
        ref = want if want is not None else out["D_hat"].data
        assert np.array_equal(trace["pf_second_input"], ref)


def test_config_rules():
    with pytest.raises(ValueError):
        Y2NetConfig(aec=TINY, pf=None)
    with pytest.raises(ValueError):
        Y2NetConfig(aec=TINY, pf=TINY, pf_inputs="X,Y")
    with pytest.raises(ValueError):
        Y2NetConfig(aec=YNetConfig(M=264, F=4), pf=YNetConfig(M=264, F=4))
    ss = Y2NetConfig.single_stage(F=12)
    assert ss.pf is None and ss.aec.F == 12
    assert Y2NetConfig.from_dict(ss.to_dict()) == ss


def test_single_stage_forward(rng):
    model = Y2Net(Y2NetConfig.single_stage(net=TINY))
    assert list(model.params)[0].startswith("net.")
    X = rng.standard_normal((3, 257)) + 1j * rng.standard_normal((3, 257))
    s, _ = model.single_stage_forward(X[0], X[1])
    assert s.shape == (257,)
    with pytest.raises(ValueError):
        model.forward_aec(np.zeros((1, 1, 260, 2)), np.zeros((1, 1, 260, 2)))


def test_zero_input_zero_output():
    model = Y2Net(Y2NetConfig(aec=TINY, pf=TINY))
    s, _ = model.process_utterance(np.zeros(4000), np.zeros(4000))
    assert s.size == DEFAULT_FRAME.output_len(DEFAULT_FRAME.n_frames(4000))
    assert not s.any()


def test_save_load_round_trip(tmp_path, rng):
    model = tiny(seed=2)
    path = tmp_path / "m.ckpt"
    model.save(path, meta={"note": "x"})
    again = Y2Net.load(path)
    x, y = rng.standard_normal(3000), rng.standard_normal(3000)
    assert np.array_equal(model.process_utterance(x, y)[0], again.process_utterance(x, y)[0])


def test_streaming_wrapper_matches_offline(rng):
    model = tiny(seed=1)
    n_frames = 8
    x = 0.1 * rng.standard_normal(DEFAULT_FRAME.output_len(n_frames))
    y = 0.1 * rng.standard_normal(x.size)
    offline, _ = model.process_utterance(x, y)
    stream = StreamingY2Net(model)
    blocks = [stream.push(a, b) for a, b in zip(x.reshape(-1, 212), y.reshape(-1, 212))]
    assert blocks[0] is None
    online = np.concatenate(blocks[1:] + [stream.syn.flush()])
    assert np.allclose(online, offline, atol=1e-5)


def test_checkpoint_format(tmp_path, rng):
    params = {"a.w": rng.standard_normal((2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    cfg = {"k": 1, "nested": {"z": [1, 2]}}
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, params, cfg, {"epoch": 3})
    raw = p.read_bytes()
    assert raw[:8] == b"Y2NETCKP" and raw[8:10] == b"\x01\x00"
    c2, p2, meta = load_checkpoint(p, expect_config=cfg)
    assert c2 == cfg and meta == {"epoch": 3}
    assert all(np.array_equal(params[k], p2[k]) for k in params)
    with pytest.raises(CheckpointError):
        load_checkpoint(p, expect_config={"k": 2})
    p.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(raw.replace(b'"k": 1', b'"k": 7'))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(raw[:8] + b"\x02\x00" + raw[10:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_load_rejects_wrong_shapes():
    model = tiny()
    arrays = model.arrays()
    arrays["aec.enc1.w"] = np.zeros((1, 1, 1))
    with pytest.raises(ValueError):
        model.load_arrays(arrays)
    del arrays["aec.enc1.w"]
    with pytest.raises(KeyError):
        model.load_arrays(arrays)


def test_mask_gain_tiny_and_subnormal_masks():
    m = np.array([2.2e-311j, 1e-200 + 1e-200j, 5e-5, 0.0])
    g = mask_gain(m)
    assert np.all(np.isfinite(g))
    np.testing.assert_allclose(g[:2], m[:2], rtol=1e-12, atol=0)  # tanh(r)/r == 1 to double precision
    assert g[2] == pytest.approx(np.tanh(5e-5), rel=1e-15)
    assert g[3] == 0
