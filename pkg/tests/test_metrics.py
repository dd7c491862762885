import json
import math
import time

import numpy as np
import pytest

from y2net.frontend import DEFAULT_FRAME, analyze, highpass, synthesize
from y2net.metrics import (
    ERLE_CAP_DB,
    IdentityModel,
    MetricsReport,
    MuteModel,
    decompose_components,
    decompose_spectra,
    delta_snr,
    delta_snr_noise_only,
    erle,
    eval_conditions,
    eval_utterance,
    passthrough,
    rtf_bench,
    signal_snr,
    smoothed_power,
)
from y2net.pipeline import Y2Net, Y2NetConfig
from y2net.synth import UtteranceBundle, gen_ir, make_echo, speechlike
from y2net.ynet import YNetConfig


@pytest.fixture(scope="module")
def bundle():
    rng = np.random.default_rng(5)
    x = speechlike(rng, 1.5)
    d = 0.5 * make_echo(x, gen_ir(0.3, 4800, 1))
    s = np.roll(speechlike(rng, 1.5), 3000)
    n = 0.01 * rng.standard_normal(x.size)
    return UtteranceBundle(x=x, y=s + d + n, s=s, d=d, n=n)


def test_smoothed_power_recursion(rng):
    x = rng.standard_normal(50)
    ref = np.zeros(50)
    acc = 0.0
    for i, v in enumerate(x):
        acc = 0.99 * acc + 0.01 * v * v
        ref[i] = acc
    assert np.allclose(smoothed_power(x), ref, atol=1e-15)


@pytest.mark.parametrize("c", [0.5, 0.1, 3.0, 1e-3])
def test_erle_closed_form(rng, c):
    d = rng.standard_normal(4000)
    assert erle(d, c * d) == pytest.approx(-20 * math.log10(c), abs=1e-9)


def test_erle_cap_and_errors(rng):
    d = rng.standard_normal(1000)
    assert erle(d, np.zeros_like(d)) == ERLE_CAP_DB
    assert erle(d, 1e-6 * d) == ERLE_CAP_DB
    with pytest.raises(ValueError):
        erle(np.zeros(10), np.zeros(10))
    with pytest.raises(ValueError):
        erle(d, d[:-1])


def test_erle_ignores_inactive_tail(rng):
    d = np.concatenate([rng.standard_normal(2000), np.zeros(20000)])
    dt = 0.1 * d
    dt[2500:] = 1e-3  # residual while the echo has decayed >60 dB: not counted
    val = erle(d, dt)
    # active region ends where the smoothed echo power falls 60 dB below its peak
    assert val == pytest.approx(20.0, abs=2.0)


def test_delta_snr_closed_form(rng):
    s, n = rng.standard_normal(800), rng.standard_normal(800)
    assert delta_snr(s, n, 0.9 * s, 0.1 * n) == pytest.approx(20 * math.log10(9), abs=1e-9)
    assert delta_snr(s, n, s, n) == pytest.approx(0.0, abs=1e-12)
    assert delta_snr_noise_only(n, 0.25 * n) == pytest.approx(20 * math.log10(4), abs=1e-9)
    assert delta_snr_noise_only(n, 0 * n) == 100.0
    with pytest.raises(ValueError):
        delta_snr(s, 0 * n, s, n)


def test_signal_snr():
    x = np.ones(10)
    assert signal_snr(x, x) == 100.0
    assert signal_snr(x, 1.1 * x) == pytest.approx(20.0, abs=1e-9)


def test_identity_scores_zero(bundle):
    m = eval_utterance(IdentityModel(), bundle)
    for v in (m.erle_wb_db, m.delta_snr_wb_db, m.erle_echo_only_db, m.delta_snr_noise_only_db, m.lsd_ne_only_db):
        assert v == pytest.approx(0.0, abs=1e-9)
    assert m.snr_ne_only_db == 100.0


def test_mute_model_caps_erle(bundle):
    m = eval_utterance(MuteModel(), bundle)
    assert m.erle_wb_db == ERLE_CAP_DB
    assert m.erle_echo_only_db == ERLE_CAP_DB
    assert m.delta_snr_noise_only_db == 100.0


def test_passthrough_is_model_path(bundle):
    ref = passthrough(bundle.d)
    assert np.allclose(ref, synthesize(analyze(highpass(bundle.d))))


def _model64():
    net = YNetConfig(F=4)
    model = Y2Net(Y2NetConfig(aec=net, pf=net), seed=3, dtype=np.float64)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        if p.name.endswith(".b"):
            p.data = 0.1 * rng.standard_normal(p.shape)
    return model


def test_decomposition_additive_per_bin(bundle):
    model = _model64()
    X, Y = model.spectra(bundle.x, bundle.y)
    out, _ = model.run(X, Y)
    S, D, N = (analyze(highpass(c)) for c in (bundle.s, bundle.d, bundle.n))
    St, Dt, Nt = decompose_spectra(S, D, N, out)
    assert np.abs(St + Dt + Nt - out.S_hat).max() <= 1e-9 * max(1.0, np.abs(out.S_hat).max())
    s_t, d_t, n_t = decompose_components(bundle.s, bundle.d, bundle.n, out)
    s_hat = synthesize(out.S_hat)
    assert np.abs(s_t + d_t + n_t - s_hat).max() < 1e-9


def test_decomposition_needs_outputs(bundle):
    with pytest.raises(ValueError):
        decompose_components(bundle.s, bundle.d, bundle.n, None)


def test_report_csv_json_parity(bundle):
    rep = eval_conditions(IdentityModel(), [bundle, bundle], "identity")
    rep.rtf = 0.5
    summ = rep.summary()
    parsed = MetricsReport.from_csv(rep.to_csv())
    js = json.loads(rep.to_json())
    for key, val in summ.items():
        if val is None:
            assert parsed[key] is None and js["summary"][key] is None
        else:
            assert parsed[key] == pytest.approx(val, abs=0) and js["summary"][key] == val
    assert "PESQ" in rep.table() and "WB" in rep.table()


class SleepyModel:
    def __init__(self, seconds):
        self.seconds = seconds

    def process_frame(self, X, Y, state=None):
        time.sleep(self.seconds)
        return X, None, None, None, state


def test_rtf_stub_timing():
    frames = [(np.zeros(257), np.zeros(257))]
    rtf = rtf_bench(SleepyModel(DEFAULT_FRAME.shift_duration_s), frames, repetitions=20)
    assert rtf == pytest.approx(1.0, abs=0.1)
    half = rtf_bench(SleepyModel(DEFAULT_FRAME.shift_duration_s / 2), frames, repetitions=20)
    assert half == pytest.approx(0.5, abs=0.1)


def test_rtf_needs_repetitions():
    with pytest.raises(ValueError):
        rtf_bench(SleepyModel(0), [(0, 0)], repetitions=3)
    with pytest.raises(ValueError):
        rtf_bench(SleepyModel(0), [], repetitions=10)
