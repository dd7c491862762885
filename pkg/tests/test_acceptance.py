"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the training criteria (6, 7)
share one seeded desk-scale run that takes several minutes on one core.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from gradcheck import check
from y2net import tensor as T
from y2net.frontend import DEFAULT_FRAME, analyze, highpass, interior, synthesize
from y2net.metrics import (
    IdentityModel,
    decompose_spectra,
    delta_snr,
    delta_snr_noise_only,
    erle,
    eval_utterance,
    rtf_bench,
)
from y2net.pipeline import Y2Net, Y2NetConfig, apply_mask
from y2net.synth import SynthConfig, draw_scenario, make_demo_pools, render
from y2net.trainer import (
    PlateauSchedule,
    SequenceData,
    TrainConfig,
    evaluate,
    load_pretrained_aec,
    loss_aec,
    loss_pf,
    train,
)
from y2net.ynet import YNet, YNetConfig


def report(num, title, ok, detail):
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print("\n" + line)
    return ok


@pytest.fixture
def say(capsys):
    def _say(*args):
        with capsys.disabled():
            return report(*args)

    return _say


# ---------------------------------------------------------------------------


def test_c01_stft_round_trip(say):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    n = 2 * DEFAULT_FRAME.sample_rate_hz
    for _ in range(100):
        x = rng.standard_normal(n)
        X = analyze(x)
        y = synthesize(X)
        sl = interior(X.shape[0])
        worst = max(worst, np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl]))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 5.0
    assert say(1, "STFT round trip", ok, f"max rel L2 {worst:.2e} (< 1e-6), {dt:.2f} s (< 5 s)")


def _dot(t, r):
    return T.sum_all(T.mul(t, r))


def test_c02_gradient_checks(say):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errs = {}
    x, w, b = rng.standard_normal((2, 10, 3)), rng.standard_normal((5, 3, 4)), rng.standard_normal(4)
    for s in (1, 2):
        r = rng.standard_normal((2, 10 // s, 4))
        errs[f"conv s{s}"] = check(lambda *t: _dot(T.conv1d(*t, s), r), [x, w, b])
        xd = rng.standard_normal((2, 5, 3))
        rd = rng.standard_normal((2, 5 * s, 4))
        errs[f"deconv s{s}"] = check(lambda *t: _dot(T.deconv1d(*t, s), rd), [xd, w, b])
    z = rng.uniform(-3, 3, (3, 7))
    rz = rng.standard_normal((3, 7))
    for name, fn in (("leaky_relu", lambda t: T.leaky_relu(t, 0.3)), ("hard_sigmoid", T.hard_sigmoid), ("tanh", T.tanh)):
        errs[name] = check(lambda t: _dot(fn(t), rz), [z])
    f = 3
    lstm_in = [
        rng.standard_normal((2, 8, 4)),
        rng.standard_normal((2, 8, f)),
        rng.standard_normal((2, 8, f)),
        0.3 * rng.standard_normal((5, 4, 4 * f)),
        0.3 * rng.standard_normal((5, f, 4 * f)),
        0.1 * rng.standard_normal(4 * f),
    ]
    rh = rng.standard_normal((2, 8, f))
    errs["convlstm"] = check(lambda *t: _dot(T.convlstm_step(*t)[0], rh), lstm_in)
    e, m = rng.standard_normal((4, 6, 2)), rng.standard_normal((4, 6, 2))
    rm = rng.standard_normal((4, 6, 2))
    errs["compressed_mask"] = check(lambda a, c: _dot(T.compressed_mask(a, c), rm), [e, m])
    rc = rng.standard_normal((4, 6, 4))
    errs["concat"] = check(lambda a, c: _dot(T.concat([a, c], -1), rc), [e, m])

    net = YNet(YNetConfig(M=20, F=4), dtype=np.float64)
    for p in net.params.values():
        if p.name.endswith(".b"):
            p.data = 0.1 * rng.standard_normal(p.shape)
    u, v = rng.standard_normal((1, 2, 20, 2)), rng.standard_normal((1, 2, 20, 2))
    rw = rng.standard_normal((1, 2, 20, 2))
    names = list(net.params)

    def full(*ts):
        for name, t in zip(names, ts[2:]):
            net.params[name] = t
        out, _ = net.forward_sequence(ts[0], ts[1])
        return _dot(out, rw)

    errs["Y-Net M=20 F=4 2 frames"] = check(full, [u, v] + [net.params[k].data.copy() for k in names])
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and dt < 60.0
    assert say(2, "finite-difference gradients", ok, f"{len(errs)} checks, worst rel err {worst:.1e} (< 1e-4), {dt:.1f} s (< 60 s)")


def test_c03_shape_ladder(say):
    net = YNet(YNetConfig(M=260, F=70, C=2, fusion="EF"))
    taps = {}
    u = np.zeros((1, 1, 260, 2), np.float32)
    with T.no_grad():
        out, _ = net.forward_sequence(u, u, taps=taps)
    single, _ = net.forward(u[0, 0][:, None], u[0, 0][:, None])
    want = {
        "skip1": (1, 260, 70),
        "skip2": (1, 130, 140),
        "bottleneck_in": (1, 65, 140),
        "lstm_out": (1, 65, 70),
        "dec1": (1, 130, 140),
        "dec2": (1, 130, 140),
        "dec3": (1, 260, 70),
        "dec4": (1, 260, 70),
    }
    ok = all(taps[k] == v for k, v in want.items()) and single.shape == (260, 1, 2)
    ladder = "/".join(str(taps[k][1]) for k in ("skip1", "skip2", "bottleneck_in"))
    assert say(3, "EF shape ladder", ok, f"encoder {ladder}, output {'x'.join(map(str, single.shape))}")


def test_c04_mask_properties(say):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    n = 100_000
    E = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    M = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * rng.choice([0.01, 1.0, 30.0], n)
    S = apply_mask(E, M)
    bounded = bool(np.all(np.abs(S) <= np.abs(E) * (1 + 1e-12)))
    defined = (np.abs(E) > 0) & (np.abs(M) > 0)
    diff = np.angle(S[defined]) - np.angle(E[defined]) - np.angle(M[defined])
    phase_err = float(np.abs(np.angle(np.exp(1j * diff))).max())
    zero = bool(np.all(apply_mask(E[:1000], np.zeros(1000)) == 0))
    dt = time.perf_counter() - t0
    ok = bounded and phase_err < 1e-9 and zero and dt < 5.0
    assert say(4, "compressed mask", ok, f"|S|<=|E| {bounded}, phase err {phase_err:.1e}, M=0 -> 0 {zero}, {dt:.2f} s")


def test_c05_loss_equivalence(say):
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((1000, 512)), rng.standard_normal((1000, 512))
    A, B = np.fft.fft(a, axis=1), np.fft.fft(b, axis=1)
    brute = np.mean(np.abs(A - B) ** 2, axis=1)
    ha, hb = np.fft.rfft(a, axis=1), np.fft.rfft(b, axis=1)
    worst = max(float(np.max(np.abs(f(ha, hb) - brute) / brute)) for f in (loss_aec, loss_pf))
    ok = worst <= 1e-12
    assert say(5, "257-bin weighted loss", ok, f"max rel diff to 512-bin brute force {worst:.1e} (<= 1e-12)")


# ---------------------------------------------------------------------------
# desk-scale training (shared by criteria 6 and 7)

TINY = YNetConfig(F=8)
N_UTT = 4
EPOCHS = 200


def _train_cfg(phase):
    # one 50-frame window per utterance, two windows per Adam step
    return TrainConfig(phase=phase, batch_size=2, max_epochs=EPOCHS, patience_stop=EPOCHS, seed=0)


def matched_single_stage_F(target: int) -> int:
    return min(range(4, 32), key=lambda f: abs(YNet(YNetConfig(F=f)).param_count() - target))


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    t_start = time.perf_counter()
    pools = make_demo_pools(root / "pools", seconds=6.0)
    sc = SynthConfig(
        fe_pool=pools["fe"],
        ne_pool=pools["ne"],
        noise_pool=pools["noise"],
        n_utterances=N_UTT,
        seed=3,
        duration_s=0.7,
        ne_active_s=(0.4, 0.6),
        talk_type="double",
    )
    bundles = [render(sc, draw_scenario(sc, i, pools["fe"], pools["ne"], pools["noise"])) for i in range(N_UTT)]
    two = Y2NetConfig(aec=TINY, pf=TINY)
    data = SequenceData(bundles, 50, two.frame, two.hp_pole)

    pre_cfg = _train_cfg("pretrain_aec")
    fresh = Y2Net(two, seed=pre_cfg.seed)
    j_aec0 = evaluate(fresh, data, pre_cfg)["J"]
    pre = train(pre_cfg, two, data, data, root / "pre", model=fresh)
    j_aec1 = min(h["val_J"] for h in pre.history)

    joint_cfg = _train_cfg("joint")
    start = Y2Net(two, seed=joint_cfg.seed)
    load_pretrained_aec(start, pre.best_path)
    j0 = evaluate(start, data, joint_cfg)["J"]
    joint = train(joint_cfg, two, data, data, root / "joint", init_checkpoint=pre.best_path)
    j1 = min(h["val_J"] for h in joint.history)

    f_single = matched_single_stage_F(joint.model.aec.param_count() + joint.model.pf.param_count())
    single_cfg = Y2NetConfig.single_stage(net=YNetConfig(F=f_single))
    single = train(_train_cfg("single_stage"), single_cfg, data, data, root / "single")

    def erle_yd(model):
        return float(np.mean([eval_utterance(model, b).erle_echo_only_db for b in bundles]))

    return {
        "j_aec": (j_aec0, j_aec1),
        "j": (j0, j1),
        "erle_two": erle_yd(joint.model),
        "erle_single": erle_yd(single.model),
        "erle_identity": erle_yd(IdentityModel()),
        "f_single": f_single,
        "params": (joint.model.aec.param_count() + joint.model.pf.param_count(), single.model.aec.param_count()),
        "epochs": (len(pre.history), len(joint.history), len(single.history)),
        "seconds": time.perf_counter() - t_start,
    }


@pytest.mark.slow
def test_c06_overfit_regression(say, overfit):
    a0, a1 = overfit["j_aec"]
    j0, j1 = overfit["j"]
    red_aec, red_j = 1 - a1 / a0, 1 - j1 / j0
    gain = overfit["erle_two"] - overfit["erle_identity"]
    mins = overfit["seconds"] / 60
    ok = red_aec >= 0.9 and red_j >= 0.9 and gain >= 10.0 and mins <= 15.0
    detail = (
        f"J_AEC {a0:.3g} -> {a1:.3g} (-{100 * red_aec:.1f}%), joint J {j0:.3g} -> {j1:.3g} (-{100 * red_j:.1f}%), "
        f"y=d ERLE {overfit['erle_two']:.2f} dB vs identity {overfit['erle_identity']:.2f} dB, "
        f"epochs {overfit['epochs']}, {mins:.1f} min for criteria 6+7"
    )
    assert say(6, "overfit regression", ok, detail)


@pytest.mark.slow
def test_c07_ablation(say, overfit):
    two, single = overfit["erle_two"], overfit["erle_single"]
    ok = two >= single
    p2, p1 = overfit["params"]
    detail = f"two-stage {two:.2f} dB ({p2} params) vs single-stage F={overfit['f_single']} {single:.2f} dB ({p1} params)"
    assert say(7, "two-stage vs F-matched single-stage", ok, detail)


# ---------------------------------------------------------------------------


def test_c08_metric_oracles(say):
    rng = np.random.default_rng(8)
    d = rng.standard_normal(8000)
    s, n = rng.standard_normal(8000), rng.standard_normal(8000)
    errs = [
        abs(erle(d, 0.1 * d) - 20.0),
        abs(erle(d, 0.5 * d) - 20 * np.log10(2)),
        abs(delta_snr(s, n, 0.5 * s, 0.05 * n) - 20.0),
        abs(delta_snr_noise_only(n, 0.01 * n) - 40.0),
    ]
    closed = max(errs)

    x = highpass(rng.standard_normal(12000))
    dd = 0.5 * np.convolve(x, rng.standard_normal(60) * np.exp(-np.arange(60) / 10))[: x.size]
    ss = 0.3 * rng.standard_normal(x.size)
    nn = 0.05 * rng.standard_normal(x.size)
    from y2net.synth import UtteranceBundle

    b = UtteranceBundle(x=x, y=ss + dd + nn, s=ss, d=dd, n=nn)
    m = eval_utterance(IdentityModel(), b)
    ident = max(abs(v) for v in (m.erle_wb_db, m.delta_snr_wb_db, m.erle_echo_only_db, m.delta_snr_noise_only_db, m.lsd_ne_only_db))

    net = YNetConfig(F=4)
    model = Y2Net(Y2NetConfig(aec=net, pf=net), seed=8, dtype=np.float64)
    for p in model.params.values():
        if p.name.endswith(".b"):
            p.data = 0.1 * rng.standard_normal(p.shape)
    out, _ = model.run(*model.spectra(b.x, b.y))
    S, D, N = (analyze(highpass(c)) for c in (b.s, b.d, b.n))
    St, Dt, Nt = decompose_spectra(S, D, N, out)
    additivity = float(np.abs(St + Dt + Nt - out.S_hat).max())
    ok = closed <= 1e-9 and ident <= 1e-9 and additivity <= 1e-9
    detail = f"closed-form err {closed:.1e}, identity max |dB| {ident:.1e}, per-bin additivity err {additivity:.1e}"
    assert say(8, "metric oracles", ok, detail)


def test_c09_causality_latency(say):
    rng = np.random.default_rng(9)
    net = YNetConfig(F=4)
    model = Y2Net(Y2NetConfig(aec=net, pf=net), seed=9)
    for p in model.params.values():
        if p.name.endswith(".b"):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(np.float32)
    shape = (8, 257)
    X = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    Y = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    base, _ = model.run(X, Y)
    identical = True
    for ell in range(7):
        X2, Y2 = X.copy(), Y.copy()
        X2[ell + 1 :] += rng.standard_normal((7 - ell, 257))
        Y2[ell + 1 :] += rng.standard_normal((7 - ell, 257))
        pert, _ = model.run(X2, Y2)
        identical &= np.array_equal(pert.S_hat[: ell + 1], base.S_hat[: ell + 1])
    f = DEFAULT_FRAME
    latency = Fraction(f.frame_len + f.frame_shift, f.sample_rate_hz)
    exact = latency == Fraction(3975, 100_000) and f.latency_s == 0.03975
    ok = identical and exact
    assert say(9, "causality and latency", ok, f"earlier frames bit-identical {identical}, latency {float(latency) * 1e3} ms")


class _SleepStub:
    def process_frame(self, X, Y, state=None):
        time.sleep(DEFAULT_FRAME.shift_duration_s)
        return X, None, None, None, state


def test_c10_rtf_harness(say):
    frames = [(np.zeros(257), np.zeros(257))]
    stub = rtf_bench(_SleepStub(), frames, repetitions=20)
    net = YNetConfig(F=8)
    model = Y2Net(Y2NetConfig(aec=net, pf=net))
    rng = np.random.default_rng(10)
    spec = [(rng.standard_normal(257) + 0j, rng.standard_normal(257) + 0j) for _ in range(5)]
    tiny = rtf_bench(model, spec, repetitions=20)
    ok = abs(stub - 1.0) <= 0.10
    assert say(10, "RTF harness", ok, f"stub RTF {stub:.3f} (1.00 +- 0.10); tiny F=8 model RTF {tiny:.3f} (informational)")


def test_c11_lr_schedule(say):
    cfg = TrainConfig(patience_stop=10**6)
    sched = PlateauSchedule.from_config(cfg)
    lrs = []
    while not sched.done:
        if not lrs or lrs[-1] != sched.lr:
            lrs.append(sched.lr)
        sched.step(1.0)
    want = [5e-3, 3e-3, 1.8e-3, 1.08e-3, 6.48e-4]
    ok = len(lrs) == len(want) and np.allclose(lrs, want, rtol=1e-12, atol=0) and sched.stop_reason == "lr_floor"
    assert say(11, "LR schedule", ok, f"{', '.join(f'{v:.3g}' for v in lrs)}, stop: {sched.stop_reason}")
