"""Instrumental evaluation: smoothed ERLE, delta-SNR, white-box component
decomposition, per-condition evaluation and the real-time-factor benchmark."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .frontend import DEFAULT_FRAME, FrameConfig, analyze, highpass, synthesize
from .pipeline import FrameOutputs

ERLE_SMOOTHING = 0.99
ERLE_CAP_DB = 80.0
ERLE_ACTIVE_DB = -60.0
SNR_CAP_DB = 100.0


def smoothed_power(x, a: float = ERLE_SMOOTHING) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.asarray(_kernels.one_pole(x * x, a), dtype=float)


def erle(d, d_tilde, a: float = ERLE_SMOOTHING) -> float:
    """Mean smoothed ERLE in dB over samples where the smoothed echo power is
    within 60 dB of its maximum; capped at +80 dB per sample."""
    d, d_tilde = np.asarray(d, float), np.asarray(d_tilde, float)
    if d.shape != d_tilde.shape:
        raise ValueError("d and d_tilde must have equal lengths")
    p_d = smoothed_power(d, a)
    if not np.any(p_d > 0):
        raise ValueError("echo signal has zero energy")
    p_r = smoothed_power(d_tilde, a)
    active = p_d > p_d.max() * 10.0 ** (ERLE_ACTIVE_DB / 10.0)
    pd, pr = p_d[active], p_r[active]
    with np.errstate(divide="ignore"):
        inst = np.where(pr > 0, 10.0 * np.log10(pd / np.where(pr > 0, pr, 1.0)), ERLE_CAP_DB)
    return float(np.mean(np.minimum(inst, ERLE_CAP_DB)))


def _energy(x) -> float:
    x = np.asarray(x, float)
    return float(np.dot(x, x))


def _ratio_db(num: float, den: float) -> float:
    """10 log10(num/den), clamped to +-SNR_CAP_DB; nan if both are zero."""
    if num <= 0 and den <= 0:
        return math.nan
    if den <= 0:
        return SNR_CAP_DB
    if num <= 0:
        return -SNR_CAP_DB
    return max(-SNR_CAP_DB, min(SNR_CAP_DB, 10.0 * math.log10(num / den)))


def delta_snr(s, n, s_tilde, n_tilde) -> float:
    """SNR of the processed components minus SNR of the microphone components."""
    es, en, est, ent = (_energy(v) for v in (s, n, s_tilde, n_tilde))
    if en <= 0 or es <= 0:
        raise ValueError("delta_snr needs non-zero input speech and noise energies")
    return _ratio_db(est, ent) - _ratio_db(es, en)


def delta_snr_noise_only(n, n_tilde) -> float:
    """Simplified variant for the y = n condition: noise attenuation in dB."""
    en = _energy(n)
    if en <= 0:
        raise ValueError("input noise energy must be non-zero")
    return _ratio_db(en, _energy(n_tilde))


def log_spectral_distance(ref, est, frame: FrameConfig = DEFAULT_FRAME, floor: float = 1e-10) -> float:
    """RMS over bins of the dB power difference, averaged over frames (dB)."""
    R = np.abs(analyze(ref, frame)) ** 2
    E = np.abs(analyze(est, frame)) ** 2
    diff = 10.0 * np.log10(np.maximum(R, floor)) - 10.0 * np.log10(np.maximum(E, floor))
    active = R.sum(axis=1) > 0
    if not active.any():
        return 0.0
    return float(np.mean(np.sqrt(np.mean(diff[active] ** 2, axis=1))))


def signal_snr(ref, est) -> float:
    err = _energy(np.asarray(est, float) - np.asarray(ref, float))
    if err == 0:
        return SNR_CAP_DB
    return min(10.0 * math.log10(_energy(ref) / err), SNR_CAP_DB)


# ---------------------------------------------------------------------------
# component decomposition


def passthrough(c, frame: FrameConfig = DEFAULT_FRAME, hp_pole: float | None = 0.99) -> np.ndarray:
    """A component as the unprocessed model path sees it: high-pass,
    analysis and synthesis, trimmed to the model output length."""
    c = highpass(c, hp_pole) if hp_pole is not None else np.asarray(c, float)
    return synthesize(analyze(c, frame), frame)


def decompose_spectra(S, D, N, out: FrameOutputs):
    """Processed component spectra (S~, D~, N~) with S~ + D~ + N~ = S_hat."""
    g = out.gain
    return S * g, (D - out.D_hat) * g, N * g


def decompose_components(s, d, n, out: FrameOutputs, frame: FrameConfig = DEFAULT_FRAME, hp_pole: float | None = 0.99):
    """Time-domain processed components ``(s~, d~, n~)`` of one model run."""
    if out is None or out.D_hat is None or out.gain is None:
        raise ValueError("decomposition needs the stored echo estimate and mask gain")
    spec = []
    for c in (s, d, n):
        c = highpass(c, hp_pole) if hp_pole is not None else np.asarray(c, float)
        spec.append(analyze(c, frame))
    St, Dt, Nt = decompose_spectra(*spec, out)
    return synthesize(St, frame), synthesize(Dt, frame), synthesize(Nt, frame)


# ---------------------------------------------------------------------------
# reference models


class IdentityModel:
    """Passes the microphone spectrum through untouched."""

    config = None

    def __init__(self, frame: FrameConfig = DEFAULT_FRAME, hp_pole: float | None = 0.99):
        self.frame = frame
        self.hp_pole = hp_pole

    def spectra(self, x, y):
        if self.hp_pole is not None:
            x, y = highpass(x, self.hp_pole), highpass(y, self.hp_pole)
        return analyze(x, self.frame), analyze(y, self.frame)

    def run(self, X, Y, state=None):
        Y = np.asarray(Y)
        out = FrameOutputs(S_hat=Y.copy(), D_hat=np.zeros_like(Y), E=Y.copy(), mask=None, gain=np.ones_like(Y))
        return out, state

    def process_frame(self, X_l, Y_l, state=None):
        Y_l = np.asarray(Y_l)
        return Y_l.copy(), np.zeros_like(Y_l), Y_l.copy(), None, state


class MuteModel(IdentityModel):
    """Ideal suppressor that outputs silence: every echo residual is zero,
    so ERLE hits its cap."""

    def run(self, X, Y, state=None):
        Y = np.asarray(Y)
        z = np.zeros_like(Y)
        return FrameOutputs(S_hat=z, D_hat=Y.copy(), E=z.copy(), mask=None, gain=z.copy()), state

    def process_frame(self, X_l, Y_l, state=None):
        z = np.zeros_like(np.asarray(Y_l))
        return z, np.asarray(Y_l).copy(), z.copy(), None, state


# ---------------------------------------------------------------------------
# evaluation


PESQ_NOTE = "n/a (PESQ not implemented)"


@dataclass
class UtteranceMetrics:
    erle_wb_db: float | None = None
    delta_snr_wb_db: float | None = None
    erle_echo_only_db: float | None = None
    delta_snr_noise_only_db: float | None = None
    lsd_ne_only_db: float | None = None
    snr_ne_only_db: float | None = None


@dataclass
class MetricsReport:
    """Per-utterance and dataset-mean metrics. "WB" marks white-box
    decomposition results (not comparable with black-box P.1110 numbers)."""

    model: str = ""
    utterances: list = field(default_factory=list)
    rtf: float | None = None
    notes: list = field(
        default_factory=lambda: [
            "ERLE: one-pole smoothing (0.99) applied to instantaneous powers, mean over active samples, cap +80 dB",
            "WB: white-box decomposition through the model's own echo estimate and mask gain",
            "PESQ columns not implemented; NE-only quality reported as log-spectral distance and SNR proxies",
        ]
    )

    COLUMNS = (
        ("PESQ", None),
        ("ERLE_WB", "erle_wb_db"),
        ("dSNR_WB", "delta_snr_wb_db"),
        ("PESQ_WB", None),
        ("ERLE[y=d]", "erle_echo_only_db"),
        ("dSNR[y=n]", "delta_snr_noise_only_db"),
        ("PESQ[y=s]", None),
        ("LSD[y=s]", "lsd_ne_only_db"),
        ("SNR[y=s]", "snr_ne_only_db"),
    )

    def mean(self, key: str) -> float | None:
        vals = [getattr(u, key) for u in self.utterances if getattr(u, key) is not None]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        out = {label: (self.mean(key) if key else None) for label, key in self.COLUMNS}
        out["RTF"] = None if self.rtf is None else round(self.rtf, 2)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model,
                "summary": self.summary(),
                "utterances": [asdict(u) for u in self.utterances],
                "notes": self.notes,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        labels = [label for label, _ in self.COLUMNS] + ["RTF"]
        w.writerow(["model"] + labels)
        summ = self.summary()
        w.writerow([self.model] + ["" if summ[k] is None else repr(summ[k]) for k in labels])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> dict:
        rows = list(csv.reader(io.StringIO(text)))
        head, vals = rows[0], rows[1]
        return {h: (None if v == "" else float(v)) for h, v in zip(head[1:], vals[1:])}

    def table(self) -> str:
        summ = self.summary()
        labels = [label for label, _ in self.COLUMNS] + ["RTF"]
        groups = "full mixture y(n)".ljust(44) + "| d(n)      | n(n)      | s(n)"
        head = " | ".join(f"{lab:>9}" for lab in labels)

        def fmt(v, lab):
            if v is None:
                return f"{'n/a':>9}"
            return f"{v:9.2f}"

        row = " | ".join(fmt(summ[lab], lab) for lab in labels)
        lines = [f"# {n}" for n in self.notes] + [groups, head, row + f"   {self.model}"]
        return "\n".join(lines)


def _run(model, x, y):
    X, Y = model.spectra(x, y)
    out, _ = model.run(X, Y)
    frame = getattr(getattr(model, "config", None), "frame", None) or getattr(model, "frame", DEFAULT_FRAME)
    return synthesize(out.S_hat, frame), out, frame


def _hp(model):
    cfg = getattr(model, "config", None)
    return cfg.hp_pole if cfg is not None else getattr(model, "hp_pole", 0.99)


def eval_utterance(model, bundle) -> UtteranceMetrics:
    """Full mixture (white-box), y=d with x, y=n with x=0, y=s with x=0."""
    for name in ("x", "y", "s", "d", "n"):
        if getattr(bundle, name, None) is None:
            raise ValueError(f"bundle lacks component {name}")
    hp = _hp(model)
    m = UtteranceMetrics()
    zeros = np.zeros_like(bundle.x)
    has_d = np.any(bundle.d != 0)
    has_n = np.any(bundle.n != 0)
    has_s = np.any(bundle.s != 0)

    _, out, frame = _run(model, bundle.x, bundle.y)
    ref = {k: passthrough(getattr(bundle, k), frame, hp) for k in ("s", "d", "n")}
    s_t, d_t, n_t = decompose_components(bundle.s, bundle.d, bundle.n, out, frame, hp)
    if has_d:
        m.erle_wb_db = erle(ref["d"], d_t)
        ehat, _, _ = _run(model, bundle.x, bundle.d)
        m.erle_echo_only_db = erle(ref["d"], ehat)
    if has_n and has_s:
        m.delta_snr_wb_db = delta_snr(ref["s"], ref["n"], s_t, n_t)
    if has_n:
        nhat, _, _ = _run(model, zeros, bundle.n)
        m.delta_snr_noise_only_db = delta_snr_noise_only(ref["n"], nhat)
    if has_s:
        shat, _, _ = _run(model, zeros, bundle.s)
        m.lsd_ne_only_db = log_spectral_distance(ref["s"], shat, frame)
        m.snr_ne_only_db = signal_snr(ref["s"], shat)
    return m


def eval_conditions(model, bundles, name: str = "") -> MetricsReport:
    report = MetricsReport(model=name or type(model).__name__)
    report.utterances = [eval_utterance(model, b) for b in bundles]
    return report


# ---------------------------------------------------------------------------
# real-time factor


def rtf_bench(model, frames, repetitions: int = 10, warmup: int = 3, frame: FrameConfig = DEFAULT_FRAME) -> float:
    """Median wall-clock time of ``model.process_frame`` divided by the
    frame shift duration. ``frames`` is a sequence of (X_l, Y_l) pairs that
    is cycled through; state is carried like in streaming use."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    if repetitions < 10:
        raise ValueError("use at least 10 timed repetitions")
    state = None
    times = []
    for k in range(warmup + repetitions):
        X_l, Y_l = frames[k % len(frames)]
        t0 = time.perf_counter()
        *_, state = model.process_frame(X_l, Y_l, state)
        dt = time.perf_counter() - t0
        if k >= warmup:
            times.append(dt)
    return statistics.median(times) / frame.shift_duration_s
