"""Synthetic echo/noise material: decaying-noise room responses, memoryless
loudspeaker distortion, SER/SNR mixing and the JSONL manifest."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .frontend import read_wav, write_wav

SAMPLE_RATE = 16000
TALK_TYPES = ("double", "fe-only", "ne-only")
DISTORTIONS = ("none", "hard_clip", "soft_tanh")


class PoolError(RuntimeError):
    pass


@dataclass
class SynthScenario:
    seed: int
    index: int
    t60: float
    ser_db: float | None
    snr_db: float
    nonlinear: bool
    distortion_kind: str
    distortion_param: float | None
    talk_type: str
    fe_source: str = ""
    ne_source: str = ""
    noise_source: str = ""

    def __post_init__(self):
        if not 0.2 <= self.t60 <= 1.2:
            raise ValueError("t60 must lie in [0.2, 1.2] s")
        if self.ser_db is not None and not -10.0 <= self.ser_db <= 10.0:
            raise ValueError("SER must lie in [-10, 10] dB")
        if not 0.0 <= self.snr_db <= 40.0:
            raise ValueError("SNR must lie in [0, 40] dB")
        if self.talk_type not in TALK_TYPES:
            raise ValueError(f"talk_type must be one of {TALK_TYPES}")
        if self.distortion_kind not in DISTORTIONS:
            raise ValueError(f"distortion_kind must be one of {DISTORTIONS}")


@dataclass
class UtteranceBundle:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    d: np.ndarray
    n: np.ndarray
    scenario: SynthScenario | None = None

    def __post_init__(self):
        lens = {a.size for a in (self.x, self.y, self.s, self.d, self.n)}
        if len(lens) != 1:
            raise ValueError("bundle signals must share one length")


# ---------------------------------------------------------------------------
# echo path


def gen_ir(t60: float, length: int, seed, fs: int = SAMPLE_RATE, direct_gain: float = 4.0) -> np.ndarray:
    """Exponentially decaying white-noise IR with a direct-path spike at n=0.

    The amplitude envelope ``exp(-3 ln(10) t / T60)`` is 60 dB down in
    energy at ``t = T60``. Output is scaled to unit energy.
    """
    if t60 <= 0:
        raise ValueError("T60 must be positive")
    if length < 1:
        raise ValueError("IR length must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / fs
    env = np.exp(-3.0 * np.log(10.0) * t / t60)
    ir = rng.standard_normal(length) * env
    ir[0] = direct_gain * max(np.abs(ir).max(), 1e-12)
    return ir / np.sqrt(np.sum(ir * ir))


def ir_envelope_db(t, t60: float) -> np.ndarray:
    return 20.0 * np.log10(np.exp(-3.0 * np.log(10.0) * np.asarray(t) / t60))


def nonlinear_distort(x, kind: str = "none", param: float | None = None) -> np.ndarray:
    """Memoryless loudspeaker nonlinearity.

    hard_clip(c): clamp to [-c, c].  soft_tanh(g): tanh(g x) / g, unit slope at 0.
    """
    x = np.asarray(x, dtype=float)
    if kind == "none":
        return x.copy()
    if param is None or not np.isfinite(param) or param <= 0:
        raise ValueError(f"{kind} needs a positive parameter")
    if kind == "hard_clip":
        return np.clip(x, -param, param)
    if kind == "soft_tanh":
        return np.tanh(param * x) / param
    raise ValueError(f"unknown distortion {kind!r}")


def make_echo(x, ir, kind: str = "none", param: float | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return fftconvolve(nonlinear_distort(x, kind, param), np.asarray(ir, float))[: x.size]


# ---------------------------------------------------------------------------
# mixing


def active_mask(s, fs: int = SAMPLE_RATE, threshold_db: float = -40.0, win_s: float = 0.02) -> np.ndarray:
    """Samples whose short-time energy is within ``threshold_db`` of the peak."""
    s = np.asarray(s, dtype=float)
    win = max(1, int(round(win_s * fs)))
    e = np.convolve(s * s, np.ones(win) / win, mode="same")
    peak = e.max()
    if peak <= 0:
        return np.zeros(s.size, bool)
    return e > peak * 10.0 ** (threshold_db / 10.0)


def active_power(x, mask) -> float:
    return float(np.mean(np.asarray(x, float)[mask] ** 2))


def mix(s, d, n, ser_db: float | None, snr_db: float | None, fs: int = SAMPLE_RATE):
    """Scale echo and noise against the active NE-speech power; return
    ``(s, d, n, y)`` with ``y = s + d + n``.

    When ``s`` is silent, ``ser_db`` must be None and the noise is set
    relative to the active echo power instead (far-end single talk).
    """
    s, d, n = (np.asarray(a, dtype=float) for a in (s, d, n))
    if not s.size == d.size == n.size:
        raise ValueError("components must have equal lengths")
    mask = active_mask(s, fs)
    if mask.any():
        p_ref = active_power(s, mask)
        if ser_db is not None:
            p_d = active_power(d, mask)
            if p_d <= 0:
                raise ValueError("echo is silent during near-end activity")
            d = d * np.sqrt(p_ref / p_d / 10.0 ** (ser_db / 10.0))
    else:
        if ser_db is not None:
            raise ValueError("near-end speech is silent; SER is undefined")
        mask = active_mask(d, fs)
        if not mask.any():
            raise ValueError("both near-end speech and echo are silent")
        p_ref = active_power(d, mask)
    if snr_db is not None:
        p_n = active_power(n, mask)
        if p_n <= 0:
            raise ValueError("noise is silent")
        n = n * np.sqrt(p_ref / p_n / 10.0 ** (snr_db / 10.0))
    return s, d, n, s + d + n


def quantized_bundle(x, s, d, n, peak: float = 0.99):
    """Round every component to 16-bit steps, then sum, so that y = s + d + n
    holds exactly; the whole bundle is rescaled first if any track would clip."""
    comps = [np.asarray(a, float) for a in (x, s, d, n)]
    # every stored track must fit 16 bits, not just the mixture
    top = max(np.abs(comps[1] + comps[2] + comps[3]).max(), *(np.abs(c).max() for c in comps))
    if top > peak:
        comps = [c * (peak / top) for c in comps]
    q = [np.round(c * 32768.0) for c in comps]
    y = q[1] + q[2] + q[3]
    over = max(np.abs(y).max() - 32767, 0)
    if over:
        g = 32767.0 / (32767.0 + over + 2)
        q = [np.round(c * 32768.0 * g) for c in comps]
        y = q[1] + q[2] + q[3]
    x_q, s_q, d_q, n_q = (c / 32768.0 for c in q)
    return x_q, s_q, d_q, n_q, y / 32768.0


def measured_ratio_db(ref, other, fs: int = SAMPLE_RATE) -> float:
    """10 log10(P_ref / P_other) over the active samples of ``ref``."""
    mask = active_mask(ref, fs)
    return 10.0 * np.log10(active_power(ref, mask) / active_power(other, mask))


# ---------------------------------------------------------------------------
# sources


def speechlike(rng: np.random.Generator, seconds: float, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Crude voiced/unvoiced babble: a glottal pulse train with drifting f0
    through two random formant resonators, gated by a syllable envelope."""
    n = int(seconds * fs)
    t = np.arange(n) / fs
    f0 = rng.uniform(90, 240) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    src = np.sign(np.sin(phase)) * (np.sin(phase) ** 2) + 0.3 * rng.standard_normal(n)
    out = np.zeros(n)
    for _ in range(2):
        fc = rng.uniform(300, 3000)
        bw = rng.uniform(80, 300)
        r = np.exp(-np.pi * bw / fs)
        out += lfilter([1 - r], [1, -2 * r * np.cos(2 * np.pi * fc / fs), r * r], src)
    syll = 0.5 * (1 - np.cos(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 6.3)))
    gate = np.repeat(rng.random(int(np.ceil(seconds * 2)) + 1) > 0.25, fs // 2)[:n]
    out *= syll * gate
    return 0.1 * out / (np.sqrt(np.mean(out**2)) + 1e-12)


def noiselike(rng: np.random.Generator, seconds: float, fs: int = SAMPLE_RATE) -> np.ndarray:
    n = int(seconds * fs)
    kind = rng.integers(3)
    w = rng.standard_normal(n)
    if kind == 0:  # pinkish
        out = lfilter([0.049922, -0.095993, 0.050613, -0.004408], [1, -2.494956, 2.017265, -0.522189], w)
    elif kind == 1:  # hum + hiss
        t = np.arange(n) / fs
        out = 0.3 * w + sum(np.sin(2 * np.pi * 50 * k * t + rng.uniform(0, 6.3)) / k for k in range(1, 6))
    else:  # lowpassed rumble
        out = lfilter([0.05], [1, -0.95], w)
    return 0.05 * out / (np.sqrt(np.mean(out**2)) + 1e-12)


def make_demo_pools(out_dir, n_speakers: int = 6, n_noises: int = 3, seconds: float = 12.0, seed: int = 0) -> dict:
    """Write synthetic FE/NE speaker pools and a noise pool as WAVs."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    pools = {"fe": [], "ne": [], "noise": []}
    for role in ("fe", "ne"):
        for k in range(n_speakers):
            p = out_dir / role / f"spk{k:02d}.wav"
            write_wav(p, speechlike(rng, seconds))
            pools[role].append(str(p))
    for k in range(n_noises):
        p = out_dir / "noise" / f"noise{k:02d}.wav"
        write_wav(p, noiselike(rng, seconds))
        pools["noise"].append(str(p))
    return pools


def _segment(rng, sig, length):
    if sig.size < length:
        sig = np.tile(sig, int(np.ceil(length / max(sig.size, 1))))
    start = rng.integers(0, sig.size - length + 1)
    return sig[start : start + length].copy()


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SynthConfig:
    fe_pool: list = field(default_factory=list)
    ne_pool: list = field(default_factory=list)
    noise_pool: list = field(default_factory=list)
    n_utterances: int = 10
    seed: int = 0
    duration_s: float = 10.0
    ne_active_s: tuple = (3.0, 7.0)
    t60_range: tuple = (0.2, 1.2)
    ser_range: tuple = (-10.0, 10.0)
    snr_range: tuple = (0.0, 40.0)
    p_nonlinear: float = 0.8
    clip_range: tuple = (0.3, 0.9)
    tanh_range: tuple = (0.5, 4.0)
    talk_type: str = "mixed"  # or one of TALK_TYPES
    talk_probs: tuple = (0.6, 0.2, 0.2)
    workers: int = 1


def _pool(paths, name):
    paths = [str(p) for p in paths]
    if not paths:
        raise PoolError(f"{name} pool is empty")
    for p in paths:
        if not Path(p).is_file():
            raise PoolError(f"{name} pool file not found: {p}")
    return paths


def draw_scenario(cfg: SynthConfig, index: int, fe_pool, ne_pool, noise_pool) -> SynthScenario:
    rng = np.random.default_rng([cfg.seed, index, 0])
    if cfg.talk_type == "mixed":
        talk = TALK_TYPES[rng.choice(3, p=np.asarray(cfg.talk_probs) / np.sum(cfg.talk_probs))]
    else:
        talk = cfg.talk_type
    nonlinear = bool(rng.random() < cfg.p_nonlinear) and talk != "ne-only"
    kind, param = "none", None
    if nonlinear:
        if rng.random() < 0.5:
            kind, param = "hard_clip", float(rng.uniform(*cfg.clip_range))
        else:
            kind, param = "soft_tanh", float(rng.uniform(*cfg.tanh_range))
    fe_i = int(rng.integers(len(fe_pool)))
    ne_choices = [i for i in range(len(ne_pool)) if ne_pool[i] != fe_pool[fe_i]] or list(range(len(ne_pool)))
    ne_i = int(rng.choice(ne_choices))
    return SynthScenario(
        seed=cfg.seed,
        index=index,
        t60=float(rng.uniform(*cfg.t60_range)),
        ser_db=float(rng.uniform(*cfg.ser_range)) if talk == "double" else None,
        snr_db=float(rng.uniform(*cfg.snr_range)),
        nonlinear=nonlinear,
        distortion_kind=kind,
        distortion_param=param,
        talk_type=talk,
        fe_source=fe_pool[fe_i],
        ne_source=ne_pool[ne_i],
        noise_source=noise_pool[int(rng.integers(len(noise_pool)))],
    )


def render(cfg: SynthConfig, sc: SynthScenario) -> UtteranceBundle:
    """Build the quantized signal quintuple for one scenario."""
    rng = np.random.default_rng([cfg.seed, sc.index, 1])
    length = int(round(cfg.duration_s * SAMPLE_RATE))
    x = np.zeros(length)
    s = np.zeros(length)
    if sc.talk_type != "ne-only":
        x = _segment(rng, read_wav(sc.fe_source)[0], length)
    if sc.talk_type != "fe-only":
        ne_len = min(length, int(rng.uniform(*cfg.ne_active_s) * SAMPLE_RATE))
        start = int(rng.integers(0, length - ne_len + 1))
        ne_sig = read_wav(sc.ne_source)[0]
        for _ in range(20):  # redraw segments that fall into a pause
            seg = _segment(rng, ne_sig, ne_len)
            if active_mask(seg).any():
                break
        s[start : start + ne_len] = seg
    noise = _segment(rng, read_wav(sc.noise_source)[0], length)
    ir = gen_ir(sc.t60, int(round(sc.t60 * SAMPLE_RATE)), [cfg.seed, sc.index, 2])
    d = make_echo(x, ir, sc.distortion_kind, sc.distortion_param)
    if sc.talk_type == "double" and not active_mask(s).any():
        raise ValueError("near-end source is silent")
    s, d, noise, _ = mix(s, d, noise, sc.ser_db, sc.snr_db)
    x, s, d, noise, y = quantized_bundle(x, s, d, noise)
    return UtteranceBundle(x=x, y=y, s=s, d=d, n=noise, scenario=sc)


def synth_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Render ``cfg.n_utterances`` bundles to WAV and write ``manifest.jsonl``.

    Paths in the manifest are relative to its directory, so identical
    configs give byte-identical manifests wherever they are written.
    """
    fe = _pool(cfg.fe_pool, "far-end")
    ne = _pool(cfg.ne_pool, "near-end")
    noise = _pool(cfg.noise_pool, "noise")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i):
        sc = draw_scenario(cfg, i, fe, ne, noise)
        b = render(cfg, sc)
        row = {}
        for name in ("x", "y", "s", "d", "n"):
            rel = f"wav/{i:05d}_{name}.wav"
            write_wav(out_dir / rel, getattr(b, name))
            row[name] = rel
        meta = asdict(sc)
        for key in ("fe_source", "ne_source", "noise_source"):
            meta[key] = Path(meta[key]).name
        row["scenario"] = meta
        return json.dumps(row, sort_keys=True)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            rows = list(ex.map(one, range(cfg.n_utterances)))
    else:
        rows = [one(i) for i in range(cfg.n_utterances)]
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    """Rows with paths resolved against the manifest directory.

    Component fields (s, d, n) may be absent for recorded data.
    """
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        for key in ("x", "y", "s", "d", "n"):
            if row.get(key):
                row[key] = str((path.parent / row[key]).resolve())
        rows.append(row)
    if not rows:
        raise ValueError(f"manifest {path} is empty")
    return rows


def load_bundle(row: dict) -> UtteranceBundle:
    sig = {k: read_wav(row[k])[0] for k in ("x", "y", "s", "d", "n") if row.get(k)}
    missing = {"x", "y", "s", "d", "n"} - set(sig)
    if missing:
        raise ValueError(f"manifest row lacks components {sorted(missing)}")
    return UtteranceBundle(**sig)
