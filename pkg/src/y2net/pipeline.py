"""Two-stage echo canceller: AEC Y-Net -> echo subtraction -> PF Y-Net ->
compressed complex mask -> overlap-add. Also hosts the single-stage variant."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .frontend import (
    DEFAULT_FRAME,
    HP_POLE,
    FrameConfig,
    StreamingAnalyzer,
    StreamingSynthesizer,
    analyze,
    highpass,
    synthesize,
)
from .tensor import Tensor
from .ynet import YNet, YNetConfig, YNetState

PF_INPUTS = ("E,Dhat", "E,X")
MODES = ("two_stage", "single_stage")


def mask_gain(m) -> np.ndarray:
    """Complex gain ``tanh(|M|) * M / |M|``, 0 where M = 0."""
    m = np.asarray(m, dtype=complex)
    r = np.abs(m)
    # tanh(r)/r via its series near 0, so tiny (even subnormal) |M| cannot overflow
    small = r < 1e-4
    rs = np.where(small, 1.0, r)
    return m * np.where(small, 1.0 - r * r / 3.0, np.tanh(rs) / rs)


def apply_mask(e, m) -> np.ndarray:
    """Compressed complex masking of spectrum ``e`` by mask ``m``."""
    e, m = np.asarray(e), np.asarray(m)
    if e.shape != m.shape:
        raise ValueError(f"spectrum {e.shape} and mask {m.shape} differ in shape")
    return e * mask_gain(m)


@dataclass(frozen=True)
class Y2NetConfig:
    aec: YNetConfig = field(default_factory=lambda: YNetConfig(F=70))
    pf: YNetConfig | None = field(default_factory=lambda: YNetConfig(F=70))
    pf_inputs: str = "E,Dhat"
    mode: str = "two_stage"
    frame: FrameConfig = DEFAULT_FRAME
    hp_pole: float | None = HP_POLE

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.pf_inputs not in PF_INPUTS:
            raise ValueError(f"pf_inputs must be one of {PF_INPUTS}")
        if self.aec.M != self.frame.feature_dim:
            raise ValueError("network M must equal the front-end feature dimension")
        if self.mode == "two_stage":
            if self.pf is None:
                raise ValueError("two-stage mode needs a PF config")
            if self.pf.M != self.aec.M:
                raise ValueError("both stages must share M")
        elif self.pf is not None:
            raise ValueError("single-stage mode uses only one Y-Net (pf must be None)")

    @classmethod
    def single_stage(cls, F: int = 100, **kw) -> "Y2NetConfig":
        net = kw.pop("net", None) or YNetConfig(F=F)
        return cls(aec=net, pf=None, mode="single_stage", **kw)

    def to_dict(self) -> dict:
        return {
            "aec": self.aec.to_dict(),
            "pf": None if self.pf is None else self.pf.to_dict(),
            "pf_inputs": self.pf_inputs,
            "mode": self.mode,
            "frame": {
                "sample_rate_hz": self.frame.sample_rate_hz,
                "frame_len": self.frame.frame_len,
                "frame_shift": self.frame.frame_shift,
                "dft_size": self.frame.dft_size,
                "feature_dim": self.frame.feature_dim,
            },
            "hp_pole": self.hp_pole,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Y2NetConfig":
        return cls(
            aec=YNetConfig.from_dict(d["aec"]),
            pf=None if d.get("pf") is None else YNetConfig.from_dict(d["pf"]),
            pf_inputs=d.get("pf_inputs", "E,Dhat"),
            mode=d.get("mode", "two_stage"),
            frame=FrameConfig(**d["frame"]) if "frame" in d else DEFAULT_FRAME,
            hp_pole=d.get("hp_pole", HP_POLE),
        )


@dataclass
class FrameOutputs:
    """Per-frame spectra of one utterance, complex (n_frames, n_bins)."""

    S_hat: np.ndarray
    D_hat: np.ndarray
    E: np.ndarray
    mask: np.ndarray | None
    gain: np.ndarray | None = None

    def __post_init__(self):
        if self.gain is None:
            if self.mask is None:
                raise ValueError("need a mask or an explicit gain")
            self.gain = mask_gain(self.mask)


@dataclass
class PipelineState:
    aec_state: YNetState | None = None
    pf_state: YNetState | None = None
    frames_done: int = 0


def valid_bins(frame: FrameConfig, dtype=np.float32) -> np.ndarray:
    """(M, 2) 0/1 array: zero on padding rows and the DC/Nyquist imaginary parts."""
    v = np.zeros((frame.feature_dim, 2), dtype)
    v[: frame.n_bins] = 1.0
    v[0, 1] = 0.0
    v[frame.n_bins - 1, 1] = 0.0
    return v


def pack(spec, frame: FrameConfig = DEFAULT_FRAME, dtype=np.float32) -> np.ndarray:
    """Complex (..., n_bins) -> real (..., M, 2) network layout."""
    spec = np.asarray(spec)
    out = np.zeros(spec.shape[:-1] + (frame.feature_dim, 2), dtype)
    out[..., : frame.n_bins, 0] = spec.real
    out[..., : frame.n_bins, 1] = spec.imag
    return out


def unpack(x, frame: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    x = np.asarray(x)
    nb = frame.n_bins
    return x[..., :nb, 0].astype(np.float64) + 1j * x[..., :nb, 1].astype(np.float64)


class Y2Net:
    """Two-stage model (or the single-stage ablation) with shared helpers.

    ``self.aec`` is the first Y-Net (in single-stage mode: the only one);
    ``self.pf`` the postfilter Y-Net or ``None``.
    """

    def __init__(self, config: Y2NetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        first = "aec." if config.mode == "two_stage" else "net."
        self.aec = YNet(config.aec, seed=seed, dtype=dtype, prefix=first)
        self.pf = None
        if config.mode == "two_stage":
            self.pf = YNet(config.pf, seed=seed + 1, dtype=dtype, prefix="pf.")
        self.valid = valid_bins(config.frame, self.dtype)

    # -- parameters ---------------------------------------------------------

    @property
    def params(self) -> dict:
        out = dict(self.aec.params)
        if self.pf is not None:
            out.update(self.pf.params)
        return out

    def arrays(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        self.aec.load_arrays(arrays, strict)
        if self.pf is not None:
            self.pf.load_arrays(arrays, strict)

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.arrays(), self.config.to_dict(), meta)

    @classmethod
    def load(cls, path) -> "Y2Net":
        cfg, arrays, _ = load_checkpoint(path)
        model = cls(Y2NetConfig.from_dict(cfg))
        model.load_arrays(arrays)
        return model

    # -- differentiable sequence path --------------------------------------

    def forward_sequence(self, Xf, Yf, state: PipelineState | None = None, trace: dict | None = None):
        """Packed inputs (B, T, M, 2) -> dict of Tensors ``S_hat``, ``D_hat``,
        ``E``, ``mask`` (``D_hat`` is None in single-stage mode) and the new state."""
        Xf = Xf if isinstance(Xf, Tensor) else Tensor(np.asarray(Xf, self.dtype))
        Yf = Yf if isinstance(Yf, Tensor) else Tensor(np.asarray(Yf, self.dtype))
        state = state or PipelineState()
        if self.config.mode == "single_stage":
            w, s1 = self.aec.forward_sequence(Xf, Yf, state.aec_state)
            mask = T.mul(w, self.valid)
            s_hat = T.compressed_mask(Yf, mask)
            new = PipelineState(s1, None, state.frames_done + Xf.shape[1])
            return {"S_hat": s_hat, "D_hat": None, "E": Yf, "mask": mask}, new
        w1, s1 = self.aec.forward_sequence(Xf, Yf, state.aec_state)
        d_hat = T.mul(w1, self.valid)
        e = T.sub(Yf, d_hat)
        second = d_hat if self.config.pf_inputs == "E,Dhat" else Xf
        if trace is not None:
            trace["pf_second_input"] = second.data.copy()
        w2, s2 = self.pf.forward_sequence(e, second, state.pf_state)
        mask = T.mul(w2, self.valid)
        s_hat = T.compressed_mask(e, mask)
        new = PipelineState(s1, s2, state.frames_done + Xf.shape[1])
        return {"S_hat": s_hat, "D_hat": d_hat, "E": e, "mask": mask}, new

    def forward_aec(self, Xf, Yf):
        """AEC stage alone (pretraining): masked echo estimate Tensor (B, T, M, 2)."""
        if self.config.mode != "two_stage":
            raise ValueError("single-stage model has no AEC stage")
        w, _ = self.aec.forward_sequence(Xf, Yf)
        return T.mul(w, self.valid)

    # -- inference helpers -------------------------------------------------

    def run(self, X, Y, state: PipelineState | None = None) -> tuple[FrameOutputs, PipelineState]:
        """Complex spectra (n_frames, n_bins) in, :class:`FrameOutputs` out. No gradients."""
        X, Y = np.asarray(X), np.asarray(Y)
        if X.shape != Y.shape or X.ndim != 2:
            raise ValueError("X and Y must be equal-shape (n_frames, n_bins) arrays")
        f = self.config.frame
        with T.no_grad():
            out, state = self.forward_sequence(pack(X, f, self.dtype)[None], pack(Y, f, self.dtype)[None], state)
        s_hat = unpack(out["S_hat"].data[0], f)
        e = unpack(out["E"].data[0], f)
        d_hat = np.zeros_like(e) if out["D_hat"] is None else unpack(out["D_hat"].data[0], f)
        mask = unpack(out["mask"].data[0], f)
        return FrameOutputs(s_hat, d_hat, e, mask), state

    def process_frame(self, X_l, Y_l, state: PipelineState | None = None):
        """One frame: returns ``(S_hat, D_hat, E, M, state')`` as complex bin vectors."""
        out, state = self.run(np.asarray(X_l)[None], np.asarray(Y_l)[None], state)
        return out.S_hat[0], out.D_hat[0], out.E[0], out.mask[0], state

    def single_stage_forward(self, X_l, Y_l, state: PipelineState | None = None):
        if self.config.mode != "single_stage":
            raise ValueError("single_stage_forward needs a single-stage config")
        s_hat, _, _, _, state = self.process_frame(X_l, Y_l, state)
        return s_hat, state

    def spectra(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        x, y = np.asarray(x, float), np.asarray(y, float)
        if x.shape != y.shape:
            raise ValueError(f"x and y lengths differ ({x.size} vs {y.size})")
        f = self.config.frame
        if self.config.hp_pole is not None:
            x, y = highpass(x, self.config.hp_pole), highpass(y, self.config.hp_pole)
        return analyze(x, f), analyze(y, f)

    def process_utterance(self, x, y) -> tuple[np.ndarray, FrameOutputs]:
        """High-pass, analyse, run from zero state, overlap-add."""
        X, Y = self.spectra(x, y)
        out, _ = self.run(X, Y)
        return synthesize(out.S_hat, self.config.frame), out


class StreamingY2Net:
    """Sample-block streaming wrapper: push ``frame_shift`` samples of x and y,
    receive ``frame_shift`` output samples once the first frame is complete."""

    def __init__(self, model, frame: FrameConfig | None = None, hp_pole: float | None = HP_POLE):
        self.model = model
        self.frame = frame or getattr(getattr(model, "config", None), "frame", DEFAULT_FRAME)
        self.ana_x = StreamingAnalyzer(self.frame, hp_pole)
        self.ana_y = StreamingAnalyzer(self.frame, hp_pole)
        self.syn = StreamingSynthesizer(self.frame)
        self.state = None

    def reset(self):
        self.ana_x.reset()
        self.ana_y.reset()
        self.syn.reset()
        self.state = None

    def push(self, x_block, y_block) -> np.ndarray | None:
        X = self.ana_x.push(x_block)
        Y = self.ana_y.push(y_block)
        if X is None:
            return None
        s_hat, _, _, _, self.state = self.model.process_frame(X, Y, self.state)
        return self.syn.push(s_hat)
