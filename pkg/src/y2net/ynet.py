"""Y-Net FCRN: two spectral inputs, conv encoder(s), ConvLSTM bottleneck,
deconv decoder with two additive skips, one linear spectral output."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class YNetConfig:
    M: int = 260
    N: int = 24
    F: int = 70
    C: int = 2
    fusion: str = "EF"
    leaky_slope: float = 0.3
    bias: bool = True

    def __post_init__(self):
        if self.M % 4:
            raise ValueError("M must be divisible by 4")
        if self.F < 1 or self.N < 1:
            raise ValueError("F and N must be positive")
        if self.C != 2:
            raise ValueError("C must be 2 (real and imaginary channels)")
        if self.fusion not in ("EF", "LF"):
            raise ValueError("fusion must be 'EF' or 'LF'")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "YNetConfig":
        return cls(**d)


@dataclass
class YNetState:
    h: Tensor
    c: Tensor


def _encoder_layers(prefix, c_in, f):
    # (name, kind, C_in, C_out, stride)
    return [
        (f"{prefix}1", "conv", c_in, f, 1),
        (f"{prefix}2", "conv", f, f, 2),
        (f"{prefix}3", "conv", f, 2 * f, 1),
        (f"{prefix}4", "conv", 2 * f, 2 * f, 2),
    ]


def layer_table(cfg: YNetConfig) -> list[tuple]:
    """All weight-bearing layers as ``(name, kind, C_in, C_out, stride)``."""
    f = cfg.F
    if cfg.fusion == "EF":
        layers = _encoder_layers("enc", 2 * cfg.C, f)
        lstm_in = 2 * f
    else:
        layers = _encoder_layers("encu", cfg.C, f) + _encoder_layers("encv", cfg.C, f)
        lstm_in = 4 * f
    layers += [
        ("lstm", "convlstm", lstm_in, f, 1),
        ("dec1", "deconv", f, 2 * f, 2),
        ("dec2", "deconv", 2 * f, 2 * f, 1),
        ("dec3", "deconv", 2 * f, f, 2),
        ("dec4", "deconv", f, f, 1),
        ("out", "conv", f, cfg.C, 1),
    ]
    return layers


def init_state(cfg: YNetConfig, batch: int = 1, dtype=np.float32) -> YNetState:
    shape = (batch, cfg.M // 4, cfg.F)
    return YNetState(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


class YNet:
    """One Y-Net stage. Parameters live in ``self.params`` keyed ``{prefix}{layer}.{w|wh|b}``."""

    def __init__(self, cfg: YNetConfig, seed: int = 0, dtype=np.float32, prefix: str = ""):
        self.cfg = cfg
        self.prefix = prefix
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        n = cfg.N
        for name, kind, c_in, c_out, _ in layer_table(cfg):
            key = prefix + name
            if kind == "convlstm":
                self._add(f"{key}.w", T.glorot_uniform(rng, (n, c_in, 4 * c_out), n * c_in, n * 4 * c_out, self.dtype))
                self._add(f"{key}.wh", T.glorot_uniform(rng, (n, c_out, 4 * c_out), n * c_out, n * 4 * c_out, self.dtype))
                self._add(f"{key}.b", np.zeros(4 * c_out, self.dtype))
                continue
            self._add(f"{key}.w", T.glorot_uniform(rng, (n, c_in, c_out), n * c_in, n * c_out, self.dtype))
            if cfg.bias:
                self._add(f"{key}.b", np.zeros(c_out, self.dtype))

    def _add(self, name, arr):
        self.params[name] = Parameter(name, arr)

    def _p(self, name):
        return self.params.get(self.prefix + name)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def init_state(self, batch: int = 1) -> YNetState:
        return init_state(self.cfg, batch, self.dtype)

    def _conv(self, name, x, stride, kind="conv", act=True):
        w, b = self._p(name + ".w"), self._p(name + ".b")
        y = T.conv1d(x, w, b, stride) if kind == "conv" else T.deconv1d(x, w, b, stride)
        return T.leaky_relu(y, self.cfg.leaky_slope) if act else y

    def _encode(self, prefix, x):
        e1 = self._conv(prefix + "1", x, 1)
        e2 = self._conv(prefix + "2", e1, 2)
        e3 = self._conv(prefix + "3", e2, 1)
        e4 = self._conv(prefix + "4", e3, 2)
        return e1, e3, e4

    def forward_sequence(self, u, v, state: YNetState | None = None, taps: dict | None = None):
        """Run ``T`` frames. ``u, v``: (B, T, M, C) arrays or Tensors.

        Returns ``(w, state')`` with ``w`` of shape (B, T, M, C). Frame-wise
        layers are evaluated for all frames at once; only the ConvLSTM loops
        over time. Pass a dict as ``taps`` to collect intermediate shapes.
        """
        cfg = self.cfg
        u = u if isinstance(u, Tensor) else Tensor(np.asarray(u, self.dtype))
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, self.dtype))
        if u.shape != v.shape or u.data.ndim != 4 or u.shape[2:] != (cfg.M, cfg.C):
            raise ValueError(f"inputs must both be (B, T, {cfg.M}, {cfg.C}); got {u.shape} and {v.shape}")
        bsz, n_t = u.shape[:2]
        flat = (bsz * n_t, cfg.M, cfg.C)
        uf, vf = T.reshape(u, flat), T.reshape(v, flat)
        if cfg.fusion == "EF":
            skip1, skip2, bott = self._encode("enc", T.concat([uf, vf], axis=-1))
        else:
            _, _, bott_u = self._encode("encu", uf)
            skip1, skip2, bott_v = self._encode("encv", vf)
            bott = T.concat([bott_u, bott_v], axis=-1)
        if taps is not None:
            taps.update(skip1=skip1.shape, skip2=skip2.shape, bottleneck_in=bott.shape)

        m4 = cfg.M // 4
        if state is None:
            state = self.init_state(bsz)
        if state.h.shape != (bsz, m4, cfg.F) or state.c.shape != (bsz, m4, cfg.F):
            raise ValueError(f"state must be ({bsz}, {m4}, {cfg.F}); got {state.h.shape}")
        zx = T.reshape(T.conv1d(bott, self._p("lstm.w"), self._p("lstm.b"), 1), (bsz, n_t, m4, 4 * cfg.F))
        wh = self._p("lstm.wh")
        h, c = state.h, state.c
        hs = []
        for t in range(n_t):
            h, c = T.convlstm_gates(T.take(zx, t, axis=1), h, c, wh)
            hs.append(h)
        lstm_out = T.reshape(T.stack(hs, axis=1), (bsz * n_t, m4, cfg.F))

        d1 = T.add(self._conv("dec1", lstm_out, 2, "deconv"), skip2)
        d2 = self._conv("dec2", d1, 1, "deconv")
        d3 = T.add(self._conv("dec3", d2, 2, "deconv"), skip1)
        d4 = self._conv("dec4", d3, 1, "deconv")
        out = self._conv("out", d4, 1, act=False)
        if taps is not None:
            taps.update(lstm_out=lstm_out.shape, dec1=d1.shape, dec2=d2.shape, dec3=d3.shape, dec4=d4.shape, out=out.shape)
        return T.reshape(out, (bsz, n_t, cfg.M, cfg.C)), YNetState(h, c)

    def forward(self, u, v, state: YNetState | None = None):
        """Single frame in the M x 1 x C layout: ``u, v`` of shape (M, 1, C)
        or (B, M, 1, C). Returns ``(w, state')`` in the same layout."""
        u_arr = u.data if isinstance(u, Tensor) else np.asarray(u)
        single = u_arr.ndim == 3
        lead = (1,) if single else u_arr.shape[:1]
        tail = (self.cfg.M, self.cfg.C)

        def seq(x):
            x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, self.dtype))
            if x.shape[-3:] != (self.cfg.M, 1, self.cfg.C) or x.data.ndim not in (3, 4):
                raise ValueError(f"expected (M, 1, C) or (B, M, 1, C) input, got {x.shape}")
            return T.reshape(x, lead + (1,) + tail)

        w, state = self.forward_sequence(seq(u), seq(v), state)
        shape = (self.cfg.M, 1, self.cfg.C) if single else lead + (self.cfg.M, 1, self.cfg.C)
        return T.reshape(w, shape), state

    def arrays(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {name}")
                continue
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(self.dtype, copy=True)
