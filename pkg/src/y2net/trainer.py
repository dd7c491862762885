"""Training: conjugate-symmetric spectral MSE losses, BPTT windowing,
plateau learning-rate schedule and the pretrain / joint / single-stage loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .frontend import DEFAULT_FRAME, FrameConfig, analyze, highpass
from .pipeline import Y2Net, Y2NetConfig, pack
from .synth import UtteranceBundle, load_bundle, read_manifest

log = logging.getLogger(__name__)

PHASES = ("pretrain_aec", "joint", "single_stage")
HISTORY_COLUMNS = ("epoch", "lr", "train_J", "train_J_AEC", "train_J_PF", "val_J", "alpha", "seconds")


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    bptt_len: int = 50
    lr0: float = 5e-3
    lr_decay: float = 0.6
    patience_decay: int = 3
    patience_stop: int = 10
    max_epochs: int = 100
    lr_floor: float = 5e-4
    alpha: float = 0.25
    phase: str = "pretrain_aec"
    seed: int = 0
    from_scratch: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        for name in ("batch_size", "bptt_len", "patience_decay", "patience_stop", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("lr0", "lr_floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigError("lr_decay must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config_file(path) -> dict:
    """Parse a TOML or JSON config file into a dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        out = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(out, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return out


# ---------------------------------------------------------------------------
# losses


def bin_weights(n_bins: int) -> np.ndarray:
    """Multiplicity of each unique bin in the full two-sided spectrum."""
    w = np.full(n_bins, 2.0)
    w[0] = w[-1] = 1.0
    return w


def spectral_mse(a, b, dft_size: int | None = None) -> np.ndarray:
    """Per-frame ``(1/K) sum_k |a(k) - b(k)|^2`` over all K bins, evaluated on
    the unique half spectrum. Last axis holds the K/2+1 bins."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"spectra differ in shape: {a.shape} vs {b.shape}")
    nb = a.shape[-1]
    k = dft_size or 2 * (nb - 1)
    diff = a - b
    return (np.abs(diff) ** 2 * bin_weights(nb)).sum(axis=-1) / k


def loss_aec(d_hat, d, dft_size: int | None = None):
    return spectral_mse(d_hat, d, dft_size)


def loss_pf(s_hat, s, dft_size: int | None = None):
    return spectral_mse(s_hat, s, dft_size)


def loss_joint(j_aec, j_pf, alpha: float = 0.25):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * j_aec + (1.0 - alpha) * j_pf


def feature_weights(frame: FrameConfig = DEFAULT_FRAME, dtype=np.float32) -> np.ndarray:
    """(M, 2) loss weights in the packed layout; padding rows get 0."""
    w = np.zeros((frame.feature_dim, 2), dtype)
    w[: frame.n_bins] = bin_weights(frame.n_bins)[:, None]
    return w


def packed_loss(pred: T.Tensor, target: np.ndarray, frame: FrameConfig = DEFAULT_FRAME) -> T.Tensor:
    """Spectral MSE of packed (B, T, M, 2) tensors, averaged over batch and frames."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    n = pred.shape[0] * pred.shape[1]
    err = T.sub(pred, target)
    return T.scale(T.weighted_sq_sum(err, feature_weights(frame, pred.dtype)), 1.0 / (frame.dft_size * n))


# ---------------------------------------------------------------------------
# data


@dataclass
class Batch:
    X: np.ndarray
    Y: np.ndarray
    D: np.ndarray
    S: np.ndarray
    windows: list


class SequenceData:
    """Utterances analysed once and cut into non-overlapping BPTT windows."""

    def __init__(self, bundles, bptt_len: int = 50, frame: FrameConfig = DEFAULT_FRAME, hp_pole: float | None = 0.99, dtype=np.float32):
        bundles = list(bundles)
        if not bundles:
            raise ValueError("no utterances given")
        self.frame = frame
        self.bptt_len = bptt_len
        self.feats = []
        self.windows = []
        for u, b in enumerate(bundles):
            packed = {}
            for key in ("x", "y", "d", "s"):
                sig = getattr(b, key)
                sig = highpass(sig, hp_pole) if hp_pole is not None else np.asarray(sig, float)
                packed[key] = pack(analyze(sig, frame), frame, dtype)
            self.feats.append(packed)
            n_win = packed["x"].shape[0] // bptt_len
            self.windows += [(u, w * bptt_len) for w in range(n_win)]
        if not self.windows:
            raise ValueError(f"no utterance is long enough for one {bptt_len}-frame window")

    def __len__(self) -> int:
        return len(self.windows)

    def batch(self, windows) -> Batch:
        L = self.bptt_len
        parts = {k: np.stack([self.feats[u][k][s : s + L] for u, s in windows]) for k in ("x", "y", "d", "s")}
        return Batch(parts["x"], parts["y"], parts["d"], parts["s"], list(windows))

    def batches(self, batch_size: int, seed=None):
        order = list(self.windows)
        if seed is not None:
            perm = np.random.default_rng(seed).permutation(len(order))
            order = [order[i] for i in perm]
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i : i + batch_size])


def _bundles(source):
    if isinstance(source, (str, Path)):
        return [load_bundle(r) for r in read_manifest(source)]
    source = list(source)
    if source and isinstance(source[0], dict):
        return [load_bundle(r) for r in source]
    return source


def make_batches(manifest, config: TrainConfig, seed: int = 0, frame: FrameConfig = DEFAULT_FRAME, hp_pole: float | None = 0.99):
    """Shuffled (X, Y, D, S) batches of ``config.bptt_len`` frames each.

    ``manifest`` may be a manifest path, manifest rows or bundles.
    """
    bundles = _bundles(manifest)
    if not bundles:
        raise ValueError("empty manifest")
    data = SequenceData(bundles, config.bptt_len, frame, hp_pole)
    return data.batches(config.batch_size, seed)


# ---------------------------------------------------------------------------
# schedule


class PlateauSchedule:
    """Learning rate times ``decay`` after every ``patience_decay`` epochs
    without a strict validation improvement; stop after ``patience_stop``
    such epochs, at ``max_epochs``, or when the next rate would fall below
    ``lr_floor``."""

    def __init__(self, lr0=5e-3, decay=0.6, patience_decay=3, patience_stop=10, max_epochs=100, lr_floor=5e-4):
        self.lr = lr0
        self.decay = decay
        self.patience_decay = patience_decay
        self.patience_stop = patience_stop
        self.max_epochs = max_epochs
        self.lr_floor = lr_floor
        self.best = math.inf
        self.epoch = 0
        self.since_best = 0
        self.since_decay = 0
        self.stop_reason = None

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauSchedule":
        return cls(cfg.lr0, cfg.lr_decay, cfg.patience_decay, cfg.patience_stop, cfg.max_epochs, cfg.lr_floor)

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss. Returns True if ``val_loss`` is a new best."""
        self.epoch += 1
        improved = val_loss < self.best
        if improved:
            self.best = val_loss
            self.since_best = 0
            self.since_decay = 0
        else:
            self.since_best += 1
            self.since_decay += 1
        if self.since_best >= self.patience_stop:
            self.stop_reason = "patience"
        elif self.since_decay >= self.patience_decay:
            nxt = self.lr * self.decay
            if nxt < self.lr_floor:
                self.stop_reason = "lr_floor"
            else:
                self.lr = nxt
                self.since_decay = 0
        if self.stop_reason is None and self.epoch >= self.max_epochs:
            self.stop_reason = "max_epochs"
        return improved

    @property
    def done(self) -> bool:
        return self.stop_reason is not None


# ---------------------------------------------------------------------------
# loop


def model_for_phase(model_config: Y2NetConfig, phase: str) -> None:
    if phase == "single_stage" and model_config.mode != "single_stage":
        raise ConfigError("single_stage phase needs a single-stage model config")
    if phase != "single_stage" and model_config.mode != "two_stage":
        raise ConfigError(f"{phase} phase needs a two-stage model config")


def batch_losses(model: Y2Net, batch: Batch, phase: str, alpha: float):
    """Returns ``(J, J_AEC, J_PF)``; unused terms are None."""
    frame = model.config.frame
    if phase == "pretrain_aec":
        j_aec = packed_loss(model.forward_aec(batch.X, batch.Y), batch.D, frame)
        return j_aec, j_aec, None
    out, _ = model.forward_sequence(batch.X, batch.Y)
    j_pf = packed_loss(out["S_hat"], batch.S, frame)
    if phase == "single_stage":
        return j_pf, None, j_pf
    j_aec = packed_loss(out["D_hat"], batch.D, frame)
    return T.add(T.scale(j_aec, alpha), T.scale(j_pf, 1.0 - alpha)), j_aec, j_pf


def trainable(model: Y2Net, phase: str) -> list:
    if phase == "pretrain_aec":
        return list(model.aec.params.values())
    return list(model.params.values())


def _val(x):
    return math.nan if x is None else float(x.data)


def evaluate(model: Y2Net, data: SequenceData, cfg: TrainConfig) -> dict:
    """Window-averaged losses without touching parameters or optimizer state."""
    tot = {"J": 0.0, "J_AEC": 0.0, "J_PF": 0.0}
    n = 0
    with T.no_grad():
        for batch in data.batches(cfg.batch_size):
            j, ja, jp = batch_losses(model, batch, cfg.phase, cfg.alpha)
            k = len(batch.windows)
            tot["J"] += k * _val(j)
            tot["J_AEC"] += k * _val(ja)
            tot["J_PF"] += k * _val(jp)
            n += k
    return {key: v / n for key, v in tot.items()}


def train_epoch(model: Y2Net, data: SequenceData, cfg: TrainConfig, lr: float, seed, dump_dir=None) -> dict:
    params = trainable(model, cfg.phase)
    tot = {"J": 0.0, "J_AEC": 0.0, "J_PF": 0.0}
    n = 0
    for batch in data.batches(cfg.batch_size, seed):
        for p in model.params.values():
            p.grad = None
        j, ja, jp = batch_losses(model, batch, cfg.phase, cfg.alpha)
        if not np.isfinite(j.data):
            _dump(model, dump_dir, {"reason": "non-finite loss", "windows": batch.windows, "lr": lr})
            raise TrainingDiverged(f"non-finite training loss on windows {batch.windows}")
        T.backward(j)
        try:
            T.adam_update(params, lr)
        except FloatingPointError as exc:
            _dump(model, dump_dir, {"reason": str(exc), "windows": batch.windows, "lr": lr})
            raise TrainingDiverged(str(exc)) from exc
        k = len(batch.windows)
        tot["J"] += k * _val(j)
        tot["J_AEC"] += k * _val(ja)
        tot["J_PF"] += k * _val(jp)
        n += k
    return {key: v / n for key, v in tot.items()}


def _dump(model, dump_dir, info):
    if dump_dir is None:
        return
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(dump_dir / "diverged.ckpt", model.arrays(), model.config.to_dict(), {"dump": True})
    (dump_dir / "diverged.json").write_text(json.dumps(info, indent=2, default=str))


def load_pretrained_aec(model: Y2Net, path) -> None:
    """Copy the ``aec.*`` tensors of a checkpoint into ``model``."""
    cfg, arrays, _ = load_checkpoint(path)
    if cfg.get("aec") != model.config.aec.to_dict():
        raise ConfigError(f"{path}: AEC architecture differs from the requested model")
    aec = {k: v for k, v in arrays.items() if k.startswith("aec.")}
    model.aec.load_arrays(aec)


@dataclass
class TrainResult:
    model: Y2Net
    history: list
    best_path: Path
    stop_reason: str


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(
    config: TrainConfig,
    model_config: Y2NetConfig,
    train_data,
    val_data,
    out_dir,
    init_checkpoint=None,
    model: Y2Net | None = None,
) -> TrainResult:
    """Run one training phase and keep the best-validation checkpoint.

    ``train_data``/``val_data`` are manifest paths, rows, bundles or
    :class:`SequenceData`. Writes ``train_config.json``, ``history.csv``,
    ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.
    """
    model_for_phase(model_config, config.phase)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame, hp = model_config.frame, model_config.hp_pole

    def prep(src):
        if isinstance(src, SequenceData):
            return src
        return SequenceData(_bundles(src), config.bptt_len, frame, hp)

    tr, va = prep(train_data), prep(val_data)
    model = model or Y2Net(model_config, seed=config.seed)
    if config.phase == "joint":
        if init_checkpoint is not None:
            load_pretrained_aec(model, init_checkpoint)
        elif not config.from_scratch:
            raise ConfigError("joint training needs a pretrained AEC checkpoint (or from_scratch)")

    echo = {"train": config.to_dict(), "model": model_config.to_dict(), "init_checkpoint": None if init_checkpoint is None else str(init_checkpoint)}
    (out_dir / "train_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))

    sched = PlateauSchedule.from_config(config)
    history = []
    best_path = out_dir / "best.ckpt"
    meta = {"phase": config.phase, "alpha": config.alpha}
    while not sched.done:
        epoch = sched.epoch + 1
        lr = sched.lr
        t0 = time.perf_counter()
        tr_loss = train_epoch(model, tr, config, lr, [config.seed, epoch], out_dir)
        val = evaluate(model, va, config)["J"]
        if not math.isfinite(val):
            _dump(model, out_dir, {"reason": "non-finite validation loss", "epoch": epoch})
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        improved = sched.step(val)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_J": tr_loss["J"],
            "train_J_AEC": tr_loss["J_AEC"],
            "train_J_PF": tr_loss["J_PF"],
            "val_J": val,
            "alpha": config.alpha,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        log.info("epoch %d lr %.3g train %.4g val %.4g%s", epoch, lr, row["train_J"], val, " *" if improved else "")
        if improved:
            save_checkpoint(best_path, model.arrays(), model_config.to_dict(), dict(meta, epoch=epoch, val_J=val))
        write_history(out_dir / "history.csv", history)
    save_checkpoint(out_dir / "last.ckpt", model.arrays(), model_config.to_dict(), dict(meta, epoch=sched.epoch))
    model.load_arrays(load_checkpoint(best_path)[1])
    return TrainResult(model, history, best_path, sched.stop_reason)
