"""Command line front end: ``y2net {synth,train,infer,eval,bench}``.

Every subcommand takes ``--config FILE`` (TOML or JSON). Its keys are the
long option names with dashes turned into underscores; flags given on the
command line override file values. The merged, effective configuration is
written next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .checkpoint import CheckpointError
from .frontend import read_wav, synthesize, write_wav
from .pipeline import Y2Net, Y2NetConfig
from .synth import PoolError, SynthConfig, TALK_TYPES, make_demo_pools, synth_dataset
from .trainer import ConfigError, TrainConfig, TrainingDiverged, load_config_file, train
from .ynet import YNetConfig

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_BUDGET = 0, 1, 2, 3, 4
PHASE_NAMES = {"pretrain": "pretrain_aec", "joint": "joint", "single-stage": "single_stage"}

log = logging.getLogger("y2net")


class DataError(RuntimeError):
    pass


class BudgetError(RuntimeError):
    pass


def _range(text) -> tuple:
    if isinstance(text, (list, tuple)):
        lo, hi = text
    else:
        try:
            lo, hi = (float(v) for v in str(text).split(":"))
        except ValueError:
            raise ConfigError(f"expected LO:HI, got {text!r}") from None
    if lo > hi:
        raise ConfigError(f"empty range {lo}:{hi}")
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# defaults: the accepted config keys of each command

SYNTH_DEFAULTS = {
    "out": None,
    "n": 10,
    "seed": 0,
    "talk": "mixed",
    "t60": "0.2:1.2",
    "ser": "-10:10",
    "snr": "0:40",
    "duration": 10.0,
    "ne_active": "3:7",
    "p_nonlinear": 0.8,
    "fe_pool": None,
    "ne_pool": None,
    "noise_pool": None,
    "workers": 1,
}

TRAIN_DEFAULTS = {
    "train": None,
    "val": None,
    "out": None,
    "init": None,
    "phase": "pretrain",
    "pf_input": "dhat",
    "fusion": "ef",
    "F": None,
    "N": 24,
    "alpha": 0.25,
    "from_scratch": False,
    "batch_size": 16,
    "bptt": 50,
    "lr0": 5e-3,
    "epochs": 100,
    "seed": 0,
}

INFER_DEFAULTS = {"ckpt": None, "x": None, "y": None, "out": None, "dump_intermediates": False}
EVAL_DEFAULTS = {"ckpt": None, "manifest": None, "out": None, "identity": False, "limit": None}
BENCH_DEFAULTS = {"ckpt": None, "F": 8, "frames": 50, "repetitions": 30, "warmup": 5, "enforce_rt": False, "out": None, "seed": 0}

DEFAULTS = {"synth": SYNTH_DEFAULTS, "train": TRAIN_DEFAULTS, "infer": INFER_DEFAULTS, "eval": EVAL_DEFAULTS, "bench": BENCH_DEFAULTS}


def effective_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if getattr(ns, "config", None):
        try:
            from_file = load_config_file(ns.config)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {ns.config}") from exc
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {command} config keys: {sorted(unknown)}")
        cfg.update(from_file)
    for key in defaults:
        if key in vars(ns):
            cfg[key] = getattr(ns, key)
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_effective(path: Path, command: str, cfg: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    talk = cfg["talk"]
    if talk != "mixed" and talk not in TALK_TYPES:
        raise ConfigError(f"--talk must be 'mixed' or one of {TALK_TYPES}")
    pools = {k: cfg[k + "_pool"] for k in ("fe", "ne", "noise")}
    if not all(pools.values()):
        if any(pools.values()):
            raise ConfigError("give all three pools or none (none: synthetic demo pools)")
        pools = make_demo_pools(out / "pools", seed=cfg["seed"])
    else:
        pools = {k: [str(p) for p in (v if isinstance(v, list) else [v])] for k, v in pools.items()}
    t60 = _range(cfg["t60"])
    if t60[0] < 0.2 or t60[1] > 1.2:
        raise ConfigError("--t60 must lie within 0.2:1.2")
    sc = SynthConfig(
        fe_pool=pools["fe"],
        ne_pool=pools["ne"],
        noise_pool=pools["noise"],
        n_utterances=int(cfg["n"]),
        seed=int(cfg["seed"]),
        duration_s=float(cfg["duration"]),
        ne_active_s=_range(cfg["ne_active"]),
        t60_range=t60,
        ser_range=_range(cfg["ser"]),
        snr_range=_range(cfg["snr"]),
        p_nonlinear=float(cfg["p_nonlinear"]),
        talk_type=talk,
        workers=int(cfg["workers"]),
    )
    if sc.n_utterances < 1:
        raise ConfigError("--n must be positive")
    manifest = synth_dataset(sc, out)
    _write_effective(out / "synth_config.json", "synth", cfg)
    print(manifest)
    return EXIT_OK


def build_model_config(cfg: dict) -> Y2NetConfig:
    phase = cfg["phase"]
    if phase not in PHASE_NAMES:
        raise ConfigError(f"--phase must be one of {sorted(PHASE_NAMES)}")
    fusion = str(cfg["fusion"]).upper()
    pf_inputs = {"dhat": "E,Dhat", "x": "E,X"}.get(cfg["pf_input"])
    if pf_inputs is None:
        raise ConfigError("--pf-input must be 'dhat' or 'x'")
    try:
        if phase == "single-stage":
            F = int(cfg["F"] or 100)
            return Y2NetConfig.single_stage(net=YNetConfig(F=F, N=int(cfg["N"]), fusion=fusion))
        F = int(cfg["F"] or 70)
        net = YNetConfig(F=F, N=int(cfg["N"]), fusion=fusion)
        return Y2NetConfig(aec=net, pf=net, pf_inputs=pf_inputs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(cfg: dict) -> int:
    _require(cfg, "train", "out")
    model_cfg = build_model_config(cfg)
    phase = PHASE_NAMES[cfg["phase"]]
    if phase == "joint" and not cfg["init"] and not cfg["from_scratch"]:
        raise ConfigError("joint training needs --init PRETRAINED.ckpt (or --from-scratch)")
    tc = TrainConfig(
        batch_size=int(cfg["batch_size"]),
        bptt_len=int(cfg["bptt"]),
        lr0=float(cfg["lr0"]),
        max_epochs=int(cfg["epochs"]),
        alpha=float(cfg["alpha"]),
        phase=phase,
        seed=int(cfg["seed"]),
        from_scratch=bool(cfg["from_scratch"]),
    )
    out = Path(cfg["out"])
    _write_effective(out / "effective_config.json", "train", cfg)
    for key in ("train", "val"):
        if cfg[key] and not Path(cfg[key]).is_file():
            raise DataError(f"manifest not found: {cfg[key]}")
    result = train(tc, model_cfg, cfg["train"], cfg["val"] or cfg["train"], out, init_checkpoint=cfg["init"])
    last = result.history[-1]
    print(f"{len(result.history)} epochs ({result.stop_reason}); best checkpoint {result.best_path}; final val J {last['val_J']:.6g}")
    return EXIT_OK


def _load_model(path) -> Y2Net:
    if not path:
        raise ConfigError("--ckpt is required")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return Y2Net.load(path)


def cmd_infer(cfg: dict) -> int:
    _require(cfg, "ckpt", "x", "y", "out")
    model = _load_model(cfg["ckpt"])
    x, fx = read_wav(cfg["x"])
    y, fy = read_wav(cfg["y"])
    fs = model.config.frame.sample_rate_hz
    if fx != fs or fy != fs:
        raise DataError(f"inputs must be sampled at {fs} Hz (got {fx}, {fy})")
    if x.size != y.size:
        raise DataError(f"x and y lengths differ ({x.size} vs {y.size})")
    if x.size < model.config.frame.frame_len:
        raise DataError("input shorter than one frame")
    s_hat, out = model.process_utterance(x, y)
    dest = Path(cfg["out"])
    write_wav(dest, s_hat, fs)
    if cfg["dump_intermediates"]:
        write_wav(dest.with_name(dest.stem + "_dhat.wav"), synthesize(out.D_hat, model.config.frame), fs)
        write_wav(dest.with_name(dest.stem + "_e.wav"), synthesize(out.E, model.config.frame), fs)
    _write_effective(dest.with_name(dest.stem + "_config.json"), "infer", cfg)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .metrics import IdentityModel, eval_conditions
    from .synth import load_bundle, read_manifest

    _require(cfg, "manifest", "out")
    if cfg["identity"]:
        model, name = IdentityModel(), "identity"
    else:
        model, name = _load_model(cfg["ckpt"]), str(cfg["ckpt"])
    if not Path(cfg["manifest"]).is_file():
        raise DataError(f"manifest not found: {cfg['manifest']}")
    rows = read_manifest(cfg["manifest"])
    if cfg["limit"]:
        rows = rows[: int(cfg["limit"])]
    try:
        bundles = [load_bundle(r) for r in rows]
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    report = eval_conditions(model, bundles, name)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.csv").write_text(report.to_csv())
    _write_effective(out / "eval_config.json", "eval", cfg)
    print(report.table())
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    from .metrics import rtf_bench

    _kernels.set_threads(1)
    if cfg["ckpt"]:
        model = _load_model(cfg["ckpt"])
    else:
        net = YNetConfig(F=int(cfg["F"]))
        model = Y2Net(Y2NetConfig(aec=net, pf=net), seed=int(cfg["seed"]))
    frame = model.config.frame
    rng = np.random.default_rng(int(cfg["seed"]))
    n = max(1, int(cfg["frames"]))
    shape = (n, frame.n_bins)
    X = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    Y = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    rtf = rtf_bench(model, list(zip(X, Y)), int(cfg["repetitions"]), int(cfg["warmup"]), frame)
    info = {
        "frame_ms": frame.frame_duration_s * 1e3,
        "shift_ms": frame.shift_duration_s * 1e3,
        "latency_ms": frame.latency_s * 1e3,
        "rtf": rtf,
        "threads": 1,
        "backend": _kernels.BACKEND,
    }
    print(f"frame {info['frame_ms']:.2f} ms, shift {info['shift_ms']:.2f} ms, latency {info['latency_ms']:.2f} ms")
    print(f"RTF {rtf:.3f} (single thread, backend {info['backend']})")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(info, indent=2) + "\n")
        _write_effective(out / "bench_config.json", "bench", cfg)
    if cfg["enforce_rt"] and rtf >= 1.0:
        raise BudgetError(f"RTF {rtf:.3f} >= 1.0")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="y2net", description="Two-stage echo and noise suppression toolkit.")
    p.add_argument("--threads", type=int, default=None, help="BLAS/numba threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON file of defaults for this command")
        return sp

    sp = common(sub.add_parser("synth", help="render a synthetic echo/noise dataset"))
    sp.add_argument("--out", default=S, help="output directory")
    sp.add_argument("--n", type=int, default=S, help="number of utterances")
    sp.add_argument("--seed", type=int, default=S)
    sp.add_argument("--talk", default=S, choices=("mixed",) + TALK_TYPES)
    sp.add_argument("--t60", default=S, help="reverberation time range LO:HI in s")
    sp.add_argument("--ser", default=S, help="signal-to-echo ratio range in dB")
    sp.add_argument("--snr", default=S, help="signal-to-noise ratio range in dB")
    sp.add_argument("--duration", type=float, default=S, help="utterance length in s")
    sp.add_argument("--ne-active", default=S, help="near-end activity duration range in s")
    sp.add_argument("--p-nonlinear", type=float, default=S)
    sp.add_argument("--fe-pool", nargs="+", default=S, help="far-end WAVs")
    sp.add_argument("--ne-pool", nargs="+", default=S, help="near-end WAVs")
    sp.add_argument("--noise-pool", nargs="+", default=S, help="noise WAVs")
    sp.add_argument("--workers", type=int, default=S)

    sp = common(sub.add_parser("train", help="pretrain, joint-train or train the single-stage ablation"))
    sp.add_argument("--train", default=S, help="training manifest.jsonl")
    sp.add_argument("--val", default=S, help="validation manifest (default: training manifest)")
    sp.add_argument("--out", default=S, help="run directory")
    sp.add_argument("--init", default=S, help="pretrained AEC checkpoint for the joint phase")
    sp.add_argument("--phase", default=S, choices=tuple(PHASE_NAMES))
    sp.add_argument("--pf-input", default=S, choices=("dhat", "x"))
    sp.add_argument("--fusion", default=S, choices=("ef", "lf"))
    sp.add_argument("--F", type=int, default=S, help="filter count (default 70, single-stage 100)")
    sp.add_argument("--N", type=int, default=S, help="kernel length along frequency")
    sp.add_argument("--alpha", type=float, default=S)
    sp.add_argument("--from-scratch", action="store_true", default=S)
    sp.add_argument("--batch-size", type=int, default=S)
    sp.add_argument("--bptt", type=int, default=S)
    sp.add_argument("--lr0", type=float, default=S)
    sp.add_argument("--epochs", type=int, default=S)
    sp.add_argument("--seed", type=int, default=S)

    sp = common(sub.add_parser("infer", help="process a far-end/microphone WAV pair"))
    sp.add_argument("--ckpt", default=S)
    sp.add_argument("--x", default=S, help="far-end reference WAV")
    sp.add_argument("--y", default=S, help="microphone WAV")
    sp.add_argument("--out", default=S, help="enhanced output WAV")
    sp.add_argument("--dump-intermediates", action="store_true", default=S, help="also write echo estimate and error tracks")

    sp = common(sub.add_parser("eval", help="instrumental metrics on a manifest"))
    sp.add_argument("--ckpt", default=S)
    sp.add_argument("--identity", action="store_true", default=S, help="evaluate the pass-through model")
    sp.add_argument("--manifest", default=S)
    sp.add_argument("--out", default=S, help="report directory")
    sp.add_argument("--limit", type=int, default=S, help="evaluate only the first N utterances")

    sp = common(sub.add_parser("bench", help="single-thread real-time factor"))
    sp.add_argument("--ckpt", default=S, help="checkpoint (default: random two-stage model)")
    sp.add_argument("--F", type=int, default=S, help="filters of the random model")
    sp.add_argument("--frames", type=int, default=S)
    sp.add_argument("--repetitions", type=int, default=S)
    sp.add_argument("--warmup", type=int, default=S)
    sp.add_argument("--enforce-rt", action="store_true", default=S, help="exit 4 if RTF >= 1")
    sp.add_argument("--out", default=S)
    sp.add_argument("--seed", type=int, default=S)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = ns.threads or int(os.environ.get("Y2NET_THREADS", 0)) or os.cpu_count() or 1
    _kernels.set_threads(threads)
    try:
        cfg = effective_config(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PoolError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except BudgetError as exc:
        print(f"runtime budget violated: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
