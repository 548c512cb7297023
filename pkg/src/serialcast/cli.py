"""Single executable exposing the pipeline.

Subcommands: synth, shard, stats, train, posttrain, gradcheck, forecast,
eval, bench. Configuration keys can come from defaults, a key=value config
file, or flags of the same name (later wins). Unknown keys are rejected and
the effective configuration is echoed to stderr at startup.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from .backbone import ModelConfig
from .datagen import SignalSpec, adf_statistic, dataset_complexity, forecastability, gen_signal
from .dataloader import (DEFAULT_SHARD_BYTES, MANIFEST_NAME, ShardManifest, build_shards,
                         default_data_dir, read_csv_series, write_csv_series)
from .errors import CheckpointError, ConfigError, DataError, InputError, SerialcastError
from .inference import bench_inference, evaluate, expected_block_count, forecast, forecast_rolling_ntp
from .objectives import default_grid
from .trainer import (TrainConfig, gradient_check_suite, load_checkpoint, run_posttrain,
                      run_pretrain, validate_params)

MODEL_KEYS = {
    "d_model": (int, 64),
    "patch_len": (int, 8),
    "n_max": (int, 32),
    "n_main_blocks": (int, 4),
    "n_serial_blocks": (int, 4),
    "n_experts": (int, 8),
    "top_k": (int, 2),
    "n_heads": (int, 0),
    "n_quantiles": (int, 9),
    "theta_base": (float, 10000.0),
    "alpha": (float, 0.01),
    "variant": (str, "serial"),
}

TRAIN_KEYS = {
    "steps": (int, 1000),
    "batch_size": (int, 8),
    "peak_lr": (float, 5e-3),
    "warmup_frac": (float, 0.03),
    "lr_floor_frac": (float, 0.1),
    "weight_decay": (float, 0.1),
    "clip_norm": (float, 1.0),
    "precision": (str, "f32"),
    "resample_prob": (float, 0.3),
    "flip_prob": (float, 0.5),
    "n_max_override": (int, 0),
    "checkpoint_interval": (int, 0),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _add_keys(parser: argparse.ArgumentParser, keys: dict):
    for key, (typ, _default) in keys.items():
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)


def load_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for i, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{i}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def merge_config(args, keys: dict, config_path: str | None) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    merged = {k: d for k, (_t, d) in keys.items()}
    if config_path:
        for k, v in load_config_file(config_path).items():
            if k not in keys:
                raise ConfigError(f"unknown config key {k!r}")
            typ = keys[k][0]
            merged[k] = typ(v)
    for k in keys:
        flag = getattr(args, k, None)
        if flag is not None:
            merged[k] = flag
    return merged


def echo_config(name: str, merged: dict, seed: int):
    print(f"[{name}] seed={seed} " + " ".join(f"{k}={merged[k]}" for k in sorted(merged)),
          file=sys.stderr)


def save_config(path: str, merged: dict):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        for k in sorted(merged):
            f.write(f"{k}={merged[k]}\n")


def _model_cfg(merged: dict) -> ModelConfig:
    return ModelConfig(**{k: merged[k] for k in MODEL_KEYS})


def _signal_spec_from_args(args, seed: int) -> SignalSpec:
    return SignalSpec(kind=args.kind, amplitude=args.amplitude, period=args.period,
                      phase=args.phase, slope=args.slope, rate=args.rate,
                      exponent=args.exponent, location=args.location,
                      noise_sigma=args.noise_sigma, length=args.length, seed=seed)


def _load_manifest(path: str) -> ShardManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    return ShardManifest.load(path)


def _gather_series(inputs: list[str]) -> list[np.ndarray]:
    paths = []
    for pattern in inputs:
        hits = sorted(glob.glob(pattern)) if any(c in pattern for c in "*?[") else [pattern]
        paths.extend(hits)
    if not paths:
        raise InputError("no input files")
    return [read_csv_series(p) for p in paths]


# -- subcommand bodies ----------------------------------------------------


def cmd_synth(args) -> int:
    spec = _signal_spec_from_args(args, args.seed)
    if args.format == "csv":
        sample = gen_signal(spec)
        if args.out == "-":
            sys.stdout.write("value\n")
            for v in sample.values:
                sys.stdout.write(f"{v}\n")
        else:
            write_csv_series(args.out, sample.values)
            print(f"wrote {sample.values.size} points to {args.out}", file=sys.stderr)
        return 0
    # shard corpus: --count series with derived seeds; sinusoids additionally
    # get rotated phases so a noise-free family still has distinct members
    from .datagen import derive_seed

    series = []
    for i in range(args.count):
        s = _signal_spec_from_args(args, derive_seed(args.seed, i))
        if s.kind == "sinusoidal":
            s.phase += 2.0 * np.pi * i / max(args.count, 1)
        series.append(gen_signal(s).values)
    manifest = build_shards(series, args.shard_bytes, args.out)
    print(f"wrote {len(manifest.entries)} shard(s), {manifest.total_points} points to {args.out}",
          file=sys.stderr)
    return 0


def cmd_shard(args) -> int:
    series = _gather_series(args.input)
    manifest = build_shards(series, args.shard_bytes, args.out)
    print(f"wrote {len(manifest.entries)} shard(s), {manifest.total_points} points to {args.out}",
          file=sys.stderr)
    return 0


def cmd_stats(args) -> int:
    if args.manifest:
        from .dataloader import read_all_series

        variates = [v for _sid, v in read_all_series(_load_manifest(args.manifest))]
    else:
        variates = _gather_series(args.input)
    for i, v in enumerate(variates):
        print(f"series {i}: n={v.size} adf={adf_statistic(v, args.lag):.4f} "
              f"forecastability={forecastability(v):.4f}")
    point = dataset_complexity(variates, args.lag)
    print(f"aggregate adf {point.adf:.6f}")
    print(f"aggregate forecastability {point.forecastability:.6f}")
    return 0


def _train_cfg(merged: dict, stage: str, seed: int, alpha: float, out_dir: str,
               mixture: tuple[float, ...] = (1.0,)) -> TrainConfig:
    return TrainConfig(stage=stage, seed=seed, alpha=alpha, out_dir=out_dir,
                       mixture_weights=mixture,
                       **{k: merged[k] for k in TRAIN_KEYS})


def cmd_train(args) -> int:
    merged = merge_config(args, {**MODEL_KEYS, **TRAIN_KEYS}, args.config)
    echo_config("train", merged, args.seed)
    cfg = _model_cfg(merged)
    tcfg = _train_cfg(merged, "pretrain", args.seed, merged["alpha"], args.out_dir)
    manifest = _load_manifest(args.data or default_data_dir())
    result = run_pretrain(cfg, tcfg, manifest, resume_from=args.resume,
                          log_every=args.log_every)
    save_config(os.path.join(args.out_dir, "config.txt"), merged)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.history:
        print(f"final loss: {result.history[-1].loss:.6f}")
    return 0


def cmd_posttrain(args) -> int:
    merged = merge_config(args, {**MODEL_KEYS, **TRAIN_KEYS}, args.config)
    echo_config("posttrain", merged, args.seed)
    cfg = _model_cfg(merged)
    weights = tuple(float(w) for w in args.mixture_weights.split(","))
    tcfg = _train_cfg(merged, "posttrain", args.seed, merged["alpha"], args.out_dir, weights)
    sources = [(_load_manifest(args.data), weights[0])]
    if args.revisit:
        if len(weights) < 2:
            raise InputError("--mixture-weights needs one weight per source")
        sources.append((_load_manifest(args.revisit), weights[1]))
    result = run_posttrain(args.checkpoint, cfg, tcfg, sources, log_every=args.log_every)
    save_config(os.path.join(args.out_dir, "config.txt"), merged)
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradient_check_suite(seed=args.seed, coords_per_tensor=args.coords,
                                   epsilon=args.epsilon)
    failures = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_err)
        print(f"FAILED: worst offender {worst.param_name} rel={worst.max_rel_err:.3e}",
              file=sys.stderr)
        return 2
    print(f"all {len(reports)} parameter families passed")
    return 0


def _load_model(args, merged: dict):
    cfg = _model_cfg(merged)
    params, _state = load_checkpoint(args.checkpoint)
    validate_params(params, cfg)
    return cfg, params


def cmd_forecast(args) -> int:
    merged = merge_config(args, {**MODEL_KEYS, **TRAIN_KEYS}, args.config)
    echo_config("forecast", merged, args.seed)
    cfg, params = _load_model(args, merged)
    series = read_csv_series(args.input)
    grid = default_grid(cfg.n_quantiles)
    fn = forecast_rolling_ntp if args.mode == "rolling" else forecast
    dist = fn(series, args.horizon, params, cfg, grid)
    header = ",".join(f"q{q:g}" for q in grid.levels)
    lines = [header] + [",".join(f"{v}" for v in dist.values[:, t]) for t in range(dist.horizon)]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {dist.horizon} steps to {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    merged = merge_config(args, {**MODEL_KEYS, **TRAIN_KEYS}, args.config)
    echo_config("eval", merged, args.seed)
    cfg, params = _load_model(args, merged)
    series = _gather_series(args.input)
    report = evaluate(params, cfg, series, args.horizon, season=args.season, mode=args.mode)
    other = evaluate(params, cfg, series, args.horizon, season=args.season,
                     mode="rolling" if args.mode == "serial" else "serial")
    if args.mode == "serial":
        report.passes_rolling = other.passes_rolling
    else:
        report.passes_serial = other.passes_serial
    for line in report.lines():
        print(line)
    return 0


def cmd_bench(args) -> int:
    merged = merge_config(args, {**MODEL_KEYS, **TRAIN_KEYS}, args.config)
    echo_config("bench", merged, args.seed)
    cfg = _model_cfg(merged)
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        validate_params(params, cfg)
    else:
        from .backbone import init_params

        params = init_params(cfg, seed=args.seed, dtype=np.float32)
    horizons = [int(h) for h in args.horizons.split(",")]
    for point in bench_inference(params, cfg, horizons, repetitions=args.reps, seed=args.seed):
        exp_s = expected_block_count("serial", point.horizon, cfg)
        exp_r = expected_block_count("rolling", point.horizon, cfg)
        print(f"F={point.horizon} blocks_serial={point.blocks_serial}(exp {exp_s}) "
              f"blocks_rolling={point.blocks_rolling}(exp {exp_r}) "
              f"ratio={point.block_ratio:.3f} "
              f"wall_ms_serial_p50={point.wall_ms_serial_p50:.2f} "
              f"wall_ms_rolling_p50={point.wall_ms_rolling_p50:.2f} "
              f"wall_ratio={point.wall_ratio:.2f}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="serialcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, train=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--workers", type=int, default=1,
                       help="reserved; current paths are single-worker deterministic")
        p.add_argument("--verbose", action="store_true")
        if model:
            _add_keys(p, MODEL_KEYS)
        if train:
            _add_keys(p, TRAIN_KEYS)

    p = sub.add_parser("synth", help="generate a synthetic series or shard corpus")
    common(p)
    p.add_argument("--kind", default="sinusoidal")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--period", type=float, default=8.0)
    p.add_argument("--phase", type=float, default=0.0)
    p.add_argument("--slope", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=0.01)
    p.add_argument("--exponent", type=float, default=2.0)
    p.add_argument("--location", type=int, default=0)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--format", choices=("csv", "shard"), default="csv")
    p.add_argument("--count", type=int, default=32, help="series count for shard format")
    p.add_argument("--shard-bytes", dest="shard_bytes", type=int, default=DEFAULT_SHARD_BYTES)
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("shard", help="pack CSV series into shards")
    common(p)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--shard-bytes", dest="shard_bytes", type=int, default=DEFAULT_SHARD_BYTES)
    p.add_argument("--out", default=default_data_dir())
    p.set_defaults(fn=cmd_shard)

    p = sub.add_parser("stats", help="complexity statistics (unit-root, forecastability)")
    common(p)
    p.add_argument("--input", nargs="*", default=[])
    p.add_argument("--manifest", default=None)
    p.add_argument("--lag", type=int, default=None)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("train", help="stage-1 pre-training")
    common(p, model=True, train=True)
    p.add_argument("--data", default=None, help="manifest path or shard dir")
    p.add_argument("--out-dir", dest="out_dir", default="runs/pretrain")
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("posttrain", help="stage-2 continued pre-training")
    common(p, model=True, train=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="post-training corpus manifest")
    p.add_argument("--revisit", default=None, help="pre-training corpus manifest to mix back")
    p.add_argument("--mixture-weights", dest="mixture_weights", default="1.0,1.0")
    p.add_argument("--out-dir", dest="out_dir", default="runs/posttrain")
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(fn=cmd_posttrain)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--coords", type=int, default=24)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("forecast", help="quantile forecast from a CSV series")
    common(p, model=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--mode", choices=("serial", "rolling"), default="serial")
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("eval", help="hold-out evaluation with MASE / CRPS-wQL")
    common(p, model=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--season", type=int, default=1)
    p.add_argument("--mode", choices=("serial", "rolling"), default="serial")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="serial vs rolling inference cost")
    common(p, model=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--horizons", default="80")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (InputError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, SerialcastError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
