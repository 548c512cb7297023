"""Forecast generation, the rolling baseline, evaluation metrics, benchmark.

A serial forecast runs the main stack once and as many serial blocks as the
horizon requires (depth = ceil(F/P) - 1), collecting last-token projections
from every depth in a single pass. Horizons beyond the native window fall
back to outer autoregression: the median quantile is fed back as context and
the extended window is re-normalized per pass. The rolling baseline uses
only the main stack, one patch per full-prefix recompute.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .backbone import BLOCK_COUNTER, ModelConfig, model_forward
from .errors import InputError
from .numerics import Params
from .objectives import QuantileGrid, default_grid, patch_project, wql
from .tokenizer import PatchBatch, denormalize, patchify, renormalize

MASE_EPS = 1e-8


@dataclass
class ForecastDistribution:
    values: np.ndarray  # (Q, F), original data scale
    levels: QuantileGrid
    passes: int = 1  # forward passes spent producing it

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    @property
    def median(self) -> np.ndarray:
        return self.values[self.levels.median_index()]


def _single_pass(context: np.ndarray, depth: int, params: Params, cfg: ModelConfig):
    """One forward pass; returns (Q, (depth+1)*P) data-scale quantile patches."""
    norm, stats = renormalize(context)
    patches, masks, n = patchify(norm, cfg.patch_len)
    batch = PatchBatch(patches[None], masks[None], np.array([stats.mu]),
                       np.array([stats.sigma]), n)
    with no_grad():
        trace = model_forward(batch, params, cfg, depth)
    blocks = []
    for h in [trace.h_main] + trace.serial_outputs:
        last = Tensor(h.data[:, -1:, :])  # only the last token feeds predictions
        blocks.append(patch_project(last, params, cfg).data[0, 0])  # (Q, P)
    return denormalize(np.concatenate(blocks, axis=1), stats)


def _prep_context(series, cfg: ModelConfig, truncate_context: bool) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise InputError("forecast needs at least one observed point")
    limit = cfg.n_max * cfg.patch_len
    if truncate_context and x.size > limit:
        x = x[-limit:]
    return x


def forecast(series, horizon: int, params: Params, cfg: ModelConfig,
             grid: QuantileGrid | None = None, sort_quantiles: bool = True,
             truncate_context: bool = True) -> ForecastDistribution:
    """Quantile forecast for ``horizon`` future steps.

    Depth adapts to the horizon; beyond (H+1)*P steps the median forecast is
    appended to the context and the pass repeats on the extended, freshly
    re-normalized window.
    """
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    grid = grid or default_grid(cfg.n_quantiles)
    if grid.q != cfg.n_quantiles:
        raise InputError(f"grid has {grid.q} levels, model expects {cfg.n_quantiles}")
    context = _prep_context(series, cfg, truncate_context)
    native = cfg.native_horizon
    chunks: list[np.ndarray] = []
    remaining = horizon
    passes = 0
    while remaining > 0:
        chunk = min(remaining, native)
        depth = max(0, math.ceil(chunk / cfg.patch_len) - 1)
        pred = _single_pass(context, depth, params, cfg)[:, :chunk]
        chunks.append(pred)
        passes += 1
        remaining -= chunk
        if remaining > 0:
            context = _prep_context(np.concatenate([context, pred[grid.median_index()]]),
                                    cfg, truncate_context)
    values = np.concatenate(chunks, axis=1)[:, :horizon]
    if sort_quantiles:
        values = np.sort(values, axis=0)
    return ForecastDistribution(values, grid, passes)


def forecast_rolling_ntp(series, horizon: int, params: Params, cfg: ModelConfig,
                         grid: QuantileGrid | None = None, sort_quantiles: bool = True,
                         truncate_context: bool = True) -> ForecastDistribution:
    """Autoregressive baseline: main blocks only, one patch per full recompute."""
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    grid = grid or default_grid(cfg.n_quantiles)
    context = _prep_context(series, cfg, truncate_context)
    rolls = math.ceil(horizon / cfg.patch_len)
    chunks = []
    for _ in range(rolls):
        pred = _single_pass(context, 0, params, cfg)  # (Q, P)
        chunks.append(pred)
        context = _prep_context(np.concatenate([context, pred[grid.median_index()]]),
                                cfg, truncate_context)
    values = np.concatenate(chunks, axis=1)[:, :horizon]
    if sort_quantiles:
        values = np.sort(values, axis=0)
    return ForecastDistribution(values, grid, rolls)


def expected_block_count(mode: str, horizon: int, cfg: ModelConfig) -> int:
    """Closed-form block invocations for a forecast of ``horizon`` steps."""
    p, l, h = cfg.patch_len, cfg.n_main_blocks, cfg.n_serial_blocks
    if mode == "rolling":
        return math.ceil(horizon / p) * l
    native = (h + 1) * p
    total = 0
    remaining = horizon
    while remaining > 0:
        chunk = min(remaining, native)
        total += l + max(0, math.ceil(chunk / p) - 1)
        remaining -= chunk
    return total


# -- metrics -----------------------------------------------------------------


def seasonal_naive_scale(insample, season: int = 1) -> float:
    """In-sample mean absolute seasonal-naive error (the MASE denominator)."""
    x = np.asarray(insample, dtype=np.float64)
    if x.size <= season:
        raise InputError(f"insample of {x.size} too short for season {season}")
    return float(np.mean(np.abs(x[season:] - x[:-season])))


def mase(forecast_median, actuals, insample, season: int = 1) -> float:
    """mean|yhat - y| / in-sample seasonal-naive MAE, eps-guarded."""
    yhat = np.asarray(forecast_median, dtype=np.float64)
    y = np.asarray(actuals, dtype=np.float64)
    if yhat.shape != y.shape:
        raise InputError(f"forecast {yhat.shape} vs actuals {y.shape}")
    return float(np.mean(np.abs(yhat - y)) / max(seasonal_naive_scale(insample, season), MASE_EPS))


def is_degenerate_scale(insample, season: int = 1) -> bool:
    return seasonal_naive_scale(insample, season) < MASE_EPS


def eval_crps_wql(dist: ForecastDistribution, actuals) -> float:
    """Mean over levels of the weighted quantile loss, in data scale."""
    y = np.asarray(actuals, dtype=np.float64)
    if y.size != dist.horizon:
        raise InputError(f"actuals of {y.size} vs horizon {dist.horizon}")
    return float(np.mean([wql(y, dist.values[k], qk) for k, qk in enumerate(dist.levels.levels)]))


# -- evaluation + benchmark ---------------------------------------------------


@dataclass
class EvalReport:
    mase_per_series: list[float] = field(default_factory=list)
    mase: float = float("nan")
    crps_wql: float = float("nan")
    passes_serial: int = 0
    passes_rolling: int = 0
    wall_ms_p50: float = 0.0
    degenerate_count: int = 0

    def lines(self) -> list[str]:
        return [
            f"mase {self.mase:.6f}",
            f"crps_wql {self.crps_wql:.6f}",
            f"passes_serial {self.passes_serial}",
            f"passes_rolling {self.passes_rolling}",
            f"wall_ms_p50 {self.wall_ms_p50:.3f}",
        ]


def evaluate(params: Params, cfg: ModelConfig, series_list, horizon: int,
             grid: QuantileGrid | None = None, season: int = 1,
             mode: str = "serial") -> EvalReport:
    """Hold out the last ``horizon`` points of each series and score forecasts."""
    if mode not in ("serial", "rolling"):
        raise InputError(f"unknown mode {mode!r}")
    fn = forecast if mode == "serial" else forecast_rolling_ntp
    report = EvalReport()
    crps_vals = []
    times = []
    for series in series_list:
        x = np.asarray(series, dtype=np.float64)
        if x.size <= horizon + season:
            raise InputError("series too short to hold out the horizon")
        context, actual = x[:-horizon], x[-horizon:]
        t0 = time.perf_counter()
        dist = fn(context, horizon, params, cfg, grid)
        times.append(1000.0 * (time.perf_counter() - t0))
        if is_degenerate_scale(context, season):
            report.degenerate_count += 1
            report.mase_per_series.append(0.0 if np.allclose(dist.median, actual) else float("inf"))
        else:
            report.mase_per_series.append(mase(dist.median, actual, context, season))
        crps_vals.append(eval_crps_wql(dist, actual))
        if mode == "serial":
            report.passes_serial += dist.passes
        else:
            report.passes_rolling += dist.passes
    finite = [v for v in report.mase_per_series if math.isfinite(v)]
    report.mase = float(np.mean(finite)) if finite else float("nan")
    report.crps_wql = float(np.mean(crps_vals))
    report.wall_ms_p50 = float(np.median(times))
    return report


@dataclass
class BenchPoint:
    horizon: int
    blocks_serial: int
    blocks_rolling: int
    passes_serial: int
    passes_rolling: int
    wall_ms_serial_p50: float
    wall_ms_rolling_p50: float

    @property
    def block_ratio(self) -> float:
        return self.blocks_rolling / self.blocks_serial

    @property
    def wall_ratio(self) -> float:
        return self.wall_ms_rolling_p50 / max(self.wall_ms_serial_p50, 1e-9)


def bench_inference(params: Params, cfg: ModelConfig, horizons, repetitions: int = 5,
                    context_len: int | None = None, seed: int = 0) -> list[BenchPoint]:
    """Median wall time and exact block counts, serial vs rolling, per horizon."""
    if repetitions < 1:
        raise InputError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    t = context_len or cfg.n_max * cfg.patch_len
    series = rng.normal(size=t).cumsum()
    out = []
    for f in horizons:
        times = {"serial": [], "rolling": []}
        blocks = {}
        for mode, fn in (("serial", forecast), ("rolling", forecast_rolling_ntp)):
            for _ in range(repetitions):
                BLOCK_COUNTER.reset()
                t0 = time.perf_counter()
                dist = fn(series, f, params, cfg)
                times[mode].append(1000.0 * (time.perf_counter() - t0))
                blocks[mode] = BLOCK_COUNTER.count
                passes = dist.passes
                if mode == "serial":
                    passes_serial = passes
                else:
                    passes_rolling = passes
        out.append(BenchPoint(f, blocks["serial"], blocks["rolling"],
                              passes_serial, passes_rolling,
                              float(np.median(times["serial"])),
                              float(np.median(times["rolling"]))))
    return out
