"""Compute accounting, timing and the report tables.

Peak training memory is modelled analytically: parameters, their gradients
and the two AdamW moments (``4 * P`` values), plus every activation the tape
retains until backward starts.  Per layer the retained outputs are

* conv / transposed conv:  ``C_out * L_out`` (and the same again for a ReLU)
* Mamba block:             ``12 E L + 2 (R + 2N) L + 2 d L + 2 E N``
  (``+ d L`` with the input norm)
* Bamba stack:             blocks, plus ``3 d L`` for the flips and the sum
* U-Net skip:              ``2 d L`` (1x1 projection and the sum)

Scratch buffers saved for backward (im2col columns, padded inputs) are not
counted, so the figure is a lower bound on the real peak.
"""

from __future__ import annotations

import dataclasses
import math
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .mamba import MambaBlockConfig
from .separator import (
    PRESETS,
    ModelWeights,
    SeparatorConfig,
    build,
    count_macs,
    count_params,
    layer_costs,
    separate,
)

PUBLISHED_TARGETS = {"S": (7.2e6, 12.46), "M": (22e6, 37.0)}
CALIBRATION_GRID = {"expand": (1, 2, 3), "n_state": (8, 16, 32), "d_conv": (3, 4)}

TSV_COLUMNS = ("model", "params", "gmac_per_s", "fwd_ms", "peak_mem_bytes", "env")
MARKDOWN_HEADERS = ("Model", "# Params", "GMAC/s", "Fw. pass (ms)", "Mem. Usage (GB)", "Env")


@dataclass(frozen=True)
class ComputeReport:
    model: str
    params: int
    gmac_per_s: float
    fwd_ms: float
    peak_mem_bytes: int
    env: str = ""

    def __post_init__(self):
        for name in ("params", "gmac_per_s", "fwd_ms", "peak_mem_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("model", "env"):
            if any(c in getattr(self, name) for c in "\t\n|"):
                raise ValueError(f"{name} may not contain tabs, newlines or pipes")


def environment(threads: int | None = None) -> str:
    import numba

    t = kernels.get_threads() if threads is None else threads
    return (
        f"{platform.machine()} {platform.system()} py{platform.python_version()} "
        f"numpy{np.__version__} numba{numba.__version__} backend={kernels.get_backend()} threads={t}"
    )


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class ForwardTiming:
    samples_ms: tuple[float, ...]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def stdev(self) -> float:
        return statistics.stdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0

    @property
    def min(self) -> float:
        return min(self.samples_ms)

    @property
    def max(self) -> float:
        return max(self.samples_ms)


def profile_forward(weights: ModelWeights, seconds: float = 4.0, repeats: int = 10, warmup: int = 1, seed: int = 0) -> ForwardTiming:
    """Wall-clock of gradient-free forward passes over a fixed random input."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    n = int(round(seconds * weights.config.sample_rate))
    x = np.random.default_rng(seed).standard_normal((1, n)).astype(weights.dtype)
    for _ in range(warmup):
        separate(weights, x)
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        separate(weights, x)
        out.append((time.perf_counter() - t0) * 1e3)
    return ForwardTiming(tuple(out))


# ---------------------------------------------------------------------------
# memory


def linear_memory(d_in: int, d_out: int, length: int, itemsize: int = 4, bias: bool = False) -> int:
    """Bytes for a lone linear map: weights x4 (value, grad, two moments), input and output."""
    p = d_in * d_out + (d_out if bias else 0)
    return itemsize * (4 * p + d_in * length + d_out * length)


def mamba_block_activations(cfg: MambaBlockConfig, length: int) -> int:
    """Values retained on the tape by one block (see module docstring)."""
    d, E, N, R, L = cfg.d_model, cfg.d_inner, cfg.n_state, cfg.rank, length
    n = 12 * E * L + 2 * (R + 2 * N) * L + 2 * d * L + 2 * E * N
    if cfg.norm:
        n += d * L
    return n


def activation_values(config: SeparatorConfig, length: int, n_sources: int | None = None) -> int:
    """Tape-retained values of a training forward pass plus the uPIT loss."""
    c = config
    total = 0
    L = length + (-length) % c.frame
    for lc in layer_costs(c, length):
        if lc.kind == "mamba":
            cfg = c.stack_config(int(lc.name[3:]) if lc.name != "mid" else c.n_levels - 1)
            d, Ll = lc.c_in, lc.length_in
            total += cfg.total_blocks * mamba_block_activations(cfg.block, Ll)
            if cfg.recombine_per_block:
                total += cfg.n_blocks_per_branch * (3 * d * Ll if cfg.bidirectional else d * Ll)
            else:
                total += 3 * d * Ll if cfg.bidirectional else d * Ll
        elif lc.name.startswith("skip"):
            total += 2 * lc.c_out * lc.length_out
        elif lc.name == "head":
            total += lc.c_out * lc.length_out + (lc.c_out * length if L != length else 0)
        else:
            total += 2 * lc.c_out * lc.length_out  # layer and its ReLU
    n = c.n_sources if n_sources is None else n_sources
    total += 3 * n * n + n + 1  # pairwise scores, negation, clamp, selection, mean
    return total


def estimate_peak_memory(config: SeparatorConfig, seconds: float = 4.0, precision="f32") -> int:
    """Analytic lower bound on training-step peak memory in bytes."""
    itemsize = nx.Precision.parse(precision).dtype.itemsize
    length = int(round(seconds * config.sample_rate))
    values = 4 * count_params(config) + activation_values(config, length) + length
    return values * itemsize


# ---------------------------------------------------------------------------
# reports


def compute_report(config: SeparatorConfig, name: str, seconds: float = 4.0, repeats: int = 10, warmup: int = 1, seed: int = 0, time_forward: bool = True, weights: ModelWeights | None = None) -> ComputeReport:
    params = count_params(config)
    gmac = count_macs(config, 1.0) / 1e9
    fwd = 0.0
    if time_forward:
        w = weights if weights is not None else build(config, seed=seed)
        fwd = profile_forward(w, seconds, repeats, warmup, seed).mean
    return ComputeReport(name, params, gmac, fwd, estimate_peak_memory(config, seconds), environment())


def emit_report(reports: list[ComputeReport], fmt: str = "markdown") -> str:
    if fmt == "tsv":
        lines = ["\t".join(TSV_COLUMNS)]
        for r in reports:
            lines.append("\t".join([r.model, str(r.params), repr(float(r.gmac_per_s)), repr(float(r.fwd_ms)), str(r.peak_mem_bytes), r.env]))
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        lines = ["| " + " | ".join(MARKDOWN_HEADERS) + " |", "|" + "---|" * len(MARKDOWN_HEADERS)]
        for r in reports:
            cells = [r.model, f"{r.params / 1e6:.2f}M", f"{r.gmac_per_s:.2f}", f"{r.fwd_ms:.1f}", f"{r.peak_mem_bytes / 1e9:.3f}", r.env]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r} (use tsv or markdown)")


def parse_report_tsv(text: str) -> list[ComputeReport]:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or tuple(lines[0].split("\t")) != TSV_COLUMNS:
        raise ValueError("not a compute report: header mismatch")
    out = []
    for ln in lines[1:]:
        m, p, g, f, mem, env = ln.split("\t")
        out.append(ComputeReport(m, int(p), float(g), float(f), int(mem), env))
    return out


# ---------------------------------------------------------------------------
# calibration of the Mamba-internal defaults


@dataclass(frozen=True)
class CalibrationRow:
    expand: int
    n_state: int
    d_conv: int
    params_s: int
    params_m: int
    gmac_s: float
    gmac_m: float

    @property
    def param_deviation(self) -> float:
        """Sum of relative parameter-count errors against both targets."""
        return abs(self.params_s / PUBLISHED_TARGETS["S"][0] - 1) + abs(self.params_m / PUBLISHED_TARGETS["M"][0] - 1)

    @property
    def gmac_deviation(self) -> float:
        return abs(self.gmac_s / PUBLISHED_TARGETS["S"][1] - 1) + abs(self.gmac_m / PUBLISHED_TARGETS["M"][1] - 1)


def calibration_grid() -> list[CalibrationRow]:
    """Every (expand, n_state, d_conv) triple, best (lowest parameter deviation) first."""
    rows = []
    for e in CALIBRATION_GRID["expand"]:
        for n in CALIBRATION_GRID["n_state"]:
            for k in CALIBRATION_GRID["d_conv"]:
                s = dataclasses.replace(PRESETS["S"], expand=e, n_state=n, d_conv=k)
                m = dataclasses.replace(PRESETS["M"], expand=e, n_state=n, d_conv=k)
                rows.append(CalibrationRow(e, n, k, count_params(s), count_params(m), count_macs(s) / 1e9, count_macs(m) / 1e9))
    return sorted(rows, key=lambda r: (r.param_deviation, r.gmac_deviation))


# ---------------------------------------------------------------------------
# backend comparison


def compare_backends(config: SeparatorConfig, seconds: float = 1.0, repeats: int = 3, seed: int = 0) -> dict[str, ForwardTiming]:
    """Forward timing under each kernel backend on identical weights and input."""
    w = build(config, seed=seed)
    out = {}
    for backend in ("numba", "numpy"):
        with kernels.use_backend(backend):
            out[backend] = profile_forward(w, seconds, repeats, 1, seed)
    return out


def relative_error(value: float, target: float) -> float:
    return abs(value - target) / abs(target) if target else math.inf
