"""Mamba blocks and the bidirectional Bamba stack.

A block maps ``x[d_model, L]`` to ``x + out_proj(ssm(silu(conv(in_a x))) * silu(in_b x))``.
A Bamba stack sums a forward branch with a second branch that (when
bidirectional) runs on the time-reversed input and is flipped back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from . import ssm
from .errors import ConfigError, ShapeError
from .numerics import Tensor

BLOCK_KEYS = ("in_proj", "conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "A_log", "D", "out_proj")


@dataclass(frozen=True)
class MambaBlockConfig:
    d_model: int
    expand: int = 2
    n_state: int = 16
    d_conv: int = 3
    causal_conv: bool = True
    use_d: bool = True
    norm: bool = False
    dt_rank: int | None = None

    def __post_init__(self):
        if self.d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {self.d_model}")
        if self.expand < 1:
            raise ConfigError(f"expand must be >= 1, got {self.expand}")
        if self.d_conv < 1:
            raise ConfigError(f"d_conv must be >= 1, got {self.d_conv}")
        if self.n_state < 1:
            raise ConfigError(f"n_state must be >= 1, got {self.n_state}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return ssm.default_dt_rank(self.d_model) if self.dt_rank is None else self.dt_rank

    @property
    def conv_padding(self) -> str:
        return "same-left" if self.causal_conv else "same-centered"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, E, N, R, K = self.d_model, self.d_inner, self.n_state, self.rank, self.d_conv
        shapes = {
            "in_proj": (2 * E, d),
            "conv_w": (E, K),
            "conv_b": (E,),
            "x_proj": (R + 2 * N, E),
            "dt_proj": (E, R),
            "dt_bias": (E,),
            "A_log": (E, N),
        }
        if self.use_d:
            shapes["D"] = (E,)
        shapes["out_proj"] = (d, E)
        if self.norm:
            shapes["norm_w"] = (d,)
        return shapes

    def count_params(self) -> int:
        d, E, N, R, K = self.d_model, self.d_inner, self.n_state, self.rank, self.d_conv
        n = 2 * E * d + E * K + E + (R + 2 * N) * E + E * R + E + E * N + d * E
        if self.use_d:
            n += E
        if self.norm:
            n += d
        return n


@dataclass(frozen=True)
class BambaStackConfig:
    n_blocks_per_branch: int
    block: MambaBlockConfig
    bidirectional: bool = True
    recombine_per_block: bool = False

    def __post_init__(self):
        if self.n_blocks_per_branch < 1:
            raise ConfigError(f"n_blocks_per_branch must be >= 1, got {self.n_blocks_per_branch}")

    @property
    def total_blocks(self) -> int:
        return 2 * self.n_blocks_per_branch

    def count_params(self) -> int:
        return self.total_blocks * self.block.count_params()


def init_block(cfg: MambaBlockConfig, rng: np.random.Generator, dtype=np.float32, zero_out: bool = False) -> dict[str, np.ndarray]:
    d, E, K = cfg.d_model, cfg.d_inner, cfg.d_conv
    ssm_arrays = ssm.init_ssm_arrays(E, cfg.n_state, cfg.rank, rng, dtype=np.float64, with_d=cfg.use_d)
    conv_bound = 1.0 / math.sqrt(K)
    out = {
        "in_proj": rng.uniform(-1, 1, size=(2 * E, d)) / math.sqrt(d),
        "conv_w": rng.uniform(-conv_bound, conv_bound, size=(E, K)),
        "conv_b": rng.uniform(-conv_bound, conv_bound, size=E),
        **ssm_arrays,
        "out_proj": np.zeros((d, E)) if zero_out else rng.uniform(-1, 1, size=(d, E)) / math.sqrt(E),
    }
    if cfg.norm:
        out["norm_w"] = np.ones(d)
    shapes = cfg.param_shapes()
    return {k: np.asarray(out[k], dtype=dtype).reshape(shapes[k]) for k in shapes}


def _check_weights(cfg: MambaBlockConfig, w: Mapping[str, Tensor]) -> None:
    for k, shape in cfg.param_shapes().items():
        if k not in w:
            raise ConfigError(f"missing block weight {k!r}")
        if tuple(w[k].shape) != shape:
            raise ConfigError(f"block weight {k!r} has shape {tuple(w[k].shape)}, config expects {shape}")


def block_ssm_params(w: Mapping[str, Tensor]) -> ssm.SSMParams:
    return ssm.SSMParams(w["A_log"], w["x_proj"], w["dt_proj"], w["dt_bias"], w.get("D"))


def mamba_block_forward(cfg: MambaBlockConfig, w: Mapping[str, Tensor], x, scan_method: str = "sequential") -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[0] != cfg.d_model:
        raise ConfigError(f"block expects input [{cfg.d_model}, L], got {x.shape}")
    _check_weights(cfg, w)
    E = cfg.d_inner
    h = nx.rms_norm(x, w["norm_w"]) if cfg.norm else x
    xz = nx.matmul(w["in_proj"], h)
    xs = nx.silu(nx.depthwise_conv1d(xz[:E], w["conv_w"], w["conv_b"], padding=cfg.conv_padding))
    y, _ = ssm.scan_sequential(block_ssm_params(w), xs) if scan_method == "sequential" else ssm.scan_parallel(block_ssm_params(w), xs)
    gated = nx.mul(y, nx.silu(xz[E:]))
    return nx.add(x, nx.matmul(w["out_proj"], gated))


def _branch(cfg: BambaStackConfig, blocks: list[Mapping[str, Tensor]], x: Tensor, scan_method: str) -> Tensor:
    for w in blocks:
        x = mamba_block_forward(cfg.block, w, x, scan_method)
    return x


def bamba_forward(
    cfg: BambaStackConfig,
    weights: Mapping[str, Sequence[Mapping[str, Tensor]]],
    x,
    scan_method: str = "sequential",
) -> Tensor:
    """``weights`` maps ``"fwd"`` and ``"bwd"`` to lists of block weight dicts."""
    x = nx.as_tensor(x)
    fwd, bwd = list(weights["fwd"]), list(weights["bwd"])
    if len(fwd) != cfg.n_blocks_per_branch or len(bwd) != cfg.n_blocks_per_branch:
        raise ShapeError(f"expected {cfg.n_blocks_per_branch} blocks per branch, got {len(fwd)} and {len(bwd)}")
    flip = nx.flip_time if cfg.bidirectional else (lambda t: t)
    if cfg.recombine_per_block:
        for w1, w2 in zip(fwd, bwd):
            x = nx.add(
                mamba_block_forward(cfg.block, w1, x, scan_method),
                flip(mamba_block_forward(cfg.block, w2, flip(x), scan_method)),
            )
        return x
    return nx.add(_branch(cfg, fwd, x, scan_method), flip(_branch(cfg, bwd, flip(x), scan_method)))


def init_bamba(cfg: BambaStackConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, list[dict[str, np.ndarray]]]:
    return {
        branch: [init_block(cfg.block, rng, dtype) for _ in range(cfg.n_blocks_per_branch)]
        for branch in ("fwd", "bwd")
    }


# ---------------------------------------------------------------------------
# gradient-free streaming evaluation (causal blocks only)


def mamba_block_step(cfg: MambaBlockConfig, w: Mapping[str, Tensor], x: np.ndarray, state: dict[str, np.ndarray]) -> np.ndarray:
    """Process a chunk ``x[d_model, F]`` given the block's carried state.

    ``state`` holds ``conv`` (last ``d_conv - 1`` pre-conv inputs) and ``h``
    (scan state); it is updated in place.
    """
    if not cfg.causal_conv:
        raise ConfigError("streaming requires causal_conv blocks")
    E, K = cfg.d_inner, cfg.d_conv
    dtype = x.dtype
    with nx.no_grad():
        h = nx.rms_norm(Tensor(x), w["norm_w"]).data if cfg.norm else x
        xz = w["in_proj"].data @ h
        xa = xz[:E]
        buf = state.get("conv")
        if buf is None:
            buf = np.zeros((E, K - 1), dtype=dtype)
        xin = np.concatenate([buf, xa], axis=1)
        conv = nx.depthwise_conv1d(Tensor(xin), w["conv_w"], w["conv_b"], padding="valid").data
        state["conv"] = xin[:, xin.shape[1] - (K - 1) :].copy()
        xs = nx.silu(Tensor(conv)).data
        y, hL = ssm.infer_scan(block_ssm_params(w), xs, state.get("h"))
        state["h"] = hL
        gated = y * nx.silu(Tensor(xz[E:])).data
        return x + w["out_proj"].data @ gated
