"""Waveform U-Net built from Bamba stacks.

``n_stages`` counts the Bamba stages along the U (encoder levels, the
bottleneck and decoder levels), so it is odd: 5 stages means two encoder
levels, a bottleneck and two decoder levels.  Level ``l`` runs at
``base_dim * 2**l`` channels and ``stride**(l + 1)`` times fewer samples than
the waveform, since the input convolution already downsamples.

Layer order for ``n_levels = (n_stages + 1) // 2``::

    stem conv (1 -> d0, stride)            relu
    for l < n_levels - 1:  enc Bamba(l); down conv (d_l -> d_{l+1})   relu
    mid Bamba (deepest level)
    for l descending:      up conv^T (d_{l+1} -> d_l)  relu; + skip 1x1(enc_l); dec Bamba(l)
    head conv^T (d0 -> n_sources, stride)

Causal configurations left-pad the downsampling convolutions and right-crop
the transposed ones, which makes the model causal at the granularity of
``stride**n_levels`` samples (see :func:`lookahead`).
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .mamba import (
    BambaStackConfig,
    MambaBlockConfig,
    bamba_forward,
    init_block,
    mamba_block_step,
)
from .numerics import Tensor


@dataclass(frozen=True)
class SeparatorConfig:
    n_stages: int = 5
    base_dim: int = 64
    blocks_per_stage: int = 8
    kernel_size: int = 16
    stride: int = 2
    n_sources: int = 2
    causal: bool = False
    sample_rate: int = 8000
    expand: int = 2
    n_state: int = 16
    d_conv: int = 3
    norm: bool = False
    recombine_per_block: bool = False

    def __post_init__(self):
        if self.n_stages < 1 or self.n_stages % 2 == 0:
            raise ConfigError(f"n_stages must be odd and >= 1 (encoder + bottleneck + decoder), got {self.n_stages}")
        if self.blocks_per_stage < 2 or self.blocks_per_stage % 2:
            raise ConfigError(f"blocks_per_stage counts both branches and must be even >= 2, got {self.blocks_per_stage}")
        if self.kernel_size <= self.stride:
            raise ConfigError(f"kernel_size ({self.kernel_size}) must exceed stride ({self.stride})")
        if self.stride < 1 or self.base_dim < 1 or self.n_sources < 1 or self.sample_rate <= 0:
            raise ConfigError("stride, base_dim, n_sources and sample_rate must be positive")

    @property
    def n_levels(self) -> int:
        return (self.n_stages + 1) // 2

    @property
    def frame(self) -> int:
        """Total downsampling factor; inputs are padded to a multiple of it."""
        return self.stride**self.n_levels

    def dim(self, level: int) -> int:
        return self.base_dim * 2**level

    @property
    def down_padding(self) -> str:
        return "same-left" if self.causal else "same-centered"

    @property
    def up_padding(self) -> str:
        return "same-right" if self.causal else "same-centered"

    def block_config(self, level: int) -> MambaBlockConfig:
        return MambaBlockConfig(
            d_model=self.dim(level), expand=self.expand, n_state=self.n_state, d_conv=self.d_conv,
            causal_conv=True, norm=self.norm,
        )

    def stack_config(self, level: int) -> BambaStackConfig:
        return BambaStackConfig(
            n_blocks_per_branch=self.blocks_per_stage // 2,
            block=self.block_config(level),
            bidirectional=not self.causal,
            recombine_per_block=self.recombine_per_block,
        )

    def stages(self) -> list[tuple[str, int]]:
        """``(prefix, level)`` of every Bamba stage in forward order."""
        n = self.n_levels
        return [(f"enc{l}", l) for l in range(n - 1)] + [("mid", n - 1)] + [(f"dec{l}", l) for l in reversed(range(n - 1))]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"unknown separator config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            default = getattr(cls, k)
            kw[k] = _coerce(v, type(default), k)
        return cls(**kw)


def _coerce(value, typ, key):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    if typ is bool:
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}") from None


SEPMAMBA_S = SeparatorConfig(base_dim=64, blocks_per_stage=8)
SEPMAMBA_M = SeparatorConfig(base_dim=128, blocks_per_stage=6)
PRESETS = {
    "S": SEPMAMBA_S,
    "M": SEPMAMBA_M,
    "S-causal": dataclasses.replace(SEPMAMBA_S, causal=True),
    "M-causal": dataclasses.replace(SEPMAMBA_M, causal=True),
}


# ---------------------------------------------------------------------------
# weights


class ModelWeights:
    """Ordered registry of named tensors plus the config that shaped them."""

    def __init__(self, config: SeparatorConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def stage(self, prefix: str) -> dict[str, list[dict[str, Tensor]]]:
        n = self.config.blocks_per_stage // 2
        out: dict[str, list[dict[str, Tensor]]] = {}
        for branch in ("fwd", "bwd"):
            blocks = []
            for i in range(n):
                head = f"{prefix}.{branch}.{i}."
                blocks.append({k[len(head):]: t for k, t in self.tensors.items() if k.startswith(head)})
            out[branch] = blocks
        return out

    def astype(self, precision) -> "ModelWeights":
        dtype = nx.Precision.parse(precision).dtype
        return ModelWeights(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.items()})

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})


def param_shapes(config: SeparatorConfig) -> dict[str, tuple[int, ...]]:
    K, c = config.kernel_size, config
    shapes: dict[str, tuple[int, ...]] = {"stem.w": (c.dim(0), 1, K), "stem.b": (c.dim(0),)}

    def stage(prefix, level):
        bc = c.block_config(level)
        for branch in ("fwd", "bwd"):
            for i in range(c.blocks_per_stage // 2):
                for k, s in bc.param_shapes().items():
                    shapes[f"{prefix}.{branch}.{i}.{k}"] = s

    n = c.n_levels
    for l in range(n - 1):
        stage(f"enc{l}", l)
        shapes[f"down{l}.w"] = (c.dim(l + 1), c.dim(l), K)
        shapes[f"down{l}.b"] = (c.dim(l + 1),)
    stage("mid", n - 1)
    for l in reversed(range(n - 1)):
        shapes[f"up{l}.w"] = (c.dim(l + 1), c.dim(l), K)
        shapes[f"up{l}.b"] = (c.dim(l),)
        shapes[f"skip{l}.w"] = (c.dim(l), c.dim(l), 1)
        shapes[f"skip{l}.b"] = (c.dim(l),)
        stage(f"dec{l}", l)
    shapes["head.w"] = (c.dim(0), c.n_sources, K)
    shapes["head.b"] = (c.n_sources,)
    return shapes


def build(config: SeparatorConfig, seed: int = 0, precision="f32") -> ModelWeights:
    """Deterministically initialised weights for ``config``."""
    dtype = nx.Precision.parse(precision).dtype
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    arrays: dict[str, np.ndarray] = {}
    block_cache: dict[str, dict[str, np.ndarray]] = {}
    for name, shape in shapes.items():
        parts = name.split(".")
        if len(parts) == 4:  # stage.branch.index.key
            key = ".".join(parts[:3])
            if key not in block_cache:
                level = _stage_level(config, parts[0])
                block_cache[key] = init_block(config.block_config(level), rng, np.float64)
            arrays[name] = block_cache[key][parts[3]]
        elif name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] if not name.startswith(("up", "head")) else shape[0] * shape[2] // config.stride
            bound = np.sqrt(3.0 / max(1, fan_in))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(config, {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()})


def _stage_level(config: SeparatorConfig, prefix: str) -> int:
    if prefix == "mid":
        return config.n_levels - 1
    return int(prefix[3:])


def count_params(config: SeparatorConfig) -> int:
    """Closed-form parameter count (no allocation)."""
    c, K = config, config.kernel_size
    n = c.n_levels
    total = c.dim(0) * K + c.dim(0)
    for l in range(n - 1):
        d0, d1 = c.dim(l), c.dim(l + 1)
        total += 2 * (d0 * d1 * K) + d1 + d0  # down + up
        total += d0 * d0 + d0  # skip projection
    for _, level in c.stages():
        total += c.stack_config(level).count_params()
    total += c.dim(0) * c.n_sources * K + c.n_sources
    return total


# ---------------------------------------------------------------------------
# forward


def _as_waveform(mixture) -> Tensor:
    t = nx.as_tensor(mixture)
    if t.ndim == 1:
        t = nx.getitem(t, (None, slice(None))) if t.requires_grad else Tensor(t.data[None, :])
    if t.ndim != 2 or t.shape[0] != 1:
        raise ShapeError(f"mixture must be [1, L] or [L], got {t.shape}")
    return t


def forward(weights: ModelWeights, mixture, scan_method: str = "sequential") -> Tensor:
    """Separate ``mixture[1, L]`` into ``[n_sources, L]`` waveforms."""
    c = weights.config
    x = _as_waveform(mixture)
    L = x.shape[1]
    if L < c.kernel_size:
        raise ShapeError(f"input too short: {L} samples < kernel_size {c.kernel_size}")
    if x.dtype != weights.dtype:
        x = Tensor(x.data.astype(weights.dtype)) if not x.requires_grad else x
    pad = (-L) % c.frame
    if pad:
        x = nx.pad_time(x, 0, pad)
    w = weights
    s, dp, up = c.stride, c.down_padding, c.up_padding
    h = nx.relu(nx.conv1d(x, w["stem.w"], w["stem.b"], stride=s, padding=dp))
    skips = []
    n = c.n_levels
    for l in range(n - 1):
        h = bamba_forward(c.stack_config(l), w.stage(f"enc{l}"), h, scan_method)
        skips.append(h)
        h = nx.relu(nx.conv1d(h, w[f"down{l}.w"], w[f"down{l}.b"], stride=s, padding=dp))
    h = bamba_forward(c.stack_config(n - 1), w.stage("mid"), h, scan_method)
    for l in reversed(range(n - 1)):
        h = nx.relu(nx.conv_transpose1d(h, w[f"up{l}.w"], w[f"up{l}.b"], stride=s, padding=up))
        h = nx.add(h, nx.conv1d(skips[l], w[f"skip{l}.w"], w[f"skip{l}.b"]))
        h = bamba_forward(c.stack_config(l), w.stage(f"dec{l}"), h, scan_method)
    out = nx.conv_transpose1d(h, w["head.w"], w["head.b"], stride=s, padding=up)
    if pad:
        out = nx.pad_time(out, 0, -pad)
    return out


def _check_finite(out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericalError("separator output is not finite; inputs are expected at audio scale (|x| <= 1)")
    return out


def separate(weights: ModelWeights, mixture) -> np.ndarray:
    """Gradient-free :func:`forward` returning a numpy array.

    Raises :class:`NumericalError` rather than returning non-finite samples.
    """
    with nx.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        out = forward(weights, mixture).data
    return _check_finite(out)


def lookahead(config: SeparatorConfig) -> int | None:
    """Largest number of future samples any output sample depends on.

    In causal configurations output ``t`` depends on inputs up to the end of
    its ``frame``-sized block, ``frame * (t // frame + 1) - 1``, so the worst
    case (``t`` at a block start) is ``frame - 1``.  Non-causal
    configurations see the whole signal and return ``None``.
    """
    return config.frame - 1 if config.causal else None


def dependency_horizon(config: SeparatorConfig, t: int) -> int:
    """Last input index that can influence output ``t`` (causal configs)."""
    if not config.causal:
        raise ConfigError("dependency horizon is only bounded for causal configurations")
    f = config.frame
    return f * (t // f + 1) - 1


# ---------------------------------------------------------------------------
# streaming


class StreamState:
    """Buffers carried between streamed frames.

    ``buffers`` maps layer names to arrays: convolution left contexts,
    transposed-convolution overlap tails, Mamba conv tails and scan states.
    ``fingerprint`` ties the state to one configuration.
    """

    def __init__(self, fingerprint: str, buffers: dict[str, np.ndarray] | None = None):
        self.fingerprint = fingerprint
        self.buffers: dict[str, np.ndarray] = {} if buffers is None else buffers

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, __fingerprint__=np.array(self.fingerprint), **self.buffers)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StreamState":
        try:
            with np.load(io.BytesIO(blob), allow_pickle=False) as z:
                items = {k: z[k] for k in z.files}
        except (OSError, ValueError) as exc:
            raise DataError(f"corrupt stream state: {exc}") from None
        fp = str(items.pop("__fingerprint__"))
        return cls(fp, items)


def config_fingerprint(config: SeparatorConfig) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(config.to_dict().items()))


def _stream_conv(x, w, b, stride, state, key):
    K = w.shape[2]
    ctx = state.get(key)
    if ctx is None:
        ctx = np.zeros((x.shape[0], K - stride), dtype=x.dtype)
    xin = np.concatenate([ctx, x], axis=1)
    state[key] = xin[:, xin.shape[1] - (K - stride) :].copy()
    return nx.conv1d(Tensor(xin), w, b, stride=stride, padding="valid").data


def _stream_conv_transpose(x, w, b, stride, state, key):
    K = w.shape[2]
    full = nx.conv_transpose1d(Tensor(x), w, None, stride=stride, padding="valid").data
    tail = state.get(key)
    if tail is not None:
        full[:, : K - stride] += tail
    n_out = x.shape[1] * stride
    state[key] = full[:, n_out:].copy()
    return full[:, :n_out] + b.data[:, None]


def _stream_stage(config, weights, prefix, level, h, state):
    cfg = config.stack_config(level)
    stage = weights.stage(prefix)
    branches = []
    for branch in ("fwd", "bwd"):
        x = h
        for i, w in enumerate(stage[branch]):
            bstate = {k.rsplit(".", 1)[1]: v for k, v in state.items() if k.startswith(f"{prefix}.{branch}.{i}.")}
            x = mamba_block_step(cfg.block, w, x, bstate)
            for k, v in bstate.items():
                state[f"{prefix}.{branch}.{i}.{k}"] = v
        branches.append(x)
    return branches[0] + branches[1]


def forward_streaming(weights: ModelWeights, frame, carry: StreamState | None = None) -> tuple[np.ndarray, StreamState]:
    """Process one chunk of a causal model; returns ``(sources[n_src, F], carry)``.

    The chunk length must be a multiple of ``config.frame``; the returned
    carry is a new object, the one passed in is not modified.
    """
    c = weights.config
    if not c.causal:
        raise ConfigError("forward_streaming requires a causal configuration")
    if c.recombine_per_block:
        raise ConfigError("streaming does not support recombine_per_block")
    fp = config_fingerprint(c)
    if carry is None:
        carry = StreamState(fp)
    elif carry.fingerprint != fp:
        raise ConfigError("stream state belongs to a different configuration")
    x = np.asarray(frame.data if isinstance(frame, Tensor) else frame, dtype=weights.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] != 1 or x.shape[1] % c.frame:
        raise ShapeError(f"frame must be [1, F] with F a multiple of {c.frame}, got {x.shape}")
    state = {k: v.copy() for k, v in carry.buffers.items()}
    w, s = weights, c.stride
    with nx.no_grad():
        h = np.maximum(_stream_conv(x, w["stem.w"], w["stem.b"], s, state, "stem.ctx"), 0)
        skips = []
        n = c.n_levels
        for l in range(n - 1):
            h = _stream_stage(c, w, f"enc{l}", l, h, state)
            skips.append(h)
            h = np.maximum(_stream_conv(h, w[f"down{l}.w"], w[f"down{l}.b"], s, state, f"down{l}.ctx"), 0)
        h = _stream_stage(c, w, "mid", n - 1, h, state)
        for l in reversed(range(n - 1)):
            h = np.maximum(_stream_conv_transpose(h, w[f"up{l}.w"], w[f"up{l}.b"], s, state, f"up{l}.tail"), 0)
            h = h + nx.conv1d(Tensor(skips[l]), w[f"skip{l}.w"], w[f"skip{l}.b"]).data
            h = _stream_stage(c, w, f"dec{l}", l, h, state)
        out = _stream_conv_transpose(h, w["head.w"], w["head.b"], s, state, "head.tail")
    return _check_finite(out), StreamState(fp, state)


# ---------------------------------------------------------------------------
# compute accounting


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # conv, conv_t, mamba
    c_in: int
    c_out: int
    kernel: int
    length_in: int
    length_out: int
    macs: int
    params: int


def mamba_block_macs(cfg: MambaBlockConfig, length: int) -> int:
    """MACs of one block over ``length`` steps.

    Linear maps cost ``D_in * D_out`` per step, the depthwise conv
    ``E * d_conv``; the scan costs ``3 * E * N`` (discretise, update,
    read out) and the elementwise maps (softplus, two SiLUs, gate, direct
    term) one MAC per channel each.
    """
    d, E, N, R, K = cfg.d_model, cfg.d_inner, cfg.n_state, cfg.rank, cfg.d_conv
    linear = 2 * E * d + E * (R + 2 * N) + R * E + E * d
    per_step = linear + E * K + 3 * E * N + 5 * E
    return per_step * length


def layer_costs(config: SeparatorConfig, length: int) -> list[LayerCost]:
    """Per-layer cost table for an input of ``length`` samples (after padding)."""
    c, K, s = config, config.kernel_size, config.stride
    L = length + (-length) % c.frame
    out: list[LayerCost] = []
    lengths = [L // s ** (l + 1) for l in range(c.n_levels)]
    out.append(LayerCost("stem", "conv", 1, c.dim(0), K, L, lengths[0], c.dim(0) * K * lengths[0], c.dim(0) * K + c.dim(0)))

    def stage(prefix, level):
        cfg = c.stack_config(level)
        n = cfg.total_blocks
        Ll = lengths[level]
        out.append(LayerCost(prefix, "mamba", c.dim(level), c.dim(level), c.d_conv, Ll, Ll, n * mamba_block_macs(cfg.block, Ll), cfg.count_params()))

    n = c.n_levels
    for l in range(n - 1):
        stage(f"enc{l}", l)
        d0, d1 = c.dim(l), c.dim(l + 1)
        out.append(LayerCost(f"down{l}", "conv", d0, d1, K, lengths[l], lengths[l + 1], d0 * d1 * K * lengths[l + 1], d0 * d1 * K + d1))
    stage("mid", n - 1)
    for l in reversed(range(n - 1)):
        d0, d1 = c.dim(l), c.dim(l + 1)
        out.append(LayerCost(f"up{l}", "conv_t", d1, d0, K, lengths[l + 1], lengths[l], d1 * d0 * K * lengths[l + 1], d0 * d1 * K + d0))
        out.append(LayerCost(f"skip{l}", "conv", d0, d0, 1, lengths[l], lengths[l], d0 * d0 * lengths[l], d0 * d0 + d0))
        stage(f"dec{l}", l)
    out.append(LayerCost("head", "conv_t", c.dim(0), c.n_sources, K, lengths[0], L, c.dim(0) * c.n_sources * K * lengths[0], c.dim(0) * c.n_sources * K + c.n_sources))
    return out


def count_macs(config: SeparatorConfig, seconds: float = 1.0, sample_rate: int | None = None) -> int:
    """Analytic multiply-accumulates of one forward pass over ``seconds`` of audio.

    Convolutions cost ``C_in * C_out * K * L_out`` (transposed ones
    ``C_in * C_out * K * L_in``), Mamba blocks follow :func:`mamba_block_macs`.
    ReLU, additions and padding are free.
    """
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    sr = config.sample_rate if sample_rate is None else sample_rate
    length = int(round(seconds * sr))
    return sum(lc.macs for lc in layer_costs(config, length))
