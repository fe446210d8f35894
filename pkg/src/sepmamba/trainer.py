"""AdamW training loop with clipping, plateau-triggered decay and resumable state."""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import objective
from .checkpoint import load_checkpoint, save_checkpoint
from .datapipe import MixDataset, Prefetcher
from .errors import ConfigError, DataError, NumericalError
from .numerics import Tensor
from .separator import ModelWeights, SeparatorConfig, build, forward, separate

DECAY_POLICIES = ("plateau", "manual")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 15e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    gamma: float = 0.98
    decay_start_policy: str = "plateau"
    decay_start_epoch: int = 0
    plateau_window: int = 5
    plateau_delta: float = 0.1
    steps_per_epoch: int = 1000
    batch_size: int = 1
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 1000
    clamp_db: float = 30.0
    precision: str = "f32"
    prefetch: int = 4
    deterministic: bool = False

    def __post_init__(self):
        for name in ("lr", "beta2", "adam_eps", "clip_norm", "gamma", "steps_per_epoch", "batch_size", "plateau_window", "checkpoint_every", "clamp_db", "prefetch"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.gamma > 1:
            raise ConfigError(f"gamma must be <= 1, got {self.gamma}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.decay_start_policy not in DECAY_POLICIES:
            raise ConfigError(f"decay_start_policy must be one of {DECAY_POLICIES}, got {self.decay_start_policy!r}")
        nx.Precision.parse(self.precision)

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        from .separator import _coerce

        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(v, type(getattr(cls, k)), k) for k, v in d.items()})


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, t: int, arrays: dict[str, np.ndarray]) -> "AdamState":
        m = {k[6:]: a.copy() for k, a in arrays.items() if k.startswith("opt.m.")}
        v = {k[6:]: a.copy() for k, a in arrays.items() if k.startswith("opt.v.")}
        return cls(t, m, v)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr_current: float = 15e-5
    decay_start: int | None = None
    epoch_loss_sum: float = 0.0
    epoch_loss_count: int = 0
    epoch_losses: list[float] = field(default_factory=list)  # ring buffer of recent epoch means
    data_seed: int = 0
    adam: AdamState = field(default_factory=AdamState)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "lr_current": self.lr_current,
            "decay_start": self.decay_start,
            "epoch_loss_sum": self.epoch_loss_sum,
            "epoch_loss_count": self.epoch_loss_count,
            "epoch_losses": list(self.epoch_losses),
            "data_seed": self.data_seed,
            "adam_t": self.adam.t,
        }

    @classmethod
    def from_dict(cls, d: dict, optimizer: dict[str, np.ndarray]) -> "TrainState":
        try:
            return cls(
                step=int(d["step"]),
                epoch=int(d["epoch"]),
                lr_current=float(d["lr_current"]),
                decay_start=None if d["decay_start"] is None else int(d["decay_start"]),
                epoch_loss_sum=float(d["epoch_loss_sum"]),
                epoch_loss_count=int(d["epoch_loss_count"]),
                epoch_losses=[float(x) for x in d["epoch_losses"]],
                data_seed=int(d["data_seed"]),
                adam=AdamState.from_arrays(int(d["adam_t"]), optimizer),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"checkpoint train section incomplete: {exc}") from exc


# ---------------------------------------------------------------------------
# optimizer pieces


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradients in {len(bad)} tensor(s), first: {bad[:5]}")


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig, lr: float | None = None) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    _check_finite(grads)
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.data.dtype, copy=False)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Rescale in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def lr_schedule(state: TrainState, cfg: TrainConfig) -> float:
    if state.decay_start is None:
        return cfg.lr
    return cfg.lr * cfg.gamma ** max(0, state.epoch - state.decay_start)


def plateaued(epoch_losses: list[float], window: int, delta: float) -> bool:
    """True when the last ``window`` epochs improved on the one before them by < ``delta``."""
    if len(epoch_losses) < window + 1:
        return False
    before = epoch_losses[-window - 1]
    recent = float(np.mean(epoch_losses[-window:]))
    return before - recent < delta


def end_epoch(state: TrainState, cfg: TrainConfig) -> None:
    mean = state.epoch_loss_sum / max(1, state.epoch_loss_count)
    state.epoch_losses = (state.epoch_losses + [mean])[-(cfg.plateau_window + 1) :]
    state.epoch_loss_sum, state.epoch_loss_count = 0.0, 0
    state.epoch += 1
    if state.decay_start is None:
        if cfg.decay_start_policy == "manual":
            if state.epoch >= cfg.decay_start_epoch:
                state.decay_start = cfg.decay_start_epoch
        elif plateaued(state.epoch_losses, cfg.plateau_window, cfg.plateau_delta):
            state.decay_start = state.epoch


# ---------------------------------------------------------------------------
# loop


def loss_and_grads(weights: ModelWeights, mixture: np.ndarray, references: np.ndarray, clamp_db: float = 30.0) -> tuple[float, dict[str, np.ndarray]]:
    dtype = weights.dtype
    weights.zero_grad()
    est = forward(weights, mixture.astype(dtype)[None, :])
    loss, _ = objective.upit_loss(est, references.astype(dtype), clamp_db=clamp_db)
    value = float(loss.item())
    if not math.isfinite(value):
        nx.reset_tape()
        return value, {}
    nx.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in weights.items()}
    return value, grads


def evaluate(weights: ModelWeights, items) -> list[float]:
    """SI-SDR improvement of each item's separation."""
    out = []
    for it in items:
        est = separate(weights, it.mixture.astype(weights.dtype)[None, :])
        out.append(objective.si_sdr_improvement(est, it.references, it.mixture))
    return out


@dataclass
class TrainResult:
    state: TrainState
    weights: ModelWeights
    out_dir: Path
    losses: list[float]


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:08d}.sepm"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt_*.sepm"))
    return found[-1] if found else None


def _save(out_dir: Path, weights: ModelWeights, state: TrainState, tcfg: TrainConfig, name: Path | None = None) -> Path:
    path = name or checkpoint_path(out_dir, state.step)
    train = state.to_dict()
    train["train_config"] = tcfg.to_dict()
    save_checkpoint(path, weights, train, state.adam.to_arrays())
    return path


def _trim_metrics(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines(keepends=True) if ln.strip() and int(ln.split("\t", 1)[0]) <= last_step]
    path.write_text("".join(keep))


def train(
    model_cfg: SeparatorConfig,
    train_cfg: TrainConfig,
    dataset: MixDataset,
    out_dir,
    resume: str | Path | None = None,
    log=None,
) -> TrainResult:
    """Run ``train_cfg.max_steps`` optimisation steps in total (counting resumed ones).

    Each step draws ``dataset.at_step``, runs forward, uPIT loss, backward,
    clipping and AdamW; one tab-separated line per step goes to
    ``out_dir/metrics.tsv``.  A NaN loss writes ``nan_abort.sepm`` and raises
    :class:`NumericalError`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = out_dir / "metrics.tsv"
    if train_cfg.batch_size > 1:
        warnings.warn("batch_size > 1 is experimental", stacklevel=2)

    if resume is not None:
        ck = load_checkpoint(resume)
        weights = ck.weights.astype(train_cfg.precision)
        if ck.config != model_cfg:
            raise ConfigError("checkpoint model config differs from the requested one")
        state = TrainState.from_dict(ck.train, ck.optimizer)
        _trim_metrics(metrics, state.step)
    else:
        weights = build(model_cfg, seed=train_cfg.seed, precision=train_cfg.precision)
        state = TrainState(lr_current=train_cfg.lr, data_seed=dataset.seed)
        metrics.write_text("")
        _save(out_dir, weights, state, train_cfg)
    if state.data_seed != dataset.seed:
        raise ConfigError(f"dataset seed {dataset.seed} differs from checkpointed seed {state.data_seed}")

    losses: list[float] = []
    start, stop = state.step + 1, train_cfg.max_steps + 1
    B = train_cfg.batch_size

    def fetch(step):
        return [dataset.at_step((step - 1) * B + j + 1) for j in range(B)]

    with Prefetcher(fetch, start, stop, train_cfg.prefetch) as items, open(metrics, "a") as mf:
        for step, batch in zip(range(start, stop), items):
            t0 = time.perf_counter()
            lr = lr_schedule(state, train_cfg)
            grads: dict[str, np.ndarray] = {}
            loss_sum = 0.0
            for it in batch:
                value, g = loss_and_grads(weights, it.mixture, it.references, train_cfg.clamp_db)
                if not math.isfinite(value):
                    state.step = step - 1
                    _save(out_dir, weights, state, train_cfg, out_dir / "nan_abort.sepm")
                    raise NumericalError(f"non-finite loss at step {step}; state saved to {out_dir / 'nan_abort.sepm'}")
                loss_sum += value
                for k, a in g.items():
                    grads[k] = a / B if k not in grads else grads[k] + a / B
            loss = loss_sum / B
            gnorm = clip_grad_norm(grads, train_cfg.clip_norm)
            try:
                adamw_step(weights.tensors, grads, state.adam, train_cfg, lr)
            except NumericalError:
                state.step = step - 1
                _save(out_dir, weights, state, train_cfg, out_dir / "nan_abort.sepm")
                raise
            state.step = step
            state.lr_current = lr
            state.epoch_loss_sum += loss
            state.epoch_loss_count += 1
            if step % train_cfg.steps_per_epoch == 0:
                end_epoch(state, train_cfg)
            wall = 0.0 if train_cfg.deterministic else (time.perf_counter() - t0) * 1e3
            mf.write(f"{step}\t{loss:.9g}\t{gnorm:.9g}\t{lr:.9g}\t{wall:.3f}\n")
            mf.flush()
            losses.append(loss)
            if log is not None:
                log(step, loss, gnorm, lr)
            if step % train_cfg.checkpoint_every == 0 or step == train_cfg.max_steps:
                _save(out_dir, weights, state, train_cfg)
    return TrainResult(state, weights, out_dir, losses)


def read_metrics(path) -> list[tuple[int, float, float, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            s, l, g, r, w = line.split("\t")
            rows.append((int(s), float(l), float(g), float(r), float(w)))
    return rows
