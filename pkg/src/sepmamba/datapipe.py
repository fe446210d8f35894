"""Synthetic sources, speed perturbation and on-the-fly mixing.

Every item is a pure function of integers (dataset seed, epoch, index), so a
training run can be resumed or replayed exactly and items can be generated
ahead of time on a worker thread.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DataError
from .wavio import AudioBuffer, wav_read

SOURCE_KINDS = ("harmonic", "noise", "chirp")
SNR_RANGE = (-2.5, 2.5)
SPEED_RANGE = (0.95, 1.05)

SINC_HALF_TAPS = 32
KAISER_BETA = 8.0


# ---------------------------------------------------------------------------
# resampling


def _sinc_interp(x: np.ndarray, positions: np.ndarray, cutoff: float) -> np.ndarray:
    """Evaluate band-limited ``x`` at fractional ``positions`` (zero outside)."""
    W = SINC_HALF_TAPS
    base = np.floor(positions).astype(np.int64)
    k = base[:, None] + np.arange(-W + 1, W + 1)[None, :]
    d = positions[:, None] - k
    win = np.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (d / W) ** 2, 0.0, None))) / np.i0(KAISER_BETA)
    taps = cutoff * np.sinc(cutoff * d) * win
    valid = (k >= 0) & (k < x.shape[0])
    vals = np.where(valid, x[np.clip(k, 0, x.shape[0] - 1)], 0.0)
    return np.einsum("ij,ij->i", taps, vals)


def _resample_by(x: np.ndarray, step: float, n_out: int, chunk: int = 8192) -> np.ndarray:
    cutoff = min(1.0, 1.0 / step)
    out = np.empty(n_out)
    for lo in range(0, n_out, chunk):
        hi = min(n_out, lo + chunk)
        out[lo:hi] = _sinc_interp(x, np.arange(lo, hi) * step, cutoff)
    return out


def speed_perturb(x: AudioBuffer, factor: float) -> AudioBuffer:
    """Play ``x`` at ``factor`` times the speed (pitch and tempo both shift)."""
    if not 0.5 < factor < 2.0:
        raise DataError(f"speed factor must be in (0.5, 2), got {factor}")
    src = np.asarray(x.samples, dtype=np.float64)
    n_out = int(round(len(src) / factor))
    return AudioBuffer(_resample_by(src, factor, n_out), x.sample_rate)


def resample(x: AudioBuffer, sample_rate: int) -> AudioBuffer:
    if sample_rate == x.sample_rate:
        return x
    step = x.sample_rate / sample_rate
    n_out = int(round(len(x) / step))
    return AudioBuffer(_resample_by(np.asarray(x.samples, dtype=np.float64), step, n_out), sample_rate)


# ---------------------------------------------------------------------------
# synthetic sources


def _smooth_noise(rng: np.random.Generator, n: int, sample_rate: int, rate_hz: float) -> np.ndarray:
    """Zero-mean, unit-scale random curve varying at roughly ``rate_hz``."""
    n_knots = max(2, int(math.ceil(n / sample_rate * rate_hz)) + 2)
    knots = rng.standard_normal(n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def _envelope(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    syll = rng.uniform(3.0, 6.0)
    t = np.arange(n) / sample_rate
    env = 0.5 * (1 - np.cos(2 * np.pi * syll * t + rng.uniform(0, 2 * np.pi)))
    return (0.25 + env) * np.exp(0.3 * _smooth_noise(rng, n, sample_rate, 2.0))


def _harmonic(rng, n, sr):
    f0 = rng.uniform(80.0, 300.0)
    track = f0 * (1 + 0.03 * _smooth_noise(rng, n, sr, 4.0)) * (1 + 0.01 * rng.standard_normal(n))
    phase = 2 * np.pi * np.cumsum(track) / sr
    tilt = rng.uniform(0.6, 1.2)
    x = np.zeros(n)
    for k in range(1, int(0.45 * sr / f0) + 1):
        x += k**-tilt * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return x * _envelope(rng, n, sr)


def _noise(rng, n, sr):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    centre = rng.uniform(200.0, 0.35 * sr)
    width = rng.uniform(100.0, 0.15 * sr)
    spec *= np.exp(-0.5 * ((freqs - centre) / width) ** 2)
    return np.fft.irfft(spec, n) * _envelope(rng, n, sr)


def _chirp(rng, n, sr):
    f1, f2 = rng.uniform(100.0, 0.4 * sr, size=2)
    t = np.arange(n) / sr
    dur = max(t[-1], 1.0 / sr)
    phase = 2 * np.pi * (f1 * t + 0.5 * (f2 - f1) * t**2 / dur)
    return (np.sin(phase) + 0.3 * np.sin(2 * phase + rng.uniform(0, 2 * np.pi))) * _envelope(rng, n, sr)


_SYNTHS = {"harmonic": _harmonic, "noise": _noise, "chirp": _chirp}


def synth_source(kind: str, duration_s: float, sample_rate: int, seed: int) -> AudioBuffer:
    """Deterministic speech-like test signal with unit RMS."""
    if kind not in _SYNTHS:
        raise DataError(f"unknown source kind {kind!r}; expected one of {SOURCE_KINDS}")
    if duration_s <= 0:
        raise DataError(f"duration must be positive, got {duration_s}")
    n = max(1, int(round(duration_s * sample_rate)))
    x = _SYNTHS[kind](np.random.default_rng(seed), n, sample_rate)
    rms = math.sqrt(float(np.mean(x * x)))
    if rms == 0.0:
        raise DataError(f"synthesised {kind} source is silent")
    return AudioBuffer(x / rms, sample_rate)


# ---------------------------------------------------------------------------
# mixing


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    speed_factors: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = SNR_RANGE
        if not lo <= self.snr_db <= hi:
            raise DataError(f"snr_db {self.snr_db} outside [{lo}, {hi}]")
        if len(self.speed_factors) != 2:
            raise DataError("speed_factors must be a pair")
        for f in self.speed_factors:
            if not SPEED_RANGE[0] <= f <= SPEED_RANGE[1]:
                raise DataError(f"speed factor {f} outside {list(SPEED_RANGE)}")

    @classmethod
    def sample(cls, rng: np.random.Generator, perturb: bool = True, snr_range=SNR_RANGE, speed_range=SPEED_RANGE) -> "MixSpec":
        snr = float(rng.uniform(*snr_range))
        speeds = tuple(float(v) for v in rng.uniform(*speed_range, size=2)) if perturb else (1.0, 1.0)
        return cls(snr, speeds, int(rng.integers(0, 2**31 - 1)))


def active_power(x: np.ndarray) -> float:
    """Mean-removed power, the quantity the SNR is defined over."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean()
    return float(np.mean(c * c))


def measured_snr(ref_a: np.ndarray, ref_b: np.ndarray) -> float:
    return 10.0 * math.log10(active_power(ref_a) / active_power(ref_b))


def dynamic_mix(src_a: AudioBuffer, src_b: AudioBuffer, spec: MixSpec, dtype=np.float64, peak: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Speed-perturb, truncate to the shorter source, scale ``b`` to the target SNR.

    With ``peak`` set, both references are scaled by one common factor so
    that the mixture peaks at ``peak`` (full scale is 1.0).  Returns
    ``(mixture, ref_a, ref_b)`` with ``mixture == ref_a + ref_b`` exactly in
    ``dtype``.
    """
    if src_a.sample_rate != src_b.sample_rate:
        raise DataError(f"sample rates differ: {src_a.sample_rate} vs {src_b.sample_rate}")
    a = speed_perturb(src_a, spec.speed_factors[0]).samples if spec.speed_factors[0] != 1.0 else np.asarray(src_a.samples, np.float64)
    b = speed_perturb(src_b, spec.speed_factors[1]).samples if spec.speed_factors[1] != 1.0 else np.asarray(src_b.samples, np.float64)
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    pa, pb = active_power(a), active_power(b)
    if pa == 0.0 or pb == 0.0:
        raise DataError("cannot mix a silent source")
    g = math.sqrt(pa / (pb * 10.0 ** (spec.snr_db / 10.0)))
    c = 1.0
    if peak is not None:
        if peak <= 0:
            raise DataError(f"peak level must be positive, got {peak}")
        c = peak / float(np.max(np.abs(a + g * b)))
    ref_a = (c * a).astype(dtype)
    ref_b = ((c * g) * b).astype(dtype)
    return ref_a + ref_b, ref_a, ref_b


# ---------------------------------------------------------------------------
# manifests and datasets


@dataclass(frozen=True)
class ManifestEntry:
    seed: int
    duration_s: float
    kind_a: str
    kind_b: str

    def to_line(self) -> str:
        return f"{self.seed}\t{self.duration_s:g}\t{self.kind_a}\t{self.kind_b}"


def parse_manifest(text: str, origin: str = "<manifest>") -> list[ManifestEntry]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{origin}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            entry = ManifestEntry(int(parts[0]), float(parts[1]), parts[2], parts[3])
        except ValueError as exc:
            raise DataError(f"{origin}:{lineno}: {exc}") from exc
        if entry.duration_s <= 0:
            raise DataError(f"{origin}:{lineno}: duration must be positive")
        for kind in (entry.kind_a, entry.kind_b):
            if kind not in SOURCE_KINDS and not kind.endswith(".wav"):
                raise DataError(f"{origin}:{lineno}: unknown source kind {kind!r}")
        out.append(entry)
    return out


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, str(path))


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    Path(path).write_text("".join(e.to_line() + "\n" for e in entries))


def synthetic_manifest(n: int, duration_s: float = 1.0, seed: int = 0) -> list[ManifestEntry]:
    rng = np.random.default_rng(seed)
    kinds = list(SOURCE_KINDS)
    return [
        ManifestEntry(int(rng.integers(0, 2**31 - 1)), duration_s, kinds[int(rng.integers(3))], kinds[int(rng.integers(3))])
        for _ in range(n)
    ]


def load_source(kind: str, duration_s: float, sample_rate: int, seed: int) -> AudioBuffer:
    """Synthetic kind, or a path to a WAV file (cropped to ``duration_s``)."""
    if kind.endswith(".wav"):
        buf = wav_read(kind)
        if buf.sample_rate != sample_rate:
            buf = resample(buf, sample_rate)
        n = int(round(duration_s * sample_rate))
        return AudioBuffer(np.asarray(buf.samples[:n], np.float64), sample_rate)
    return synth_source(kind, duration_s, sample_rate, seed)


@dataclass(frozen=True)
class MixItem:
    index: int
    spec: MixSpec
    mixture: np.ndarray
    references: np.ndarray  # (2, L)


@dataclass
class MixDataset:
    """Mixtures drawn from a manifest.

    With ``dynamic=True`` item ``i`` of ``epoch`` pairs source ``a`` of one
    randomly chosen entry with source ``b`` of another, and samples a fresh
    :class:`MixSpec`.  With ``dynamic=False`` item ``i`` is entry
    ``i mod n`` mixed with a spec fixed by that entry's seed.  Mixtures are
    peak-normalised to ``peak_level`` unless it is ``None``.
    """

    entries: list[ManifestEntry]
    sample_rate: int = 8000
    seed: int = 0
    dynamic: bool = True
    perturb: bool = True
    dtype: type = np.float64
    steps_per_epoch: int | None = None
    snr_range: tuple[float, float] = SNR_RANGE
    speed_range: tuple[float, float] = SPEED_RANGE
    peak_level: float | None = 0.9
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise DataError("dataset manifest is empty")
        for (lo, hi), (blo, bhi), what in ((self.snr_range, SNR_RANGE, "snr"), (self.speed_range, SPEED_RANGE, "speed")):
            if not blo <= lo <= hi <= bhi:
                raise DataError(f"{what} range [{lo}, {hi}] must lie within [{blo}, {bhi}]")

    def __len__(self) -> int:
        return len(self.entries)

    def spec_for(self, index: int, epoch: int = 0) -> tuple[MixSpec, ManifestEntry, ManifestEntry]:
        if self.dynamic:
            rng = np.random.default_rng([self.seed, epoch, index])
            ea = self.entries[int(rng.integers(len(self.entries)))]
            eb = self.entries[int(rng.integers(len(self.entries)))]
            return MixSpec.sample(rng, self.perturb, self.snr_range, self.speed_range), ea, eb
        e = self.entries[index % len(self.entries)]
        rng = np.random.default_rng([self.seed, e.seed])
        return MixSpec.sample(rng, self.perturb, self.snr_range, self.speed_range), e, e

    def item(self, index: int, epoch: int = 0) -> MixItem:
        if not self.dynamic and index % len(self.entries) in self._cache:
            return self._cache[index % len(self.entries)]
        spec, ea, eb = self.spec_for(index, epoch)
        dur = min(ea.duration_s, eb.duration_s)
        a = load_source(ea.kind_a, dur, self.sample_rate, 2 * ea.seed)
        b = load_source(eb.kind_b, dur, self.sample_rate, 2 * eb.seed + 1)
        mix, ra, rb = dynamic_mix(a, b, spec, self.dtype, self.peak_level)
        item = MixItem(index, spec, mix, np.stack([ra, rb]))
        if not self.dynamic:
            self._cache[index % len(self.entries)] = item
        return item

    def at_step(self, step: int) -> MixItem:
        """Item consumed at global training ``step`` (1-based)."""
        per = self.steps_per_epoch or len(self.entries)
        return self.item((step - 1) % per, (step - 1) // per)


class Prefetcher:
    """Generate ``fn(i)`` for ``i`` in ``[start, stop)`` on a worker thread.

    At most ``depth`` items are held ahead of the consumer; they come out in
    index order regardless of timing.
    """

    _DONE = object()

    def __init__(self, fn: Callable[[int], object], start: int, stop: int, depth: int = 4):
        if depth < 1:
            raise ValueError("prefetch depth must be >= 1")
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._fn, self._start, self._end = fn, start, stop
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        try:
            for i in range(self._start, self._end):
                item = self._fn(i)
                while not self._stop.is_set():
                    try:
                        self._q.put((i, item), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            self._q.put((None, exc))
            return
        self._q.put((None, self._DONE))

    def __iter__(self) -> Iterator:
        while True:
            i, item = self._q.get()
            if item is self._DONE:
                return
            if i is None:
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        try:
            while True:
                self._q.get_nowait()
        except queue.Empty:
            pass
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
