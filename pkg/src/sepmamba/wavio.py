"""Minimal RIFF/WAVE reader and writer (PCM and IEEE float)."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
PCM16_SCALE = 32768.0


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise DataError(f"audio buffer must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio buffer contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


def wav_header(n_frames: int, sample_rate: int, encoding: str = "pcm16", channels: int = 1) -> bytes:
    """Canonical 44-byte header."""
    if encoding == "pcm16":
        fmt, width = WAVE_FORMAT_PCM, 2
    elif encoding == "float32":
        fmt, width = WAVE_FORMAT_IEEE_FLOAT, 4
    else:
        raise DataError(f"unsupported encoding {encoding!r} (use pcm16 or float32)")
    data_bytes = n_frames * channels * width
    return struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + data_bytes, b"WAVE",
        b"fmt ", 16, fmt, channels, sample_rate, sample_rate * channels * width, channels * width, 8 * width,
        b"data", data_bytes,
    )


def wav_write(path, buffer: AudioBuffer, encoding: str = "pcm16") -> None:
    x = np.asarray(buffer.samples, dtype=np.float64)
    if encoding == "pcm16":
        payload = np.clip(np.round(x * PCM16_SCALE), -32768, 32767).astype("<i2").tobytes()
    elif encoding == "float32":
        payload = np.asarray(buffer.samples, dtype="<f4").tobytes()
    else:
        raise DataError(f"unsupported encoding {encoding!r} (use pcm16 or float32)")
    Path(path).write_bytes(wav_header(len(x), int(buffer.sample_rate), encoding) + payload)


def _decode(raw: bytes, fmt: int, bits: int) -> np.ndarray:
    if fmt == WAVE_FORMAT_PCM:
        if bits == 8:
            return (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        if bits == 16:
            return np.frombuffer(raw, dtype="<i2") / PCM16_SCALE
        if bits == 24:
            b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            return v / float(1 << 23)
        if bits == 32:
            return np.frombuffer(raw, dtype="<i4") / float(1 << 31)
    if fmt == WAVE_FORMAT_IEEE_FLOAT:
        if bits == 32:
            return np.frombuffer(raw, dtype="<f4").copy()
        if bits == 64:
            return np.frombuffer(raw, dtype="<f8").copy()
    raise DataError(f"unsupported WAV codec: format tag {fmt:#06x}, {bits} bits per sample")


def wav_read(path) -> AudioBuffer:
    """Read a WAV file; multichannel input is averaged to mono with a warning."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise DataError(f"{path}: not a RIFF/WAVE file")
    pos, fmt_info, data = 12, None, None
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DataError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise DataError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt_info = struct.unpack_from("<HHIIHH", body, 0)
            if fmt_info[0] == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise DataError(f"{path}: extensible fmt chunk too short")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt_info = (sub,) + fmt_info[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt_info is None or data is None:
        raise DataError(f"{path}: missing fmt or data chunk")
    fmt, channels, rate, _, align, bits = fmt_info
    if channels < 1 or rate <= 0 or align != channels * ((bits + 7) // 8):
        raise DataError(f"{path}: inconsistent fmt chunk (channels={channels}, rate={rate}, align={align}, bits={bits})")
    usable = len(data) - len(data) % align
    x = _decode(data[:usable], fmt, bits).reshape(-1, channels)
    if channels > 1:
        warnings.warn(f"{path}: downmixing {channels} channels to mono", stacklevel=2)
        x = x.mean(axis=1)
    else:
        x = x[:, 0]
    if fmt == WAVE_FORMAT_IEEE_FLOAT and bits == 32 and channels == 1:
        return AudioBuffer(x.astype(np.float32), rate)
    return AudioBuffer(x.astype(np.float64), rate)
