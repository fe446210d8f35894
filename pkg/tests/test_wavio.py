import struct

import numpy as np
import pytest

from sepmamba.errors import DataError
from sepmamba.wavio import AudioBuffer, wav_header, wav_read, wav_write


def test_float32_round_trip_is_bit_identical(tmp_path, rng):
    x = rng.uniform(-1.5, 1.5, 1234).astype(np.float32)
    wav_write(tmp_path / "f.wav", AudioBuffer(x, 8000), "float32")
    y = wav_read(tmp_path / "f.wav")
    assert y.samples.dtype == np.float32 and y.samples.tobytes() == x.tobytes()
    assert y.sample_rate == 8000


def test_pcm16_error_within_one_lsb(tmp_path, rng):
    x = rng.uniform(-1.0, 32767 / 32768, 5000)
    wav_write(tmp_path / "p.wav", AudioBuffer(x, 16000))
    assert np.max(np.abs(wav_read(tmp_path / "p.wav").samples - x)) <= 1 / 32768


def test_pcm16_clips_out_of_range(tmp_path):
    wav_write(tmp_path / "c.wav", AudioBuffer(np.array([2.0, -2.0]), 8000))
    np.testing.assert_array_equal(wav_read(tmp_path / "c.wav").samples, [32767 / 32768, -1.0])


@pytest.mark.parametrize("encoding,fmt,width", [("pcm16", 1, 2), ("float32", 3, 4)])
def test_header_layout(encoding, fmt, width):
    h = wav_header(100, 8000, encoding)
    assert len(h) == 44
    assert h[0:4] == b"RIFF" and h[8:12] == b"WAVE" and h[12:16] == b"fmt " and h[36:40] == b"data"
    riff_size, = struct.unpack("<I", h[4:8])
    fmt_size, tag, ch, rate, byte_rate, align, bits = struct.unpack("<IHHIIHH", h[16:36])
    data_size, = struct.unpack("<I", h[40:44])
    assert (fmt_size, tag, ch, rate) == (16, fmt, 1, 8000)
    assert (byte_rate, align, bits) == (8000 * width, width, 8 * width)
    assert data_size == 100 * width and riff_size == 36 + data_size


def _wav_bytes(tag, channels, rate, bits, payload, fmt_extra=b""):
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits) + fmt_extra
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_stereo_downmixed_with_warning(tmp_path):
    frames = np.array([[1000, 3000], [-2000, 0]], dtype="<i2")
    (tmp_path / "s.wav").write_bytes(_wav_bytes(1, 2, 8000, 16, frames.tobytes()))
    with pytest.warns(UserWarning, match="downmixing"):
        y = wav_read(tmp_path / "s.wav")
    np.testing.assert_allclose(y.samples, [2000 / 32768, -1000 / 32768])


def test_pcm24_and_float64_decoded(tmp_path):
    v = np.array([1 << 22, -(1 << 22)])
    raw = b"".join(int(s & 0xFFFFFF).to_bytes(3, "little") for s in v)
    (tmp_path / "a.wav").write_bytes(_wav_bytes(1, 1, 8000, 24, raw))
    np.testing.assert_array_equal(wav_read(tmp_path / "a.wav").samples, [0.5, -0.5])
    (tmp_path / "b.wav").write_bytes(_wav_bytes(3, 1, 8000, 64, np.array([0.25, -0.125]).tobytes()))
    np.testing.assert_array_equal(wav_read(tmp_path / "b.wav").samples, [0.25, -0.125])


def test_odd_chunk_padding_skipped(tmp_path):
    blob = bytearray(_wav_bytes(1, 1, 8000, 16, np.array([5], "<i2").tobytes()))
    junk = b"LIST" + struct.pack("<I", 3) + b"abc\x00"
    blob[12:12] = junk
    (tmp_path / "j.wav").write_bytes(bytes(blob))
    assert wav_read(tmp_path / "j.wav").samples.tolist() == [5 / 32768]


@pytest.mark.parametrize(
    "blob,needle",
    [
        (b"RIFX\x00\x00\x00\x00WAVE", "RIFF/WAVE"),
        (b"RIFF\x04\x00\x00\x00WAVE", "missing"),
        (_wav_bytes(2, 1, 8000, 16, b"\x00\x00"), "unsupported WAV codec"),
        (_wav_bytes(1, 1, 8000, 16, b"\x00\x00")[:-1], "truncated"),
    ],
)
def test_malformed_files(tmp_path, blob, needle):
    (tmp_path / "bad.wav").write_bytes(blob)
    with pytest.raises(DataError, match=needle):
        wav_read(tmp_path / "bad.wav")


def test_inconsistent_block_align(tmp_path):
    blob = bytearray(_wav_bytes(1, 1, 8000, 16, b"\x00\x00"))
    struct.pack_into("<H", blob, 32, 4)
    (tmp_path / "x.wav").write_bytes(bytes(blob))
    with pytest.raises(DataError, match="inconsistent"):
        wav_read(tmp_path / "x.wav")


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        wav_read(tmp_path / "none.wav")


def test_unknown_encoding(tmp_path):
    with pytest.raises(DataError):
        wav_write(tmp_path / "u.wav", AudioBuffer(np.zeros(3), 8000), "mp3")


@pytest.mark.parametrize("samples,rate", [(np.zeros((2, 2)), 8000), (np.zeros(3), 0), (np.array([np.nan]), 8000)])
def test_buffer_validation(samples, rate):
    with pytest.raises(DataError):
        AudioBuffer(samples, rate)
