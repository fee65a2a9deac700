"""WAV/LPCM decoding and short-time framing.

This is the only module that ever holds raw samples. Everything downstream
works on frame matrices or on the derived feature vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FRAME_LEN_S = 0.025
HOP_S = 0.010

_PCM = 0x0001
_EXTENSIBLE = 0xFFFE


class AudioError(ValueError):
    """Base class for audio decoding errors."""


class WavDecodeError(AudioError):
    def __init__(self, chunk: str, message: str):
        super().__init__(f"{chunk!r} chunk: {message}")
        self.chunk = chunk


class UnsupportedFormatError(AudioError):
    pass


class EmptyAudioError(AudioError):
    pass


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono LPCM audio with samples normalized to [-1, 1].

    ``source_channels`` records how many channels the container held before
    the mean down-mix; ``channels`` is always 1.
    """

    samples: np.ndarray
    sample_rate: int
    bit_depth: int = 16
    source_channels: int = 1
    _released: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if arr.size and (np.abs(arr) > 1.0).any():
            raise AudioError("samples must lie in [-1, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def channels(self) -> int:
        return 1

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def released(self) -> bool:
        return self._released

    def release(self) -> bool:
        """Zero the sample buffer and drop it.

        Returns True when every sample of the old buffer reads as zero after
        the wipe, which is what deletion audits check.
        """
        buf = self.samples
        if self._released:
            return True
        buf.setflags(write=True)
        buf.fill(0.0)
        wiped = not buf.any()
        empty = np.zeros(0)
        empty.setflags(write=False)
        object.__setattr__(self, "samples", empty)
        object.__setattr__(self, "_released", True)
        return wiped

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.bit_depth == other.bit_depth
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True)
class FrameSeries:
    frame_len_s: float
    hop_s: float
    sample_rate: int
    frames: np.ndarray  # (n_frames, frame_len) after windowing
    frame_times: np.ndarray  # centre of each frame, seconds

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def frame_len(self) -> int:
        return int(self.frames.shape[1])

    @property
    def hop(self) -> int:
        return frame_samples(self.hop_s, self.sample_rate)


def frame_samples(seconds: float, sample_rate: int) -> int:
    return max(1, int(round(seconds * sample_rate)))


def _read_chunks(data: bytes):
    if len(data) < 12:
        raise WavDecodeError("RIFF", f"header truncated ({len(data)} bytes)")
    riff, riff_size, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF":
        raise WavDecodeError("RIFF", f"bad magic {riff!r}")
    if wave != b"WAVE":
        raise WavDecodeError("RIFF", f"form type is {wave!r}, expected b'WAVE'")
    end = min(len(data), 8 + riff_size)
    pos = 12
    chunks = {}
    while pos + 8 <= end:
        cid, size = struct.unpack_from("<4sI", data, pos)
        name = cid.decode("latin-1")
        body = pos + 8
        if body + size > len(data):
            raise WavDecodeError(name, f"declares {size} bytes but only {len(data) - body} remain")
        chunks.setdefault(name, data[body:body + size])
        pos = body + size + (size & 1)
    return chunks


def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE PCM byte string into a mono clip.

    Integer samples are scaled by ``2**(bits-1)`` (32768 for 16-bit), and
    multi-channel audio is averaged to mono.
    """
    chunks = _read_chunks(bytes(data))
    fmt = chunks.get("fmt ")
    if fmt is None:
        raise WavDecodeError("fmt ", "missing")
    if len(fmt) < 16:
        raise WavDecodeError("fmt ", f"too short ({len(fmt)} bytes)")
    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise WavDecodeError("fmt ", "extensible format without sub-format GUID")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if tag != _PCM:
        raise UnsupportedFormatError(f"format tag 0x{tag:04x} is not integer PCM")
    if channels < 1:
        raise WavDecodeError("fmt ", "zero channels")
    if rate < 1:
        raise WavDecodeError("fmt ", "zero sample rate")
    if bits not in (8, 16, 24, 32):
        raise UnsupportedFormatError(f"{bits}-bit PCM is not supported")
    width = bits // 8
    if block_align != width * channels:
        raise WavDecodeError("fmt ", f"block_align {block_align} inconsistent with {channels}x{bits}-bit")

    payload = chunks.get("data")
    if payload is None:
        raise WavDecodeError("data", "missing")
    n_frames = len(payload) // block_align
    if n_frames == 0:
        raise EmptyAudioError("data chunk holds no complete sample frames")
    raw = payload[: n_frames * block_align]

    if bits == 8:
        ints = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0
    elif bits == 16:
        ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(v >= 1 << 23, v - (1 << 24), v).astype(np.float64)
    else:
        ints = np.frombuffer(raw, dtype="<i4").astype(np.float64)
    scaled = ints.reshape(n_frames, channels) / float(1 << (bits - 1))
    mono = scaled.mean(axis=1) if channels > 1 else scaled[:, 0]
    return AudioClip(mono, sample_rate=int(rate), bit_depth=int(bits), source_channels=int(channels))


def quantize16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def encode_wav(samples, sample_rate: int | None = None, channels: int = 1) -> bytes:
    """Encode samples (or an :class:`AudioClip`) as 16-bit PCM WAV.

    ``samples`` is 1-D for mono or (n, channels) for interleaved audio.
    """
    if isinstance(samples, AudioClip):
        sample_rate, samples = samples.sample_rate, samples.samples
    if sample_rate is None:
        raise ValueError("sample_rate is required for raw samples")
    pcm = quantize16(samples)
    if pcm.ndim == 2:
        channels = pcm.shape[1]
    body = pcm.tobytes()
    block_align = 2 * channels
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(body), b"WAVE",
        b"fmt ", 16, _PCM, channels, sample_rate, sample_rate * block_align, block_align, 16,
        b"data", len(body),
    )
    return header + body


def read_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def write_wav(path, samples, sample_rate: int) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(samples, sample_rate))


def frame(clip: AudioClip, frame_len_s: float = FRAME_LEN_S, hop_s: float = HOP_S,
          window: str = "rectangular") -> FrameSeries:
    """Cut ``clip`` into overlapping frames.

    A clip shorter than one frame yields an empty series.
    """
    if frame_len_s <= 0 or hop_s <= 0:
        raise ValueError("frame_len_s and hop_s must be positive")
    sr = clip.sample_rate
    n = frame_samples(frame_len_s, sr)
    hop = frame_samples(hop_s, sr)
    x = clip.samples
    count = (x.size - n) // hop + 1 if x.size >= n else 0
    if count == 0:
        return FrameSeries(frame_len_s, hop_s, sr, np.zeros((0, n)), np.zeros(0))
    starts = np.arange(count) * hop
    frames = x[starts[:, None] + np.arange(n)[None, :]]
    if window == "hann":
        frames = frames * hann(n)
    elif window != "rectangular":
        raise ValueError(f"unknown window {window!r}")
    times = (starts + n / 2.0) / sr
    return FrameSeries(frame_len_s, hop_s, sr, frames, times)


def hann(n: int) -> np.ndarray:
    # symmetric Hann so that time-reversed frames see the same taper
    return np.hanning(n)
