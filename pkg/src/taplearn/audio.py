"""Streaming audio front-end: ring buffer, 4 kHz decimation, log-mel features.

The model consumes the most recent 15 seconds of audio, downsampled to
4 kHz and rendered as a Z-score-normalized log-mel spectrogram. All
functions here are pure except AudioRing, which supports one writer and
one reader handing off consistent snapshots.
"""

from __future__ import annotations

import threading
import wave
from dataclasses import dataclass

import numpy as np

from taplearn.errors import ConfigError, ValidationError

MODEL_RATE = 4000
WINDOW_SECONDS = 15.0
MODEL_WINDOW_SAMPLES = int(WINDOW_SECONDS * MODEL_RATE)  # 60_000

SUPPORTED_SOURCE_RATES = (4000, 16000)

# Anti-alias FIR for the 16 kHz -> 4 kHz path.
LOWPASS_TAPS = 63
LOWPASS_CUTOFF_HZ = 1900.0


def design_lowpass(
    n_taps: int = LOWPASS_TAPS,
    cutoff_hz: float = LOWPASS_CUTOFF_HZ,
    rate: int = 16000,
) -> np.ndarray:
    """Hamming-windowed sinc low-pass with unit DC gain."""
    if n_taps % 2 == 0:
        raise ConfigError("low-pass tap count must be odd")
    mid = (n_taps - 1) // 2
    n = np.arange(n_taps) - mid
    fc = cutoff_hz / rate
    h = 2.0 * fc * np.sinc(2.0 * fc * n)
    h *= np.hamming(n_taps)
    return h / h.sum()


_LOWPASS_16K = design_lowpass()


def downsample_16k_to_4k(x: np.ndarray) -> np.ndarray:
    """Low-pass then 4:1 decimation, centered FIR, zero-padded edges.

    Output sample n equals sum_k h[k] * x[4n + delay - k] with
    delay = (taps - 1) / 2, so a slice of a longer stream and the
    stream itself decimate identically away from the edges.
    """
    x = np.asarray(x, dtype=np.float64)
    delay = (LOWPASS_TAPS - 1) // 2
    full = np.convolve(x, _LOWPASS_16K, mode="full")
    out = full[delay::4]
    n_out = len(x) // 4
    return out[:n_out]


@dataclass
class AudioWindow:
    """Exactly 15 s of mono audio at the 4 kHz model rate."""

    samples: np.ndarray
    duration: float = WINDOW_SECONDS

    def __post_init__(self):
        if len(self.samples) != MODEL_WINDOW_SAMPLES:
            raise ValidationError(
                f"window must hold {MODEL_WINDOW_SAMPLES} samples, "
                f"got {len(self.samples)}"
            )


class AudioRing:
    """Rolling 15 s buffer of source-rate PCM with zero pre-padding.

    One producer may push while one consumer reads; each read sees a
    consistent snapshot. Positions never written read back as 0.0, i.e.
    silence before the session started.
    """

    def __init__(self, source_rate: int = 16000):
        if source_rate not in SUPPORTED_SOURCE_RATES:
            raise ConfigError(
                f"source rate must be one of {SUPPORTED_SOURCE_RATES}, got {source_rate}"
            )
        self.source_rate = source_rate
        self.capacity = int(WINDOW_SECONDS * source_rate)
        self._buf = np.zeros(self.capacity, dtype=np.float64)
        self._write_head = 0
        self.total_written = 0
        self._lock = threading.Lock()

    def push_frame(self, frame: np.ndarray, rate: int | None = None) -> "AudioRing":
        """Append a PCM chunk; oldest samples beyond capacity drop off."""
        if rate is not None and rate != self.source_rate:
            raise ValidationError(
                f"frame rate {rate} does not match ring rate {self.source_rate}"
            )
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 1:
            raise ValidationError("frames must be mono 1-D arrays")
        if not np.all(np.isfinite(frame)):
            raise ValidationError("frame contains non-finite samples")
        with self._lock:
            n = len(frame)
            if n >= self.capacity:
                self._buf[:] = frame[-self.capacity :]
                self._write_head = 0
            else:
                head = self._write_head
                first = min(n, self.capacity - head)
                self._buf[head : head + first] = frame[:first]
                if first < n:
                    self._buf[: n - first] = frame[first:]
                self._write_head = (head + n) % self.capacity
            self.total_written += n
        return self

    def read_source_window(self) -> np.ndarray:
        """The last 15 s at the source rate, oldest sample first."""
        with self._lock:
            head = self._write_head
            out = np.concatenate([self._buf[head:], self._buf[:head]])
        return out

    def read_window(self) -> AudioWindow:
        """The last 15 s at 4 kHz; 16 kHz sources are decimated 4:1."""
        raw = self.read_source_window()
        if self.source_rate == MODEL_RATE:
            return AudioWindow(raw)
        return AudioWindow(downsample_16k_to_4k(raw))


@dataclass
class MelConfig:
    """Log-mel front-end settings, all in 4 kHz model-rate samples."""

    n_mels: int = 64
    fft_size: int = 128
    win_length: int = 100
    hop_length: int = 40
    fmin: float = 20.0
    fmax: float = 2000.0
    log_floor: float = 1e-10

    def validate(self) -> "MelConfig":
        if self.fmax > MODEL_RATE / 2:
            raise ConfigError(f"fmax {self.fmax} exceeds Nyquist {MODEL_RATE / 2}")
        if not (0 <= self.fmin < self.fmax):
            raise ConfigError("need 0 <= fmin < fmax")
        if not (self.hop_length <= self.win_length <= self.fft_size):
            raise ConfigError("need hop_length <= win_length <= fft_size")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise ConfigError("n_mels must be >= 1 and log_floor > 0")
        return self

    @property
    def frame_rate(self) -> float:
        return MODEL_RATE / self.hop_length

    def n_frames(self, n_samples: int = MODEL_WINDOW_SAMPLES) -> int:
        return 1 + (n_samples - self.win_length) // self.hop_length


@dataclass
class FeatureMatrix:
    """2-D feature array, mel bins by time frames."""

    values: np.ndarray
    frame_rate: float = MODEL_RATE / 40

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filters evaluated over the rFFT bin grid.

    Triangle weights are integrated over each bin's support interval
    rather than point-sampled at bin centers; with only fft_size/2+1
    bins available, point sampling would leave the narrowest low-band
    triangles empty.
    """
    n_bins = cfg.fft_size // 2 + 1
    bin_width = MODEL_RATE / cfg.fft_size
    edges_hz = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    )
    fb = np.zeros((cfg.n_mels, n_bins))
    grid = 16  # sub-samples per bin for the triangle integral
    for b in range(n_bins):
        lo = (b - 0.5) * bin_width
        hi = (b + 0.5) * bin_width
        f = np.linspace(lo, hi, grid)
        for m in range(cfg.n_mels):
            left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
            up = (f - left) / max(center - left, 1e-12)
            down = (right - f) / max(right - center, 1e-12)
            tri = np.clip(np.minimum(up, down), 0.0, None)
            fb[m, b] = tri.mean()
    return fb


class MelExtractor:
    """Caches the filterbank and analysis window for repeated extraction."""

    def __init__(self, cfg: MelConfig | None = None):
        self.cfg = (cfg or MelConfig()).validate()
        self.filterbank = mel_filterbank(self.cfg)
        self.analysis_window = np.hanning(self.cfg.win_length)

    def log_mel(self, window: AudioWindow) -> FeatureMatrix:
        cfg = self.cfg
        x = np.asarray(window.samples, dtype=np.float64)
        frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[
            :: cfg.hop_length
        ]
        frames = frames * self.analysis_window
        spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
        power = np.abs(spec) ** 2
        mel = self.filterbank @ power.T
        values = np.log(np.maximum(mel, cfg.log_floor))
        return FeatureMatrix(values, frame_rate=cfg.frame_rate)

    def features(self, window: AudioWindow) -> FeatureMatrix:
        """Normalized log-mel: the model-ready representation."""
        return zscore(self.log_mel(window))


def log_mel(window: AudioWindow, cfg: MelConfig | None = None) -> FeatureMatrix:
    return MelExtractor(cfg).log_mel(window)


def zscore(m: FeatureMatrix) -> FeatureMatrix:
    """Normalize jointly over all entries; constant input maps to zeros."""
    v = np.asarray(m.values, dtype=np.float64)
    mean = v.mean()
    std = v.std()
    if std < 1e-12 * (1.0 + abs(mean)):
        return FeatureMatrix(np.zeros_like(v), frame_rate=m.frame_rate)
    return FeatureMatrix((v - mean) / std, frame_rate=m.frame_rate)


def pcm16_bytes_to_float(raw: bytes) -> np.ndarray:
    """16-bit little-endian mono PCM -> float in [-1, 1]."""
    ints = np.frombuffer(raw, dtype="<i2")
    return ints.astype(np.float64) / 32768.0


def float_to_pcm16_bytes(x: np.ndarray) -> bytes:
    clipped = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return (np.round(clipped * 32767.0).astype("<i2")).tobytes()


def read_wav_mono(path) -> tuple[int, np.ndarray]:
    """Read a mono 16-bit WAV fixture; returns (rate, float samples)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValidationError(f"{path}: expected mono audio")
        if wf.getsampwidth() != 2:
            raise ValidationError(f"{path}: expected 16-bit PCM")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    return rate, pcm16_bytes_to_float(raw)


def write_wav_mono(path, rate: int, samples: np.ndarray) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(float_to_pcm16_bytes(samples))
