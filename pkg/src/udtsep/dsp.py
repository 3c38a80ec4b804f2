"""STFT analysis/synthesis, magnitude compression and WAV I/O."""

from __future__ import annotations

import os
import tempfile
import wave
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WaveClip",
    "StftConfig",
    "MagSpectrogram",
    "PhaseSpectrogram",
    "hann",
    "stft",
    "istft",
    "compress",
    "decompress",
    "reconstruct_waveform",
    "read_wav",
    "write_wav",
    "POWER",
]

POWER = 0.7


@dataclass
class WaveClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.samples.size == 0:
            raise ValueError("WaveClip must be non-empty")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop: int = 16
    fft_size: int = 2048
    kept_bins: int = 1024

    def __post_init__(self):
        if self.hop < 1 or self.hop > self.window_size:
            raise ValueError("hop must be in [1, window_size]")
        if self.window_size > self.fft_size:
            raise ValueError("window_size must not exceed fft_size")
        if not 1 <= self.kept_bins <= self.fft_size // 2 + 1:
            raise ValueError("kept_bins must be in [1, fft_size/2 + 1]")

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1

    def to_dict(self) -> dict:
        return {"window_size": self.window_size, "hop": self.hop,
                "fft_size": self.fft_size, "kept_bins": self.kept_bins}


@dataclass
class MagSpectrogram:
    """Magnitudes, ``(frames, kept_bins)``. ``compressed`` means values are mag**0.7."""

    values: np.ndarray
    compressed: bool = False
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("magnitudes must be non-negative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PhaseSpectrogram:
    """Phase angles on the kept-bin grid.

    ``residual`` holds the complex STFT values of the bins that were not kept
    (just the Nyquist bin under the default config), so that an analysed
    signal can be resynthesized exactly. It is None for phases that do not
    come straight from :func:`stft`.
    """

    angles: np.ndarray
    residual: np.ndarray | None = None

    @property
    def shape(self):
        return self.angles.shape


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _window(cfg: StftConfig) -> np.ndarray:
    w = np.zeros(cfg.fft_size)
    off = (cfg.fft_size - cfg.window_size) // 2
    w[off:off + cfg.window_size] = hann(cfg.window_size)
    return w


def _complex_stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    pad = cfg.fft_size // 2
    xp = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    n_frames = cfg.n_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[::cfg.hop][:n_frames]
    return np.fft.rfft(frames * _window(cfg), axis=1)


def stft(x: WaveClip | np.ndarray, cfg: StftConfig | None = None) -> tuple[MagSpectrogram, PhaseSpectrogram]:
    """Centered (reflection-padded) STFT; ``len // hop + 1`` frames."""
    cfg = cfg or StftConfig()
    samples = x.samples if isinstance(x, WaveClip) else np.asarray(x, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("stft of an empty signal")
    spec = _complex_stft(samples, cfg)
    kept = spec[:, :cfg.kept_bins]
    residual = spec[:, cfg.kept_bins:] if cfg.kept_bins < spec.shape[1] else None
    return (MagSpectrogram(np.abs(kept), False, cfg),
            PhaseSpectrogram(np.angle(kept), residual))


def istft(mag: MagSpectrogram, phase: PhaseSpectrogram, out_len: int, sample_rate: int = 16000) -> WaveClip:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``out_len``.

    Bins beyond ``kept_bins`` come from ``phase.residual`` when present and
    are zero otherwise.
    """
    if mag.compressed:
        raise ValueError("istft expects uncompressed magnitudes")
    if mag.values.shape != phase.angles.shape:
        raise ValueError(f"magnitude grid {mag.values.shape} does not match phase grid {phase.angles.shape}")
    cfg = mag.config
    n_frames = mag.values.shape[0]
    n_bins = cfg.fft_size // 2 + 1
    spec = np.zeros((n_frames, n_bins), dtype=np.complex128)
    spec[:, :cfg.kept_bins] = mag.values * np.exp(1j * phase.angles)
    if phase.residual is not None:
        if phase.residual.shape != (n_frames, n_bins - cfg.kept_bins):
            raise ValueError("phase residual does not match the STFT grid")
        spec[:, cfg.kept_bins:] = phase.residual

    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * win
    total = (n_frames - 1) * cfg.hop + cfg.fft_size
    y = np.zeros(total)
    norm = np.zeros(total)
    w2 = win * win
    for i in range(n_frames):
        s = i * cfg.hop
        y[s:s + cfg.fft_size] += frames[i]
        norm[s:s + cfg.fft_size] += w2
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    pad = cfg.fft_size // 2
    y = y[pad:pad + out_len]
    if y.size < out_len:
        y = np.pad(y, (0, out_len - y.size))
    return WaveClip(y, sample_rate)


def compress(mag: MagSpectrogram) -> MagSpectrogram:
    if mag.compressed:
        raise ValueError("spectrogram is already compressed")
    if np.any(mag.values < 0):
        raise ValueError("cannot compress negative magnitudes")
    return MagSpectrogram(np.power(mag.values, POWER), True, mag.config)


def decompress(mag: MagSpectrogram) -> MagSpectrogram:
    if not mag.compressed:
        raise ValueError("spectrogram is not compressed")
    if np.any(mag.values < 0):
        raise ValueError("cannot decompress negative magnitudes")
    return MagSpectrogram(np.power(mag.values, 1.0 / POWER), False, mag.config)


def reconstruct_waveform(est: MagSpectrogram, mixture_phase: PhaseSpectrogram, out_len: int,
                         sample_rate: int = 16000) -> WaveClip:
    """Undo compression, attach the mixture phase and invert.

    The dropped high bins are left at zero; the estimate carries no
    information about them.
    """
    if not est.compressed:
        raise ValueError("reconstruct_waveform expects a compressed estimate")
    mag = decompress(est)
    return istft(mag, PhaseSpectrogram(mixture_phase.angles), out_len, sample_rate)


# WAV I/O --------------------------------------------------------------------

def read_wav(path) -> WaveClip:
    """Read mono 16-bit PCM; samples scaled by 1/32768."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return WaveClip(data, sr)


def write_wav(path, clip: WaveClip) -> None:
    """Write mono 16-bit PCM atomically (temp file + rename)."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(int(clip.sample_rate))
            f.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
