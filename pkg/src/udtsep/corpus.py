"""Corpus scanning, clip sampling, 0 dB mixing and batch construction.

On-disk layout of a corpus root::

    <root>/mixture-stems/target/**.wav       target-class stems used in mixtures
    <root>/mixture-stems/interferer/**.wav   interfering stems used in mixtures
    <root>/clean-target/**.wav               unrelated clean examples of the target class
    <root>/mixtures/**.wav                   optional premixed mixtures (no stems)

Mixtures built from stems can be used both unpaired and paired (the target
stem is the ground truth). A corpus that only has premixed mixtures supports
unpaired training only.
"""

from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import StftConfig, WaveClip, compress, read_wav, stft, write_wav
from .tensor import SeededRng

__all__ = [
    "CorpusEntry",
    "CorpusIndex",
    "MixturePool",
    "MixRecipe",
    "MixResult",
    "Batch",
    "ToyConfig",
    "scan_corpus",
    "load_corpus",
    "sample_clip",
    "mix_at_0db",
    "make_batch",
    "write_recipes",
    "synth_toy_corpus",
    "MIX_DOMAIN",
    "CLEAN_DOMAIN",
]

MIX_DOMAIN = "mixture-source-pool"
CLEAN_DOMAIN = "clean-target-pool"


@dataclass
class CorpusEntry:
    path: str
    n_samples: int
    sample_rate: int
    speaker: str
    uid: str

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class CorpusIndex:
    domain: str
    entries: list[CorpusEntry]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, i: int) -> WaveClip:
        if i not in self._cache:
            self._cache[i] = read_wav(self.entries[i].path)
        return self._cache[i]


def scan_corpus(root, domain: str) -> CorpusIndex:
    """Recursively index the WAV files under ``root`` in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".wav")
    if not paths:
        raise ValueError(f"no WAV files found under {root}")
    entries = []
    for p in paths:
        try:
            with wave.open(str(p), "rb") as f:
                n, sr = f.getnframes(), f.getframerate()
                if f.getnchannels() != 1 or f.getsampwidth() != 2:
                    raise ValueError("not mono 16-bit PCM")
        except Exception as exc:
            raise ValueError(f"unreadable audio file {p}: {exc}") from exc
        rel = p.relative_to(root).as_posix()
        entries.append(CorpusEntry(str(p), n, sr, p.parent.name, f"{domain}:{rel}"))
    return CorpusIndex(domain, entries)


@dataclass
class MixturePool:
    """Source of mixtures: stem pools, or premixed files only."""

    targets: CorpusIndex | None = None
    interferers: CorpusIndex | None = None
    premixed: CorpusIndex | None = None

    @property
    def has_stems(self) -> bool:
        return self.targets is not None and self.interferers is not None


def load_corpus(root) -> tuple[MixturePool, CorpusIndex | None]:
    """Index a corpus root laid out as described in the module docstring."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    stems = root / "mixture-stems"
    pool = MixturePool()
    if (stems / "target").is_dir() and (stems / "interferer").is_dir():
        pool.targets = scan_corpus(stems / "target", MIX_DOMAIN)
        pool.interferers = scan_corpus(stems / "interferer", MIX_DOMAIN)
    if (root / "mixtures").is_dir():
        pool.premixed = scan_corpus(root / "mixtures", MIX_DOMAIN)
    if not pool.has_stems and pool.premixed is None:
        raise ValueError(f"{root}: no mixture-stems/{{target,interferer}} or mixtures/ directory")
    clean = scan_corpus(root / "clean-target", CLEAN_DOMAIN) if (root / "clean-target").is_dir() else None
    return pool, clean


def _sample_with_source(index: CorpusIndex, rng: SeededRng, clip_len: float):
    sr = index.entries[0].sample_rate
    n = int(round(clip_len * sr))
    ok = [i for i, e in enumerate(index.entries) if e.n_samples >= n]
    if not ok:
        raise ValueError(f"no entry in {index.domain} is at least {clip_len} s long")
    i = ok[int(rng.integers(0, len(ok)))]
    e = index.entries[i]
    offset = int(rng.integers(0, e.n_samples - n + 1))
    clip = index.load(i)
    return WaveClip(clip.samples[offset:offset + n].copy(), clip.sample_rate), e, offset


def sample_clip(index: CorpusIndex, rng: SeededRng, clip_len: float = 2.0) -> WaveClip:
    """Uniformly random entry and offset; exactly ``clip_len * sample_rate`` samples."""
    return _sample_with_source(index, rng, clip_len)[0]


@dataclass
class MixResult:
    mixture: WaveClip
    target: WaveClip
    interferer: WaveClip
    gain: float
    peak_scale: float = 1.0


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def mix_at_0db(target: WaveClip, interferer: WaveClip) -> MixResult:
    """Scale the interferer to the target's RMS and add.

    If the mixture would clip, mixture and both stems are divided by the same
    peak factor, which keeps the 0 dB ratio and the reference alignment.
    """
    t, i = target.samples, interferer.samples
    if t.size != i.size:
        raise ValueError(f"stem lengths differ: {t.size} vs {i.size}")
    rt, ri = _rms(t), _rms(i)
    if rt == 0.0 or ri == 0.0:
        raise ValueError("cannot mix a silent stem")
    gain = rt / ri
    scaled = gain * i
    mix = t + scaled
    peak = float(np.max(np.abs(mix)))
    scale = 1.0
    if peak > 1.0:
        scale = peak
        mix, t, scaled = mix / peak, t / peak, scaled / peak
    sr = target.sample_rate
    return MixResult(WaveClip(mix, sr), WaveClip(t, sr), WaveClip(scaled, sr), gain, scale)


@dataclass
class MixRecipe:
    target: str
    target_offset: int
    interferer: str
    interferer_offset: int
    gain: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_recipes(path, recipes) -> None:
    with open(path, "a") as f:
        for r in recipes:
            f.write(r.to_json() + "\n")


@dataclass
class Batch:
    """Compressed magnitude tensors shaped ``(B, bins, T)``.

    ``mixture_phase``, ``clean_phase`` and the waveforms are only kept in
    paired mode.
    """

    mixture: np.ndarray
    clean: np.ndarray
    paired: bool
    mixture_ids: list[list[str]]
    clean_ids: list[str]
    recipes: list[MixRecipe] = field(default_factory=list)
    mixture_phase: list | None = None
    clean_phase: list | None = None
    mixture_wave: list[WaveClip] | None = None
    target_wave: list[WaveClip] | None = None
    interferer_wave: list[WaveClip] | None = None


def _compressed(clip: WaveClip, cfg: StftConfig):
    mag, phase = stft(clip, cfg)
    return compress(mag).values.T, phase  # (bins, frames)


def _crop(arrs, frames: int | None, rng: SeededRng):
    total = arrs[0].shape[-1]
    if frames is None or frames >= total:
        return arrs
    s = int(rng.integers(0, total - frames + 1))
    return [a[..., s:s + frames] for a in arrs]


def make_batch(
    pool: MixturePool,
    clean: CorpusIndex | None,
    batch_size: int,
    mode: str,
    rng: SeededRng,
    cfg: StftConfig | None = None,
    clip_len: float = 2.0,
    crop_frames: int | None = None,
    dtype=np.float32,
) -> Batch:
    """Draw a batch of mixture and clean spectrograms.

    ``mode="unpaired"``: mixtures from the mixture pool, clean clips drawn
    independently from the clean pool. ``mode="paired"``: clean item i is the
    target stem of mixture i. Spectrograms may be randomly cropped in time to
    ``crop_frames`` (the same crop is used for a mixture and its pair).
    """
    cfg = cfg or StftConfig()
    if mode not in ("unpaired", "paired"):
        raise ValueError(f"unknown batch mode {mode!r}")
    if mode == "paired" and not pool.has_stems:
        raise ValueError("paired batches need mixture stems; this corpus only has premixed mixtures")
    if mode == "unpaired" and (clean is None or len(clean) == 0):
        raise ValueError("unpaired batches need a clean-target pool")

    mixes, cleans, mix_ids, clean_ids, recipes = [], [], [], [], []
    m_ph, c_ph, m_w, t_w, i_w = [], [], [], [], []
    for _ in range(batch_size):
        if pool.has_stems:
            seed = int(rng.integers(0, 2**31 - 1))
            sub = SeededRng(seed)
            tclip, te, toff = _sample_with_source(pool.targets, sub, clip_len)
            iclip, ie, ioff = _sample_with_source(pool.interferers, sub, clip_len)
            mixed = mix_at_0db(tclip, iclip)
            recipes.append(MixRecipe(te.path, toff, ie.path, ioff, mixed.gain, seed))
            mix_ids.append([te.uid, ie.uid])
            mclip = mixed.mixture
        else:
            mclip, me, _ = _sample_with_source(pool.premixed, rng, clip_len)
            mix_ids.append([me.uid])
        m, mp = _compressed(mclip, cfg)
        if mode == "paired":
            c, cp = _compressed(mixed.target, cfg)
            m, c = _crop([m, c], crop_frames, rng)
            clean_ids.append(te.uid)
            m_ph.append(mp)
            c_ph.append(cp)
            m_w.append(mixed.mixture)
            t_w.append(mixed.target)
            i_w.append(mixed.interferer)
        else:
            (m,) = _crop([m], crop_frames, rng)
            cclip, ce, _ = _sample_with_source(clean, rng, clip_len)
            c, _ = _compressed(cclip, cfg)
            (c,) = _crop([c], crop_frames, rng)
            clean_ids.append(ce.uid)
        mixes.append(m)
        cleans.append(c)

    batch = Batch(np.stack(mixes).astype(dtype), np.stack(cleans).astype(dtype),
                  mode == "paired", mix_ids, clean_ids, recipes)
    if mode == "paired":
        batch.mixture_phase, batch.clean_phase = m_ph, c_ph
        batch.mixture_wave, batch.target_wave, batch.interferer_wave = m_w, t_w, i_w
    return batch


# toy corpus -------------------------------------------------------------------

@dataclass
class ToyConfig:
    sample_rate: int = 16000
    duration: float = 3.0
    f0_range: tuple[float, float] = (200.0, 400.0)
    max_harmonic_hz: float = 3800.0
    peak: float = 0.5


def _smooth_envelope(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Syllable-like gating: a few Hann-shaped notes separated by short gaps."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.15) * sr)
    while pos < n:
        length = int(rng.uniform(0.25, 0.6) * sr)
        seg = np.hanning(length) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n, pos + length)
        env[pos:end] = seg[:end - pos]
        pos = end + int(rng.uniform(0.03, 0.15) * sr)
    return env


def _harmonic_clip(cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(round(cfg.duration * cfg.sample_rate))
    sr = cfg.sample_rate
    t = np.arange(n) / sr
    env = _smooth_envelope(n, sr, rng)
    # piecewise f0 contour: a new random pitch every 0.3-0.6 s, smoothed
    f0 = np.empty(n)
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.3, 0.6) * sr)
        f0[pos:pos + length] = rng.uniform(*cfg.f0_range)
        pos += length
    k = max(1, int(0.02 * sr))
    f0 = np.convolve(np.pad(f0, k, mode="edge"), np.ones(2 * k + 1) / (2 * k + 1), mode="same")[k:-k]
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    x = np.zeros(n)
    rolloff = rng.uniform(0.8, 1.4)
    for h in range(1, int(cfg.max_harmonic_hz / cfg.f0_range[0]) + 1):
        active = (h * f0) < cfg.max_harmonic_hz
        x += active * np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h ** rolloff
    x *= env * (1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
    return x


def _noise_burst_clip(cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(round(cfg.duration * cfg.sample_rate))
    sr = cfg.sample_rate
    x = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    while pos < n:
        length = int(rng.uniform(0.1, 0.5) * sr)
        end = min(n, pos + length)
        lo = rng.uniform(300.0, 5000.0)
        hi = min(lo * rng.uniform(1.5, 3.0), 0.45 * sr)
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
        burst = signal.sosfilt(sos, rng.standard_normal(end - pos + 256))[256:]
        burst *= np.hanning(end - pos) ** 0.5 * rng.uniform(0.5, 1.0)
        burst /= max(np.std(burst), 1e-12)
        x[pos:end] += burst
        pos = end + int(rng.uniform(0.0, 0.2) * sr)
    return x


def _normalize(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x))
    return x * (peak / m) if m > 0 else x


POOLS = (
    ("clean-target", "target"),
    ("mixture-stems/target", "target"),
    ("mixture-stems/interferer", "interferer"),
)


def synth_toy_corpus(out_dir, n_per_pool: int, cfg: ToyConfig | None = None, seed: int = 0) -> dict[str, int]:
    """Write a synthetic corpus with the standard layout.

    Target-class clips are harmonic tones (f0 in 200-400 Hz, harmonics below
    3.8 kHz) with syllable-like envelopes; interferer-class clips are
    band-pass noise bursts. Each file is generated from its own seed derived
    from ``(seed, pool, index)``, so output is byte-identical across runs.
    """
    cfg = cfg or ToyConfig()
    out = Path(out_dir)
    counts = {}
    for pool_no, (sub, kind) in enumerate(POOLS):
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_pool):
            rng = np.random.default_rng([seed, pool_no, i])
            x = _harmonic_clip(cfg, rng) if kind == "target" else _noise_burst_clip(cfg, rng)
            write_wav(d / f"{kind}_{i:04d}.wav", WaveClip(_normalize(x, cfg.peak), cfg.sample_rate))
        counts[sub] = n_per_pool
    return counts
