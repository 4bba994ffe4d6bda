"""Binaural dataset synthesis.

Clean mono speech is spatialised with head-related impulse responses, a
diffuse noise field is built from uncorrelated sources every 5 degrees in
azimuth, and the two are mixed at a target mean (left/right) SNR.

Azimuth convention: degrees in [-180, 180], 0 straight ahead, positive
towards the right ear. For positive azimuths the right ear leads and the
left ear is shadowed.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import signal

from .dsp import BinauralWaveform, read_wav, write_wav

log = logging.getLogger(__name__)

HEAD_RADIUS = 0.0875
SPEED_OF_SOUND = 343.0
HRIR_LENGTH = 256
HRIR_BULK_DELAY = 32
SSN_TAPS = 512
MIN_SSN_REFERENCE_S = 60.0
DISTANCES = (0.8, 3.0)
MANIFEST_VERSION = 1


# -- synthetic speech ---------------------------------------------------------

_VOWELS = np.array([
    # F1, F2, F3 (Hz)
    [730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480], [660, 1720, 2410],
    [300, 870, 2240], [640, 1190, 2390], [490, 1350, 1690], [400, 2000, 2550],
])


def _resonator(freq: float, bw: float, fs: int):
    r = math.exp(-math.pi * bw / fs)
    theta = 2 * math.pi * freq / fs
    a = [1.0, -2 * r * math.cos(theta), r * r]
    return [sum(a)], a  # unity gain at DC


def synth_speech(duration: float, sample_rate: int = 16000, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Speech-like test signal: voiced and fricative syllables at ~4 Hz.

    Voiced syllables are glottal pulse trains with a drifting pitch through a
    three-formant cascade; unvoiced ones are high-passed noise bursts. Gaps
    between syllables sit about 25 dB down instead of going silent, so every
    frame keeps some energy. RMS is normalised to 0.05.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    t = 0
    while t < n:
        length = int(rng.uniform(0.12, 0.28) * sample_rate)
        gap = int(rng.uniform(0.01, 0.06) * sample_rate)
        seg = np.arange(length)
        if rng.random() < 0.8:
            f0 = rng.uniform(90, 230) * (1 + 0.15 * np.linspace(-1, 1, length) * rng.uniform(-1, 1))
            phase = np.cumsum(f0 / sample_rate)
            pulses = np.diff(np.floor(phase), prepend=0.0) + 0.02 * rng.standard_normal(length)
            src = signal.lfilter([1.0], [1.0, -0.95], pulses)  # glottal roll-off
            formants = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.1, 3)
            for f, bw in zip(formants, (80, 110, 160)):
                b, a = _resonator(f, bw, sample_rate)
                src = signal.lfilter(b, a, src)
        else:
            b, a = signal.butter(2, rng.uniform(2500, 4500) / (sample_rate / 2), "high")
            src = signal.lfilter(b, a, rng.standard_normal(length)) * 0.3
        env = np.sin(np.pi * (seg + 0.5) / length) ** 0.7
        piece = src * env * rng.uniform(0.4, 1.0) / (np.std(src) + 1e-12)
        end = min(n, t + length)
        out[t:end] += piece[: end - t]
        t += length + gap
    b, a = signal.butter(2, 60 / (sample_rate / 2), "high")
    out = signal.lfilter(b, a, out)
    floor = np.std(out) * 10 ** (-25 / 20)
    out = out + floor * signal.lfilter([1.0], [1.0, -0.9], rng.standard_normal(n)) * math.sqrt(1 - 0.81)
    return out * (0.05 / np.sqrt(np.mean(out**2)))


def synthetic_corpus(count: int, duration: float, sample_rate: int = 16000, seed: int = 0) -> list[np.ndarray]:
    return [synth_speech(duration, sample_rate, np.random.default_rng([seed, i])) for i in range(count)]


# -- HRIRs ------------------------------------------------------------------------

@dataclass
class Hrir:
    azimuth: float
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError("HRIR left/right lengths differ")
        if not (np.isfinite(self.left).all() and np.isfinite(self.right).all()):
            raise ValueError("HRIR contains non-finite taps")


def woodworth_itd(azimuth_deg: float, radius: float = HEAD_RADIUS, c: float = SPEED_OF_SOUND) -> float:
    """Interaural time difference in seconds; positive when the left ear lags."""
    lateral = math.asin(math.sin(math.radians(azimuth_deg)))
    return radius / c * (lateral + math.sin(lateral))


def _fractional_delay(delay: float, length: int) -> np.ndarray:
    n = np.arange(length)
    h = np.sinc(n - delay)
    # Hann taper centred on the delay; exact delta for integer delays
    width = min(delay, length - 1 - delay, 24.0)
    taper = np.where(np.abs(n - delay) < width, 0.5 + 0.5 * np.cos(np.pi * (n - delay) / width), 0.0)
    if float(delay).is_integer():
        return (n == delay).astype(float)
    return h * taper


def _shadow(x: np.ndarray, alpha: float, fs: int, radius: float, c: float) -> np.ndarray:
    """First-order head-shadow filter (1 + j alpha w/2w0) / (1 + j w/2w0), w0 = c/a."""
    w0 = c / radius
    b, a = signal.bilinear([alpha / (2 * w0), 1.0], [1 / (2 * w0), 1.0], fs)
    return signal.lfilter(b, a, x)


def synth_hrir(azimuth: float, sample_rate: int = 16000, length: int = HRIR_LENGTH,
               shadow: bool = True, radius: float = HEAD_RADIUS, c: float = SPEED_OF_SOUND) -> Hrir:
    """Spherical-head HRIR: Woodworth ITD as a fractional delay and head shadow on the far ear.

    The shadow filter's high-frequency gain ``alpha`` falls from 1 (frontal)
    to 0.1 at 90 degrees as ``1 - 0.9 |sin(azimuth)|``.
    """
    if not -180 <= azimuth <= 180:
        raise ValueError(f"azimuth {azimuth} outside [-180, 180]")
    if azimuth < 0:
        mirrored = synth_hrir(-azimuth, sample_rate, length, shadow, radius, c)
        return Hrir(azimuth, mirrored.right, mirrored.left, sample_rate)
    itd = woodworth_itd(azimuth, radius, c) * sample_rate
    near = _fractional_delay(HRIR_BULK_DELAY, length)
    far = _fractional_delay(HRIR_BULK_DELAY + itd, length)
    if shadow:
        alpha = 1.0 - 0.9 * abs(math.sin(math.radians(azimuth)))
        near = _shadow(near, 1.0, sample_rate, radius, c)
        far = _shadow(far, alpha, sample_rate, radius, c)
    return Hrir(float(azimuth), far, near, sample_rate)


class HrirSet:
    """HRIRs indexed by azimuth with nearest-neighbour lookup on the circle."""

    def __init__(self, hrirs: Iterable[Hrir]):
        self.hrirs = sorted(hrirs, key=lambda h: h.azimuth)
        if not self.hrirs:
            raise ValueError("empty HRIR set")
        rates = {h.sample_rate for h in self.hrirs}
        if len(rates) != 1:
            raise ValueError(f"HRIR sample rates differ: {sorted(rates)}")
        self.sample_rate = rates.pop()
        self.azimuths = np.array([h.azimuth for h in self.hrirs])

    def __len__(self):
        return len(self.hrirs)

    def __iter__(self):
        return iter(self.hrirs)

    def distance(self, azimuth: float) -> float:
        d = np.abs((self.azimuths - azimuth + 180) % 360 - 180)
        return float(d.min())

    def nearest(self, azimuth: float) -> Hrir:
        d = np.abs((self.azimuths - azimuth + 180) % 360 - 180)
        return self.hrirs[int(np.argmin(d))]

    @classmethod
    def synthetic(cls, spacing: float = 5.0, sample_rate: int = 16000, **kw) -> "HrirSet":
        count = int(round(360 / spacing))
        return cls(synth_hrir(-180 + i * spacing, sample_rate, **kw) for i in range(count))


_AZI_FILE = re.compile(r"^azi_(-?\d+(?:\.\d+)?)\.wav$")


def save_hrir_set(hrirs: Iterable[Hrir], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for h in hrirs:
        name = f"azi_{h.azimuth:g}.wav"
        write_wav(directory / name, np.stack([h.left, h.right]), h.sample_rate)


def load_hrir_set(path: str | Path, sample_rate: int | None = None) -> HrirSet:
    """Load ``azi_<deg>.wav`` stereo files (left, right) from a directory."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"HRIR directory {path} does not exist")
    hrirs = []
    for f in sorted(path.iterdir()):
        m = _AZI_FILE.match(f.name)
        if not m:
            continue
        data, sr = read_wav(f)
        if data.shape[0] != 2:
            raise ValueError(f"{f} is not a 2-channel HRIR")
        if data.shape[1] < 2:
            raise ValueError(f"{f} is too short to be an HRIR")
        if sample_rate is not None and sr != sample_rate:
            raise ValueError(f"{f} has sample rate {sr}, expected {sample_rate}")
        hrirs.append(Hrir(float(m.group(1)), data[0], data[1], sr))
    if not hrirs:
        raise ValueError(f"no azi_<deg>.wav files in {path}")
    return HrirSet(hrirs)


def spatialize(mono: np.ndarray, h: Hrir) -> BinauralWaveform:
    """Convolve with each ear's response, truncated to the input length."""
    mono = np.asarray(mono, dtype=np.float64)
    if mono.size == 0:
        raise ValueError("cannot spatialise an empty signal")
    n = mono.shape[-1]
    left = signal.fftconvolve(mono, h.left)[:n]
    right = signal.fftconvolve(mono, h.right)[:n]
    return BinauralWaveform(left, right, h.sample_rate)


# -- noise -------------------------------------------------------------------

NoiseSource = Callable[[int, np.random.Generator], np.ndarray]


def white_noise(num_samples: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(num_samples)


class SpeechShapedNoise:
    """White noise through a 512-tap FIR matching a long-term speech spectrum."""

    def __init__(self, taps: np.ndarray, seed: int = 0):
        self.taps = taps
        self.rng = np.random.default_rng(seed)

    def __call__(self, num_samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        white = rng.standard_normal(num_samples + len(self.taps))
        return signal.lfilter(self.taps, [1.0], white)[len(self.taps):]


def long_term_spectrum(signals: Sequence[np.ndarray], sample_rate: int = 16000, nperseg: int = 1024):
    """Welch PSD averaged over all signals; returns (freqs, psd)."""
    psds = []
    weights = []
    for x in signals:
        x = np.asarray(x, dtype=float)
        if len(x) < nperseg:
            continue
        f, p = signal.welch(x, sample_rate, nperseg=nperseg)
        psds.append(p)
        weights.append(len(x))
    if not psds:
        raise ValueError("reference signals are shorter than one analysis segment")
    return f, np.average(psds, axis=0, weights=weights)


def make_ssn(reference_speech: Sequence[np.ndarray], seed: int = 0, sample_rate: int = 16000,
             taps: int = SSN_TAPS) -> SpeechShapedNoise:
    """Speech-shaped noise generator fitted to at least 60 s of reference speech."""
    total = sum(len(x) for x in reference_speech) / sample_rate
    if total < MIN_SSN_REFERENCE_S:
        raise ValueError(f"need >= {MIN_SSN_REFERENCE_S:.0f} s of reference speech, got {total:.1f} s")
    f, psd = long_term_spectrum(reference_speech, sample_rate)
    gains = np.sqrt(psd / psd.max())
    gains[-1] = 0.0  # even-length FIR has a zero at Nyquist
    h = signal.firwin2(taps, f / (sample_rate / 2), gains)
    h /= np.sqrt(np.sum(h**2))  # unit output power for unit-variance input
    return SpeechShapedNoise(h, seed)


class FileNoise:
    """Random excerpts from a recorded noise file (looped if too short)."""

    def __init__(self, path: str | Path):
        data, self.sample_rate = read_wav(path)
        self.data = data.mean(axis=0)
        if not np.any(self.data):
            raise ValueError(f"noise file {path} is silent")

    def __call__(self, num_samples: int, rng: np.random.Generator) -> np.ndarray:
        reps = -(-(num_samples + len(self.data)) // len(self.data))
        tiled = np.tile(self.data, reps)
        start = int(rng.integers(len(self.data)))
        return tiled[start:start + num_samples]


def noise_source(spec: str, reference_speech: Sequence[np.ndarray] | None = None,
                 seed: int = 0, sample_rate: int = 16000) -> NoiseSource:
    """Resolve a registry name: ``wgn``, ``ssn`` (needs reference speech) or ``file:<path>``."""
    if spec == "wgn":
        return white_noise
    if spec == "ssn":
        if reference_speech is None:
            raise ValueError("ssn noise needs reference speech")
        return make_ssn(reference_speech, seed, sample_rate)
    if spec.startswith("file:"):
        src = FileNoise(spec[5:])
        if src.sample_rate != sample_rate:
            raise ValueError(f"noise file sample rate {src.sample_rate} != {sample_rate}")
        return src
    raise ValueError(f"unknown noise type {spec!r}; expected wgn, ssn or file:<path>")


def isotropic_noise(duration: float, noise_source: NoiseSource, hrirs: HrirSet, spacing: float = 5.0,
                    seed: int | np.random.Generator = 0, sample_rate: int | None = None) -> BinauralWaveform:
    """Diffuse field from independent sources every ``spacing`` degrees.

    The sum is scaled so the mean of the left and right broadband powers is 1.
    Each source is run in through the HRIR for one response length before the
    kept excerpt so the field is stationary from the first sample.
    """
    if (360 / spacing) % 1:
        raise ValueError(f"spacing {spacing} does not divide 360")
    sample_rate = sample_rate or hrirs.sample_rate
    count = int(round(360 / spacing))
    azimuths = [-180 + i * spacing for i in range(count)]
    for az in azimuths:
        if hrirs.distance(az) > spacing / 2:
            raise ValueError(f"no HRIR within {spacing / 2} degrees of azimuth {az}")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(seed)
    children = rng.spawn(count)
    left = np.zeros(n)
    right = np.zeros(n)
    for az, child in zip(azimuths, children):
        h = hrirs.nearest(az)
        lead = len(h.left)
        src = noise_source(n + lead, child)
        left += signal.fftconvolve(src, h.left)[lead:lead + n]
        right += signal.fftconvolve(src, h.right)[lead:lead + n]
    scale = 1.0 / math.sqrt((np.mean(left**2) + np.mean(right**2)) / 2)
    return BinauralWaveform(left * scale, right * scale, sample_rate)


# -- mixing ------------------------------------------------------------------

def _power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def channel_snrs(s: BinauralWaveform, v: BinauralWaveform) -> tuple[float, float]:
    return tuple(10 * math.log10(_power(a) / _power(b)) for a, b in ((s.left, v.left), (s.right, v.right)))


def mean_snr(s: BinauralWaveform, v: BinauralWaveform) -> float:
    """(SNR_L + SNR_R) / 2 from whole-utterance broadband powers."""
    snr_l, snr_r = channel_snrs(s, v)
    return (snr_l + snr_r) / 2


def noise_gain_for_snr(s: BinauralWaveform, v: BinauralWaveform, target_mean_snr: float) -> float:
    for name, x in (("speech", s), ("noise", v)):
        if _power(x.left) == 0 or _power(x.right) == 0:
            raise ValueError(f"{name} is silent in at least one channel")
    # scaling noise by g lowers both channel SNRs by 20 log10 g
    return 10 ** ((mean_snr(s, v) - target_mean_snr) / 20)


def mix_at_snr(s: BinauralWaveform, v: BinauralWaveform, target_mean_snr: float) -> BinauralWaveform:
    """Noisy mixture ``s + g v`` with one gain g giving the target mean SNR."""
    if len(s) != len(v):
        raise ValueError(f"speech and noise lengths differ: {len(s)} vs {len(v)}")
    g = noise_gain_for_snr(s, v, target_mean_snr)
    return BinauralWaveform(np.asarray(s.left) + g * np.asarray(v.left),
                            np.asarray(s.right) + g * np.asarray(v.right), s.sample_rate)


# -- dataset manifest -----------------------------------------------------------

@dataclass
class ManifestEntry:
    clean: str
    noisy: str
    azimuth: float
    noise_type: str
    target_snr: float
    split: str
    seed: list[int]
    distance: float = 0.8
    source: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    config: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        paths = [e.clean for e in self.entries] + [e.noisy for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths are not unique")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def splits(self) -> list[str]:
        return sorted({e.split for e in self.entries})

    def load_pair(self, entry: ManifestEntry) -> tuple[BinauralWaveform, BinauralWaveform]:
        clean, sr = read_wav(self.root / entry.clean)
        noisy, sr2 = read_wav(self.root / entry.noisy)
        if sr != sr2 or clean.shape != noisy.shape:
            raise ValueError(f"clean/noisy mismatch for {entry.clean}")
        return BinauralWaveform.from_array(clean, sr), BinauralWaveform.from_array(noisy, sr)

    def load_split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N, 2, samples) clean and noisy arrays for one split."""
        pairs = [self.load_pair(e) for e in self.split(name)]
        if not pairs:
            raise ValueError(f"split {name!r} is empty")
        return (np.stack([c.stacked() for c, _ in pairs]), np.stack([n.stacked() for _, n in pairs]))

    def to_json(self) -> str:
        doc = {
            "format": "bccrn-manifest",
            "version": MANIFEST_VERSION,
            "config": self.config,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != "bccrn-manifest":
            raise ValueError(f"{path} is not a dataset manifest")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(entries, doc.get("config", {}), path.parent)


def _split_plan(splits: dict[str, int] | Sequence[tuple[str, int]]) -> list[str]:
    items = splits.items() if isinstance(splits, dict) else splits
    plan = []
    for name, count in items:
        plan += [name] * int(count)
    return plan


def _load_speech(speech, sample_rate: int) -> tuple[list[np.ndarray], list[str]]:
    if isinstance(speech, (str, Path)):
        files = sorted(Path(speech).glob("*.wav"))
        signals, names = [], []
        for f in files:
            data, sr = read_wav(f)
            if sr != sample_rate:
                raise ValueError(f"{f} has sample rate {sr}, expected {sample_rate}")
            signals.append(data.mean(axis=0))
            names.append(f.name)
        return signals, names
    signals = [np.asarray(x, dtype=np.float64) for x in speech]
    return signals, [f"utt{i:05d}" for i in range(len(signals))]


DEFAULT_SNR_RANGES = {"train": (-7.0, 16.0), "valid": (-7.0, 16.0), "test": (-6.0, 15.0)}


def build_dataset(speech, noise_spec: Sequence[str], hrirs: HrirSet, splits, out_dir: str | Path,
                  snr_range=None, seed: int = 0, sample_rate: int = 16000,
                  distances: Sequence[float] = DISTANCES) -> DatasetManifest:
    """Synthesise clean/noisy stereo WAV pairs and write ``manifest.json``.

    ``snr_range`` is one (low, high) pair for every split or a per-split dict;
    by default train/valid draw from [-7, 16] dB and test from [-6, 15] dB.
    Each entry draws its azimuth (uniform over [-90, 90]), noise type, target
    SNR and distance from its own generator seeded by ``(seed, index)``.
    """
    out_dir = Path(out_dir)
    signals, names = _load_speech(speech, sample_rate)
    if not signals:
        raise ValueError("speech corpus is empty")
    plan = _split_plan(splits)
    if len(plan) > len(signals):
        raise ValueError(f"{len(plan)} entries requested but only {len(signals)} utterances available")
    if snr_range is None:
        ranges = DEFAULT_SNR_RANGES
    elif isinstance(snr_range, dict):
        ranges = {k: tuple(v) for k, v in snr_range.items()}
    else:
        ranges = {name: tuple(snr_range) for name in set(plan)}
    sources = {}
    for spec in noise_spec:
        sources[spec] = noise_source(spec, signals if spec == "ssn" else None, seed, sample_rate)

    entries = []
    for i, (split, mono, name) in enumerate(zip(plan, signals, names)):
        rng = np.random.default_rng([seed, i])
        azimuth = float(np.round(rng.uniform(-90, 90), 2))
        noise_type = noise_spec[int(rng.integers(len(noise_spec)))]
        lo, hi = ranges.get(split, DEFAULT_SNR_RANGES["train"])
        target = float(np.round(rng.uniform(lo, hi), 3))
        distance = float(distances[int(rng.integers(len(distances)))])

        delay = int(round(distance / SPEED_OF_SOUND * sample_rate))
        shifted = np.concatenate([np.zeros(delay), mono])[: len(mono)] / distance
        clean = spatialize(shifted, hrirs.nearest(azimuth))
        noise = isotropic_noise(len(mono) / sample_rate, sources[noise_type], hrirs, 5.0,
                                rng, sample_rate)
        noisy = mix_at_snr(clean, noise, target)
        c, y = clean.stacked(), noisy.stacked()
        peak = max(np.abs(c).max(), np.abs(y).max())
        if peak > 0.99:
            c, y = c * (0.99 / peak), y * (0.99 / peak)
        clean_rel = f"clean/{split}_{i:05d}.wav"
        noisy_rel = f"noisy/{split}_{i:05d}.wav"
        write_wav(out_dir / clean_rel, c, sample_rate)
        write_wav(out_dir / noisy_rel, y, sample_rate)
        entries.append(ManifestEntry(clean_rel, noisy_rel, azimuth, noise_type, target, split,
                                     [int(seed), i], distance, name))
    config = {
        "seed": int(seed),
        "sample_rate": int(sample_rate),
        "noise_types": list(noise_spec),
        "snr_ranges": {k: list(v) for k, v in sorted(ranges.items())},
        "splits": dict(sorted({s: plan.count(s) for s in set(plan)}.items())),
        "hrir_count": len(hrirs),
        "distances": list(distances),
        "azimuth_range": [-90.0, 90.0],
    }
    manifest = DatasetManifest(entries, config, out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.save()
    log.info("wrote %d entries to %s", len(entries), out_dir)
    return manifest
