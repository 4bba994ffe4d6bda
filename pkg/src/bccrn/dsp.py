"""Analysis/synthesis transforms between waveforms and complex spectrograms.

Everything here is written against torch so gradients flow through both the
forward STFT and the weighted overlap-add synthesis. Numpy arrays are accepted
and promoted to float64 tensors.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

ArrayLike = Union[np.ndarray, torch.Tensor]

#: Floor added to |S|^2 before taking the log in :func:`frame_energy`.
ENERGY_EPS = 1e-12


@dataclass(frozen=True)
class StftConfig:
    """STFT geometry. Defaults are 512-point FFT, 25 ms window, 6.25 ms hop at 16 kHz."""

    fft_length: int = 512
    window_length: int = 400
    hop_length: int = 100
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.hop_length <= self.window_length <= self.fft_length:
            raise ValueError(
                "need 0 < hop_length <= window_length <= fft_length, got "
                f"hop={self.hop_length} window={self.window_length} fft={self.fft_length}"
            )
        if self.window_length % self.hop_length:
            # sqrt-Hann WOLA only sums to a constant at integer overlap factors
            raise ValueError("window_length must be a multiple of hop_length")
        if self.window_length // self.hop_length < 2:
            raise ValueError("Hann WOLA needs at least 50% overlap")

    @property
    def num_bins(self) -> int:
        return self.fft_length // 2 + 1

    @property
    def edge_pad(self) -> int:
        """Reflect padding applied to each end of the signal before framing."""
        return self.window_length - self.hop_length

    def bin_of(self, freq_hz: float) -> int:
        return int(round(freq_hz * self.fft_length / self.sample_rate))

    def num_frames(self, num_samples: int) -> int:
        return (self._padded_length(num_samples) - self.window_length) // self.hop_length + 1

    def _padded_length(self, num_samples: int) -> int:
        n = num_samples + 2 * self.edge_pad
        extra = (-(n - self.window_length)) % self.hop_length
        return n + extra


class NonFiniteSignalError(ValueError):
    pass


@dataclass
class BinauralWaveform:
    """Left/right ear signals sharing one sample rate."""

    left: ArrayLike
    right: ArrayLike
    sample_rate: int = 16000

    def __post_init__(self):
        if tuple(self.left.shape) != tuple(self.right.shape):
            raise ValueError(
                f"left/right length mismatch: {tuple(self.left.shape)} vs {tuple(self.right.shape)}"
            )
        for name, x in (("left", self.left), ("right", self.right)):
            finite = torch.isfinite(x).all() if torch.is_tensor(x) else np.isfinite(x).all()
            if not finite:
                raise NonFiniteSignalError(f"{name} channel contains non-finite samples")

    def __len__(self) -> int:
        return int(self.left.shape[-1])

    def stacked(self) -> np.ndarray:
        """(2, N) float64 array, left first."""
        return np.stack([_to_numpy(self.left), _to_numpy(self.right)])

    def swapped(self) -> "BinauralWaveform":
        return BinauralWaveform(self.right, self.left, self.sample_rate)

    @classmethod
    def from_array(cls, data: ArrayLike, sample_rate: int = 16000) -> "BinauralWaveform":
        if data.shape[0] != 2:
            raise ValueError(f"expected 2 channels, got shape {tuple(data.shape)}")
        return cls(data[0], data[1], sample_rate)


@dataclass
class ComplexSpectrogram:
    """One-sided complex STFT with ``bins`` shaped (..., frequency, time).

    ``num_samples`` remembers the analysed length so synthesis can crop back to it.
    """

    bins: torch.Tensor
    config: StftConfig
    num_samples: int | None = None

    def __post_init__(self):
        if not torch.is_complex(self.bins):
            raise TypeError("spectrogram bins must be a complex tensor")
        if self.bins.shape[-2] != self.config.num_bins:
            raise ValueError(
                f"expected {self.config.num_bins} frequency bins, got {self.bins.shape[-2]}"
            )

    @property
    def num_frames(self) -> int:
        return self.bins.shape[-1]

    @property
    def shape(self):
        return self.bins.shape

    def with_bins(self, bins: torch.Tensor) -> "ComplexSpectrogram":
        return ComplexSpectrogram(bins, self.config, self.num_samples)


def _to_numpy(x: ArrayLike) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def as_tensor(x: ArrayLike, dtype=torch.float64) -> torch.Tensor:
    if torch.is_tensor(x):
        return x if x.is_floating_point() or x.is_complex() else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def sqrt_hann(cfg: StftConfig, dtype=torch.float64) -> torch.Tensor:
    """Square root of the periodic Hann window; used for both analysis and synthesis."""
    return torch.hann_window(cfg.window_length, periodic=True, dtype=dtype).sqrt()


def stft(x: ArrayLike, cfg: StftConfig) -> ComplexSpectrogram:
    """One-sided STFT of ``x`` (..., N).

    The signal is reflect-padded by ``window - hop`` on both ends and then
    zero-padded on the right so the hop grid covers the last sample fully.
    Each 400-sample frame is zero-padded to the FFT length at its end.
    """
    x = as_tensor(x)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("cannot transform an empty signal")
    pad = cfg.edge_pad
    if n <= pad:
        raise ValueError(f"signal of {n} samples is too short for {pad}-sample edge padding")
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, n)
    padded = F.pad(flat, (pad, pad), mode="reflect")
    extra = cfg._padded_length(n) - padded.shape[-1]
    if extra:
        padded = F.pad(padded, (0, extra))
    frames = padded[:, 0].unfold(-1, cfg.window_length, cfg.hop_length)
    frames = frames * sqrt_hann(cfg, x.dtype)
    spec = torch.fft.rfft(frames, n=cfg.fft_length, dim=-1).transpose(-1, -2)
    return ComplexSpectrogram(spec.reshape(*lead, *spec.shape[-2:]), cfg, n)


def istft(X: ComplexSpectrogram, length: int | None = None) -> torch.Tensor:
    """Weighted overlap-add synthesis, inverse of :func:`stft` on consistent spectrograms."""
    cfg = X.config
    bins = X.bins
    if bins.shape[-2] != cfg.num_bins:
        raise ValueError("spectrogram does not match its configuration")
    if length is None:
        length = X.num_samples
    n_frames = bins.shape[-1]
    total = (n_frames - 1) * cfg.hop_length + cfg.window_length
    if length is None:
        length = total - 2 * cfg.edge_pad
    if length + cfg.edge_pad > total:
        raise ValueError(f"{n_frames} frames cannot synthesise {length} samples")
    lead = bins.shape[:-2]
    flat = bins.reshape(-1, *bins.shape[-2:])
    win = sqrt_hann(cfg, flat.real.dtype)
    frames = torch.fft.irfft(flat.transpose(-1, -2), n=cfg.fft_length, dim=-1)
    frames = frames[..., : cfg.window_length] * win
    ola = F.fold(
        frames.transpose(-1, -2),
        output_size=(1, total),
        kernel_size=(1, cfg.window_length),
        stride=(1, cfg.hop_length),
    )[:, 0, 0]
    env = F.fold(
        (win * win).expand(1, n_frames, -1).transpose(-1, -2),
        output_size=(1, total),
        kernel_size=(1, cfg.window_length),
        stride=(1, cfg.hop_length),
    )[0, 0, 0]
    y = ola[:, cfg.edge_pad : cfg.edge_pad + length] / env[cfg.edge_pad : cfg.edge_pad + length]
    return y.reshape(*lead, length)


def frame_energy(S: ComplexSpectrogram | torch.Tensor) -> torch.Tensor:
    """Per-tile energy in dB, ``10 log10(|S|^2 + ENERGY_EPS)``."""
    bins = S.bins if isinstance(S, ComplexSpectrogram) else S
    return 10.0 * torch.log10(bins.real**2 + bins.imag**2 + ENERGY_EPS)


# -- WAV I/O -----------------------------------------------------------------

def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 shaped (channels, samples) in [-1, 1]."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T
    return np.ascontiguousarray(data), int(sr)


def write_wav(path: str | Path, data: ArrayLike, sample_rate: int, fmt: str = "float32") -> None:
    """Write (channels, samples) or (samples,) audio. ``fmt`` is ``float32`` or ``int16``."""
    data = _to_numpy(data)
    if data.ndim == 2:
        data = data.T
    if fmt == "float32":
        out = data.astype(np.float32)
    elif fmt == "int16":
        out = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), np.ascontiguousarray(out))
