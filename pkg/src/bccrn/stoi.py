"""Differentiable short-time objective intelligibility (Taal et al., 2010).

The procedure: resample to 10 kHz, drop frames of the clean signal more than
40 dB below its loudest frame (applied to both signals), 256-sample Hann
frames with 50% overlap and a 512-point FFT, 15 one-third-octave bands from
150 Hz, 30-frame (384 ms) segments, clipping of the normalised processed
envelope at -15 dB SDR, and the mean envelope correlation.

Frame selection depends on the clean signal only, so the score is
piecewise-smooth in the processed signal; the clipping ``min`` contributes a
subgradient.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .dsp import as_tensor

FS = 10000
FRAME = 256
NFFT = 512
NUM_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30
BETA_DB = -15.0
DYN_RANGE_DB = 40.0
EPS = float(np.finfo(np.float64).eps)


@lru_cache(maxsize=None)
def third_octave_matrix(fs: int = FS, nfft: int = NFFT, num_bands: int = NUM_BANDS,
                        min_freq: float = MIN_FREQ) -> tuple[np.ndarray, np.ndarray]:
    """Binary (bands, nfft/2+1) matrix of one-third-octave bands and their centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=float)
    centres = min_freq * 2.0 ** (k / 3)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm, centres


@lru_cache(maxsize=None)
def _octave_resample_filter(up: int, down: int) -> np.ndarray:
    # Kaiser-windowed sinc with 60 dB rejection, as Octave's resample() designs it.
    g = math.gcd(up, down)
    up, down = up // g, down // g
    rejection_db = 60.0
    cutoff = 1.0 / (2 * max(up, down))
    roll_off = cutoff / 10
    half = int(np.ceil((rejection_db - 8) / (28.714 * roll_off)))
    t = np.arange(-half, half + 1)
    ideal = 2 * up * cutoff * np.sinc(2 * cutoff * t)
    beta = 0.1102 * (rejection_db - 8.7)
    h = np.kaiser(2 * half + 1, beta) * ideal
    return h / h.sum()


def resample(x: torch.Tensor, up: int, down: int) -> torch.Tensor:
    """Polyphase rational resampling of (..., N) by ``up/down``.

    Output alignment and length match ``scipy.signal.resample_poly`` with the
    same filter. Output ``m`` reads filter taps ``m*down + half - j*up`` of
    input ``j``, so each of the ``up`` output phases is a strided convolution
    of the input with every ``up``-th tap.
    """
    g = math.gcd(up, down)
    up, down = up // g, down // g
    if up == down:
        return x
    h = _octave_resample_filter(up, down) * up
    half = (len(h) - 1) // 2
    taps = -(-len(h) // up)
    h = np.concatenate([h, np.zeros(taps * up - len(h))])
    lead, n = x.shape[:-1], x.shape[-1]
    n_out = -(-n * up // down)
    flat = x.reshape(-1, 1, n)
    out = flat.new_zeros(flat.shape[0], n_out)
    for r in range(min(up, n_out)):
        count = len(range(r, n_out, up))
        a, b = divmod(r * down + half, up)
        # phase r: y[r + up*q] = sum_i h[up*i + b] x[down*q + a - i]
        w = torch.as_tensor(h[b::up][::-1].copy(), dtype=x.dtype).view(1, 1, -1)
        left = taps - 1 - a  # x index of the first kernel tap for q = 0 is a - (taps - 1)
        need = (count - 1) * down + taps
        if left >= 0:
            src = F.pad(flat, (left, 0))
        else:
            src = flat[..., -left:]
        src = F.pad(src, (0, max(0, need - src.shape[-1])))
        out[:, r::up] = F.conv1d(src, w, stride=down)[:, 0, :count]
    return out.reshape(*lead, n_out)


def _hann(n: int, dtype) -> torch.Tensor:
    # MATLAB hanning(n): symmetric, without the zero end points
    return torch.hann_window(n + 2, periodic=False, dtype=dtype)[1:-1]


def _frames(x: torch.Tensor, size: int, hop: int) -> torch.Tensor:
    # frame starts range(0, len - size, hop): the final flush frame is excluded
    count = -(-(x.shape[-1] - size) // hop)
    if count <= 0:
        return x.new_zeros(0, size)
    return x.unfold(-1, size, hop)[:count]


def _overlap_add(frames: torch.Tensor, hop: int) -> torch.Tensor:
    k, size = frames.shape
    total = (k - 1) * hop + size
    return F.fold(frames.T.unsqueeze(0), (1, total), (1, size), stride=(1, hop))[0, 0, 0]


def remove_silent_frames(clean: torch.Tensor, processed: torch.Tensor,
                         dyn_range: float = DYN_RANGE_DB, size: int = FRAME, hop: int = FRAME // 2):
    """Drop frames whose clean energy is ``dyn_range`` dB below the loudest clean frame."""
    w = _hann(size, clean.dtype)
    xf = _frames(clean, size, hop) * w
    yf = _frames(processed, size, hop) * w
    with torch.no_grad():
        energy = 20 * torch.log10(torch.linalg.vector_norm(xf, dim=-1) + EPS)
        keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: torch.Tensor) -> torch.Tensor:
    w = _hann(FRAME, x.dtype)
    spec = torch.fft.rfft(_frames(x, FRAME, FRAME // 2) * w, n=NFFT, dim=-1)
    power = spec.real**2 + spec.imag**2
    obm = torch.as_tensor(third_octave_matrix()[0], dtype=x.dtype)
    # tiny floor keeps sqrt differentiable on empty bands
    return torch.sqrt(power @ obm.T + 1e-30).T


def num_stoi_frames(num_samples: int, sample_rate: int) -> int:
    """Envelope frames available before silent-frame removal."""
    n10 = -(-num_samples * FS // sample_rate) if sample_rate != FS else num_samples
    frames = max(0, -(-(n10 - FRAME) // (FRAME // 2)))
    return max(0, frames - 1)


def stoi(clean, processed, sample_rate: int = 16000) -> torch.Tensor:
    """STOI of 1-D ``processed`` against ``clean``; a 0-dim tensor carrying gradients."""
    x = as_tensor(clean)
    y = as_tensor(processed)
    if x.dim() != 1 or x.shape != y.shape:
        raise ValueError(f"expected equal-length 1-D signals, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.dtype != y.dtype:
        x = x.to(y.dtype)
    if sample_rate != FS:
        x = resample(x, FS, sample_rate)
        y = resample(y, FS, sample_rate)
    if x.shape[-1] <= FRAME:
        raise ValueError("signal too short for STOI")
    x, y = remove_silent_frames(x, y)
    x_env = _band_envelopes(x)
    y_env = _band_envelopes(y)
    if x_env.shape[-1] < SEGMENT:
        raise ValueError(
            f"only {x_env.shape[-1]} STOI frames after silence removal; need {SEGMENT}"
        )
    xs = x_env.unfold(-1, SEGMENT, 1)  # (bands, segments, SEGMENT)
    ys = y_env.unfold(-1, SEGMENT, 1)
    scale = torch.linalg.vector_norm(xs, dim=-1, keepdim=True) / (
        torch.linalg.vector_norm(ys, dim=-1, keepdim=True) + EPS
    )
    clip = 10 ** (-BETA_DB / 20)
    yp = torch.minimum(ys * scale, xs * (1 + clip))
    yp = yp - yp.mean(dim=-1, keepdim=True)
    xs = xs - xs.mean(dim=-1, keepdim=True)
    yp = yp / (torch.linalg.vector_norm(yp, dim=-1, keepdim=True) + EPS)
    xs = xs / (torch.linalg.vector_norm(xs, dim=-1, keepdim=True) + EPS)
    return (yp * xs).sum(dim=-1).mean()


def stoi_batch(clean: torch.Tensor, processed: torch.Tensor, sample_rate: int = 16000) -> torch.Tensor:
    """STOI per row of (B, N) inputs, returned as a (B,) tensor."""
    clean = as_tensor(clean)
    processed = as_tensor(processed)
    if clean.shape != processed.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(processed.shape)}")
    if clean.dim() == 1:
        return stoi(clean, processed, sample_rate).reshape(1)
    flat_c = clean.reshape(-1, clean.shape[-1])
    flat_p = processed.reshape(-1, processed.shape[-1])
    scores = torch.stack([stoi(c, p, sample_rate) for c, p in zip(flat_c, flat_p)])
    return scores.reshape(clean.shape[:-1])
