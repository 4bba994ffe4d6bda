"""Four-term training objective: SNR, STOI, and masked ILD/IPD errors.

Every function accepts single utterances or a leading batch dimension; batch
values are reduced by the arithmetic mean.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .cues import MAG_EPS, SpeechActivityMask, speech_activity_mask, wrap_phase
from .dsp import BinauralWaveform, ComplexSpectrogram, as_tensor, istft
from .stoi import stoi_batch

#: Relative guard in the SNR denominator; caps a perfect estimate at 80 dB.
SNR_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 1.0
    kappa: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise ValueError(f"loss weight {name} must be finite, got {value}")

    @classmethod
    def snr_only(cls) -> "LossWeights":
        return cls(1.0, 0.0, 0.0, 0.0)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    snr_term: torch.Tensor
    stoi_term: torch.Tensor
    ild_term: torch.Tensor
    ipd_term: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in vars(self).items()}


def _bins(S) -> torch.Tensor:
    return S.bins if isinstance(S, ComplexSpectrogram) else S


def snr_db(s, s_hat) -> torch.Tensor:
    """``10 log10(|s|^2 / (|s_hat - s|^2 + eps))`` along the last axis."""
    s = as_tensor(s)
    s_hat = as_tensor(s_hat)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    power = (s * s).sum(dim=-1)
    if bool((power == 0).any()):
        raise ValueError("reference signal is all zeros")
    err = ((s_hat - s) ** 2).sum(dim=-1)
    return 10.0 * torch.log10(power / (err + SNR_EPS * power))


def snr_loss(s: BinauralWaveform, s_hat: BinauralWaveform) -> torch.Tensor:
    per_item = -(snr_db(s.left, s_hat.left) + snr_db(s.right, s_hat.right)) / 2
    return per_item.mean()


def stoi_loss(s: BinauralWaveform, s_hat: BinauralWaveform) -> torch.Tensor:
    fs = s.sample_rate
    left = stoi_batch(s.left, as_tensor(s_hat.left), fs)
    right = stoi_batch(s.right, as_tensor(s_hat.right), fs)
    return (-(left + right) / 2).mean()


def _masked_mean(values: torch.Tensor, batch_index: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    counts = counts.reshape(-1)
    sums = values.new_zeros(counts.numel()).index_add(0, batch_index, values)
    per_item = torch.where(counts > 0, sums / counts.clamp(min=1).to(values.dtype), sums.new_zeros(()))
    return per_item.mean()


def _selected(region: torch.Tensor, *grids):
    # restrict to selected tiles so silent tiles never enter the graph
    flat = region.reshape(-1, *region.shape[-2:])
    batch_index = flat.nonzero()[:, 0]
    picked = [g.reshape(-1, *g.shape[-2:])[flat] for g in grids]
    return batch_index, picked


def ild_loss(S, S_hat, mask: SpeechActivityMask) -> torch.Tensor:
    """Mean |ILD_S - ILD_S_hat| (dB) over speech-active tiles above the split bin."""
    sl, sr = (_bins(x) for x in S)
    el, er = (_bins(x) for x in S_hat)
    if not (sl.shape == sr.shape == el.shape == er.shape == mask.mask.shape):
        raise ValueError("spectrogram and mask shapes must match")
    idx, (a, b, c, d) = _selected(mask.ild_region, sl, sr, el, er)
    ref = 20.0 * (torch.log10(a.abs() + MAG_EPS) - torch.log10(b.abs() + MAG_EPS))
    est = 20.0 * (torch.log10(c.abs() + MAG_EPS) - torch.log10(d.abs() + MAG_EPS))
    return _masked_mean((ref - est).abs(), idx, mask.n_ld)


def ipd_loss(S, S_hat, mask: SpeechActivityMask) -> torch.Tensor:
    """Mean |wrap(IPD_S - IPD_S_hat)| (rad) over speech-active tiles at or below the split bin."""
    sl, sr = (_bins(x) for x in S)
    el, er = (_bins(x) for x in S_hat)
    if not (sl.shape == sr.shape == el.shape == er.shape == mask.mask.shape):
        raise ValueError("spectrogram and mask shapes must match")
    idx, (a, b, c, d) = _selected(mask.ipd_region, sl, sr, el, er)
    # difference of phase maps rather than one product's angle: exact 0 when S_hat == S
    diff = wrap_phase(torch.angle(a * b.conj()) - torch.angle(c * d.conj()))
    return _masked_mean(diff.abs(), idx, mask.n_pd)


def composite_loss(
    s: BinauralWaveform,
    S,
    S_hat,
    weights: LossWeights = LossWeights(),
    mask: SpeechActivityMask | None = None,
    threshold_db: float = 20.0,
    split_hz: float = 1500.0,
) -> LossBreakdown:
    """Weighted sum of the four terms.

    ``S`` and ``S_hat`` are (left, right) spectrogram pairs; the enhanced
    waveform is synthesised from ``S_hat`` for the time-domain terms. Terms
    with zero weight are evaluated without gradient tracking.
    """
    S_L, S_R = S
    if mask is None:
        mask = speech_activity_mask(S_L, S_R, S_L.config, threshold_db, split_hz)
    n = len(s)
    hat_l, hat_r = S_hat
    s_hat = BinauralWaveform(istft(hat_l, n), istft(hat_r, n), s.sample_rate)

    def term(weight, fn, *args):
        if weight == 0:
            with torch.no_grad():
                return fn(*args)
        return fn(*args)

    snr_t = term(weights.alpha, snr_loss, s, s_hat)
    stoi_t = term(weights.beta, stoi_loss, s, s_hat)
    ild_t = term(weights.gamma, ild_loss, S, S_hat, mask)
    ipd_t = term(weights.kappa, ipd_loss, S, S_hat, mask)
    total = weights.alpha * snr_t + weights.beta * stoi_t + weights.gamma * ild_t + weights.kappa * ipd_t
    return LossBreakdown(total, snr_t, stoi_t, ild_t, ipd_t)
