"""Interaural cue maps and the speech-activity mask restricting cue errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .dsp import ENERGY_EPS, ComplexSpectrogram, StftConfig, frame_energy

#: Magnitude guard for the ILD ratio.
MAG_EPS = 1e-8
DEFAULT_THRESHOLD_DB = 20.0
DEFAULT_SPLIT_HZ = 1500.0


@dataclass
class CueMaps:
    ild: torch.Tensor
    ipd: torch.Tensor


@dataclass
class SpeechActivityMask:
    """Binary speech-activity mask plus the low/high band split.

    Rows ``k <= split_bin`` feed the IPD error, rows ``k > split_bin`` the ILD
    error. ``n_pd`` / ``n_ld`` count selected tiles in each region, per item
    of any leading batch dimensions.
    """

    mask: torch.Tensor
    threshold_db: float
    split_bin: int
    n_ld: torch.Tensor
    n_pd: torch.Tensor

    @property
    def ild_region(self) -> torch.Tensor:
        return self._region(high=True)

    @property
    def ipd_region(self) -> torch.Tensor:
        return self._region(high=False)

    def _region(self, high: bool) -> torch.Tensor:
        k = torch.arange(self.mask.shape[-2]).unsqueeze(-1)
        band = k > self.split_bin if high else k <= self.split_bin
        return self.mask & band


def _bins(S) -> torch.Tensor:
    return S.bins if isinstance(S, ComplexSpectrogram) else S


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ild_map(S_L, S_R) -> torch.Tensor:
    """``20 log10((|S_L| + eps) / (|S_R| + eps))`` per tile, in dB."""
    left, right = _bins(S_L), _bins(S_R)
    _check_pair(left, right)
    return 20.0 * (torch.log10(left.abs() + MAG_EPS) - torch.log10(right.abs() + MAG_EPS))


def ipd_map(S_L, S_R) -> torch.Tensor:
    """Phase of ``S_L * conj(S_R)`` per tile, in (-pi, pi]."""
    left, right = _bins(S_L), _bins(S_R)
    _check_pair(left, right)
    return wrap_phase(torch.angle(left * right.conj()))


def cue_maps(S_L, S_R) -> CueMaps:
    return CueMaps(ild_map(S_L, S_R), ipd_map(S_L, S_R))


def wrap_phase(phi: torch.Tensor) -> torch.Tensor:
    """Map angles into (-pi, pi]; values already in [-pi, pi] only move at -pi."""
    # in-range values skip the remainder so they stay bit-exact
    inside = (phi >= -math.pi) & (phi <= math.pi)
    wrapped = torch.where(inside, phi, torch.remainder(phi + math.pi, 2 * math.pi) - math.pi)
    return torch.where(wrapped <= -math.pi, wrapped + 2 * math.pi, wrapped)


def ibm_single(S, threshold_db: float = DEFAULT_THRESHOLD_DB) -> torch.Tensor:
    """Tiles whose energy lies within ``threshold_db`` of their bin's maximum over time.

    Bins that are silent throughout (maximum at the energy floor) are deselected.
    """
    if threshold_db <= 0:
        raise ValueError(f"threshold_db must be positive, got {threshold_db}")
    energy = frame_energy(_bins(S))
    peak = energy.amax(dim=-1, keepdim=True)
    floor = 10.0 * torch.log10(torch.tensor(ENERGY_EPS, dtype=energy.dtype))
    active = peak > floor + 1e-9
    return (energy > peak - threshold_db) & active


def ibm_combine(
    M_L: torch.Tensor,
    M_R: torch.Tensor,
    cfg: StftConfig,
    split_hz: float = DEFAULT_SPLIT_HZ,
    threshold_db: float = DEFAULT_THRESHOLD_DB,
) -> SpeechActivityMask:
    _check_pair(M_L, M_R)
    mask = M_L.bool() & M_R.bool()
    split = cfg.bin_of(split_hz)
    k = torch.arange(mask.shape[-2]).unsqueeze(-1)
    n_ld = (mask & (k > split)).sum(dim=(-2, -1))
    n_pd = (mask & (k <= split)).sum(dim=(-2, -1))
    return SpeechActivityMask(mask, threshold_db, split, n_ld, n_pd)


def speech_activity_mask(
    S_L,
    S_R,
    cfg: StftConfig | None = None,
    threshold_db: float = DEFAULT_THRESHOLD_DB,
    split_hz: float = DEFAULT_SPLIT_HZ,
) -> SpeechActivityMask:
    """Clean-speech mask for a stereo pair: per-ear IBMs combined by elementwise AND."""
    if cfg is None:
        cfg = S_L.config
    m_l = ibm_single(S_L, threshold_db)
    m_r = ibm_single(S_R, threshold_db)
    return ibm_combine(m_l, m_r, cfg, split_hz, threshold_db)
