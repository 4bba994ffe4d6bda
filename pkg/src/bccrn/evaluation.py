"""Objective evaluation: fwSegSNR improvement, cue errors and per-ear STOI.

fwSegSNR layout (fixed here because the metric has many published variants):
400-sample Hann frames (25 ms at 16 kHz) with 50% overlap and a 512-point
FFT; 25 triangular bands equally spaced on the mel scale between 50 Hz and
8 kHz; per band ``10 log10(|S_j|^2 / |S_j - X_j|^2)`` clamped to [-10, 35] dB
and weighted by ``|S_j|^0.2``; frames whose clean energy lies more than 40 dB
below the loudest frame are skipped.

The binaural intelligibility column is the mean of the two per-ear STOI
scores. It stands in for MBSTOI and is labelled that way in every output.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .cues import speech_activity_mask
from .data import DatasetManifest, mean_snr
from .dsp import BinauralWaveform, StftConfig, istft, stft
from .loss import ild_loss, ipd_loss
from .model import ComplexRatioMask, bccrn_forward, crm_apply
from .stoi import stoi

log = logging.getLogger(__name__)

FW_FRAME = 400
FW_HOP = 200
FW_NFFT = 512
FW_BANDS = 25
FW_FMIN = 50.0
FW_FMAX = 8000.0
FW_GAMMA = 0.2
FW_MIN_DB = -10.0
FW_MAX_DB = 35.0
FW_GATE_DB = 40.0
BUCKET_DB = 3.0
REPORT_VERSION = 1
STOI_LABEL = "mean per-ear STOI (substitute for MBSTOI, not equivalent)"


def _mel(f):
    return 2595.0 * np.log10(1 + np.asarray(f) / 700.0)


def _inv_mel(m):
    return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1)


@lru_cache(maxsize=None)
def fw_band_matrix(sample_rate: int = 16000) -> np.ndarray:
    """(bands, nfft/2+1) triangular weights; edges are equally spaced in mel."""
    freqs = np.arange(FW_NFFT // 2 + 1) * sample_rate / FW_NFFT
    edges = _inv_mel(np.linspace(_mel(FW_FMIN), _mel(min(FW_FMAX, sample_rate / 2)), FW_BANDS + 2))
    W = np.zeros((FW_BANDS, len(freqs)))
    for j in range(FW_BANDS):
        lo, c, hi = edges[j], edges[j + 1], edges[j + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        W[j] = np.clip(np.minimum(rise, fall), 0, None)
    return W


def _fw_spectra(x: np.ndarray) -> np.ndarray:
    starts = range(0, len(x) - FW_FRAME + 1, FW_HOP)
    frames = np.stack([x[i:i + FW_FRAME] for i in starts])
    return np.fft.rfft(frames * np.hanning(FW_FRAME), n=FW_NFFT, axis=-1)


def _as_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def fw_segsnr(s, x, sample_rate: int = 16000) -> float:
    """Frequency-weighted segmental SNR of ``x`` against reference ``s`` in dB."""
    s, x = _as_numpy(s), _as_numpy(x)
    if s.shape != x.shape or s.ndim != 1:
        raise ValueError(f"expected equal-length 1-D signals, got {s.shape} and {x.shape}")
    if len(s) < FW_FRAME:
        raise ValueError(f"need at least {FW_FRAME} samples, got {len(s)}")
    S = _fw_spectra(s)
    E = _fw_spectra(s - x)
    frame_db = 10 * np.log10(np.sum(np.abs(S) ** 2, axis=-1) + 1e-300)
    keep = frame_db > frame_db.max() - FW_GATE_DB
    if not keep.any() or not np.any(s):
        raise ValueError("reference signal is silent")
    W = fw_band_matrix(sample_rate)
    sig = np.abs(S[keep]) ** 2 @ W.T
    err = np.abs(E[keep]) ** 2 @ W.T
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10(sig / err)
    snr = np.clip(np.nan_to_num(snr, nan=FW_MIN_DB, posinf=FW_MAX_DB), FW_MIN_DB, FW_MAX_DB)
    weight = sig ** (FW_GAMMA / 2)  # |S_j|^gamma from band energies
    per_frame = np.sum(weight * snr, axis=-1) / np.maximum(np.sum(weight, axis=-1), 1e-300)
    return float(np.mean(per_frame))


# -- records and reports ------------------------------------------------------

@dataclass
class PairRecord:
    id: str
    input_snr: float
    fwsegsnr_noisy_l: float
    fwsegsnr_noisy_r: float
    fwsegsnr_enhanced_l: float
    fwsegsnr_enhanced_r: float
    delta_fwsegsnr_l: float
    delta_fwsegsnr_r: float
    ild_error_db: float
    ipd_error_rad: float
    stoi_l: float
    stoi_r: float
    stoi_mean: float

    @property
    def delta_fwsegsnr(self) -> float:
        return (self.delta_fwsegsnr_l + self.delta_fwsegsnr_r) / 2


METRICS = [f.name for f in fields(PairRecord) if f.name != "id"]


def _bucket(snr: float) -> float:
    return BUCKET_DB * math.floor(snr / BUCKET_DB)


@dataclass
class EvalReport:
    records: list[PairRecord]
    failures: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> list[dict]:
        """Mean of every metric per input-SNR bucket (lower edge, width 3 dB), then overall."""
        groups: dict[float, list[PairRecord]] = {}
        for r in self.records:
            groups.setdefault(_bucket(r.input_snr), []).append(r)
        rows = []
        for b in sorted(groups):
            rows.append(self._summarise(f"{b:g}", groups[b]))
        return rows

    def overall(self) -> dict:
        return self._summarise("all", self.records)

    @staticmethod
    def _summarise(bucket: str, members: list[PairRecord]) -> dict:
        row = {"bucket": bucket, "n": len(members)}
        for m in METRICS:
            row[m] = float(np.mean([getattr(r, m) for r in members]))
        return row

    def mean(self, metric: str) -> float:
        if metric == "delta_fwsegsnr":
            return float(np.mean([r.delta_fwsegsnr for r in self.records]))
        return float(np.mean([getattr(r, metric) for r in self.records]))

    def to_dict(self) -> dict:
        return {
            "schema": "bccrn-eval-report",
            "version": REPORT_VERSION,
            "stoi_mean_label": STOI_LABEL,
            "bucket_width_db": BUCKET_DB,
            "meta": self.meta,
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates(),
            "overall": self.overall() if self.records else None,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != "bccrn-eval-report":
            raise ValueError("not an evaluation report")
        return cls([PairRecord(**r) for r in d["records"]], d.get("failures", []), d.get("meta", {}))


def _stoi_value(clean, est, fs) -> float:
    return float(stoi(torch.as_tensor(_as_numpy(clean)), torch.as_tensor(_as_numpy(est)), fs))


def evaluate_pair(clean: BinauralWaveform, noisy: BinauralWaveform, enhanced: BinauralWaveform,
                  cfg: StftConfig = StftConfig(), id: str = "", threshold_db: float = 20.0,
                  split_hz: float = 1500.0) -> PairRecord:
    """Score one enhanced stereo utterance against its clean reference."""
    if not (len(clean) == len(noisy) == len(enhanced)):
        raise ValueError("clean, noisy and enhanced lengths differ")
    if not (clean.sample_rate == noisy.sample_rate == enhanced.sample_rate == cfg.sample_rate):
        raise ValueError("sample rates differ")
    fs = cfg.sample_rate
    c = clean.stacked()
    y = noisy.stacked()
    e = enhanced.stacked()
    noise = BinauralWaveform(y[0] - c[0], y[1] - c[1], fs)
    input_snr = mean_snr(clean, noise) if np.any(noise.left) and np.any(noise.right) else math.inf
    fw_n = [fw_segsnr(c[i], y[i], fs) for i in range(2)]
    fw_e = [fw_segsnr(c[i], e[i], fs) for i in range(2)]
    S = (stft(c[0], cfg), stft(c[1], cfg))
    S_hat = (stft(e[0], cfg), stft(e[1], cfg))
    mask = speech_activity_mask(S[0], S[1], cfg, threshold_db, split_hz)
    stoi_l = _stoi_value(c[0], e[0], fs)
    stoi_r = _stoi_value(c[1], e[1], fs)
    return PairRecord(
        id=id,
        input_snr=float(input_snr),
        fwsegsnr_noisy_l=fw_n[0],
        fwsegsnr_noisy_r=fw_n[1],
        fwsegsnr_enhanced_l=fw_e[0],
        fwsegsnr_enhanced_r=fw_e[1],
        delta_fwsegsnr_l=fw_e[0] - fw_n[0],
        delta_fwsegsnr_r=fw_e[1] - fw_n[1],
        ild_error_db=float(ild_loss(S, S_hat, mask)),
        ipd_error_rad=float(ipd_loss(S, S_hat, mask)),
        stoi_l=stoi_l,
        stoi_r=stoi_r,
        stoi_mean=(stoi_l + stoi_r) / 2,
    )


class IdentityEnhancer:
    """Stand-in model whose masks are all ones."""

    def masks(self, Y_L, Y_R):
        ones = torch.ones_like(Y_L.bins)
        return ComplexRatioMask(ones), ComplexRatioMask(ones.clone())


@torch.no_grad()
def enhance(model, noisy: BinauralWaveform, cfg: StftConfig = StftConfig()) -> BinauralWaveform:
    """Run one stereo waveform through the model: STFT, masks, CRM, ISTFT."""
    if noisy.sample_rate != cfg.sample_rate:
        raise ValueError(f"input rate {noisy.sample_rate} Hz, model expects {cfg.sample_rate} Hz")
    y = torch.as_tensor(noisy.stacked())
    Y_L, Y_R = stft(y[0], cfg), stft(y[1], cfg)
    if isinstance(model, IdentityEnhancer):
        M_L, M_R = model.masks(Y_L, Y_R)
    else:
        net = getattr(model, "model", model)
        if net.config.input_bins + 1 != cfg.num_bins and net.config.input_bins != cfg.num_bins:
            raise ValueError(f"model expects {net.config.input_bins} bins, STFT gives {cfg.num_bins}")
        was_training = net.training
        net.eval()
        M_L, M_R = bccrn_forward(Y_L, Y_R, net)
        net.train(was_training)
    S_L = crm_apply(M_L.values.to(Y_L.bins.dtype), Y_L)
    S_R = crm_apply(M_R.values.to(Y_R.bins.dtype), Y_R)
    n = len(noisy)
    return BinauralWaveform(istft(S_L, n).numpy(), istft(S_R, n).numpy(), noisy.sample_rate)


def evaluate_dataset(manifest: DatasetManifest, model, split: str | None = "test",
                     cfg: StftConfig = StftConfig()) -> EvalReport:
    """Enhance and score every entry of ``split`` (all entries when None).

    Entries that fail (missing files, too short) are listed in ``failures``
    rather than aborting the run.
    """
    entries = manifest.entries if split is None else manifest.split(split)
    if not entries:
        raise ValueError(f"no entries in split {split!r}")
    records, failures = [], []
    for entry in entries:
        try:
            clean, noisy = manifest.load_pair(entry)
            enhanced = enhance(model, noisy, cfg)
            records.append(evaluate_pair(clean, noisy, enhanced, cfg, id=entry.noisy))
        except (OSError, ValueError) as err:
            log.warning("failed on %s: %s", entry.noisy, err)
            failures.append({"id": entry.noisy, "error": str(err)})
    return EvalReport(records, failures, {"split": split, "entries": len(entries)})


# -- output ------------------------------------------------------------------------

CSV_COLUMNS = ["row_type", "bucket", "n", "id"] + METRICS


def write_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, CSV_COLUMNS)
        w.writeheader()
        for row in report.aggregates():
            w.writerow({"row_type": "aggregate", "id": "", **{k: repr(v) if isinstance(v, float) else v
                                                             for k, v in row.items()}})
        for r in report.records:
            d = asdict(r)
            w.writerow({"row_type": "utterance", "bucket": f"{_bucket(r.input_snr):g}", "n": 1,
                        **{k: repr(v) if isinstance(v, float) else v for k, v in d.items()}})
    return path


def read_csv(path: str | Path) -> tuple[EvalReport, list[dict]]:
    """Re-parse a written CSV into a report plus its aggregate rows."""
    records, aggregates = [], []
    with Path(path).open(newline="") as f:
        for row in csv.DictReader(f):
            values = {m: float(row[m]) for m in METRICS}
            if row["row_type"] == "aggregate":
                aggregates.append({"bucket": row["bucket"], "n": int(row["n"]), **values})
            else:
                records.append(PairRecord(id=row["id"], **values))
    return EvalReport(records), aggregates


PLOTS = {
    "fwsegsnr": ("delta_fwsegsnr", "fwSegSNR improvement (dB)"),
    "ild": ("ild_error_db", "ILD error (dB)"),
    "ipd": ("ipd_error_rad", "IPD error (rad)"),
    "stoi": ("stoi_mean", "mean per-ear STOI"),
}


def plot_reports(reports: dict[str, EvalReport], out_dir: str | Path) -> list[Path]:
    """One SVG per metric with a line per labelled report, against input SNR."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (metric, label) in PLOTS.items():
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for tag, report in reports.items():
            groups: dict[float, list[PairRecord]] = {}
            for r in report.records:
                groups.setdefault(_bucket(r.input_snr), []).append(r)
            xs = sorted(groups)
            if metric == "delta_fwsegsnr":
                ys = [np.mean([r.delta_fwsegsnr for r in groups[b]]) for b in xs]
            else:
                ys = [np.mean([getattr(r, metric) for r in groups[b]]) for b in xs]
            ax.plot([b + BUCKET_DB / 2 for b in xs], ys, marker="o", label=tag)
        ax.set_xlabel("input SNR (dB)")
        ax.set_ylabel(label)
        if name == "stoi":
            ax.set_title(STOI_LABEL, fontsize=7)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{name}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        paths.append(path)
    return paths


def emit_report(report: EvalReport, path: str | Path, formats=("csv", "json", "svg"),
                label: str = "model") -> list[Path]:
    """Write ``report.csv``, ``report.json`` and per-metric SVG plots under ``path``."""
    if not report.records:
        raise ValueError("report has no records")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(write_csv(report, out / "report.csv"))
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        written.append(p)
    if "svg" in formats:
        written += plot_reports({label: report}, out)
    return written


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return EvalReport.from_dict(json.loads(path.read_text()))
