"""Binaural complex convolutional recurrent network and complex ratio masks.

Complex activations travel as (real, imag) pairs of real tensors laid out
(batch, channel, frequency, time). Every complex layer owns a ``re`` and an
``im`` part; checkpoint serialisation relies on that naming.

Width convention: ``encoder_channels`` and ``lstm_hidden`` count real-valued
feature maps/units with the real and imaginary halves together, as in DCCRN.
A layer listed with 32 channels therefore has 16 complex channels, and the
bottleneck of 4 frequency positions x 256 channels carries 1024 real (512
complex) features per ear.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import ComplexSpectrogram

CRM_EPS = 1e-16


class ComplexTensor(NamedTuple):
    real: torch.Tensor
    imag: torch.Tensor

    @classmethod
    def from_complex(cls, z: torch.Tensor) -> "ComplexTensor":
        return cls(z.real, z.imag)

    def to_complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)

    @property
    def shape(self):
        return self.real.shape


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256, 256, 256)
    kernel: tuple[int, int] = (5, 1)
    stride: tuple[int, int] = (2, 1)
    lstm_layers: int = 8
    lstm_hidden: int = 128
    bidirectional: bool = True
    linear_features: int = 1024
    input_bins: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        problems = []
        if not self.encoder_channels:
            problems.append("encoder_channels must not be empty")
        if any(c <= 0 or c % 2 for c in self.encoder_channels):
            problems.append("encoder_channels must be positive and even (real+imag halves)")
        if self.lstm_hidden <= 0 or self.lstm_hidden % 2:
            problems.append("lstm_hidden must be positive and even")
        if self.lstm_layers < 1:
            problems.append("lstm_layers must be >= 1")
        if self.stride[1] != 1:
            problems.append("time stride must be 1")
        if self.kernel[0] % 2 == 0:
            problems.append("frequency kernel extent must be odd")
        depth = len(self.encoder_channels)
        if self.input_bins % (self.stride[0] ** depth):
            problems.append(
                f"input_bins={self.input_bins} not divisible by stride^depth={self.stride[0] ** depth}"
            )
        elif self.encoder_channels and self.linear_features != self.bottleneck_features:
            problems.append(
                f"linear_features={self.linear_features} must equal bottleneck width "
                f"{self.bottleneck_features} (channels x frequency positions)"
            )
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def bottleneck_bins(self) -> int:
        return self.input_bins // self.stride[0] ** len(self.encoder_channels)

    @property
    def bottleneck_features(self) -> int:
        """Real-valued features per ear and frame entering the recurrent block."""
        return self.encoder_channels[-1] * self.bottleneck_bins

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["kernel"] = list(self.kernel)
        d["stride"] = list(self.stride)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(encoder_channels=(8, 16, 32), lstm_layers=1, lstm_hidden=32, input_bins=256)
        base.update(kw)
        if "linear_features" not in kw:
            ch = base["encoder_channels"]
            base["linear_features"] = ch[-1] * base["input_bins"] // 2 ** len(ch)
        return cls(**base)


# -- complex building blocks ---------------------------------------------------

class ComplexConv2d(nn.Module):
    """Complex convolution from four real convolutions.

    Channel counts here are complex channels. Time padding is causal
    (``kernel_t - 1`` frames on the left); frequency padding is symmetric.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel=(5, 1), stride=(2, 1), freq_padding: int | None = None):
        super().__init__()
        kf, kt = kernel
        self.freq_padding = (kf - 1) // 2 if freq_padding is None else freq_padding
        self.time_padding = kt - 1
        self.re = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=(self.freq_padding, 0), bias=False)
        self.im = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=(self.freq_padding, 0), bias=False)
        self.bias = nn.ParameterDict({"re": nn.Parameter(torch.zeros(out_ch)), "im": nn.Parameter(torch.zeros(out_ch))})

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        xr, xi = x
        if self.time_padding:
            xr = F.pad(xr, (self.time_padding, 0))
            xi = F.pad(xi, (self.time_padding, 0))
        real = self.re(xr) - self.im(xi) + self.bias["re"].view(-1, 1, 1)
        imag = self.re(xi) + self.im(xr) + self.bias["im"].view(-1, 1, 1)
        return ComplexTensor(real, imag)


class ComplexConvTranspose2d(nn.Module):
    """Complex transposed convolution doubling the frequency extent; causal in time."""

    def __init__(self, in_ch: int, out_ch: int, kernel=(5, 1), stride=(2, 1)):
        super().__init__()
        kf, _ = kernel
        pad = (kf - 1) // 2
        opts = dict(stride=stride, padding=(pad, 0), output_padding=(stride[0] - 1, 0), bias=False)
        self.re = nn.ConvTranspose2d(in_ch, out_ch, kernel, **opts)
        self.im = nn.ConvTranspose2d(in_ch, out_ch, kernel, **opts)
        self.bias = nn.ParameterDict({"re": nn.Parameter(torch.zeros(out_ch)), "im": nn.Parameter(torch.zeros(out_ch))})

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        xr, xi = x
        n_frames = xr.shape[-1]
        real = (self.re(xr) - self.im(xi))[..., :n_frames] + self.bias["re"].view(-1, 1, 1)
        imag = (self.re(xi) + self.im(xr))[..., :n_frames] + self.bias["im"].view(-1, 1, 1)
        return ComplexTensor(real, imag)


class ComplexBatchNorm(nn.Module):
    """Independent batch normalisation of the real and imaginary parts."""

    def __init__(self, channels: int):
        super().__init__()
        self.re = nn.BatchNorm2d(channels)
        self.im = nn.BatchNorm2d(channels)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return ComplexTensor(self.re(x.real), self.im(x.imag))


class ComplexPReLU(nn.Module):
    """Per-channel PReLU applied separately to each part."""

    def __init__(self, channels: int):
        super().__init__()
        self.re = nn.PReLU(channels)
        self.im = nn.PReLU(channels)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return ComplexTensor(self.re(x.real), self.im(x.imag))


class ComplexLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.re = nn.Linear(in_features, out_features, bias=False)
        self.im = nn.Linear(in_features, out_features, bias=False)
        self.bias = nn.ParameterDict({"re": nn.Parameter(torch.zeros(out_features)),
                                      "im": nn.Parameter(torch.zeros(out_features))})

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        xr, xi = x
        return ComplexTensor(self.re(xr) - self.im(xi) + self.bias["re"],
                             self.re(xi) + self.im(xr) + self.bias["im"])


class ComplexLSTMLayer(nn.Module):
    """One complex recurrent layer built from two real LSTMs F_r and F_i.

    ``out = (F_r(x_r) - F_i(x_i)) + j (F_r(x_i) + F_i(x_r))`` with inputs
    shaped (time, batch, features). Each real LSTM runs independently over its
    input, so the imaginary-part cell never sees the real-part state.
    """

    def __init__(self, input_size: int, hidden_size: int, bidirectional: bool = True):
        super().__init__()
        self.re = nn.LSTM(input_size, hidden_size, bidirectional=bidirectional)
        self.im = nn.LSTM(input_size, hidden_size, bidirectional=bidirectional)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        xr, xi = x
        batch = xr.shape[1]
        both = torch.cat([xr, xi], dim=1)
        via_re, _ = self.re(both)
        via_im, _ = self.im(both)
        rr, ri = via_re[:, :batch], via_re[:, batch:]
        ir, ii = via_im[:, :batch], via_im[:, batch:]
        return ComplexTensor(rr - ii, ri + ir)


class ComplexLSTM(nn.Module):
    def __init__(self, input_size: int, hidden_size: int, num_layers: int, bidirectional: bool = True):
        super().__init__()
        width = hidden_size * (2 if bidirectional else 1)
        self.layers = nn.ModuleList(
            ComplexLSTMLayer(input_size if i == 0 else width, hidden_size, bidirectional)
            for i in range(num_layers)
        )
        self.output_size = width

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        for layer in self.layers:
            x = layer(x)
        return x


class EncoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride):
        super().__init__()
        self.conv = ComplexConv2d(in_ch, out_ch, kernel, stride)
        self.norm = ComplexBatchNorm(out_ch)
        self.act = ComplexPReLU(out_ch)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, last=False):
        super().__init__()
        self.conv = ComplexConvTranspose2d(in_ch, out_ch, kernel, stride)
        self.last = last
        if not last:
            self.norm = ComplexBatchNorm(out_ch)
            self.act = ComplexPReLU(out_ch)

    def forward(self, x):
        x = self.conv(x)
        if self.last:
            return x
        return self.act(self.norm(x))


def _cat(a: ComplexTensor, b: ComplexTensor, dim=1) -> ComplexTensor:
    return ComplexTensor(torch.cat([a.real, b.real], dim), torch.cat([a.imag, b.imag], dim))


class BCCRN(nn.Module):
    """Per-ear complex encoders and decoders around a shared complex LSTM.

    ``forward`` takes complex spectrogram tensors (batch, bins, frames) for
    both ears and returns one complex ratio mask per ear of the same shape.
    Inputs may carry ``input_bins + 1`` bins, in which case the DC bin is
    skipped by the network and its mask value is 0.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        ch = [c // 2 for c in config.encoder_channels]
        depth = len(ch)
        k, s = config.kernel, config.stride

        def encoder():
            ins = [1] + ch[:-1]
            return nn.ModuleList(EncoderBlock(a, b, k, s) for a, b in zip(ins, ch))

        def decoder():
            blocks = []
            for i in range(depth):
                src = ch[depth - 1 - i]
                dst = ch[depth - 2 - i] if i < depth - 1 else 1
                blocks.append(DecoderBlock(2 * src, dst, k, s, last=i == depth - 1))
            return nn.ModuleList(blocks)

        self.enc_l, self.enc_r = encoder(), encoder()
        self.dec_l, self.dec_r = decoder(), decoder()
        per_ear = config.bottleneck_features // 2  # complex features
        self.rnn = ComplexLSTM(2 * per_ear, config.lstm_hidden // 2, config.lstm_layers, config.bidirectional)
        self.linear = ComplexLinear(self.rnn.output_size, 2 * per_ear)
        reset_parameters(self, config.seed)

    def _encode(self, blocks, x):
        skips = []
        for block in blocks:
            x = block(x)
            skips.append(x)
        return x, skips

    def _decode(self, blocks, x, skips):
        for block, skip in zip(blocks, reversed(skips)):
            x = block(_cat(x, skip))
        return x

    def forward(self, Y_L: torch.Tensor, Y_R: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if Y_L.shape != Y_R.shape:
            raise ValueError("left and right spectrograms must share a shape")
        squeeze = Y_L.dim() == 2
        if squeeze:
            Y_L, Y_R = Y_L.unsqueeze(0), Y_R.unsqueeze(0)
        n_bins = Y_L.shape[-2]
        bins = self.config.input_bins
        if n_bins == bins + 1:
            Y_L, Y_R = Y_L[..., 1:, :], Y_R[..., 1:, :]
        elif n_bins != bins:
            raise ValueError(f"model expects {bins} or {bins + 1} bins, got {n_bins}")

        xl = ComplexTensor(Y_L.real.unsqueeze(1), Y_L.imag.unsqueeze(1))
        xr = ComplexTensor(Y_R.real.unsqueeze(1), Y_R.imag.unsqueeze(1))
        zl, skips_l = self._encode(self.enc_l, xl)
        zr, skips_r = self._encode(self.enc_r, xr)

        batch, c, f, t = zl.real.shape

        def frames(z):  # (B, C, F, T) -> (T, B, C*F)
            return z.permute(3, 0, 1, 2).reshape(t, batch, c * f)

        seq = ComplexTensor(torch.cat([frames(zl.real), frames(zr.real)], -1),
                            torch.cat([frames(zl.imag), frames(zr.imag)], -1))
        out = self.linear(self.rnn(seq))

        def unframe(z):  # (T, B, C*F) -> (B, C, F, T)
            return z.reshape(t, batch, c, f).permute(1, 2, 3, 0)

        half = c * f
        bl = ComplexTensor(unframe(out.real[..., :half]), unframe(out.imag[..., :half]))
        br = ComplexTensor(unframe(out.real[..., half:]), unframe(out.imag[..., half:]))
        ml = self._decode(self.dec_l, bl, skips_l)
        mr = self._decode(self.dec_r, br, skips_r)
        masks = [torch.complex(m.real[:, 0], m.imag[:, 0]) for m in (ml, mr)]
        if n_bins == bins + 1:
            masks = [F.pad(m, (0, 0, 1, 0)) for m in masks]
        if squeeze:
            masks = [m[0] for m in masks]
        return masks[0], masks[1]


def reset_parameters(model: nn.Module, seed: int = 0) -> None:
    """Uniform fan-in initialisation of every part from a seeded generator.

    Conv/linear weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), LSTM
    tensors from U(-1/sqrt(hidden), 1/sqrt(hidden)); biases start at zero,
    normalisation gains at one, PReLU slopes at 0.25.
    """
    gen = torch.Generator().manual_seed(seed)

    def uniform_(p, bound):
        with torch.no_grad():
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)

    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            w = module.weight
            uniform_(w, 1 / math.sqrt(w.shape[1] * w.shape[2] * w.shape[3]))
        elif isinstance(module, nn.ConvTranspose2d):
            w = module.weight
            # fan-in of a transposed conv: input channels x taps landing per output
            taps = math.ceil(w.shape[2] / module.stride[0]) * w.shape[3]
            uniform_(w, 1 / math.sqrt(w.shape[0] * taps))
        elif isinstance(module, nn.Linear):
            uniform_(module.weight, 1 / math.sqrt(module.weight.shape[1]))
        elif isinstance(module, nn.LSTM):
            bound = 1 / math.sqrt(module.hidden_size)
            for p in module.parameters():
                uniform_(p, bound)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
            module.reset_running_stats()
        elif isinstance(module, nn.PReLU):
            nn.init.constant_(module.weight, 0.25)
    for name, p in model.named_parameters():
        if name.endswith("bias.re") or name.endswith("bias.im"):
            nn.init.zeros_(p)


def count_parameters(model: nn.Module) -> int:
    """Trainable real scalars; a complex weight counts as two (its parts)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# -- complex ratio masks ------------------------------------------------------

@dataclass
class ComplexRatioMask:
    values: torch.Tensor

    def __post_init__(self):
        if not torch.is_complex(self.values):
            raise TypeError("mask values must be complex")


def _values(x) -> torch.Tensor:
    if isinstance(x, ComplexSpectrogram):
        return x.bins
    if isinstance(x, ComplexRatioMask):
        return x.values
    return x


def crm_apply(M, Y):
    """Enhanced spectrogram ``M * Y``; returns the same container type as ``Y``."""
    m, y = _values(M), _values(Y)
    if m.shape != y.shape:
        raise ValueError(f"mask shape {tuple(m.shape)} != spectrogram shape {tuple(y.shape)}")
    real = m.real * y.real - m.imag * y.imag
    imag = m.real * y.imag + m.imag * y.real
    out = torch.complex(real, imag)
    return Y.with_bins(out) if isinstance(Y, ComplexSpectrogram) else out


def crm_compute(S_hat, Y, eps: float = CRM_EPS) -> ComplexRatioMask:
    """Mask that maps ``Y`` onto ``S_hat``: ``S_hat / Y`` with ``|Y|^2`` guarded by ``eps``."""
    s, y = _values(S_hat), _values(Y)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(s.shape)} vs {tuple(y.shape)}")
    den = y.real**2 + y.imag**2 + eps
    real = (y.real * s.real + y.imag * s.imag) / den
    imag = (y.real * s.imag - y.imag * s.real) / den
    return ComplexRatioMask(torch.complex(real, imag))


def bccrn_forward(Y_L, Y_R, checkpoint) -> tuple[ComplexRatioMask, ComplexRatioMask]:
    """Masks for a stereo pair from a :class:`~bccrn.checkpoint.ModelCheckpoint` (or bare model)."""
    model = getattr(checkpoint, "model", checkpoint)
    yl, yr = _values(Y_L), _values(Y_R)
    dtype = next(model.parameters()).dtype
    ml, mr = model(yl.to(torch.complex128 if dtype == torch.float64 else torch.complex64),
                   yr.to(torch.complex128 if dtype == torch.float64 else torch.complex64))
    return ComplexRatioMask(ml), ComplexRatioMask(mr)
