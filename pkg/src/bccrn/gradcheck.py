"""Central finite-difference checks of autograd gradients on toy shapes.

Each component builds a float64 scalar function of a few named leaf tensors
(inputs and parameters). For a random sample of coordinates per tensor the
analytic gradient is compared with ``(f(x + h) - f(x - h)) / 2h``. The error
for a tensor is the norm-wise relative error over its sampled coordinates; a
component reports the worst tensor.

The step starts at ``h = 1e-4`` and is cut by 4 until two successive
estimates agree to a relative tolerance plus the round-off expected at that
step; failing that, the pair with the smallest gap plus round-off is used.
Losses built from PReLU, ``|.|`` and clipping are only piecewise smooth, and a step that straddles a kink adds an
error that does not shrink with ``h``; shrinking until the estimate is stable
steps clear of it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .cues import speech_activity_mask
from .data import synth_speech
from .dsp import BinauralWaveform, StftConfig, istft, stft
from .loss import LossWeights, composite_loss, ild_loss, ipd_loss, snr_loss, stoi_loss
from .model import (BCCRN, ComplexBatchNorm, ComplexConv2d, ComplexConvTranspose2d, ComplexLinear,
                    ComplexLSTM, ComplexPReLU, ComplexTensor, ModelConfig, crm_apply)

STEP = 1e-4
LINEAR_TOL = 1e-5
NONLINEAR_TOL = 1e-3
SAMPLES_PER_TENSOR = 6
#: Error-norm floor relative to max(1, |f|); a tensor whose true gradient is 0
#: (a conv bias feeding batch normalisation) otherwise reports pure round-off.
ABS_FLOOR = 1e-6
#: Step refinement (divide by 4) stops here; below it round-off dominates.
MIN_STEP = 2e-8
#: Successive estimates agreeing to this fraction end step refinement. A
#: difference straddling a PReLU or clipping kink disagrees with its successor.
AGREEMENT = 1e-5
#: Round-off in one loss evaluation, relative to max(1, |f|). Two estimates
#: closer than this over the smaller step agree only by quantisation.
ROUNDOFF = 16 * float(np.finfo(np.float64).eps)
#: Test-signal RMS. The fixed step must be small against the signal, since
#: log-magnitude cue terms are scale-free but their curvature is not.
SIGNAL_RMS = 5.0


@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float
    tolerance: float
    linear: bool
    checked: int
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@dataclass
class _Problem:
    fn: Callable[[], torch.Tensor]
    leaves: dict[str, torch.Tensor]
    linear: bool


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().to(torch.float64).requires_grad_(True)


def _cplx(gen, *shape) -> ComplexTensor:
    return ComplexTensor(torch.randn(*shape, generator=gen, dtype=torch.float64),
                         torch.randn(*shape, generator=gen, dtype=torch.float64))


def _module_problem(module: torch.nn.Module, x: ComplexTensor, gen, linear: bool) -> _Problem:
    module = module.double()
    xr, xi = _leaf(x.real), _leaf(x.imag)
    with torch.no_grad():
        ref = module(ComplexTensor(xr, xi))
    wr = torch.randn(ref.real.shape, generator=gen, dtype=torch.float64)
    wi = torch.randn(ref.imag.shape, generator=gen, dtype=torch.float64)

    def fn():
        out = module(ComplexTensor(xr, xi))
        return (out.real * wr).sum() + (out.imag * wi).sum()

    leaves = {"input.re": xr, "input.im": xi}
    leaves.update({n: p for n, p in module.named_parameters()})
    return _Problem(fn, leaves, linear)


def _speech_pair(seed: int, duration: float = 0.5, snr_db: float = 5.0):
    """Clean binaural speech and a distorted estimate of it (float64)."""
    rng = np.random.default_rng(seed)
    mono = synth_speech(duration, 16000, rng)
    mono = mono * (SIGNAL_RMS / np.sqrt(np.mean(mono**2)))
    right = np.roll(mono, 3) * 0.7
    clean = torch.tensor(np.stack([mono, right]))
    noise = torch.tensor(rng.standard_normal(clean.shape)) * float(np.std(mono)) * 10 ** (-snr_db / 20)
    return clean, clean + noise


def _waveform_problem(seed: int, term: str) -> _Problem:
    cfg = StftConfig()
    clean, est = _speech_pair(seed)
    est = _leaf(est)
    S = (stft(clean[0], cfg), stft(clean[1], cfg))
    mask = speech_activity_mask(S[0], S[1], cfg)
    s = BinauralWaveform(clean[0], clean[1])

    def fn():
        if term == "snr":
            return snr_loss(s, BinauralWaveform(est[0], est[1]))
        if term == "stoi":
            return stoi_loss(s, BinauralWaveform(est[0], est[1]))
        S_hat = (stft(est[0], cfg), stft(est[1], cfg))
        if term == "ild":
            return ild_loss(S, S_hat, mask)
        if term == "ipd":
            return ipd_loss(S, S_hat, mask)
        return composite_loss(s, S, S_hat, LossWeights(), mask).total

    return _Problem(fn, {"estimate": est}, False)


def _build(component: str, seed: int) -> _Problem:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    if component == "stft_istft":
        cfg = StftConfig()
        x = _leaf(torch.randn(1200, generator=gen, dtype=torch.float64))
        w = torch.randn(1200, generator=gen, dtype=torch.float64)
        return _Problem(lambda: (istft(stft(x, cfg), 1200) * w).sum(), {"signal": x}, True)
    if component == "crm_apply":
        M = _cplx(gen, 257, 4)
        Y = torch.complex(*_cplx(gen, 257, 4))
        mr, mi = _leaf(M.real), _leaf(M.imag)
        wr, wi = _cplx(gen, 257, 4)

        def fn():
            out = crm_apply(torch.complex(mr, mi), Y)
            return (out.real * wr).sum() + (out.imag * wi).sum()

        return _Problem(fn, {"mask.re": mr, "mask.im": mi}, True)
    if component == "complex_conv2d":
        return _module_problem(ComplexConv2d(2, 3), _cplx(gen, 2, 2, 16, 3), gen, True)
    if component == "complex_conv_transpose2d":
        return _module_problem(ComplexConvTranspose2d(2, 3), _cplx(gen, 2, 2, 8, 3), gen, True)
    if component == "complex_linear":
        return _module_problem(ComplexLinear(4, 3), _cplx(gen, 3, 2, 4), gen, True)
    if component == "complex_batchnorm":
        return _module_problem(ComplexBatchNorm(3), _cplx(gen, 4, 3, 5, 2), gen, False)
    if component == "complex_prelu":
        return _module_problem(ComplexPReLU(3), _cplx(gen, 2, 3, 5, 2), gen, False)
    if component == "complex_lstm":
        return _module_problem(ComplexLSTM(3, 2, 1, True), _cplx(gen, 3, 2, 3), gen, False)
    if component in ("snr_loss", "stoi_loss", "ild_loss", "ipd_loss", "composite_loss"):
        return _waveform_problem(seed, component.split("_")[0])
    if component == "bccrn":
        # inference-mode normalisation: in training mode the biases feeding it
        # have exactly zero gradient and only round-off would be compared
        model = BCCRN(ModelConfig.toy(seed=seed)).double().eval()
        cfg = StftConfig()
        clean, noisy = _speech_pair(seed, snr_db=0.0)
        Y = (stft(noisy[0], cfg), stft(noisy[1], cfg))
        S = (stft(clean[0], cfg), stft(clean[1], cfg))
        mask = speech_activity_mask(S[0], S[1], cfg)
        s = BinauralWaveform(clean[0], clean[1])

        def fn():
            M_L, M_R = model(Y[0].bins, Y[1].bins)
            return composite_loss(s, S, (crm_apply(M_L, Y[0]), crm_apply(M_R, Y[1])), LossWeights(), mask).total

        return _Problem(fn, dict(model.named_parameters()), False)
    raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")


COMPONENTS = (
    "stft_istft", "crm_apply", "complex_conv2d", "complex_conv_transpose2d", "complex_linear",
    "complex_batchnorm", "complex_prelu", "complex_lstm",
    "snr_loss", "stoi_loss", "ild_loss", "ipd_loss", "composite_loss", "bccrn",
)


def grad_check(component: str, seed: int = 0, samples: int | None = None, step: float | None = None) -> GradCheckResult:
    """Worst norm-wise relative error between analytic and finite-difference gradients."""
    if samples is None:
        # the toy network has 128 parameter tensors and a costly forward pass
        samples = 1 if component == "bccrn" else SAMPLES_PER_TENSOR
    if step is None:
        step = STEP
    problem = _build(component, seed)
    leaves = problem.leaves
    loss = problem.fn()
    floor = ABS_FLOOR * max(1.0, abs(loss.item()))
    analytic = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    for (name, leaf), g in zip(leaves.items(), analytic):
        g = torch.zeros_like(leaf) if g is None else g
        n = leaf.numel()
        picks = rng.choice(n, size=min(samples, n), replace=False)
        # include the largest-gradient coordinate so the sample is never all zeros
        picks = np.unique(np.append(picks, int(g.abs().argmax())))
        a, fd = [], []
        flat = leaf.data.view(-1)

        def central(i, h):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = problem.fn().item()
                flat[i] = orig - h
                down = problem.fn().item()
                flat[i] = orig
            return (up - down) / (2 * h)

        for i in picks:
            h = step
            prev = central(i, h)
            best, best_score = prev, math.inf
            while h / 4 >= MIN_STEP:
                h /= 4
                cur = central(i, h)
                gap = abs(cur - prev)
                noise = ROUNDOFF * max(1.0, abs(loss.item())) / h
                # the larger step of a pair carries less round-off
                if gap <= AGREEMENT * max(abs(cur), floor) + noise:
                    best = prev
                    break
                if gap + noise < best_score:
                    best, best_score = prev, gap + noise
                prev = cur
            fd.append(best)
            a.append(g.reshape(-1)[i].item())
        a, fd = np.array(a), np.array(fd)
        scale = max(np.linalg.norm(a), np.linalg.norm(fd))
        err = float(np.linalg.norm(a - fd) / max(scale, floor))
        checked += len(picks)
        if err >= worst:
            worst, worst_name = err, name
    tol = LINEAR_TOL if problem.linear else NONLINEAR_TOL
    return GradCheckResult(component, worst, tol, problem.linear, checked, worst_name)


def grad_check_all(seed: int = 0, components=COMPONENTS) -> list[GradCheckResult]:
    return [grad_check(c, seed) for c in components]
