"""Gradients, Adam updates, learning-rate decay, early stopping and training.

Reverse-mode differentiation is torch autograd. Complex layers hold separate
real and imaginary parameter tensors, so every complex weight receives two
independent real gradients (d/d re, d/d im).
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .checkpoint import ModelCheckpoint
from .dsp import BinauralWaveform, ComplexSpectrogram, NonFiniteSignalError, StftConfig, stft
from .loss import LossBreakdown, LossWeights, composite_loss
from .model import crm_apply

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


# -- gradients ---------------------------------------------------------------

@dataclass
class Gradients:
    values: dict[str, torch.Tensor]
    detached: list[str]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def items(self):
        return self.values.items()


def grad(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
         retain_graph: bool = False) -> Gradients:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get zero gradients and are listed
    in ``detached``.
    """
    params = dict(params.items() if isinstance(params, Mapping) else params)
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"loss is {loss.detach().item()}")
    names = [n for n, p in params.items() if p.requires_grad]
    detached = [n for n, p in params.items() if not p.requires_grad]
    if loss.requires_grad and names:
        found = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True,
                                    retain_graph=retain_graph)
    else:
        found = [None] * len(names)
    values = {}
    for n, g in zip(names, found):
        if g is None:
            detached.append(n)
            g = torch.zeros_like(params[n])
        values[n] = g
    for n in params:
        values.setdefault(n, torch.zeros_like(params[n]))
    return Gradients({n: values[n] for n in params}, sorted(detached))


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS

    def as_checkpoint(self) -> dict:
        return {"step": self.step, "exp_avg": self.exp_avg, "exp_avg_sq": self.exp_avg_sq}

    @classmethod
    def from_checkpoint(cls, d: dict | None) -> "AdamState":
        if d is None:
            return cls()
        return cls(int(d["step"]), dict(d["exp_avg"]), dict(d["exp_avg_sq"]))


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    grads = grads.values if isinstance(grads, Gradients) else grads
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteLossError(f"non-finite gradient for {name}")
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name].to(p.dtype)
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = torch.zeros_like(p, memory_format=torch.preserve_format)
            v = torch.zeros_like(p, memory_format=torch.preserve_format)
        m = m.to(p.dtype).mul(b1).add_(g, alpha=1 - b1)
        v = v.to(p.dtype).mul(b2).addcmul_(g, g, value=1 - b2)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        denom = (v.sqrt() / math.sqrt(bc2)).add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# -- scheduling and stopping -------------------------------------------------

@dataclass
class LrSchedule:
    """Multi-step decay driven by validation loss.

    The rate is multiplied by ``factor`` after every ``wait`` consecutive
    epochs without improvement, and additionally at each epoch listed in
    ``milestones``. It never increases.
    """

    factor: float = 0.5
    wait: int = 2
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"decay factor must be in (0, 1), got {self.factor}")
        if self.wait < 1:
            raise ValueError("scheduler wait must be >= 1")

    def next_lr(self, lr: float, epoch: int, stagnant_epochs: int) -> float:
        if stagnant_epochs and stagnant_epochs % self.wait == 0:
            lr *= self.factor
        if epoch in self.milestones:
            lr *= self.factor
        return lr


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    schedule: LrSchedule = field(default_factory=LrSchedule)
    max_epochs: int = 100
    patience: int = 3
    batch_size: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    threshold_db: float = 20.0
    split_hz: float = 1500.0

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["milestones"] = list(self.schedule.milestones)
        return d


@dataclass
class TrainState:
    epoch: int = 0
    best_validation: float = math.inf
    best_epoch: int = 0
    stagnant_epochs: int = 0
    lr: float = 1e-3
    adam: AdamState = field(default_factory=AdamState)
    rng_state: dict | None = None
    stopped_early: bool = False

    def observe(self, validation: float, patience: int) -> bool:
        """Record one epoch's validation loss; True when training should stop."""
        self.epoch += 1
        if validation < self.best_validation:
            self.best_validation = validation
            self.best_epoch = self.epoch
            self.stagnant_epochs = 0
        else:
            self.stagnant_epochs += 1
        self.stopped_early = self.stagnant_epochs >= patience
        return self.stopped_early


def run_epochs(train_epoch: Callable[[TrainState], dict], validate: Callable[[TrainState], dict],
               cfg: TrainConfig, state: TrainState | None = None,
               on_record: Callable[[dict], None] | None = None,
               on_best: Callable[[TrainState], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Epoch loop with validation-driven decay and early stopping.

    ``validate`` returns a dict with at least ``total``. Stops once the
    validation loss has failed to improve for ``cfg.patience`` consecutive
    epochs, or after ``cfg.max_epochs``.
    """
    state = state or TrainState(lr=cfg.learning_rate)
    records = []
    while state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        lr = state.lr
        train_stats = train_epoch(state)
        valid_stats = validate(state)
        stop = state.observe(float(valid_stats["total"]), cfg.patience)
        if state.best_epoch == state.epoch and on_best is not None:
            on_best(state)
        state.lr = cfg.schedule.next_lr(state.lr, state.epoch, state.stagnant_epochs)
        record = {
            "epoch": state.epoch,
            "train": train_stats,
            "valid": valid_stats,
            "lr": lr,
            "next_lr": state.lr,
            "best_validation": state.best_validation,
            "stagnant_epochs": state.stagnant_epochs,
            "loss_weights": asdict(cfg.loss_weights),
            "seed": cfg.seed,
            "wall_time": time.perf_counter() - t0,
        }
        records.append(record)
        if on_record is not None:
            on_record(record)
        if stop:
            break
    return state, records


# -- model-level loss --------------------------------------------------------

def enhance_spectra(model, noisy: torch.Tensor, stft_cfg: StftConfig = StftConfig()):
    """Noisy (B, 2, N) waveforms -> (Y_L, Y_R), (S_hat_L, S_hat_R) spectrograms."""
    Y_L = stft(noisy[:, 0], stft_cfg)
    Y_R = stft(noisy[:, 1], stft_cfg)
    dtype = next(model.parameters()).dtype
    ctype = torch.complex128 if dtype == torch.float64 else torch.complex64
    M_L, M_R = model(Y_L.bins.to(ctype), Y_R.bins.to(ctype))
    return (Y_L, Y_R), (crm_apply(M_L.to(Y_L.bins.dtype), Y_L), crm_apply(M_R.to(Y_R.bins.dtype), Y_R))


def batch_loss(model, clean: torch.Tensor, noisy: torch.Tensor, weights: LossWeights,
               stft_cfg: StftConfig = StftConfig(), threshold_db: float = 20.0,
               split_hz: float = 1500.0) -> LossBreakdown:
    clean = torch.as_tensor(clean, dtype=torch.float64)
    noisy = torch.as_tensor(noisy, dtype=torch.float64)
    if clean.shape != noisy.shape or clean.dim() != 3 or clean.shape[1] != 2:
        raise ValueError(f"expected matching (B, 2, N) batches, got {tuple(clean.shape)} and {tuple(noisy.shape)}")
    _, S_hat = enhance_spectra(model, noisy, stft_cfg)
    S = (stft(clean[:, 0], stft_cfg), stft(clean[:, 1], stft_cfg))
    s = BinauralWaveform(clean[:, 0], clean[:, 1], stft_cfg.sample_rate)
    return composite_loss(s, S, S_hat, weights, threshold_db=threshold_db, split_hz=split_hz)


def _mean_breakdowns(items: list[tuple[LossBreakdown, int]]) -> dict[str, float]:
    total = sum(n for _, n in items)
    out: dict[str, float] = {}
    for b, n in items:
        for k, v in b.as_dict().items():
            out[k] = out.get(k, 0.0) + v * n / total
    return out


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


@torch.no_grad()
def evaluate_loss(model, clean: np.ndarray, noisy: np.ndarray, cfg: TrainConfig,
                  stft_cfg: StftConfig = StftConfig()) -> dict[str, float]:
    was_training = model.training
    model.eval()
    items = []
    for idx in _batches(len(clean), cfg.batch_size, None):
        b = batch_loss(model, clean[idx], noisy[idx], cfg.loss_weights, stft_cfg, cfg.threshold_db, cfg.split_hz)
        items.append((b, len(idx)))
    model.train(was_training)
    return _mean_breakdowns(items)


def train(checkpoint: ModelCheckpoint, manifest, cfg: TrainConfig = TrainConfig(),
          log_path: str | Path | None = None, dump_dir: str | Path | None = None,
          stft_cfg: StftConfig = StftConfig()) -> tuple[ModelCheckpoint, list[dict]]:
    """Train on the manifest's ``train`` split, validating on ``valid`` after every epoch.

    Returns a new checkpoint holding the best-validation parameters and the
    optimizer moments, plus the per-epoch log records (also appended to
    ``log_path`` as JSON lines when given).
    """
    clean_tr, noisy_tr = manifest.load_split("train")
    clean_va, noisy_va = manifest.load_split("valid")
    train_ids = {e.clean for e in manifest.split("train")}
    if train_ids & {e.clean for e in manifest.split("valid")}:
        raise ValueError("train and valid splits overlap")

    torch.manual_seed(cfg.seed)
    model = copy.deepcopy(checkpoint.model)
    model.train()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(lr=cfg.learning_rate, adam=AdamState.from_checkpoint(checkpoint.optimizer))
    best = {"state": copy.deepcopy(model.state_dict()), "adam": None}
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("w")

    def train_epoch(st: TrainState) -> dict:
        items = []
        for idx in _batches(len(clean_tr), cfg.batch_size, rng):
            try:
                b = batch_loss(model, clean_tr[idx], noisy_tr[idx], cfg.loss_weights, stft_cfg,
                               cfg.threshold_db, cfg.split_hz)
                g = grad(b.total, params)
                adam_step(params, g, st.adam, st.lr)
            except (NonFiniteLossError, NonFiniteSignalError) as err:
                dump = None
                if dump_dir is not None:
                    dump = Path(dump_dir) / "diverged.ckpt"
                    ModelCheckpoint(model, st.adam.as_checkpoint(),
                                    {"epoch": st.epoch + 1, "error": str(err)}).save(dump)
                raise TrainingDiverged(f"training diverged in epoch {st.epoch + 1}: {err}", dump) from err
            items.append((b, len(idx)))
        st.rng_state = rng.bit_generator.state
        return _mean_breakdowns(items)

    def validate(st: TrainState) -> dict:
        return evaluate_loss(model, clean_va, noisy_va, cfg, stft_cfg)

    def on_record(rec: dict) -> None:
        log.info("epoch %d train %.4f valid %.4f lr %.2e", rec["epoch"], rec["train"]["total"],
                 rec["valid"]["total"], rec["lr"])
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()

    def on_best(st: TrainState) -> None:
        best["state"] = copy.deepcopy(model.state_dict())
        best["adam"] = copy.deepcopy(st.adam.as_checkpoint())

    try:
        state, records = run_epochs(train_epoch, validate, cfg, state, on_record, on_best)
    finally:
        if log_file is not None:
            log_file.close()
    model.load_state_dict(best["state"])
    meta = dict(checkpoint.meta)
    meta.update({
        "train_config": cfg.to_dict(),
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "best_validation": state.best_validation,
        "stopped_early": state.stopped_early,
    })
    return ModelCheckpoint(model, best["adam"], meta), records
