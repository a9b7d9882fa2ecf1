"""Dual-objective training: masked forecasting MAE plus weighted spectral
reconstruction MAE, optimized with Adam under full seed control.

Forward tapes are built once per batch and replayed with rebound parameters
every step, so epochs after the first pay only for numpy array work. The
reported total loss is literally ``fore + gamma * recon`` as graph ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import frequency
from .autodiff import Tensor
from .data import AlignedBatch, PreparedSample, make_batch
from .model import (AblationFlags, ForwardBundle, ModelConfig, ModelState,
                    build_forward)


class EmptyTargetError(ValueError):
    """No unmasked targets to score against."""


class ZeroObservationError(ValueError):
    """No observed history entries to reconstruct."""


class NumericalAbortError(FloatingPointError):
    """A loss term went non-finite during training."""

    def __init__(self, term: str, batch_index: int):
        super().__init__(f"non-finite {term} loss in batch {batch_index}")
        self.term = term
        self.batch_index = batch_index


def forecasting_loss(pred: Tensor, target: Tensor, target_mask: Tensor) -> Tensor:
    """Mean absolute error over real (unmasked) future queries."""
    if target_mask.data.sum() == 0:
        raise EmptyTargetError("target mask is all zero")
    return ad.masked_mean(ad.absolute(pred - target), target_mask)


def reconstruction_loss(spectrum: frequency.Spectrum, t: Tensor, v: Tensor,
                        m: Tensor, omega: Tensor) -> Tensor:
    """MAE between the spectrum's re-synthesized history and the normalized observations."""
    if m.data.sum() == 0:
        raise ZeroObservationError("no observed entries in batch history")
    recon = frequency.inverse_nudft(spectrum, t, omega)
    return ad.masked_mean(ad.absolute(recon - v), m)


@dataclass
class LossReport:
    fore: float
    recon: float
    total: float
    gamma: float


@dataclass
class TrainingBundle:
    forward: ForwardBundle
    fore: Tensor
    recon: Tensor | None
    total: Tensor

    def report(self, gamma: float) -> LossReport:
        return LossReport(fore=float(self.fore.data),
                          recon=float(self.recon.data) if self.recon is not None else 0.0,
                          total=float(self.total.data), gamma=gamma)


def build_training_graph(cfg: ModelConfig, params: dict[str, np.ndarray],
                         batch: AlignedBatch, gamma: float,
                         ablate: AblationFlags | None = None,
                         strict: bool = False) -> TrainingBundle:
    fb = build_forward(cfg, params, batch, ablate=ablate, strict=strict)
    graph = fb.graph
    target = graph.constant(batch.target)
    target_mask = graph.constant(batch.target_mask)
    fore = forecasting_loss(fb.predictions, target, target_mask)
    ablate = ablate or AblationFlags()
    recon = None
    if fb.spectrum is not None and not ablate.no_recon:
        recon = reconstruction_loss(fb.spectrum, fb.t_const, fb.v_const,
                                    fb.m_const, fb.omega)
        total = fore + ad.scale(recon, gamma)
    else:
        total = fore
    graph.mark_output(total)
    return TrainingBundle(forward=fb, fore=fore, recon=recon, total=total)


class Adam:
    """Adam with bias correction; moments live on the ModelState for checkpointing."""

    def __init__(self, state: ModelState, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.state = state
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self, grads: dict[str, np.ndarray]) -> None:
        s = self.state
        for name, g in grads.items():
            p = s.params[name]
            m = s.opt_m.setdefault(name, np.zeros_like(p))
            v = s.opt_v.setdefault(name, np.zeros_like(p))
            t = s.opt_t.get(name, 0) + 1
            s.opt_t[name] = t
            m[...] = self.b1 * m + (1.0 - self.b1) * g
            v[...] = self.b2 * v + (1.0 - self.b2) * g * g
            m_hat = m / (1.0 - self.b1 ** t)
            v_hat = v / (1.0 - self.b2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    gamma: float = 0.1
    seed: int = 2024
    patience: int = 10
    ablate: AblationFlags = field(default_factory=AblationFlags)


def _chunk(samples: list[PreparedSample], size: int) -> list[list[PreparedSample]]:
    return [samples[i:i + size] for i in range(0, len(samples), max(size, 1))]


class _Evaluator:
    """Caches forward bundles for a fixed sample set; rebind + read per call."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 samples: list[PreparedSample], batch_size: int,
                 ablate: AblationFlags | None = None):
        self.bundles = [build_forward(cfg, params, make_batch(chunk), ablate=ablate)
                        for chunk in _chunk(samples, batch_size)]

    def metrics(self, params: dict[str, np.ndarray]) -> dict[str, float]:
        sae = sse = count = 0.0
        for fb in self.bundles:
            fb.rebind(params)
            err = (fb.predictions.data - fb.batch.target) * fb.batch.target_mask
            sae += np.abs(err).sum()
            sse += (err ** 2).sum()
            count += fb.batch.target_mask.sum()
        if count == 0:
            raise EmptyTargetError("no real targets in evaluation set")
        return {"mse": float(sse / count), "mae": float(sae / count)}


def evaluate(state: ModelState, samples: list[PreparedSample],
             batch_size: int = 64, ablate: AblationFlags | None = None) -> dict[str, float]:
    """Masked MSE/MAE over observed targets, in original (denormalized) units."""
    ev = _Evaluator(state.config, state.params, samples, batch_size, ablate=ablate)
    return ev.metrics(state.params)


def train(state: ModelState, train_samples: list[PreparedSample],
          val_samples: list[PreparedSample], cfg: TrainConfig) -> tuple[ModelState, list[dict]]:
    """Adam on the total loss with early stopping on validation forecasting MAE.

    Batches are fixed contiguous chunks; only their visit order is reshuffled
    per epoch, so each batch's tape is traced once and replayed thereafter.
    Returns the state rolled back to the best-validation parameters plus the
    per-epoch history.
    """
    if not train_samples or not val_samples:
        raise ValueError("need non-empty train and validation splits")
    cfg.ablate.validate()
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(state, lr=cfg.lr)
    batches = [make_batch(chunk) for chunk in _chunk(train_samples, cfg.batch_size)]
    bundles: dict[int, TrainingBundle] = {}
    evaluator = _Evaluator(state.config, state.params, val_samples, batch_size=64,
                           ablate=cfg.ablate)

    history: list[dict] = []
    best_mae = np.inf
    best_params = state.copy_params()
    since_best = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(batches))
        totals = []
        for bi in order:
            if bi not in bundles:
                bundles[bi] = build_training_graph(state.config, state.params,
                                                   batches[bi], gamma=cfg.gamma,
                                                   ablate=cfg.ablate)
            tb = bundles[bi]
            tb.forward.rebind(state.params)
            report = tb.report(cfg.gamma)
            for term, value in (("forecasting", report.fore),
                                ("reconstruction", report.recon),
                                ("total", report.total)):
                if not np.isfinite(value):
                    raise NumericalAbortError(term, int(bi))
            grads = tb.forward.graph.backward(1.0)
            optimizer.step({leaf.name: g for leaf, g in grads.items()})
            totals.append(report.total)
        val = evaluator.metrics(state.params)
        history.append({"epoch": epoch, "train_total": float(np.mean(totals)),
                        "val_mae": val["mae"], "val_mse": val["mse"]})
        if val["mae"] < best_mae:
            best_mae = val["mae"]
            best_params = state.copy_params()
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    state.params = best_params
    return state, history
