"""Two-stage training: deterministic adaptation, then inference-net fitting.

Stage 1 trains the whole classifier with MAP routers on cross-entropy.
Stage 2 freezes everything except the routers' inference nets and optimises
the cross-entropy-plus-KL objective.  Both stages early-stop on validation
NLL and return the best-validation parameters.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import MoEClassifier, elbo_loss
from .optim import make_optimizer
from .rng import RngStream
from .tensor import Tensor


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    learning_rate_stage2: float = 1e-4
    epochs_stage1: int = 25
    epochs_stage2: int = 12
    batch_size: int = 64
    kl_weight: float = 0.1
    seed: int = 0
    early_stop_patience: int = 3
    early_stop_metric: str = "val_nll"

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_metric != "val_nll":
            raise ValueError("only val_nll early stopping is supported")


@dataclass
class EpochStats:
    stage: str
    epoch: int
    train_loss: float
    val_nll: float
    val_acc: float


@dataclass
class TrainLog:
    stage: str
    epochs: list[EpochStats] = field(default_factory=list)
    best_val_nll: float = float("inf")
    best_epoch: int = -1


def evaluate_nll_acc(model: MoEClassifier, dataset, rng: RngStream) -> tuple[float, float]:
    """Mean negative log-likelihood and accuracy under evaluation routing."""
    with T.no_grad():
        logits, _ = model.forward(dataset.features, "eval", rng=rng)
        probs = T.softmax(logits, axis=-1).data
    return _nll_acc(probs, dataset.labels)


def _nll_acc(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    picked = probs[np.arange(len(labels)), labels]
    nll = float(-np.log(np.clip(picked, 1e-12, None)).mean())
    acc = float((probs.argmax(axis=1) == labels).mean())
    return nll, acc


def predictive_nll_acc(model: MoEClassifier, dataset,
                       rng: RngStream) -> tuple[float, float]:
    """NLL/accuracy of the Monte-Carlo predictive distribution.

    Used as the early-stopping metric: it is deterministic given the stream
    (so epoch-to-epoch changes reflect parameters, not sampler luck) and it
    is the quantity the evaluation reports.
    """
    from .model import predict_with_uncertainty
    pred = predict_with_uncertainty(model, dataset.features, rng=rng)
    return _nll_acc(pred.probs, dataset.labels)


def _run_stage(model: MoEClassifier, params, train_ds, val_ds,
               cfg: TrainConfig, stage: str, lr: float, kl_weight: float,
               epochs: int) -> TrainLog:
    log = TrainLog(stage=stage)
    if epochs == 0 or not params:
        return log
    opt = make_optimizer(cfg.optimizer, params, lr)
    stream = RngStream(cfg.seed).derive(stage)
    n = len(train_ds.labels)
    best = None
    patience_left = cfg.early_stop_patience
    for epoch in range(epochs):
        perm = stream.derive("perm", epoch).permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            fwd_rng = stream.derive("fwd", epoch, bi)
            logits, records = model.forward(train_ds.features[idx], "train",
                                            rng=fwd_rng)
            loss = elbo_loss(logits, train_ds.labels[idx], records, kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_nll, val_acc = predictive_nll_acc(model, val_ds,
                                              stream.derive("val"))
        log.epochs.append(EpochStats(stage, epoch, float(np.mean(losses)),
                                     val_nll, val_acc))
        if val_nll < log.best_val_nll:
            log.best_val_nll = val_nll
            log.best_epoch = epoch
            best = [p.data.copy() for _, p in params]
            patience_left = cfg.early_stop_patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break
    if best is not None:
        for (_, p), snap in zip(params, best):
            p.data = snap
    return log


def stage1_train(model: MoEClassifier, train_ds, val_ds,
                 cfg: TrainConfig) -> TrainLog:
    """Fit every parameter on cross-entropy; returns the best-NLL checkpoint."""
    params = model.param_items()
    return _run_stage(model, params, train_ds, val_ds, cfg, "stage1",
                      cfg.learning_rate, 0.0, cfg.epochs_stage1)


def stage2_train(model: MoEClassifier, train_ds, val_ds,
                 cfg: TrainConfig) -> TrainLog:
    """Fit only the inference nets; every other parameter is frozen.

    Freezing flips ``requires_grad`` off so the tape never reaches the
    frozen weights; the optimiser only ever sees the inference-net set.
    """
    phi = model.phi_param_items()
    phi_names = {n for n, _ in phi}
    for name, p in model.param_items():
        if name not in phi_names:
            p.requires_grad = False
    return _run_stage(model, phi, train_ds, val_ds, cfg, "stage2",
                      cfg.learning_rate_stage2, cfg.kl_weight,
                      cfg.epochs_stage2)


def parameter_digests(model: MoEClassifier, include_phi: bool = False) -> dict:
    """SHA-256 of each parameter's shape and raw bytes, keyed by name."""
    out = {}
    for name, p in model.param_items():
        if not include_phi and ".router.phi." in name:
            continue
        h = hashlib.sha256()
        h.update(repr(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
        out[name] = h.hexdigest()
    return out
