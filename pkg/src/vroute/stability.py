"""Perturbation harness for routing stability.

Injects isotropic Gaussian noise at one block input at a time, with the
noise scale tied to the average activation norm, and measures how much the
perturbed layer's expert selection moves (Jaccard similarity against the
clean pass).  Stochastic routers reuse identical streams for the clean and
perturbed passes, so the measured instability reflects the input noise and
not the sampler.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import jaccard_rows
from .model import MoEClassifier
from .rng import RngStream

DEFAULT_GAMMAS = (0.001, 0.002, 0.005, 0.007, 0.01, 0.02, 0.05)


@dataclass
class PerturbationSpec:
    gamma_levels: tuple = DEFAULT_GAMMAS
    diagnostic_gamma: float = 0.01
    repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        self.gamma_levels = tuple(float(g) for g in self.gamma_levels)
        if any(g <= 0 for g in self.gamma_levels) or self.diagnostic_gamma <= 0:
            raise ValueError("noise levels must be > 0")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class StabilityCell:
    layer: int
    gamma: float
    mean_jaccard: float
    q10: float
    q50: float
    q90: float


@dataclass
class StabilityReport:
    cells: list[StabilityCell] = field(default_factory=list)
    mean_norms: list[float] = field(default_factory=list)
    diagnostic_gamma: float = 0.01

    def cell(self, layer: int, gamma: float) -> StabilityCell:
        for c in self.cells:
            if c.layer == layer and c.gamma == gamma:
                return c
        raise KeyError((layer, gamma))

    def layers(self) -> list[int]:
        return sorted({c.layer for c in self.cells})


def perturb_input(u: np.ndarray, gamma: float, mean_norm: float,
                  rng: RngStream) -> np.ndarray:
    """Add N(0, sigma^2 I) with sigma = gamma * mean_norm."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    u = np.asarray(u, dtype=np.float64)
    return u + gamma * mean_norm * rng.normal(u.shape)


def _forward_selections(model: MoEClassifier, x: np.ndarray, rng_base: RngStream,
                        input_noise: dict | None = None,
                        block_inputs: list | None = None) -> list[np.ndarray]:
    # A fresh stream derived with fixed tags replays the same router draws on
    # every call: the common-random-numbers policy between passes.
    with T.no_grad():
        _, records = model.forward(x, "eval", rng=rng_base.derive("route"),
                                   input_noise=input_noise,
                                   block_inputs=block_inputs)
    return [r.selection for r in records]


def layerwise_stability(model: MoEClassifier, dataset,
                        spec: PerturbationSpec) -> StabilityReport:
    """Mean and quantiles of per-token Jaccard for every (layer, gamma) cell.

    Noise enters at one block input at a time, everything else stays clean,
    and the comparison is made at the perturbed layer's own selection.
    """
    base = RngStream(spec.seed)
    x = dataset.features
    block_inputs: list[np.ndarray] = []
    clean = _forward_selections(model, x, base, block_inputs=block_inputs)
    mean_norms = [float(np.linalg.norm(h, axis=1).mean()) for h in block_inputs]
    report = StabilityReport(mean_norms=mean_norms,
                             diagnostic_gamma=spec.diagnostic_gamma)
    for layer in range(len(model.blocks)):
        for gi, gamma in enumerate(spec.gamma_levels):
            values = []
            for rep in range(spec.repeats):
                noise_rng = base.derive("noise", layer, gi, rep)
                noise = gamma * mean_norms[layer] * noise_rng.normal(x.shape[0:1]
                                                                     + block_inputs[layer].shape[1:])
                perturbed = _forward_selections(model, x, base,
                                                input_noise={layer: noise})
                values.append(jaccard_rows(clean[layer], perturbed[layer]))
            j = np.concatenate(values)
            report.cells.append(StabilityCell(
                layer=layer, gamma=gamma, mean_jaccard=float(j.mean()),
                q10=float(np.quantile(j, 0.10)), q50=float(np.quantile(j, 0.50)),
                q90=float(np.quantile(j, 0.90))))
    return report


def sensitivity_ranking(report: StabilityReport) -> list[int]:
    """Layers ordered most brittle first: ascending mean Jaccard at the
    diagnostic noise level, ties broken by layer index."""
    keyed = []
    for layer in report.layers():
        cell = report.cell(layer, report.diagnostic_gamma)
        keyed.append((cell.mean_jaccard, layer))
    return [layer for _, layer in sorted(keyed)]


def fixed_temperature_layer_sweep(model: MoEClassifier, dataset, t_grid,
                                  layers, seed: int = 0) -> list[dict]:
    """Accuracy and ECE with one layer at a time swapped to sampled routing
    at a fixed temperature; all other layers stay deterministic."""
    from .metrics import calibration_report
    from .routers import RouterConfig, TempScaleRouter
    from dataclasses import replace as dc_replace

    rows = []
    base = RngStream(seed)
    for layer in layers:
        blk = model.blocks[layer]
        original = blk.moe.router
        for t in t_grid:
            cfg = dc_replace(original.config, variant="temp_scale",
                             global_temperature=float(t))
            blk.moe.router = TempScaleRouter(original.w_r, cfg)
            try:
                with T.no_grad():
                    logits, _ = model.forward(
                        dataset.features, "eval",
                        rng=base.derive("sweep", layer, f"{t!r}"))
                    probs = T.softmax(logits, axis=-1).data
            finally:
                blk.moe.router = original
            rep = calibration_report(probs, dataset.labels)
            rows.append({"layer": layer, "temperature": float(t),
                         "accuracy": rep.accuracy, "ece": rep.ece})
    return rows
