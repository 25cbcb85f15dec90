"""Toy mixture-of-experts classifier.

A stack of blocks, each a dense projection with ReLU followed by an MoE
layer whose router is pluggable per block.  There is no attention and no
sequence axis: one example is one token.  All projections are bias-free
matrices; everything runs on the tape from :mod:`vroute.tensor`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .rng import RngStream
from .routers import (BatchRouteResult, RouterBase, RouterConfig, make_router)
from .tensor import Tensor


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    expert_hidden: int | None = None   # defaults to hidden_dim
    num_blocks: int = 4
    num_experts: int = 8
    top_k: int = 2
    num_classes: int = 4
    phi_hidden: int | None = None      # defaults to hidden_dim // 4

    def __post_init__(self):
        if self.expert_hidden is None:
            self.expert_hidden = self.hidden_dim
        if self.phi_hidden is None:
            self.phi_hidden = max(1, self.hidden_dim // 4)
        if min(self.feature_dim, self.hidden_dim, self.expert_hidden,
               self.num_blocks, self.num_experts, self.top_k,
               self.num_classes) < 1:
            raise ValueError("all model dimensions must be >= 1")


class ExpertNetwork:
    """Two-layer feed-forward expert mapping dim -> dim."""

    def __init__(self, dim: int, hidden: int, rng: RngStream):
        self.w1 = Tensor(rng.normal((dim, hidden)) / math.sqrt(dim), requires_grad=True)
        self.w2 = Tensor(rng.normal((hidden, dim)) / math.sqrt(hidden), requires_grad=True)

    def forward(self, u: Tensor) -> Tensor:
        return T.matmul(T.relu(T.matmul(u, self.w1)), self.w2)

    def param_items(self):
        return [("w1", self.w1), ("w2", self.w2)]


class MoELayer:
    """N experts mixed by the router's gate weights."""

    def __init__(self, experts: list[ExpertNetwork], router: RouterBase,
                 layer_index: int):
        if router.config.num_experts != len(experts):
            raise ValueError("router expert count must match the expert list")
        self.experts = experts
        self.router = router
        self.layer_index = layer_index

    def forward(self, u: Tensor, mode: str, rng: RngStream | None = None,
                noise: dict | None = None) -> tuple[Tensor, BatchRouteResult]:
        rec = self.router.route(u, mode, rng=rng, noise=noise)
        out = None
        for i, expert in enumerate(self.experts):
            gate_col = T.gather(rec.gate_weights, [i], axis=1)      # [B,1]
            term = gate_col * expert.forward(u)
            out = term if out is None else out + term
        return out, rec


def moe_layer_forward(u, layer: MoELayer, mode: str,
                      rng: RngStream | None = None) -> Tensor:
    """Route a batch through one MoE layer; returns the mixed expert output."""
    out, _ = layer.forward(T.as_tensor(u), mode, rng=rng)
    return out


class _Block:
    def __init__(self, dense: Tensor, moe: MoELayer):
        self.dense = dense
        self.moe = moe


class MoEClassifier:
    """Input projection, B dense+MoE blocks, and a linear class head."""

    def __init__(self, config: ModelConfig, rng: RngStream):
        self.config = config
        c = config
        self.input_proj = Tensor(rng.derive("in").normal((c.feature_dim, c.hidden_dim))
                                 / math.sqrt(c.feature_dim), requires_grad=True)
        self.blocks: list[_Block] = []
        for b in range(c.num_blocks):
            brng = rng.derive("block", b)
            dense = Tensor(brng.derive("dense").normal((c.hidden_dim, c.hidden_dim))
                           / math.sqrt(c.hidden_dim), requires_grad=True)
            experts = [ExpertNetwork(c.hidden_dim, c.expert_hidden,
                                     brng.derive("expert", j))
                       for j in range(c.num_experts)]
            w_r = Tensor(brng.derive("router").normal((c.hidden_dim, c.num_experts))
                         / math.sqrt(c.hidden_dim), requires_grad=True)
            rcfg = RouterConfig(dim=c.hidden_dim, num_experts=c.num_experts,
                                top_k=c.top_k, phi_hidden=c.phi_hidden)
            router = make_router("map", w_r, rcfg, brng.derive("phi"))
            self.blocks.append(_Block(dense, MoELayer(experts, router, b)))
        self.head = Tensor(rng.derive("head").normal((c.hidden_dim, c.num_classes))
                           / math.sqrt(c.hidden_dim), requires_grad=True)
        self.variational_layer_indices: list[int] = []

    # -- parameters ---------------------------------------------------------

    def param_items(self) -> list[tuple[str, Tensor]]:
        items = [("input_proj", self.input_proj)]
        for i, blk in enumerate(self.blocks):
            items.append((f"block{i}.dense", blk.dense))
            for j, expert in enumerate(blk.moe.experts):
                for name, p in expert.param_items():
                    items.append((f"block{i}.expert{j}.{name}", p))
            for name, p in blk.moe.router.param_items():
                items.append((f"block{i}.router.{name}", p))
        items.append(("head", self.head))
        return items

    def phi_param_items(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.param_items() if ".router.phi." in n]

    # -- forward ------------------------------------------------------------

    def forward(self, x, mode: str, rng: RngStream | None = None,
                input_noise: dict | None = None,
                router_noise: dict | None = None,
                block_inputs: list | None = None):
        """Run a batch; returns class logits and the per-layer route records.

        ``input_noise`` maps block index -> additive array applied to that
        block's expert-layer input, immediately before routing (perturbation
        harness); ``router_noise`` maps block index -> pre-drawn router noise;
        ``block_inputs``, when a list, is filled with each expert layer's
        clean input activations.
        """
        h = T.matmul(T.as_tensor(x), self.input_proj)
        records: list[BatchRouteResult] = []
        for idx, blk in enumerate(self.blocks):
            h = T.relu(T.matmul(h, blk.dense))
            if block_inputs is not None:
                block_inputs.append(h.data)
            if input_noise is not None and idx in input_noise:
                h = h + Tensor(input_noise[idx])
            noise = None if router_noise is None else router_noise.get(idx)
            layer_rng = None if rng is None else rng.derive("layer", idx)
            h, rec = blk.moe.forward(h, mode, rng=layer_rng, noise=noise)
            records.append(rec)
        return T.matmul(h, self.head), records


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def kl_penalty(records: list[BatchRouteResult]) -> Tensor | None:
    """Sum of the per-layer batch-mean KL / regulariser terms."""
    terms = [r.kl_term for r in records if r.kl_term is not None]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def elbo_loss(logits: Tensor, labels, records: list[BatchRouteResult],
              kl_weight: float) -> Tensor:
    """Cross-entropy plus kl_weight times the summed per-layer KL terms.

    With a zero weight or no stochastic layers this is exactly the plain
    cross-entropy.
    """
    ce = T.cross_entropy(logits, labels)
    kl = kl_penalty(records)
    if kl is None or kl_weight == 0.0:
        return ce
    return ce + kl_weight * kl


# --------------------------------------------------------------------------
# router attachment
# --------------------------------------------------------------------------


def attach_variational_routers(model: MoEClassifier, indices, variant: str,
                               rng: RngStream,
                               router_config: RouterConfig | None = None) -> MoEClassifier:
    """Replace the routers at ``indices`` with freshly initialised ``variant``
    routers wrapping each layer's existing (to-be-frozen) projection.

    Layers not listed keep their current router.  Passing the same indices
    again rebuilds the same structure, so the parameter count is unchanged.
    """
    indices = sorted(set(int(i) for i in indices))
    for idx in indices:
        if not (0 <= idx < len(model.blocks)):
            raise ValueError(f"invalid block index {idx}")
    for idx in indices:
        blk = model.blocks[idx]
        base = blk.moe.router.config
        if router_config is None:
            cfg = replace(base, variant=variant)
        else:
            cfg = replace(router_config, dim=base.dim,
                          num_experts=base.num_experts, top_k=base.top_k,
                          variant=variant)
        blk.moe.router = make_router(variant, blk.moe.router.w_r, cfg,
                                     rng.derive("attach", idx))
    model.variational_layer_indices = sorted(
        set(model.variational_layer_indices) | set(indices))
    return model


# --------------------------------------------------------------------------
# prediction with uncertainty readouts
# --------------------------------------------------------------------------


@dataclass
class Prediction:
    probs: np.ndarray                       # [B, C]
    signals: dict                           # per-example arrays or None
    per_layer_signals: list[dict]           # one dict per block


def _content_noise_block(model: MoEClassifier, x: np.ndarray,
                         rng: RngStream, passes: int) -> dict:
    """Pre-draw router noise for every pass, keyed by token content rather
    than batch slot, so duplicated inputs inside one batch route identically.

    Returns layer -> key -> array of shape [passes, batch, ...]."""
    plans: dict[int, dict] = {}
    for idx, blk in enumerate(model.blocks):
        router = blk.moe.router
        layer_rng = rng.derive("layer", idx)
        if not router.noise_spec("eval", samples=1):
            plans[idx] = {}
            continue
        per_row = [router.pass_block_noise(
            layer_rng.derive_from_bytes(np.ascontiguousarray(row).tobytes()),
            passes, "eval", samples=1) for row in x]
        plans[idx] = {k: np.stack([d[k] for d in per_row], axis=1)
                      for k in per_row[0]}
    return plans


def predict_with_uncertainty(model: MoEClassifier, x, samples: int | None = None,
                             rng: RngStream | None = None) -> Prediction:
    """Monte-Carlo predictive distribution plus per-example signals.

    Runs ``samples`` stochastic forward passes, each realising one routing
    sample per stochastic layer, and averages the class softmax: the
    marginalisation over latent routing.  Per layer, gate entropy is the
    entropy of the pass-averaged routing distribution, the inferred
    variance/temperature are the (pass-independent) inference-net readouts,
    and the multi-pass logit variance is taken across the passes' sampled
    logit vectors.  Deterministic given the stream, and independent of batch
    order because router noise is keyed by token content.
    """
    from .routers import shannon_entropy

    if rng is None:
        rng = RngStream(0)
    x = np.asarray(x, dtype=np.float64)
    stochastic = [i for i, blk in enumerate(model.blocks)
                  if blk.moe.router.variant != "map"]
    if samples is None:
        samples = max((model.blocks[i].moe.router.config.eval_samples
                       for i in stochastic), default=1)
    passes = samples if stochastic else 1
    plan = _content_noise_block(model, x, rng, passes)
    n_layers = len(model.blocks)
    prob_sum = None
    route_prob_sum = [None] * n_layers
    logit_samples: list = [[] for _ in range(n_layers)]
    first_records = None
    for s in range(passes):
        plan_s = {idx: {k: v[s] for k, v in layer_plan.items()}
                  for idx, layer_plan in plan.items()}
        with T.no_grad():
            logits, records = model.forward(x, "eval", router_noise=plan_s)
            p = T.softmax(logits, axis=-1).data
        prob_sum = p if prob_sum is None else prob_sum + p
        for i, rec in enumerate(records):
            route_prob_sum[i] = (rec.probs if route_prob_sum[i] is None
                                 else route_prob_sum[i] + rec.probs)
            if rec.logits_sampled is not None:
                logit_samples[i].append(rec.logits_sampled[:, 0, :])
        if first_records is None:
            first_records = records
    per_layer = []
    for i in range(n_layers):
        sig = dict(first_records[i].signals)
        sig["gate_entropy"] = shannon_entropy(route_prob_sum[i] / passes)
        if len(logit_samples[i]) >= 2:
            stacked = np.stack(logit_samples[i], axis=1)      # [B, S, N]
            dev = stacked - stacked.mean(axis=1, keepdims=True)
            sig["mc_logit_var"] = (dev ** 2).sum(axis=(1, 2)) / (passes - 1)
        per_layer.append(sig)
    layer_ids = model.variational_layer_indices or list(range(n_layers))
    signals: dict = {}
    for key in ("gate_entropy", "inf_logit_var", "inf_temp", "mc_logit_var"):
        values = [per_layer[i][key] for i in layer_ids
                  if per_layer[i][key] is not None]
        signals[key] = np.mean(values, axis=0) if values else None
    return Prediction(probs=prob_sum / passes, signals=signals,
                      per_layer_signals=per_layer)
