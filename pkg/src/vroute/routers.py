"""Expert-selection mechanisms and their losses.

Provides deterministic top-k routing, two sampled baselines (global
temperature, input dropout), and the two variational routers: Gaussian
posteriors over routing logits (mean-field or full-covariance via a
Cholesky factor) and a learned per-input temperature with stochastic
selection.  Includes the samplers, the closed-form KL terms, and the
Cholesky construction they rely on.

Conventions shared by every variant:

* top-k ties break toward the lowest expert index;
* gate weights are the routing probabilities renormalised over the
  selected set, so they always sum to one;
* per-token KL values are averaged over the batch before entering a loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

VARIANTS = ("map", "temp_scale", "mc_dropout", "vglr_mf", "vglr_fc", "vtsr")

# Additive floor keeping the learned temperature strictly positive.
TEMPERATURE_FLOOR = 1e-6
# Relaxation temperature of the straight-through Gumbel estimator.
GUMBEL_TAU = 1.0

_SIGNAL_KEYS = ("gate_entropy", "inf_logit_var", "inf_temp", "mc_logit_var")


@dataclass
class RouterConfig:
    """Dimensions and sampling settings shared by all router variants."""

    dim: int
    num_experts: int
    top_k: int
    phi_hidden: int | None = None      # inference-net width, defaults to dim // 4
    train_samples: int = 1
    eval_samples: int = 35
    kl_weight: float = 0.01
    variant: str = "map"
    dropout_rate: float = 0.1
    global_temperature: float = 1.0

    def __post_init__(self):
        if self.phi_hidden is None:
            self.phi_hidden = max(1, self.dim // 4)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown router variant {self.variant!r}")
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError("require 1 <= top_k <= num_experts")
        if min(self.dim, self.phi_hidden, self.num_experts,
               self.train_samples, self.eval_samples) < 1:
            raise ValueError("dimensions and sample counts must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.global_temperature <= 0:
            raise ValueError("global_temperature must be > 0")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class GaussianPosterior:
    """Residual-mean Gaussian over routing logits.

    Exactly one of ``diag_sigma`` (per-expert standard deviations) or
    ``cholesky_L`` (lower-triangular factor of the covariance) is set.
    """

    delta_mu: Tensor
    diag_sigma: Tensor | None = None
    cholesky_L: Tensor | None = None

    def __post_init__(self):
        if (self.diag_sigma is None) == (self.cholesky_L is None):
            raise ValueError("set exactly one of diag_sigma / cholesky_L")

    @property
    def is_full_cov(self) -> bool:
        return self.cholesky_L is not None


@dataclass
class UncertaintySignals:
    """Per-token uncertainty readouts; signals a variant lacks stay None."""

    gate_entropy: float
    inf_logit_var: float | None = None
    inf_temp: float | None = None
    mc_logit_var: float | None = None


@dataclass
class RouterDecision:
    """Routing outcome for one token."""

    logits_det: np.ndarray
    probs: np.ndarray
    selection: np.ndarray
    gate_weights: np.ndarray
    kl: float
    signals: UncertaintySignals
    logits_sampled: np.ndarray | None = None


@dataclass
class BatchRouteResult:
    """Routing outcome for a batch of tokens, keeping tape-tracked pieces.

    ``gate_weights`` stays a tensor so the task loss can differentiate
    through the mixing weights; ``kl_term`` is the batch-mean regulariser
    (None when the variant has none or the pass is evaluation-only).
    """

    logits_det: np.ndarray
    probs: np.ndarray
    selection: np.ndarray
    gate_weights: Tensor
    kl_term: Tensor | None
    kl_per_token: np.ndarray
    signals: dict
    logits_sampled: np.ndarray | None = None


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries per row; ties to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if k > s.shape[-1]:
        raise ValueError("k exceeds the number of experts")
    order = np.argsort(-s, axis=-1, kind="stable")
    mask = np.zeros_like(s)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def shannon_entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """-sum p log p with 0 log 0 treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def _renorm_gates_t(probs: Tensor, mask: np.ndarray) -> Tensor:
    masked = probs * Tensor(mask)
    return masked / masked.sum(axis=-1, keepdims=True)


def _renorm_gates_np(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = probs * mask
    return masked / masked.sum(axis=-1, keepdims=True)


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# --------------------------------------------------------------------------
# KL terms and the temperature proxy
# --------------------------------------------------------------------------


def kl_mf_per_token(delta_mu: Tensor, sigma: Tensor) -> Tensor:
    """KL[N(dmu, diag(sigma^2)) || N(0, I)] per row: 0.5 sum(dmu^2 + s^2 - 2 log s - 1)."""
    if np.any(sigma.data <= 0.0):
        raise ValueError("sigma must be strictly positive")
    terms = delta_mu * delta_mu + sigma * sigma - 2.0 * T.log(sigma) - 1.0
    return 0.5 * terms.sum(axis=-1)


def kl_mf(delta_mu, sigma) -> float:
    """Closed-form mean-field KL for a single token."""
    dmu = T.as_tensor(delta_mu).reshape((1, -1))
    sig = T.as_tensor(sigma).reshape((1, -1))
    return float(kl_mf_per_token(dmu, sig).data[0])


def _validate_cholesky(L: np.ndarray) -> None:
    if L.shape[-1] != L.shape[-2]:
        raise ValueError("Cholesky factor must be square")
    if np.any(np.triu(L, k=1) != 0.0):
        raise ValueError("Cholesky factor must be lower-triangular")
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag <= 0.0):
        raise ValueError("Cholesky diagonal must be strictly positive")


def kl_fc_per_token(delta_mu: Tensor, L: Tensor) -> Tensor:
    """KL[N(dmu, LL^T) || N(0, I)] per row.

    0.5 (||dmu||^2 + ||L||_F^2 - 2 sum log L_ii - N); the log-determinant of
    LL^T reduces to twice the log of the diagonal.
    """
    _validate_cholesky(L.data)
    n = L.data.shape[-1]
    batch = L.data.shape[0] if L.data.ndim == 3 else 1
    l2 = L if L.data.ndim == 3 else L.reshape((1, n, n))
    dmu2 = delta_mu if delta_mu.data.ndim == 2 else delta_mu.reshape((1, n))
    flat = l2.reshape((batch, n * n))
    diag = T.gather(flat, np.arange(n) * n + np.arange(n), axis=1)
    quad = (dmu2 * dmu2).sum(axis=-1)
    fro = (flat * flat).sum(axis=-1)
    logdet_half = T.log(diag).sum(axis=-1)
    return 0.5 * (quad + fro - 2.0 * logdet_half - float(n))


def kl_fc(delta_mu, L) -> float:
    """Closed-form full-covariance KL for a single token."""
    out = kl_fc_per_token(T.as_tensor(delta_mu), T.as_tensor(L))
    return float(out.data[0])


def kl_vtsr(q) -> float:
    """KL of a selection distribution against the uniform prior.

    Equals sum q log q + log N, i.e. log N minus the Shannon entropy;
    ranges over [0, log N] and vanishes exactly at the uniform vector.
    """
    q = np.asarray(q, dtype=np.float64)
    if abs(q.sum() - 1.0) > 1e-9 or np.any(q < 0):
        raise ValueError("q must lie on the probability simplex")
    return float(np.log(q.size) - shannon_entropy(q))


def temp_reg_loss(temperature) -> float:
    """Proxy regulariser -log T; decreasing in T, zero at T = 1."""
    t = float(temperature.item() if isinstance(temperature, Tensor) else temperature)
    if t <= 0.0:
        raise ValueError("temperature must be > 0")
    return -math.log(t)


# --------------------------------------------------------------------------
# Cholesky construction
# --------------------------------------------------------------------------

_CHOL_MAPS: dict[int, tuple] = {}


def _chol_maps(n: int):
    if n not in _CHOL_MAPS:
        rows, cols = np.tril_indices(n)
        lin = rows * n + cols
        diag_pos = np.nonzero(rows == cols)[0]
        off_pos = np.nonzero(rows != cols)[0]
        scatter_off = np.zeros((off_pos.size, n * n))
        scatter_off[np.arange(off_pos.size), lin[off_pos]] = 1.0
        scatter_diag = np.zeros((n, n * n))
        scatter_diag[np.arange(n), lin[diag_pos]] = 1.0
        _CHOL_MAPS[n] = (off_pos, diag_pos, Tensor(scatter_off), Tensor(scatter_diag))
    return _CHOL_MAPS[n]


def build_cholesky(flat) -> Tensor:
    """Lower-triangular factor from a flat parameter vector.

    Entries fill the lower triangle in (row, col) order; diagonal entries
    are exponentiated so the factor is always strictly positive definite.
    Accepts a single vector of length n(n+1)/2 or a batch of them.
    """
    t = T.as_tensor(flat)
    single = t.ndim == 1
    if single:
        t = t.reshape((1, -1))
    tri = t.shape[-1]
    n = int((math.isqrt(8 * tri + 1) - 1) // 2)
    if n * (n + 1) // 2 != tri:
        raise ValueError(f"flat length {tri} is not a triangular number")
    off_pos, diag_pos, scatter_off, scatter_diag = _chol_maps(n)
    diag = T.exp(T.gather(t, diag_pos, axis=1))
    full = T.matmul(diag, scatter_diag)
    if off_pos.size:
        full = full + T.matmul(T.gather(t, off_pos, axis=1), scatter_off)
    out = full.reshape((t.shape[0], n, n))
    return out.reshape((n, n)) if single else out


# --------------------------------------------------------------------------
# samplers
# --------------------------------------------------------------------------


def sample_k_without_replacement(p, k: int, rng: RngStream | None = None,
                                 uniforms: np.ndarray | None = None) -> np.ndarray:
    """Select k experts by sequential categorical draws with renormalisation.

    ``p`` may be a single probability vector or a batch of rows, each
    selected independently.  Pre-drawn ``uniforms`` of shape [..., k] may be
    supplied instead of a stream (common-random-number comparisons).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    rows = p[None, :] if single else p
    n = rows.shape[-1]
    if not (1 <= k <= n):
        raise ValueError("require 1 <= k <= number of experts")
    if np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-9) or np.any(rows < 0):
        raise ValueError("p must lie on the probability simplex")
    if np.any((rows > 0.0).sum(axis=-1) < k):
        raise ValueError("fewer than k strictly positive entries")
    if uniforms is None:
        uniforms = rng.uniform((rows.shape[0], k))
    u = np.asarray(uniforms, dtype=np.float64).reshape(rows.shape[0], k)
    work = rows.copy()
    mask = np.zeros_like(work)
    row_ix = np.arange(work.shape[0])
    for j in range(k):
        total = work.sum(axis=-1)
        cum = np.cumsum(work, axis=-1)
        idx = np.minimum((cum <= (u[:, j] * total)[:, None]).sum(axis=-1), n - 1)
        # A draw can land on a zero-probability plateau through float
        # round-off; nudge it to the next live entry.
        bad = work[row_ix, idx] <= 0.0
        while np.any(bad):
            idx[bad] = (idx[bad] + 1) % n
            bad = work[row_ix, idx] <= 0.0
        mask[row_ix, idx] = 1.0
        work[row_ix, idx] = 0.0
    return mask[0] if single else mask


def _sample_k_from_logits(logits: np.ndarray, k: int,
                          uniforms: np.ndarray) -> np.ndarray:
    """Sequential sampling without replacement from softmax(logits) per row.

    Same distribution as :func:`sample_k_without_replacement` on the softmax
    probabilities, but each round re-normalises in log space over the
    remaining experts, so extreme logit scales (temperature -> 0) degrade
    gracefully to deterministic top-k instead of rejecting on underflow.
    """
    rows = np.asarray(logits, dtype=np.float64)
    u = np.asarray(uniforms, dtype=np.float64).reshape(rows.shape[0], k)
    n = rows.shape[-1]
    alive = np.ones_like(rows, dtype=bool)
    mask = np.zeros_like(rows)
    row_ix = np.arange(rows.shape[0])
    for j in range(k):
        shifted = np.where(alive, rows, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore"):
            w = np.where(alive, np.exp(shifted), 0.0)
        cum = np.cumsum(w, axis=-1)
        idx = np.minimum((cum <= (u[:, j] * cum[:, -1])[:, None]).sum(axis=-1),
                         n - 1)
        bad = ~alive[row_ix, idx]
        while np.any(bad):
            idx[bad] = (idx[bad] + 1) % n
            bad = ~alive[row_ix, idx]
        mask[row_ix, idx] = 1.0
        alive[row_ix, idx] = False
    return mask


def gumbel_top_k(scaled_logits, k: int, rng: RngStream | None = None,
                 gumbels: np.ndarray | None = None) -> tuple[np.ndarray, Tensor]:
    """Perturb logits with one Gumbel vector and take the top k.

    Returns the hard 0/1 selection mask together with the relaxed weights
    softmax((scaled_logits + g) / tau) at tau = 1, which carry the gradient
    in straight-through training.  The selected set is distributed exactly
    as sequential sampling without replacement from softmax(scaled_logits).
    """
    logits = T.as_tensor(scaled_logits)
    if gumbels is None:
        gumbels = rng.gumbel(logits.shape)
    perturbed = logits + Tensor(np.asarray(gumbels, dtype=np.float64))
    relaxed = T.softmax(perturbed / GUMBEL_TAU, axis=-1)
    mask = top_k_mask(perturbed.data, k)
    return mask, relaxed


# --------------------------------------------------------------------------
# inference networks
# --------------------------------------------------------------------------


def _rms_normalise(u: Tensor) -> Tensor:
    """Scale each row to unit root-mean-square activation.

    The inference nets consume normalised representations, as they would
    inside a pre-norm transformer block; this keeps their outputs a function
    of activation direction rather than raw magnitude.
    """
    ms = (u * u).mean(axis=-1, keepdims=True)
    return u / T.sqrt(ms + 1e-12)


class GaussianInferenceNet:
    """Shared trunk with residual-mean and scale heads.

    The trunk is a bias-free dim -> hidden projection with ReLU over the
    RMS-normalised input; the mean head emits the residual shift of the
    logits and the scale head emits either log standard deviations
    (mean-field) or the flat Cholesky parameters (full covariance).  Heads
    start near zero so the posterior opens at the deterministic solution
    with unit covariance.
    """

    def __init__(self, dim: int, hidden: int, num_experts: int, full_cov: bool,
                 rng: RngStream, head_init_std: float = 1e-3):
        self.full_cov = full_cov
        self.num_experts = num_experts
        self.w_trunk = Tensor(rng.normal((dim, hidden)) / math.sqrt(dim),
                              requires_grad=True)
        self.w_mean = Tensor(head_init_std * rng.normal((hidden, num_experts)),
                             requires_grad=True)
        scale_out = num_experts * (num_experts + 1) // 2 if full_cov else num_experts
        self.w_scale = Tensor(head_init_std * rng.normal((hidden, scale_out)),
                              requires_grad=True)

    def param_items(self) -> list[tuple[str, Tensor]]:
        return [("trunk", self.w_trunk), ("mean_head", self.w_mean),
                ("scale_head", self.w_scale)]

    def posterior(self, u: Tensor) -> GaussianPosterior:
        h = T.relu(T.matmul(_rms_normalise(u), self.w_trunk))
        dmu = T.matmul(h, self.w_mean)
        raw = T.matmul(h, self.w_scale)
        if self.full_cov:
            return GaussianPosterior(delta_mu=dmu, cholesky_L=build_cholesky(raw))
        return GaussianPosterior(delta_mu=dmu, diag_sigma=T.exp(raw))


class TemperatureNet:
    """Two-layer net emitting a strictly positive per-input temperature.

    Consumes the RMS-normalised representation, like the Gaussian nets.
    """

    def __init__(self, dim: int, hidden: int, rng: RngStream):
        self.w1 = Tensor(rng.normal((dim, hidden)) / math.sqrt(dim), requires_grad=True)
        self.b1 = T.zeros((hidden,), requires_grad=True)
        self.w2 = Tensor(rng.normal((hidden, 1)) / math.sqrt(hidden), requires_grad=True)
        self.b2 = T.zeros((1,), requires_grad=True)

    def param_items(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def raw(self, u: Tensor) -> Tensor:
        h = T.relu(T.matmul(_rms_normalise(u), self.w1) + self.b1)
        return T.matmul(h, self.w2) + self.b2

    def temperature(self, u: Tensor) -> Tensor:
        return T.softplus(self.raw(u)) + TEMPERATURE_FLOOR


def vtsr_temperature(u, temperature_net: TemperatureNet) -> float:
    """Temperature for one token: softplus(raw) + floor, always > 0."""
    ut = T.as_tensor(u).reshape((1, -1))
    return float(temperature_net.temperature(ut).data[0, 0])


# --------------------------------------------------------------------------
# router classes
# --------------------------------------------------------------------------


class RouterBase:
    variant = "base"
    has_phi = False

    def __init__(self, w_r: Tensor, config: RouterConfig):
        self.w_r = w_r
        self.config = config

    def param_items(self) -> list[tuple[str, Tensor]]:
        return [("w_r", self.w_r)] + [("phi." + k, v) for k, v in self.phi_items()]

    def phi_items(self) -> list[tuple[str, Tensor]]:
        return []

    def samples(self, mode: str, override: int | None = None) -> int:
        if override is not None:
            return override
        return self.config.train_samples if mode == "train" else self.config.eval_samples

    def noise_spec(self, mode: str, samples: int | None = None) -> dict:
        """Per-token noise requirements: key (distribution name) -> shape."""
        return {}

    def _draw(self, rng: RngStream, key: str, shape) -> np.ndarray:
        return getattr(rng, key)(shape)

    def per_token_noise(self, rng: RngStream, mode: str,
                        samples: int | None = None) -> dict:
        return {k: self._draw(rng, k, shape)
                for k, shape in self.noise_spec(mode, samples).items()}

    def pass_block_noise(self, rng: RngStream, passes: int, mode: str,
                         samples: int | None = None) -> dict:
        """One draw covering `passes` independent per-token noise sets."""
        return {k: self._draw(rng, k, (passes,) + tuple(shape))
                for k, shape in self.noise_spec(mode, samples).items()}

    def batch_noise(self, rng: RngStream, batch: int, mode: str,
                    samples: int | None = None) -> dict:
        return {k: self._draw(rng, k, (batch,) + tuple(shape))
                for k, shape in self.noise_spec(mode, samples).items()}

    def route(self, u: Tensor, mode: str, rng: RngStream | None = None,
              noise: dict | None = None) -> BatchRouteResult:
        raise NotImplementedError

    def _noise(self, rng, batch, mode, noise):
        if noise is not None:
            return noise
        if rng is None and self.variant != "map":
            raise ValueError(f"{self.variant} routing needs an RngStream or "
                             "pre-drawn noise")
        return self.batch_noise(rng, batch, mode)

    def _signals(self, gate_entropy, **present) -> dict:
        out = {k: None for k in _SIGNAL_KEYS}
        out["gate_entropy"] = gate_entropy
        out.update(present)
        return out


class MapRouter(RouterBase):
    """Deterministic top-k over softmax of the linear routing logits."""

    variant = "map"

    def route(self, u, mode, rng=None, noise=None):
        _check_mode(mode)
        logits = T.matmul(u, self.w_r)
        probs = T.softmax(logits, axis=-1)
        mask = top_k_mask(probs.data, self.config.top_k)
        gates = _renorm_gates_t(probs, mask)
        batch = u.shape[0]
        return BatchRouteResult(
            logits_det=logits.data, probs=probs.data, selection=mask,
            gate_weights=gates, kl_term=None, kl_per_token=np.zeros(batch),
            signals=self._signals(shannon_entropy(probs.data)))


class TempScaleRouter(RouterBase):
    """Stochastic selection from softmax(logits / T) at a fixed global T.

    Temperature shapes the selection distribution only; the mixing weights
    stay the unscaled routing probabilities renormalised over the sampled
    set, so the T -> 0 limit reproduces the deterministic router exactly.
    """

    variant = "temp_scale"

    def noise_spec(self, mode, samples=None):
        return {"uniform": (self.config.top_k,)}

    def route(self, u, mode, rng=None, noise=None):
        _check_mode(mode)
        noise = self._noise(rng, u.shape[0], mode, noise)
        l_det = u.data @ self.w_r.data
        scaled = l_det / self.config.global_temperature
        probs = _softmax_np(scaled)
        mask = _sample_k_from_logits(scaled, self.config.top_k,
                                     noise["uniform"])
        gates = Tensor(_renorm_gates_np(_softmax_np(l_det), mask))
        return BatchRouteResult(
            logits_det=l_det, probs=probs, selection=mask, gate_weights=gates,
            kl_term=None, kl_per_token=np.zeros(u.shape[0]),
            signals=self._signals(shannon_entropy(probs)))


class McDropoutRouter(RouterBase):
    """Averages routing over S input-dropout passes of the projection."""

    variant = "mc_dropout"

    def noise_spec(self, mode, samples=None):
        return {"uniform": (self.samples(mode, samples), self.config.dim)}

    def route(self, u, mode, rng=None, noise=None):
        _check_mode(mode)
        noise = self._noise(rng, u.shape[0], mode, noise)
        rate = self.config.dropout_rate
        s = self.samples(mode)
        keep = (noise["uniform"] >= rate).astype(np.float64)
        if rate > 0.0:
            keep /= (1.0 - rate)
        dropped = u.data[:, None, :] * keep                      # [B,S,D]
        logits_s = (dropped.reshape(-1, self.config.dim) @ self.w_r.data)
        logits_s = logits_s.reshape(u.shape[0], s, self.config.num_experts)
        p_bar = _softmax_np(logits_s).mean(axis=1)
        mask = top_k_mask(p_bar, self.config.top_k)
        gates = Tensor(_renorm_gates_np(p_bar, mask))
        mc_var = _mc_logit_var_np(logits_s) if s >= 2 else np.zeros(u.shape[0])
        return BatchRouteResult(
            logits_det=u.data @ self.w_r.data, probs=p_bar, selection=mask,
            gate_weights=gates, kl_term=None, kl_per_token=np.zeros(u.shape[0]),
            signals=self._signals(shannon_entropy(p_bar), mc_logit_var=mc_var),
            logits_sampled=logits_s)


class VglrRouter(RouterBase):
    """Gaussian posterior over logits, reparameterised sampling, averaged softmax.

    The base projection stays frozen; only the inference net (trunk plus
    mean/scale heads) trains.  One sample drives training; evaluation draws
    ``eval_samples`` and averages the softmax outputs before top-k.
    """

    has_phi = True

    def __init__(self, w_r, config, phi: GaussianInferenceNet):
        super().__init__(w_r, config)
        self.phi = phi
        self.variant = "vglr_fc" if phi.full_cov else "vglr_mf"

    def phi_items(self):
        return self.phi.param_items()

    def noise_spec(self, mode, samples=None):
        return {"normal": (self.samples(mode, samples),
                           self.config.num_experts)}

    def route(self, u, mode, rng=None, noise=None):
        _check_mode(mode)
        noise = self._noise(rng, u.shape[0], mode, noise)
        eps = np.asarray(noise["normal"], dtype=np.float64)
        batch, s, n = eps.shape
        l_det = u.data @ self.w_r.data
        post = self.phi.posterior(u)
        centre = Tensor(l_det[:, None, :]) + post.delta_mu.reshape((batch, 1, n))
        if post.is_full_cov:
            lmat = post.cholesky_L
            spread = (lmat.reshape((batch, 1, n, n))
                      * Tensor(eps[:, :, None, :])).sum(axis=3)
            kl_tok = kl_fc_per_token(post.delta_mu, lmat)
            inf_var = (lmat.data ** 2).sum(axis=(1, 2))
        else:
            spread = post.diag_sigma.reshape((batch, 1, n)) * Tensor(eps)
            kl_tok = kl_mf_per_token(post.delta_mu, post.diag_sigma)
            inf_var = (post.diag_sigma.data ** 2).sum(axis=1)
        l_samples = centre + spread                                   # [B,S,N]
        p_bar = T.softmax(l_samples, axis=-1).mean(axis=1)
        mask = top_k_mask(p_bar.data, self.config.top_k)
        gates = _renorm_gates_t(p_bar, mask)
        mc_var = _mc_logit_var_np(l_samples.data) if s >= 2 else None
        return BatchRouteResult(
            logits_det=l_det, probs=p_bar.data, selection=mask, gate_weights=gates,
            kl_term=kl_tok.mean(), kl_per_token=kl_tok.data.copy(),
            signals=self._signals(shannon_entropy(p_bar.data),
                                  inf_logit_var=inf_var, mc_logit_var=mc_var),
            logits_sampled=l_samples.data)


class VtsrRouter(RouterBase):
    """Learned per-input temperature with stochastic expert selection.

    Training perturbs the scaled logits with one Gumbel vector and routes
    through the straight-through relaxation; evaluation samples k experts
    without replacement from softmax(logits / T).  The regulariser -log T
    fills the KL slot.
    """

    variant = "vtsr"
    has_phi = True

    def __init__(self, w_r, config, temperature_net: TemperatureNet):
        super().__init__(w_r, config)
        self.temperature_net = temperature_net
        # Diagnostic switch: route through the relaxed weights themselves so
        # the training path is end-to-end differentiable (gradient tests).
        self.use_soft_gates = False

    def phi_items(self):
        return self.temperature_net.param_items()

    def noise_spec(self, mode, samples=None):
        if mode == "train":
            return {"gumbel": (self.config.num_experts,)}
        return {"uniform": (self.config.top_k,)}

    def route(self, u, mode, rng=None, noise=None):
        _check_mode(mode)
        noise = self._noise(rng, u.shape[0], mode, noise)
        batch = u.shape[0]
        l_det = u.data @ self.w_r.data
        temp = self.temperature_net.temperature(u)                   # [B,1]
        kl_tok = -np.log(temp.data[:, 0])
        if mode == "train":
            scaled = Tensor(l_det) / temp
            mask, relaxed = gumbel_top_k(scaled, self.config.top_k,
                                         gumbels=noise["gumbel"])
            probs = _softmax_np(l_det / temp.data)
            hard = _renorm_gates_np(probs, mask)
            if self.use_soft_gates:
                gates = relaxed
            else:
                gates = (relaxed - relaxed.detach()) + Tensor(hard)
            reg = -T.log(temp).reshape((batch,))
            kl_term = reg.mean()
        else:
            scaled = l_det / temp.data
            probs = _softmax_np(scaled)
            mask = _sample_k_from_logits(scaled, self.config.top_k,
                                         noise["uniform"])
            gates = Tensor(_renorm_gates_np(probs, mask))
            kl_term = None
        return BatchRouteResult(
            logits_det=l_det, probs=probs, selection=mask, gate_weights=gates,
            kl_term=kl_term, kl_per_token=kl_tok,
            signals=self._signals(shannon_entropy(probs),
                                  inf_temp=temp.data[:, 0].copy()))


def make_router(variant: str, w_r: Tensor, config: RouterConfig,
                rng: RngStream) -> RouterBase:
    """Build a router of the given variant around an existing projection."""
    cfg = config
    if variant == "map":
        return MapRouter(w_r, cfg)
    if variant == "temp_scale":
        return TempScaleRouter(w_r, cfg)
    if variant == "mc_dropout":
        return McDropoutRouter(w_r, cfg)
    if variant in ("vglr_mf", "vglr_fc"):
        phi = GaussianInferenceNet(cfg.dim, cfg.phi_hidden, cfg.num_experts,
                                   full_cov=(variant == "vglr_fc"), rng=rng)
        return VglrRouter(w_r, cfg, phi)
    if variant == "vtsr":
        net = TemperatureNet(cfg.dim, cfg.phi_hidden, rng)
        return VtsrRouter(w_r, cfg, net)
    raise ValueError(f"unknown router variant {variant!r}")


# --------------------------------------------------------------------------
# single-token entry points
# --------------------------------------------------------------------------


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _mc_logit_var_np(samples: np.ndarray) -> np.ndarray:
    """Total variance of logit vectors per token for samples of shape [B,S,N]."""
    dev = samples - samples.mean(axis=1, keepdims=True)
    return (dev ** 2).sum(axis=(1, 2)) / (samples.shape[1] - 1)


def _decision(res: BatchRouteResult, i: int = 0) -> RouterDecision:
    sig = res.signals

    def pick(key):
        arr = sig[key]
        return None if arr is None else float(np.asarray(arr)[i])

    return RouterDecision(
        logits_det=res.logits_det[i].copy(),
        probs=res.probs[i].copy(),
        selection=res.selection[i].astype(np.int64),
        gate_weights=res.gate_weights.data[i].copy(),
        kl=float(res.kl_per_token[i]),
        signals=UncertaintySignals(
            gate_entropy=pick("gate_entropy"),
            inf_logit_var=pick("inf_logit_var"),
            inf_temp=pick("inf_temp"),
            mc_logit_var=pick("mc_logit_var")),
        logits_sampled=None if res.logits_sampled is None
        else res.logits_sampled[i].copy())


def _row(u) -> Tensor:
    return T.as_tensor(u).reshape((1, -1))


def deterministic_route(u, w_r, k: int) -> RouterDecision:
    """Top-k routing of one token: logits, softmax, renormalised gates."""
    w = T.as_tensor(w_r)
    if k > w.shape[1]:
        raise ValueError("k exceeds the number of experts")
    cfg = RouterConfig(dim=w.shape[0], num_experts=w.shape[1], top_k=k)
    res = MapRouter(w, cfg).route(_row(u), "eval")
    return _decision(res)


def vglr_route(u, w_r, phi: GaussianInferenceNet, config: RouterConfig,
               mode: str, rng: RngStream) -> RouterDecision:
    """Gaussian-logit routing of one token."""
    router = VglrRouter(T.as_tensor(w_r), config, phi)
    return _decision(router.route(_row(u), mode, rng=rng))


def vtsr_route(u, w_r, temperature_net: TemperatureNet, config: RouterConfig,
               mode: str, rng: RngStream) -> RouterDecision:
    """Learned-temperature routing of one token."""
    router = VtsrRouter(T.as_tensor(w_r), config, temperature_net)
    return _decision(router.route(_row(u), mode, rng=rng))


def mc_dropout_route(u, w_r, config: RouterConfig, mode: str,
                     rng: RngStream) -> RouterDecision:
    """Input-dropout routing of one token."""
    router = McDropoutRouter(T.as_tensor(w_r), config)
    return _decision(router.route(_row(u), mode, rng=rng))


def fixed_temp_route(u, w_r, t_global: float, k: int,
                     rng: RngStream) -> RouterDecision:
    """Fixed-temperature sampled routing of one token."""
    w = T.as_tensor(w_r)
    cfg = RouterConfig(dim=w.shape[0], num_experts=w.shape[1], top_k=k,
                       global_temperature=t_global, variant="temp_scale")
    router = TempScaleRouter(w, cfg)
    return _decision(router.route(_row(u), "eval", rng=rng))
