"""Analytic parameter and multiply-accumulate cost model.

Counts what each routing scheme adds on top of a base model when applied
to L modified layers: weight-space sampling stores S-1 extra copies of the
router projection, while the inference-net variants pay once for a small
trunk plus heads.  Counts use the multiply-accumulate convention (one MAC
per multiply-add); a flag doubles them for the 2-FLOPs-per-MAC convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import jsonschema

VARIANT_ORDER = ("weight_space", "vglr_mf", "vglr_fc", "vtsr")


@dataclass
class ArchSpec:
    layers: int                      # modified MoE layers
    num_experts: int
    hidden_dim: int
    inference_width: int             # trunk width of the inference nets
    samples: int                     # Monte Carlo samples at inference
    base_active_params: float
    base_macs_per_token: float

    def __post_init__(self):
        if min(self.layers, self.num_experts, self.hidden_dim,
               self.inference_width, self.samples) < 1:
            raise ValueError("all architecture counts must be >= 1")
        if self.base_active_params <= 0 or self.base_macs_per_token <= 0:
            raise ValueError("base costs must be > 0")
        if self.inference_width > self.hidden_dim:
            raise ValueError("inference width must not exceed the hidden dim")


def granite_preset() -> ArchSpec:
    """Granite-3B-MoE deployment dimensions (800M active parameters)."""
    return ArchSpec(layers=10, num_experts=40, hidden_dim=1536,
                    inference_width=384, samples=35,
                    base_active_params=800e6, base_macs_per_token=800e6)


def _tri(n: int) -> int:
    return n * (n + 1) // 2


def params_weight_space(spec: ArchSpec) -> int:
    """Extra parameters for parallel weight-space sampling: L (S-1) D N."""
    return spec.layers * (spec.samples - 1) * spec.hidden_dim * spec.num_experts


def params_vglr_mf(spec: ArchSpec) -> int:
    """Trunk D*H plus mean and log-sigma heads of H*N each."""
    return spec.layers * (spec.hidden_dim * spec.inference_width
                          + 2 * spec.inference_width * spec.num_experts)


def params_vglr_fc(spec: ArchSpec) -> int:
    """Trunk D*H, mean head H*N, Cholesky head H*N(N+1)/2."""
    h, n = spec.inference_width, spec.num_experts
    return spec.layers * (spec.hidden_dim * h + h * n + h * _tri(n))


def params_vtsr(spec: ArchSpec) -> int:
    """Trunk D*H plus a scalar temperature head of H."""
    return spec.layers * (spec.hidden_dim * spec.inference_width
                          + spec.inference_width)


_PARAM_FNS = {
    "weight_space": params_weight_space,
    "vglr_mf": params_vglr_mf,
    "vglr_fc": params_vglr_fc,
    "vtsr": params_vtsr,
}


def macs_per_token(spec: ArchSpec, variant: str, flops: bool = False) -> int:
    """Added multiply-accumulates per token; ``flops`` doubles the count."""
    l, n, d = spec.layers, spec.num_experts, spec.hidden_dim
    h, s = spec.inference_width, spec.samples
    if variant == "weight_space":
        count = l * s * d * n
    elif variant == "vglr_mf":
        count = l * (d * h + 2 * h * n + s * n)
    elif variant == "vglr_fc":
        count = l * (d * h + h * n + h * _tri(n) + s * _tri(n))
    elif variant == "vtsr":
        count = l * (d * h + h + n)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return 2 * count if flops else count


def added_params(spec: ArchSpec, variant: str) -> int:
    try:
        return _PARAM_FNS[variant](spec)
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}") from None


def overhead_percent(added: float, base: float) -> float:
    """100 * added / base."""
    if base <= 0:
        raise ValueError("base must be > 0")
    return 100.0 * added / base


@dataclass
class CostRow:
    variant: str
    params: int
    params_pct: float
    macs_per_token: int
    macs_pct: float


@dataclass
class CostReport:
    spec: ArchSpec
    rows: list[CostRow]
    convention: str     # "mac" or "flop2"

    def to_json_dict(self) -> dict:
        return {
            "convention": self.convention,
            "spec": {
                "layers": self.spec.layers,
                "num_experts": self.spec.num_experts,
                "hidden_dim": self.spec.hidden_dim,
                "inference_width": self.spec.inference_width,
                "samples": self.spec.samples,
                "base_active_params": self.spec.base_active_params,
                "base_macs_per_token": self.spec.base_macs_per_token,
            },
            "rows": [{"variant": r.variant, "params": r.params,
                      "params_pct": r.params_pct,
                      "macs_per_token": r.macs_per_token,
                      "macs_pct": r.macs_pct} for r in self.rows],
        }


def cost_report(spec: ArchSpec, variants=VARIANT_ORDER,
                flops: bool = False) -> CostReport:
    if not variants:
        raise ValueError("variant list must not be empty")
    rows = []
    for v in variants:
        p = added_params(spec, v)
        m = macs_per_token(spec, v, flops=flops)
        rows.append(CostRow(
            variant=v, params=p,
            params_pct=overhead_percent(p, spec.base_active_params),
            macs_per_token=m,
            macs_pct=overhead_percent(m, (2 if flops else 1)
                                      * spec.base_macs_per_token)))
    return CostReport(spec=spec, rows=rows,
                      convention="flop2" if flops else "mac")


COST_REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["convention", "spec", "rows"],
    "properties": {
        "convention": {"enum": ["mac", "flop2"]},
        "spec": {
            "type": "object",
            "additionalProperties": False,
            "required": ["layers", "num_experts", "hidden_dim",
                         "inference_width", "samples", "base_active_params",
                         "base_macs_per_token"],
            "properties": {
                "layers": {"type": "integer", "minimum": 1},
                "num_experts": {"type": "integer", "minimum": 1},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "inference_width": {"type": "integer", "minimum": 1},
                "samples": {"type": "integer", "minimum": 1},
                "base_active_params": {"type": "number", "exclusiveMinimum": 0},
                "base_macs_per_token": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["variant", "params", "params_pct",
                             "macs_per_token", "macs_pct"],
                "properties": {
                    "variant": {"enum": list(VARIANT_ORDER)},
                    "params": {"type": "integer", "minimum": 0},
                    "params_pct": {"type": "number", "minimum": 0},
                    "macs_per_token": {"type": "integer", "minimum": 0},
                    "macs_pct": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


def validate_cost_report(report_dict: dict) -> None:
    """Schema-check a serialised cost report; raises on any mismatch."""
    jsonschema.validate(report_dict, COST_REPORT_SCHEMA)
