"""Area and energy estimates for deploying the model on CIM macros.

Area is affine in the number of *extra* full-model copies of the attention
and FFN weights::

    area = base + extra_attn * attn_copy + extra_ffn * ffn_copy

Replicating a layer range contributes the fraction ``len(range) / n_layers``
of a copy of each component. The three coefficients are fitted by least
squares to published (redundancy, mm^2) pairs.

Energy counts static-weight multiply-accumulates on the crossbar plus a
per-token digital and I/O term. Token counts are inputs: the model says
nothing about how long a faulty model talks.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .model import ModelConfig, RedundancySpec, Target

# Qwen3-0.6B has 28 decoder layers; only the layer count enters the area model.
REFERENCE_N_LAYERS = 28
REFERENCE_MODEL = ModelConfig(n_layers=REFERENCE_N_LAYERS, d_model=1024, n_heads=16, head_dim=64,
                              d_ffn=3072, vocab=151936)

# Memristor rows of the published redundancy table (sigma=0.02, p=0.01).
REFERENCE_AREA_ROWS = (
    ("Vanilla", RedundancySpec.none(), 75.0),
    ("Attention x2", RedundancySpec.attention(2), 103.0),
    ("Attention x4", RedundancySpec.attention(4), 160.0),
    ("FFN x2", RedundancySpec.ffn(2), 114.0),
    ("FFN x4", RedundancySpec.ffn(4), 193.0),
    ("Layer 0-6 x2", RedundancySpec.layers(0, 7, 2), 91.0),
    ("Layer 7-13 x2", RedundancySpec.layers(7, 14, 2), 91.0),
    ("Layer 14-20 x2", RedundancySpec.layers(14, 21, 2), 91.0),
    ("Layer 21-27 x2", RedundancySpec.layers(21, 28, 2), 91.0),
)

# GPU baseline, echoed for report context only.
GPU_BASELINE_AREA_MM2 = 806.0
GPU_BASELINE_ENERGY_J = 1.43


@dataclass(frozen=True)
class CostParams:
    area_base: float = 75.0
    area_attn_copy: float = 28.0
    area_ffn_copy: float = 39.0
    e_cim_per_mac: float = 0.0
    e_digital_per_token: float = 0.0
    e_io_per_token: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ValueError(f"{f.name} must be nonnegative, got {v}")


@dataclass(frozen=True)
class CostReport:
    total: float
    breakdown: dict = field(default_factory=dict)
    unit: str = ""


AreaReport = CostReport
EnergyReport = CostReport


def load_cost_params(path=None, section: str = "cost") -> CostParams:
    """Read ``CostParams`` from an INI file; missing keys keep the defaults.

    With no path, the packaged ``cost_defaults.ini`` is used. Its energy
    figures are order-of-magnitude placeholders, not measured values.
    """
    parser = configparser.ConfigParser()
    if path is None:
        parser.read_string(resources.files("cimfault").joinpath("cost_defaults.ini").read_text())
    else:
        with open(path) as fh:
            parser.read_file(fh)
    return cost_params_from_section(parser[section] if parser.has_section(section) else {})


def cost_params_from_section(section) -> CostParams:
    names = {f.name for f in dataclasses.fields(CostParams)}
    unknown = set(section) - names
    if unknown:
        raise KeyError(f"unknown cost parameter(s): {', '.join(sorted(unknown))}")
    return CostParams(**{k: float(v) for k, v in section.items()})


def extra_copies(n_layers: int, red: RedundancySpec) -> tuple:
    """Extra full-model copies ``(attention, ffn)`` implied by ``red``."""
    k1 = red.k - 1
    if red.target is Target.ATTENTION:
        return float(k1), 0.0
    if red.target is Target.FFN:
        return 0.0, float(k1)
    if red.target is Target.LAYER_RANGE:
        frac = (min(red.hi, n_layers) - red.lo) / n_layers
        return k1 * frac, k1 * frac
    return 0.0, 0.0


def estimate_area(cfg: ModelConfig, red: RedundancySpec, params: CostParams) -> CostReport:
    attn, ffn = extra_copies(cfg.n_layers, red)
    breakdown = {
        "base": params.area_base,
        "attention_copies": attn * params.area_attn_copy,
        "ffn_copies": ffn * params.area_ffn_copy,
    }
    return CostReport(sum(breakdown.values()), breakdown, "mm2")


@dataclass(frozen=True)
class CalibrationResult:
    params: CostParams
    residuals: tuple
    rank: int


def calibrate_area(observations, n_layers: int = REFERENCE_N_LAYERS,
                   base: CostParams = CostParams()) -> CalibrationResult:
    """Least-squares fit of the three area coefficients.

    ``observations`` is an iterable of ``(RedundancySpec, mm2)`` pairs.
    Energy fields are copied from ``base``. Residuals are observed minus
    fitted, in input order.
    """
    rows, y = [], []
    for red, area in observations:
        attn, ffn = extra_copies(n_layers, red)
        rows.append((1.0, attn, ffn))
        y.append(float(area))
    A = np.array(rows, dtype=np.float64).reshape(-1, 3)
    y = np.array(y, dtype=np.float64)
    rank = int(np.linalg.matrix_rank(A)) if len(rows) else 0
    if rank < 3:
        raise ValueError(
            f"area calibration needs 3 linearly independent observations, got rank {rank}"
        )
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    params = dataclasses.replace(
        base, area_base=float(coef[0]), area_attn_copy=float(coef[1]), area_ffn_copy=float(coef[2])
    )
    return CalibrationResult(params, tuple(float(r) for r in y - A @ coef), rank)


def reference_calibrated_params(base: CostParams | None = None) -> CostParams:
    """Area coefficients fitted on the Vanilla, Attention x2 and FFN x2 rows."""
    rows = {label: (red, area) for label, red, area in REFERENCE_AREA_ROWS}
    obs = [rows["Vanilla"], rows["Attention x2"], rows["FFN x2"]]
    return calibrate_area(obs, REFERENCE_N_LAYERS, base or load_cost_params()).params


def macs_per_token(cfg: ModelConfig, red: RedundancySpec) -> dict:
    """Static-weight MACs per token, split into attention, FFN and head."""
    d = cfg.d_model
    attn_layer = 4 * d * cfg.n_heads * cfg.head_dim
    ffn_layer = 3 * d * cfg.d_ffn
    attn = ffn = 0
    for layer in range(cfg.n_layers):
        k_layer = red.replicas(layer, "layer")
        attn += attn_layer * red.replicas(layer, "attention") * k_layer
        ffn += ffn_layer * red.replicas(layer, "ffn") * k_layer
    return {"attention": attn, "ffn": ffn, "lm_head": d * cfg.vocab}


def estimate_energy(cfg: ModelConfig, red: RedundancySpec, params: CostParams,
                    in_tokens: int, out_tokens: int) -> CostReport:
    """Energy in joules for ``in_tokens`` of prefill and ``out_tokens`` of decode."""
    if in_tokens < 0 or out_tokens < 0:
        raise ValueError("token counts must be >= 0")
    tokens = int(in_tokens) + int(out_tokens)
    macs = macs_per_token(cfg, red)
    breakdown = {
        "cim_attention": tokens * macs["attention"] * params.e_cim_per_mac,
        "cim_ffn": tokens * macs["ffn"] * params.e_cim_per_mac,
        "cim_lm_head": tokens * macs["lm_head"] * params.e_cim_per_mac,
        "digital": tokens * params.e_digital_per_token,
        "io": tokens * params.e_io_per_token,
    }
    return CostReport(sum(breakdown.values()), breakdown, "J")
