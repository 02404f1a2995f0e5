"""Seeded experiment driver: sweeps, metrics and reports.

A run programs every weight of the model with the key
``RngKey(base_seed, ("run", r))``. The key does not depend on sigma, so the
same run index sees the same underlying normal draws and the same stuck
bits at every noise level. Metrics compare faulted against clean logits on
a fixed prompt set.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bf16 import TileShape
from .container import read_container
from .cost import (
    GPU_BASELINE_AREA_MM2,
    GPU_BASELINE_ENERGY_J,
    CostParams,
    estimate_area,
    estimate_energy,
    load_cost_params,
)
from .faults import NoiseSpec, Redraw, SafSpec
from .model import (
    CleanProvider,
    ModelConfig,
    ModelWeights,
    RedundancySpec,
    argmax_lowest,
    config_from_tensors,
    first_divergence,
    forward,
    generate_greedy,
    init_toy_weights,
    make_provider,
)
from .rng import RngKey

ENV_OUTPUT_DIR = "CIMFAULT_OUTPUT_DIR"
ENV_WORKERS = "CIMFAULT_WORKERS"

CSV_COLUMNS = (
    "run_seed", "sigma", "saf_p", "redundancy", "rel_logit_err", "top1_agreement",
    "divergence_pos", "out_tokens", "energy_j", "area_mm2",
)
AGGREGATED_METRICS = ("rel_logit_err", "top1_agreement", "divergence_pos", "out_tokens", "energy_j")

DEFAULT_SIGMA_GRID = (0.005, 0.01, 0.015, 0.02)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def sig9(x: float) -> float:
    """Round to the 9 significant digits used in every report."""
    return float(f"{x:.9g}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights_path: str | None = None
    init_seed: int = 0
    exempt_embeddings: bool = False
    sigma_grid: tuple = DEFAULT_SIGMA_GRID
    saf_p: float = 0.01
    tile: TileShape = TileShape(64, 64)
    redraw: Redraw = Redraw.PER_PROGRAMMING
    redundancy: RedundancySpec = RedundancySpec()
    sweep_redundancies: tuple = ()
    average: str = "output"
    n_runs: int = 5
    base_seed: int = 0
    prompts: tuple = ()
    n_prompts: int = 4
    prompt_len: int = 16
    prompt_seed: int = 1234
    max_new_tokens: int = 8
    eos_token: int | None = None
    cost_params: CostParams = field(default_factory=load_cost_params)
    csv_path: str | None = "report.csv"
    json_path: str | None = "report.json"
    workers: int = 1

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("run.n_runs", f"must be >= 1, got {self.n_runs}")
        if not self.sigma_grid:
            raise ConfigError("faults.sigma_grid", "must list at least one value")
        for s in self.sigma_grid:
            if not s >= 0:
                raise ConfigError("faults.sigma_grid", f"sigma must be >= 0, got {s}")
        if not 0 <= self.saf_p <= 1:
            raise ConfigError("faults.saf_p", f"must lie in [0, 1], got {self.saf_p}")
        if self.max_new_tokens < 0:
            raise ConfigError("run.max_new_tokens", "must be >= 0")
        if not 0 <= self.base_seed < 2**64:
            raise ConfigError("run.base_seed", "must fit in 64 bits")
        if self.workers < 1:
            raise ConfigError("run.workers", "must be >= 1")
        if self.average not in ("output", "weight"):
            raise ConfigError("redundancy.average", "must be 'output' or 'weight'")

    def resolve_prompts(self, cfg: ModelConfig) -> list:
        if self.prompts:
            prompts = [np.asarray(p, dtype=np.int64) for p in self.prompts]
        else:
            rng = RngKey(self.prompt_seed, ("prompts",)).generator()
            prompts = [rng.integers(0, cfg.vocab, size=self.prompt_len) for _ in range(self.n_prompts)]
        for i, p in enumerate(prompts):
            if p.size == 0 or p.min() < 0 or p.max() >= cfg.vocab:
                raise ConfigError("run.prompts", f"prompt {i} has token ids outside [0, {cfg.vocab})")
        return prompts


# -- config file -------------------------------------------------------------

_SECTIONS = {
    "model": {"weights", "init_seed", "exempt_embeddings", "n_layers", "d_model", "n_heads",
              "head_dim", "d_ffn", "vocab", "rope_base", "norm_eps"},
    "faults": {"sigma_grid", "saf_p", "tile", "redraw"},
    "redundancy": {"spec", "average"},
    "sweep": {"redundancies"},
    "run": {"n_runs", "base_seed", "prompts", "n_prompts", "prompt_len", "prompt_seed",
            "max_new_tokens", "eos_token", "workers"},
    "cost": {f.name for f in dataclasses.fields(CostParams)},
    "output": {"csv", "json"},
}


def _convert(section, key, raw, kind):
    path = f"{section}.{key}"
    try:
        if kind is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI text. Missing keys take defaults."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")

    def get(section, key, kind, default):
        if parser.has_option(section, key) and parser.get(section, key).strip() != "":
            return _convert(section, key, parser.get(section, key), kind)
        return default

    kw = {}
    base_dir = Path(base_dir)

    weights = get("model", "weights", str, None)
    if weights is not None:
        kw["weights_path"] = str(base_dir / weights)
    kw["init_seed"] = get("model", "init_seed", int, 0)
    kw["exempt_embeddings"] = get("model", "exempt_embeddings", bool, False)
    dims = {}
    for key, kind in (("n_layers", int), ("d_model", int), ("n_heads", int), ("head_dim", int),
                      ("d_ffn", int), ("vocab", int), ("rope_base", float), ("norm_eps", float)):
        v = get("model", key, kind, None)
        if v is not None:
            dims[key] = v
    if weights is None:
        if "d_model" in dims and "head_dim" not in dims and "n_heads" in dims:
            dims["head_dim"] = dims["d_model"] // dims["n_heads"]
        try:
            kw["model"] = ModelConfig(**dims)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
    else:
        kw["model"] = dims  # resolved against the weight file at load time

    grid = get("faults", "sigma_grid", str, None)
    if grid is not None:
        try:
            kw["sigma_grid"] = tuple(float(s) for s in grid.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError("faults.sigma_grid", str(exc)) from None
    kw["saf_p"] = get("faults", "saf_p", float, 0.01)
    try:
        kw["tile"] = TileShape.parse(get("faults", "tile", str, "64x64"))
    except ValueError as exc:
        raise ConfigError("faults.tile", str(exc)) from None
    try:
        kw["redraw"] = Redraw(get("faults", "redraw", str, "per_programming").lower())
    except ValueError:
        raise ConfigError("faults.redraw", "must be per_programming or per_forward") from None

    model_cfg = kw["model"] if isinstance(kw["model"], ModelConfig) else None
    try:
        kw["redundancy"] = _parse_redundancy(get("redundancy", "spec", str, "none"), model_cfg)
    except ValueError as exc:
        raise ConfigError("redundancy.spec", str(exc)) from None
    kw["average"] = get("redundancy", "average", str, "output")
    reds = get("sweep", "redundancies", str, None)
    if reds is not None:
        try:
            kw["sweep_redundancies"] = tuple(
                _parse_redundancy(r, model_cfg) for r in reds.split(";") if r.strip()
            )
        except ValueError as exc:
            raise ConfigError("sweep.redundancies", str(exc)) from None

    kw["n_runs"] = get("run", "n_runs", int, 5)
    kw["base_seed"] = get("run", "base_seed", int, 0)
    prompts = get("run", "prompts", str, None)
    if prompts is not None:
        try:
            kw["prompts"] = tuple(
                tuple(int(t) for t in p.replace(",", " ").split()) for p in prompts.split(";") if p.strip()
            )
        except ValueError as exc:
            raise ConfigError("run.prompts", str(exc)) from None
    kw["n_prompts"] = get("run", "n_prompts", int, 4)
    kw["prompt_len"] = get("run", "prompt_len", int, 16)
    kw["prompt_seed"] = get("run", "prompt_seed", int, 1234)
    kw["max_new_tokens"] = get("run", "max_new_tokens", int, 8)
    kw["eos_token"] = get("run", "eos_token", int, None)
    kw["workers"] = get("run", "workers", int, 1)

    cost = load_cost_params()
    if parser.has_section("cost"):
        try:
            cost = dataclasses.replace(cost, **{
                k: _convert("cost", k, v, float) for k, v in parser["cost"].items()
            })
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("cost", str(exc)) from None
    kw["cost_params"] = cost

    # an empty value switches that output off
    for key, default in (("csv", "report.csv"), ("json", "report.json")):
        kw[f"{key}_path"] = parser.get("output", key, fallback=default).strip() or None
    return ExperimentConfig(**kw)


def _parse_redundancy(text, cfg):
    if text.strip().lower().startswith("shallow") and cfg is None:
        # resolved once the weight file tells us the depth
        return text.strip()
    spec = RedundancySpec.parse(text, cfg)
    if cfg is not None:
        spec.validate(cfg)
    return spec


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


# -- model loading -----------------------------------------------------------


def load_model(cfg: ExperimentConfig) -> tuple:
    """Return ``(ModelConfig, ModelWeights)`` for the experiment."""
    if cfg.weights_path is None:
        mcfg = cfg.model if isinstance(cfg.model, ModelConfig) else ModelConfig(**cfg.model)
        return mcfg, init_toy_weights(mcfg, cfg.init_seed)
    tensors = read_container(cfg.weights_path)
    dims = dict(cfg.model) if isinstance(cfg.model, dict) else {"n_heads": cfg.model.n_heads}
    n_heads = dims.pop("n_heads", ModelConfig().n_heads)
    extra = {k: dims[k] for k in ("rope_base", "norm_eps") if k in dims}
    mcfg = config_from_tensors(tensors, n_heads, **extra)
    for key, value in dims.items():
        if key not in extra and getattr(mcfg, key) != value:
            raise ConfigError(f"model.{key}", f"weight file implies {getattr(mcfg, key)}, config says {value}")
    return mcfg, ModelWeights.from_tensors(tensors, mcfg)


def _resolve_redundancy(red, mcfg: ModelConfig) -> RedundancySpec:
    try:
        if isinstance(red, str):
            red = RedundancySpec.parse(red, mcfg)
        return red.validate(mcfg)
    except ValueError as exc:
        raise ConfigError("redundancy.spec", str(exc)) from None


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    rel_logit_err: float
    top1_agreement: float


def compare_outputs(clean_logits, faulted_logits) -> MetricRecord:
    """Relative L2 error ``|a - b| / |a|`` and the fraction of rows with equal argmax."""
    a = np.asarray(clean_logits, dtype=np.float64)
    b = np.asarray(faulted_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty logits")
    diff = float(np.linalg.norm((a - b).ravel()))
    ref = float(np.linalg.norm(a.ravel()))
    if ref == 0:
        rel = 0.0 if diff == 0 else math.inf
    else:
        rel = diff / ref
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    agree = float(np.mean(argmax_lowest(a2) == argmax_lowest(b2)))
    return MetricRecord(rel, agree)


# -- running -----------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    run_seed: int
    run_index: int
    sigma: float
    saf_p: float
    redundancy: str
    rel_logit_err: float
    top1_agreement: float
    divergence_pos: int
    out_tokens: int
    energy_j: float
    area_mm2: float


@dataclass
class RunReport:
    records: list
    aggregates: list
    area: dict
    gpu_baseline: dict = field(default_factory=lambda: {
        "area_mm2": GPU_BASELINE_AREA_MM2, "energy_j": GPU_BASELINE_ENERGY_J,
    })


def run_key(base_seed: int, run_index: int) -> RngKey:
    return RngKey(base_seed, ("run", int(run_index)))


class _Context:
    """Clean reference outputs shared read-only by all work units."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.mcfg, self.weights = load_model(cfg)
        self.prompts = cfg.resolve_prompts(self.mcfg)
        clean = CleanProvider()
        self.clean_logits = [forward(p, self.weights, clean, self.mcfg) for p in self.prompts]
        self.clean_text = [
            generate_greedy(p, self.weights, clean, self.mcfg, cfg.max_new_tokens, cfg.eos_token)
            for p in self.prompts
        ]
        self.in_tokens = int(sum(len(p) for p in self.prompts))


def _evaluate_unit(ctx: _Context, red: RedundancySpec, sigma: float, run_index: int) -> RunRecord:
    cfg, mcfg = ctx.cfg, ctx.mcfg
    key = run_key(cfg.base_seed, run_index)
    provider = make_provider(
        NoiseSpec(sigma, cfg.tile, cfg.redraw), SafSpec(cfg.saf_p), key, red,
        cfg.exempt_embeddings, cfg.average,
    )
    faulted = [forward(p, ctx.weights, provider, mcfg) for p in ctx.prompts]
    metrics = compare_outputs(np.concatenate(ctx.clean_logits), np.concatenate(faulted))

    divergence = cfg.max_new_tokens
    out_tokens = 0
    for prompt, clean_seq in zip(ctx.prompts, ctx.clean_text):
        seq = generate_greedy(prompt, ctx.weights, provider, mcfg, cfg.max_new_tokens, cfg.eos_token)
        out_tokens += len(seq) - len(prompt)
        clean_gen, gen = clean_seq[len(prompt):], seq[len(prompt):]
        if clean_gen != gen:
            divergence = min(divergence, first_divergence(clean_gen, gen))

    energy = estimate_energy(mcfg, red, cfg.cost_params, ctx.in_tokens, out_tokens).total
    area = estimate_area(mcfg, red, cfg.cost_params).total
    return RunRecord(
        run_seed=key.derived_seed(),
        run_index=int(run_index),
        sigma=float(sigma),
        saf_p=float(cfg.saf_p),
        redundancy=red.label(),
        rel_logit_err=sig9(metrics.rel_logit_err),
        top1_agreement=sig9(metrics.top1_agreement),
        divergence_pos=int(divergence),
        out_tokens=int(out_tokens),
        energy_j=sig9(energy),
        area_mm2=sig9(area),
    )


def _worker_count(cfg: ExperimentConfig, workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(ENV_WORKERS, f"not an integer: {env!r}") from None
    return cfg.workers


def aggregate(records) -> list:
    """Per (redundancy, sigma) mean and sample std (n-1) of each metric.

    Groups appear in order of first occurrence. ``std`` is ``None`` for a
    single run.
    """
    groups = {}
    for rec in records:
        groups.setdefault((rec.redundancy, rec.sigma), []).append(rec)
    out = []
    for (red, sigma), recs in groups.items():
        entry = {"redundancy": red, "sigma": sigma, "saf_p": recs[0].saf_p, "n_runs": len(recs)}
        for m in AGGREGATED_METRICS:
            vals = np.array([getattr(r, m) for r in recs], dtype=np.float64)
            entry[f"{m}_mean"] = float(np.mean(vals))
            entry[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
        out.append(entry)
    return out


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   redundancies=None) -> RunReport:
    """Run every (redundancy, sigma, run) unit and assemble the report.

    Units run on a thread pool; results are reduced in (redundancy, sigma,
    run) order, so the worker count never changes the report.
    """
    ctx = _Context(cfg)
    reds = [_resolve_redundancy(r, ctx.mcfg) for r in (redundancies or [cfg.redundancy])]
    units = [(red, s, r) for red in reds for s in cfg.sigma_grid for r in range(cfg.n_runs)]
    n_workers = _worker_count(cfg, workers)
    if n_workers == 1:
        records = [_evaluate_unit(ctx, *u) for u in units]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(lambda u: _evaluate_unit(ctx, *u), units))
    area = {}
    for red in reds:
        rep = estimate_area(ctx.mcfg, red, cfg.cost_params)
        area[red.label()] = {"total": sig9(rep.total),
                             "breakdown": {k: sig9(v) for k, v in rep.breakdown.items()}}
    return RunReport(records, aggregate(records), area)


def run_sweep(cfg: ExperimentConfig, workers: int | None = None) -> RunReport:
    """Sigma x redundancy grid; falls back to the single configured redundancy."""
    reds = list(cfg.sweep_redundancies) or [cfg.redundancy]
    return run_experiment(cfg, workers, reds)


# -- reports -----------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in report.records:
        writer.writerow([_fmt(getattr(rec, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def _json_ready(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return obj
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


def report_json(report: RunReport) -> str:
    payload = {
        "records": [dataclasses.asdict(r) for r in report.records],
        "aggregates": report.aggregates,
        "area": report.area,
        "gpu_baseline": report.gpu_baseline,
    }
    return json.dumps(_json_ready(payload), indent=2, sort_keys=False) + "\n"


def resolve_output(path) -> Path:
    path = Path(path)
    out_dir = os.environ.get(ENV_OUTPUT_DIR)
    if out_dir and not path.is_absolute():
        path = Path(out_dir) / path
    return path


def emit_report(report: RunReport, path, fmt: str = "csv") -> Path:
    """Write ``report`` as CSV or JSON; returns the path written."""
    fmt = fmt.lower()
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = resolve_output(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def read_csv_report(path) -> list:
    """Parse a CSV report back into dicts with numeric fields converted."""
    ints = {"run_seed", "divergence_pos", "out_tokens"}
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (v if k == "redundancy" else int(v) if k in ints else float(v))
                         for k, v in row.items()})
    return rows
