"""Command-line entry point (``cimfault``)."""

from __future__ import annotations

import argparse
import configparser
import sys

from .bf16 import TileShape
from .container import ContainerError, read_container, write_container
from .cost import REFERENCE_N_LAYERS, calibrate_area
from .faults import NoiseSpec, Redraw, SafSpec
from .harness import (
    ConfigError,
    emit_report,
    load_config,
    run_experiment,
    run_key,
    run_sweep,
)
from .model import (
    FaultedProvider,
    ModelConfig,
    ModelWeights,
    RedundancySpec,
    config_from_tensors,
    init_toy_weights,
    materialize,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cimfault", description="Fault-injection simulator for CIM transformer inference.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=None)

    sweep = sub.add_parser("sweep", help="run the sigma x redundancy grid of a config file")
    sweep.add_argument("config")
    sweep.add_argument("--workers", type=int, default=None)

    cal = sub.add_parser("calibrate-area", help="fit the area model to observations")
    cal.add_argument("observations")

    gen = sub.add_parser("gen-toy", help="write the default toy weights")
    gen.add_argument("path")
    gen.add_argument("--seed", type=int, default=0)
    for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab"):
        gen.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int, default=None)

    inj = sub.add_parser("inject", help="program a weight file onto a faulty crossbar")
    inj.add_argument("weights_in")
    inj.add_argument("weights_out")
    inj.add_argument("--sigma", type=float, default=0.02)
    inj.add_argument("--p", type=float, default=0.01, help="per-mantissa-bit flip probability")
    inj.add_argument("--tile", default="64x64")
    inj.add_argument("--seed", type=int, default=0, help="base seed")
    inj.add_argument("--run", type=int, default=0, help="run index")
    inj.add_argument("--n-heads", type=int, default=ModelConfig().n_heads)
    inj.add_argument("--exempt-embeddings", action="store_true")
    return p


def _cmd_run(args, sweep: bool) -> int:
    cfg = load_config(args.config)
    report = run_sweep(cfg, args.workers) if sweep else run_experiment(cfg, args.workers)
    for path, fmt in ((cfg.csv_path, "csv"), (cfg.json_path, "json")):
        if path:
            out = emit_report(report, path, fmt)
            print(f"wrote {out}")
    for agg in report.aggregates:
        print(f"{agg['redundancy']:>16}  sigma={agg['sigma']:<6g} "
              f"rel_logit_err={agg['rel_logit_err_mean']:.6g}  "
              f"top1_agreement={agg['top1_agreement_mean']:.6g}")
    return 0


def read_observations(path):
    """Observations file: one ``[section]`` per row with ``redundancy`` and ``area_mm2``.

    An optional ``[calibration]`` section sets ``n_layers`` (default 28).
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    n_layers = REFERENCE_N_LAYERS
    if parser.has_section("calibration"):
        try:
            n_layers = parser.getint("calibration", "n_layers", fallback=REFERENCE_N_LAYERS)
        except ValueError as exc:
            raise ConfigError("calibration.n_layers", str(exc)) from None
    obs = []
    for name in parser.sections():
        if name == "calibration":
            continue
        sec = parser[name]
        for key in ("redundancy", "area_mm2"):
            if key not in sec:
                raise ConfigError(f"{name}.{key}", "missing")
        try:
            red = RedundancySpec.parse(sec["redundancy"])
        except ValueError as exc:
            raise ConfigError(f"{name}.redundancy", str(exc)) from None
        try:
            area = float(sec["area_mm2"])
        except ValueError as exc:
            raise ConfigError(f"{name}.area_mm2", str(exc)) from None
        obs.append((name, red, area))
    return obs, n_layers


def _cmd_calibrate(args) -> int:
    obs, n_layers = read_observations(args.observations)
    result = calibrate_area([(red, a) for _, red, a in obs], n_layers)
    p = result.params
    print(f"area_base = {p.area_base:.3f}")
    print(f"area_attn_copy = {p.area_attn_copy:.3f}")
    print(f"area_ffn_copy = {p.area_ffn_copy:.3f}")
    for (name, _, area), res in zip(obs, result.residuals):
        print(f"residual[{name}] = {res:+.3f}  (observed {area:g})")
    return 0


def _cmd_gen_toy(args) -> int:
    defaults = ModelConfig()
    dims = {k: getattr(args, k) for k in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab")
            if getattr(args, k) is not None}
    d = dims.get("d_model", defaults.d_model)
    h = dims.get("n_heads", defaults.n_heads)
    cfg = ModelConfig(**dims, head_dim=d // h)
    write_container(args.path, init_toy_weights(cfg, args.seed).to_tensors())
    print(f"wrote {args.path}")
    return 0


def _cmd_inject(args) -> int:
    tensors = read_container(args.weights_in)
    cfg = config_from_tensors(tensors, args.n_heads)
    weights = ModelWeights.from_tensors(tensors, cfg)
    noise = NoiseSpec(args.sigma, TileShape.parse(args.tile), Redraw.PER_PROGRAMMING)
    provider = FaultedProvider(noise, SafSpec(args.p), run_key(args.seed, args.run), args.exempt_embeddings)
    write_container(args.weights_out, materialize(weights, provider).to_tensors())
    print(f"wrote {args.weights_out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args, sweep=False)
        if args.command == "sweep":
            return _cmd_run(args, sweep=True)
        if args.command == "calibrate-area":
            return _cmd_calibrate(args)
        if args.command == "gen-toy":
            return _cmd_gen_toy(args)
        if args.command == "inject":
            return _cmd_inject(args)
    except ConfigError as exc:
        print(f"cimfault: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ContainerError, KeyError, ValueError) as exc:
        print(f"cimfault: error: {exc}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
