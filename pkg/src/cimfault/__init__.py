"""Simulate memristor non-idealities in transformer inference.

Submodules:

- ``bf16``: bit-exact bfloat16 codec, tile split/concat, matmul
- ``faults``: tile-scaled Gaussian noise and mantissa stuck-at faults
- ``model``: toy decoder-only transformer with pluggable weight providers
- ``cost``: area/energy model and its calibration
- ``harness``: seeded sweeps, metrics and CSV/JSON reports
"""

from .bf16 import (
    BlockGrid,
    NaNPatternError,
    TileShape,
    block_abs_max,
    concat_blocks,
    decode_bf16,
    encode_bf16,
    from_bf16_bits,
    matmul,
    quantize_bf16,
    split_blocks,
    to_bf16_bits,
)
from .container import read_container, write_container
from .cost import (
    CostParams,
    calibrate_area,
    estimate_area,
    estimate_energy,
    load_cost_params,
    reference_calibrated_params,
)
from .faults import (
    FaultedWeights,
    NoiseSpec,
    Redraw,
    SafSpec,
    apply_saf,
    apply_saf_bits,
    inject_block_gaussian,
    program_weights,
    sample_noise_matrix,
)
from .harness import (
    ExperimentConfig,
    RunReport,
    compare_outputs,
    emit_report,
    load_config,
    parse_config,
    run_experiment,
    run_sweep,
)
from .model import (
    CleanProvider,
    FaultedProvider,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    RedundancySpec,
    RedundantProvider,
    attention_forward,
    ffn_forward,
    forward,
    generate_greedy,
    init_toy_weights,
    make_provider,
    replicate_and_average,
    shallow_redundancy,
)
from .rng import RngKey

__version__ = "0.1.0"

__all__ = [
    "BlockGrid",
    "CleanProvider",
    "CostParams",
    "ExperimentConfig",
    "FaultedProvider",
    "FaultedWeights",
    "LayerWeights",
    "ModelConfig",
    "ModelWeights",
    "NaNPatternError",
    "NoiseSpec",
    "Redraw",
    "RedundancySpec",
    "RedundantProvider",
    "RngKey",
    "RunReport",
    "SafSpec",
    "TileShape",
    "apply_saf",
    "apply_saf_bits",
    "attention_forward",
    "block_abs_max",
    "calibrate_area",
    "compare_outputs",
    "concat_blocks",
    "decode_bf16",
    "emit_report",
    "encode_bf16",
    "estimate_area",
    "estimate_energy",
    "ffn_forward",
    "forward",
    "from_bf16_bits",
    "generate_greedy",
    "init_toy_weights",
    "inject_block_gaussian",
    "load_config",
    "load_cost_params",
    "make_provider",
    "matmul",
    "parse_config",
    "program_weights",
    "quantize_bf16",
    "read_container",
    "reference_calibrated_params",
    "replicate_and_average",
    "run_experiment",
    "run_sweep",
    "sample_noise_matrix",
    "shallow_redundancy",
    "split_blocks",
    "to_bf16_bits",
    "write_container",
]
