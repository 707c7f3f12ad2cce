"""Learning diffusion bridges between function-valued states with a time-modulated Fourier operator."""
from .grid import Field, SpatialGrid, dft_forward, dft_inverse, spectral_resample, read_field, write_field
from .sde import (BatchPaths, NumericalBlowup, ProcessSpec, make_brownian_spec, make_kunita_spec,
                  simulate_forward, save_paths, load_paths)
from .oracle import BridgeEndpoints, OracleDrift, simulate_true_reversed_bridge, simulate_forward_bridge
from .ctuno import (ArchConfig, StageConfig, CtUnoParams, ConfigError, init_params, ctuno_forward,
                    ctuno_backward, OperatorModel, save_checkpoint, load_checkpoint, ARCH_PRESETS)

__version__ = "0.1.0"

__all__ = [
    "Field", "SpatialGrid", "dft_forward", "dft_inverse", "spectral_resample", "read_field", "write_field",
    "BatchPaths", "NumericalBlowup", "ProcessSpec", "make_brownian_spec", "make_kunita_spec",
    "simulate_forward", "save_paths", "load_paths",
    "BridgeEndpoints", "OracleDrift", "simulate_true_reversed_bridge", "simulate_forward_bridge",
    "ArchConfig", "StageConfig", "CtUnoParams", "ConfigError", "init_params", "ctuno_forward",
    "ctuno_backward", "OperatorModel", "save_checkpoint", "load_checkpoint", "ARCH_PRESETS",
]
