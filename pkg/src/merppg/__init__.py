"""Memory-efficient streaming rPPG: dual chunk/flow inference and a toy trainer."""

import os as _os

# Single-threaded math by default: keeps runs reproducible and per-frame
# latency flat. ME_RPPG_THREADS (or explicit BLAS vars) raises the limit.
# Only effective when this package is imported before numpy.
_threads = _os.environ.get("ME_RPPG_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)
del _os, _threads, _var

__version__ = "0.1.0"

from .data import BVPSignal, FrameTensor, SynthConfig, synth_clip, time_scale
from .model import (
    ModelConfig,
    ModelParams,
    ModelState,
    flow_init,
    forward_chunk,
    forward_flow_step,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
    state_bytes,
)

__all__ = [
    "BVPSignal",
    "FrameTensor",
    "SynthConfig",
    "synth_clip",
    "time_scale",
    "ModelConfig",
    "ModelParams",
    "ModelState",
    "init_model",
    "forward_chunk",
    "flow_init",
    "forward_flow_step",
    "param_count",
    "state_bytes",
    "save_checkpoint",
    "load_checkpoint",
]
