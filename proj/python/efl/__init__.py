"""Egocentric action frame generation.

Thin Python layer over the C++ core: pipeline stages plus the numeric
kernels the tests exercise directly.
"""

from ._efl import (
    STAGES,
    EflError,
    __version__,
    attention,
    cfg_combine,
    conditioning_rows,
    fid,
    forward_diffuse,
    inference_timesteps,
    noise_schedule,
    psnr,
    run_stage,
    transition_time_bins,
)


def run_pipeline(config="", overrides=(), seed=None, stages=STAGES):
    """Run stages in order; returns {stage: log}."""
    return {s: run_stage(s, config, list(overrides), seed) for s in stages}


__all__ = [
    "STAGES",
    "EflError",
    "__version__",
    "attention",
    "cfg_combine",
    "conditioning_rows",
    "fid",
    "forward_diffuse",
    "inference_timesteps",
    "noise_schedule",
    "psnr",
    "run_pipeline",
    "run_stage",
    "transition_time_bins",
]
