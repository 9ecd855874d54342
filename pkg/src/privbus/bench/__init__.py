from .cpu import CpuSampler, sample_cpu
from .pipeline import Pipeline, PipelineConfig, RawRun
from .scenarios import (
    Burst,
    PeriodicBurst,
    RateSweep,
    RunReport,
    Scenario,
    SingleMessage,
    SweepResult,
    ladder,
    run_burst,
    run_periodic,
    run_rate_sweep,
    run_scenario,
    run_single,
)

__all__ = [
    "Burst",
    "CpuSampler",
    "PeriodicBurst",
    "Pipeline",
    "PipelineConfig",
    "RateSweep",
    "RawRun",
    "RunReport",
    "Scenario",
    "SingleMessage",
    "SweepResult",
    "ladder",
    "run_burst",
    "run_periodic",
    "run_rate_sweep",
    "run_scenario",
    "run_single",
    "sample_cpu",
]
