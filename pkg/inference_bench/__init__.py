# Inference Bench Python Package

from .inference_bench import (
    MIXTURE_PEAK,
    BenchConfig,
    BenchRow,
    SynthConfig,
    SyntheticMixture,
    TrialResult,
    TrialSpec,
    band_supports,
    convergence_rate,
    format_bench_table,
    format_trials_table,
    make_source_model,
    median_sdr,
    mix_at_level,
    run_bench,
    run_trial,
    run_trials,
    synthesize,
    synthetic_chain,
    write_synthetic,
)

__version__ = "1.0.0"
__all__ = [
    "synthesize",
    "mix_at_level",
    "band_supports",
    "synthetic_chain",
    "make_source_model",
    "write_synthetic",
    "run_bench",
    "format_bench_table",
    "run_trial",
    "run_trials",
    "median_sdr",
    "convergence_rate",
    "format_trials_table",
    "SynthConfig",
    "SyntheticMixture",
    "BenchConfig",
    "BenchRow",
    "TrialSpec",
    "TrialResult",
    "MIXTURE_PEAK",
]
