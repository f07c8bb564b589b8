#!/usr/bin/env python3
"""
Inference Bench - Synthetic Mixtures, Timing Sweep and Separation Trials

Desk-scale experiments for the NFSep engines on data with known ground
truth:

- synthesize: random source models, sampled spectrograms, random-phase
  audio and a mixture at a chosen level difference
- run_bench: median per-iteration wall time of the variational and the
  exact engine over a sweep of dictionary counts
- run_trials: seeded two-source separations scored with SDR for vi, exact
  and plca, spread over worker processes

Usage:
    python inference_bench.py [options]

Examples:
    python inference_bench.py --trials 10 --seed 0
    python inference_bench.py --trials 20 -w 8 --stickiness 0.95 --table trials.tsv
    python inference_bench.py --bench --n-values 2 5 10 20 --n-elems 30
"""

import argparse
import os
import sys
import time
from dataclasses import dataclass, field
from multiprocessing import Pool, cpu_count
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from evaluate_separation import bss_eval  # noqa: E402
from hmm_core import ChainParams  # noqa: E402
from nfhmm import combine  # noqa: E402
from nfsep_common import (  # noqa: E402
    LatticeLimitError,
    NfsepError,
    ValidationError,
)
from nfsep_common import show_progress as show_progress_line  # noqa: E402
from nhmm import SourceModel, TrainConfig, sample, save_model, train  # noqa: E402
from separation import (  # noqa: E402
    ALGORITHMS,
    posterior_mean_weights,
    run_inference,
    separate,
)
from signal_io import (  # noqa: E402
    DEFAULT_SAMPLE_RATE,
    ComplexSpectrogram,
    CountSpectrogram,
    StftConfig,
    TimeSignal,
    gain_for_quanta,
    istft,
    save_wav,
    stft,
    to_counts,
)

__version__ = "1.0.0"

# Peak level of the written mixture
MIXTURE_PEAK = 0.5
# Dirichlet concentration for the columns of ergodic synthetic chains
ERGODIC_CONCENTRATION = 10.0


# ============================================================
# Synthetic Mixtures
# ============================================================


@dataclass
class SynthConfig:
    """Two (or more) random sources mixed at mix_db (source 1 over the rest)"""

    seed: int
    n_dicts: int = 3
    n_elems: int = 4
    n_bins: int = 129
    n_frames: int = 100
    quanta_per_frame: int = 200
    mix_db: float = 0.0
    disjoint: bool = False
    stickiness: Optional[float] = None
    concentration: float = 1.0
    n_sources: int = 2
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if min(self.n_dicts, self.n_elems, self.n_frames, self.quanta_per_frame) < 1:
            raise ValidationError("Synthetic dimensions must be at least 1")
        if self.n_bins < 2:
            raise ValidationError("n_bins must be at least 2")
        if self.n_sources < 1:
            raise ValidationError("n_sources must be at least 1")
        if self.disjoint and self.n_bins < self.n_sources:
            raise ValidationError("Not enough bins for disjoint supports")
        if self.stickiness is not None and not 0 <= self.stickiness <= 1:
            raise ValidationError("stickiness must lie in [0, 1]")
        if not self.concentration > 0:
            raise ValidationError("concentration must be positive")


@dataclass
class SyntheticMixture:
    models: List[SourceModel]
    counts: List[CountSpectrogram]
    state_paths: List[np.ndarray]
    sources: List[TimeSignal]
    mixture: TimeSignal
    stft_config: StftConfig


def band_supports(n_bins: int, n_sources: int, disjoint: bool) -> List[slice]:
    """Contiguous equal bands per source, or the full range for all"""
    if not disjoint:
        return [slice(0, n_bins)] * n_sources
    edges = np.linspace(0, n_bins, n_sources + 1).astype(int)
    return [slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


def synthetic_chain(
    n_dicts: int, rng: np.random.Generator, stickiness: Optional[float]
) -> ChainParams:
    """
    Ergodic near-uniform transitions, or a noisy cycle 0 -> 1 -> ... -> 0
    where stickiness is the weight of the deterministic step.
    """
    if stickiness is None:
        transition = rng.dirichlet(np.full(n_dicts, ERGODIC_CONCENTRATION), size=n_dicts).T
    else:
        cycle = np.roll(np.eye(n_dicts), 1, axis=0)
        transition = stickiness * cycle + (1.0 - stickiness) / n_dicts
    transition = transition / transition.sum(axis=0, keepdims=True)
    return ChainParams(transition=transition, initial=np.full(n_dicts, 1.0 / n_dicts))


def make_source_model(
    n_dicts: int,
    n_elems: int,
    n_bins: int,
    rng: np.random.Generator,
    support: slice = None,
    stickiness: Optional[float] = None,
    concentration: float = 1.0,
) -> SourceModel:
    support = support or slice(0, n_bins)
    width = len(range(n_bins)[support])
    beta = np.zeros((n_dicts, n_elems, n_bins))
    beta[:, :, support] = rng.dirichlet(np.full(width, concentration), size=(n_dicts, n_elems))
    beta /= beta.sum(axis=2, keepdims=True)
    return SourceModel(dictionaries=beta, chain=synthetic_chain(n_dicts, rng, stickiness))


def counts_to_signal(
    counts: CountSpectrogram,
    config: StftConfig,
    sample_rate: int,
    rng: np.random.Generator,
) -> TimeSignal:
    """Treat counts as STFT magnitudes with uniformly random phase"""
    phase = np.exp(2j * np.pi * rng.random(counts.values.shape))
    spec = ComplexSpectrogram(bins=counts.values * phase, config=config, sample_rate=sample_rate)
    return istft(spec)


def synthesize(config: SynthConfig) -> SyntheticMixture:
    rng = np.random.default_rng(config.seed)
    stft_config = StftConfig.for_bins(config.n_bins)
    supports = band_supports(config.n_bins, config.n_sources, config.disjoint)

    models, counts, paths, signals = [], [], [], []
    for s in range(config.n_sources):
        model = make_source_model(
            config.n_dicts,
            config.n_elems,
            config.n_bins,
            rng,
            support=supports[s],
            stickiness=config.stickiness,
            concentration=config.concentration,
        )
        sampled, path = sample(
            model, config.n_frames, config.quanta_per_frame, int(rng.integers(2**31))
        )
        models.append(model)
        counts.append(sampled)
        paths.append(path)
        signals.append(counts_to_signal(sampled, stft_config, config.sample_rate, rng))

    sources = mix_at_level(signals, config.mix_db)
    mixture = np.sum([s.samples for s in sources], axis=0)
    peak = np.max(np.abs(mixture))
    scale = MIXTURE_PEAK / peak if peak > 0 else 1.0
    sources = [TimeSignal(s.samples * scale, s.sample_rate) for s in sources]

    return SyntheticMixture(
        models=models,
        counts=counts,
        state_paths=paths,
        sources=sources,
        mixture=TimeSignal(mixture * scale, config.sample_rate),
        stft_config=stft_config,
    )


def mix_at_level(signals: Sequence[TimeSignal], mix_db: float) -> List[TimeSignal]:
    """Rescale sources 2.. so source 1 sits mix_db above each of them (RMS)"""
    reference = signals[0].rms()
    if reference <= 0:
        raise ValidationError("Cannot mix at a level: first source is silent")
    out = [signals[0]]
    for s in signals[1:]:
        rms = s.rms()
        if rms <= 0:
            raise ValidationError("Cannot mix at a level: a source is silent")
        gain = reference / (rms * 10.0 ** (mix_db / 20.0))
        out.append(TimeSignal(s.samples * gain, s.sample_rate))
    return out


def write_synthetic(synth: SyntheticMixture, out_dir: str, stem: str = "synth") -> Dict[str, str]:
    """Write sources, mixture, generating models and true state paths"""
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for k, (signal, model, path) in enumerate(
        zip(synth.sources, synth.models, synth.state_paths), start=1
    ):
        wav = os.path.join(out_dir, f"{stem}.source{k}.wav")
        model_path = os.path.join(out_dir, f"{stem}.source{k}.nhmm")
        states = os.path.join(out_dir, f"{stem}.source{k}.states.txt")
        save_wav(wav, signal)
        save_model(model_path, model)
        with open(states, "w", encoding="utf-8") as f:
            f.write("\n".join(str(int(n)) for n in path) + "\n")
        written[f"source{k}"] = wav
        written[f"model{k}"] = model_path
        written[f"states{k}"] = states
    mixture = os.path.join(out_dir, f"{stem}.mixture.wav")
    save_wav(mixture, synth.mixture)
    written["mixture"] = mixture
    return written


# ============================================================
# Timing Sweep
# ============================================================


@dataclass
class BenchConfig:
    seed: int
    n_values: Tuple[int, ...] = (2, 5, 10, 20)
    n_elems: int = 30
    n_bins: int = 64
    n_frames: int = 100
    iterations: int = 5
    quanta_per_frame: int = 200
    max_joint_states: int = 4096

    def __post_init__(self):
        if not self.n_values or min(self.n_values) < 1:
            raise ValidationError("n_values must be non-empty and positive")
        if self.iterations < 1:
            raise ValidationError("iterations must be at least 1")


@dataclass
class BenchRow:
    n_dicts: int
    vi_seconds: float = float("nan")
    exact_seconds: float = float("nan")
    error: Optional[str] = None

    @property
    def ratio(self) -> float:
        if self.error or not self.vi_seconds > 0:
            return float("nan")
        return self.exact_seconds / self.vi_seconds


def bench_mixture(config: BenchConfig, n_dicts: int):
    """Two synthetic sources summed directly in the quanta domain"""
    rng = np.random.default_rng([config.seed, n_dicts])
    models, total = [], np.zeros((config.n_bins, config.n_frames))
    for _ in range(2):
        model = make_source_model(n_dicts, config.n_elems, config.n_bins, rng)
        counts, _ = sample(model, config.n_frames, config.quanta_per_frame, int(rng.integers(2**31)))
        models.append(model)
        total += counts.values
    return combine(models), CountSpectrogram(total)


def run_bench(config: BenchConfig) -> List[BenchRow]:
    """Median per-iteration time of each engine at a fixed iteration count"""
    rows = []
    for n_dicts in config.n_values:
        row = BenchRow(n_dicts=n_dicts)
        mixture, data = bench_mixture(config, n_dicts)
        vi = run_inference("vi", mixture, data, max_iters=config.iterations, rel_tol=0.0)
        row.vi_seconds = float(np.median(vi.iteration_seconds))
        try:
            exact = run_inference(
                "exact",
                mixture,
                data,
                max_iters=config.iterations,
                rel_tol=0.0,
                max_joint_states=config.max_joint_states,
            )
            row.exact_seconds = float(np.median(exact.iteration_seconds))
        except LatticeLimitError as e:
            row.error = f"refused: {e}"
        rows.append(row)
    return rows


def format_bench_table(rows: Sequence[BenchRow]) -> str:
    lines = ["n_dicts\tvi_seconds\texact_seconds\tratio"]
    for r in rows:
        if r.error:
            lines.append(f"{r.n_dicts}\t{r.vi_seconds:.6g}\trefused\trefused")
        else:
            lines.append(f"{r.n_dicts}\t{r.vi_seconds:.6g}\t{r.exact_seconds:.6g}\t{r.ratio:.3f}")
    return "\n".join(lines) + "\n"


# ============================================================
# Separation Trials
# ============================================================


@dataclass
class TrialSpec:
    """
    One seeded two-source experiment.

    quanta_per_frame sets the count gain used for inference; sample_quanta
    is the number of quanta drawn per frame when generating the sources.
    plca_elements trains flat per-source dictionaries of that size; left
    unset, PLCA uses the union of the generating elements.
    """

    seed: int
    n_dicts: int = 4
    n_elems: int = 5
    n_bins: int = 30
    n_frames: int = 100
    sample_quanta: int = 200
    quanta_per_frame: float = 500.0
    gamma: float = 1.0
    stickiness: Optional[float] = None
    disjoint: bool = False
    mix_db: float = 0.0
    engines: Tuple[str, ...] = ALGORITHMS
    max_iters: int = 50
    rel_tol: float = 1e-4
    plca_elements: Optional[int] = None

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            seed=self.seed,
            n_dicts=self.n_dicts,
            n_elems=self.n_elems,
            n_bins=self.n_bins,
            n_frames=self.n_frames,
            quanta_per_frame=self.sample_quanta,
            mix_db=self.mix_db,
            disjoint=self.disjoint,
            stickiness=self.stickiness,
        )


@dataclass
class TrialResult:
    """Per-engine, per-source SDR of one trial"""

    seed: int
    sdr: Dict[str, List[float]] = field(default_factory=dict)
    vi_iterations: int = 0
    vi_converged: bool = False
    vi_monitor: List[float] = field(default_factory=list)
    elapsed: float = 0.0
    error: Optional[str] = None


def flat_mixture(spec: TrialSpec, synth: SyntheticMixture, gain: float):
    """Single-dictionary models trained on each isolated source"""
    models = []
    for s, signal in enumerate(synth.sources):
        counts = to_counts(stft(signal, synth.stft_config), gain)
        config = TrainConfig(seed=spec.seed + s)
        models.append(train(counts, (1, spec.plca_elements, spec.n_bins), config))
    return combine(models)


def run_trial(spec: TrialSpec) -> TrialResult:
    result = TrialResult(seed=spec.seed)
    start = time.time()
    try:
        synth = synthesize(spec.synth_config())
        mixture_spec = stft(synth.mixture, synth.stft_config)
        gain = gain_for_quanta(mixture_spec, spec.quanta_per_frame)
        data = to_counts(mixture_spec, gain)
        oracle = combine(synth.models, spec.gamma)

        for engine in spec.engines:
            mixture = oracle
            if engine == "plca" and spec.plca_elements:
                mixture = flat_mixture(spec, synth, gain)
            posterior = run_inference(
                engine, mixture, data, max_iters=spec.max_iters, rel_tol=spec.rel_tol
            )
            if engine == "vi":
                result.vi_iterations = posterior.iterations
                result.vi_converged = posterior.converged
                result.vi_monitor = list(posterior.monitor)
            sep = separate(mixture, data, mixture_spec, posterior_mean_weights(posterior), gain)
            result.sdr[engine] = [
                bss_eval(estimate, synth.sources, s).sdr
                for s, estimate in enumerate(sep.signals)
            ]
    except NfsepError as e:
        result.error = str(e)
    result.elapsed = time.time() - start
    return result


def run_trials(
    specs: Sequence[TrialSpec], workers: int = 0, show_progress: bool = True
) -> List[TrialResult]:
    """Run trials in worker processes; results come back ordered by seed"""
    specs = list(specs)
    if not specs:
        return []
    num_workers = workers if workers > 0 else cpu_count()

    if num_workers == 1:
        results = [run_trial(s) for s in specs]
    else:
        results = []
        start = time.time()
        total = len(specs)
        with Pool(min(num_workers, total)) as pool:
            for i, result in enumerate(pool.imap_unordered(run_trial, specs)):
                results.append(result)
                if show_progress:
                    show_progress_line(i + 1, total, time.time() - start, "trials")

    return sorted(results, key=lambda r: r.seed)


def median_sdr(results: Sequence[TrialResult], engine: str) -> float:
    """Median over every source of every successful trial"""
    values = [v for r in results if r.error is None for v in r.sdr.get(engine, [])]
    return float(np.median(values)) if values else float("nan")


def convergence_rate(results: Sequence[TrialResult], budget: int) -> float:
    """Fraction of successful trials whose vi run converged within budget iterations"""
    ok = [r for r in results if r.error is None and "vi" in r.sdr]
    if not ok:
        return 0.0
    return sum(1 for r in ok if r.vi_converged and r.vi_iterations <= budget) / len(ok)


def format_trials_table(results: Sequence[TrialResult]) -> str:
    lines = ["seed\tengine\tsource\tsdr"]
    for r in results:
        if r.error:
            lines.append(f"{r.seed}\terror\t-\t{r.error}")
            continue
        for engine, values in r.sdr.items():
            for s, v in enumerate(values, start=1):
                lines.append(f"{r.seed}\t{engine}\t{s}\t{v:.4f}")
    return "\n".join(lines) + "\n"


def main():
    """Main entry point."""
    parser = argparse.ArgumentParser(
        description="Synthetic separation trials and engine timing",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--trials", "-n", type=int, default=10, help="Number of seeds")
    parser.add_argument("--seed", "-s", type=int, default=0, help="First seed")
    parser.add_argument(
        "--workers", "-w", type=int, default=0, help="Worker processes (0=auto)"
    )
    parser.add_argument("--n-dicts", type=int, default=4)
    parser.add_argument("--n-elems", type=int, default=5)
    parser.add_argument("--n-bins", type=int, default=30)
    parser.add_argument("--n-frames", type=int, default=100)
    parser.add_argument("--quanta-per-frame", type=float, default=500.0)
    parser.add_argument("--gamma", type=float, default=1.0)
    parser.add_argument("--stickiness", type=float, default=None)
    parser.add_argument("--disjoint", action="store_true")
    parser.add_argument(
        "--engines", nargs="+", choices=ALGORITHMS, default=list(ALGORITHMS)
    )
    parser.add_argument("--bench", action="store_true", help="Run the timing sweep instead")
    parser.add_argument("--n-values", type=int, nargs="+", default=[2, 5, 10, 20])
    parser.add_argument("--table", metavar="FILE", help="Write results as TSV")
    parser.add_argument(
        "--version", "-v", action="version", version=f"%(prog)s {__version__}"
    )
    args = parser.parse_args()

    print("=" * 70)
    print(f"Inference Bench v{__version__}")
    print("=" * 70)

    if args.bench:
        rows = run_bench(
            BenchConfig(seed=args.seed, n_values=tuple(args.n_values), n_elems=args.n_elems)
        )
        text = format_bench_table(rows)
    else:
        specs = [
            TrialSpec(
                seed=args.seed + i,
                n_dicts=args.n_dicts,
                n_elems=args.n_elems,
                n_bins=args.n_bins,
                n_frames=args.n_frames,
                quanta_per_frame=args.quanta_per_frame,
                gamma=args.gamma,
                stickiness=args.stickiness,
                disjoint=args.disjoint,
                engines=tuple(args.engines),
            )
            for i in range(args.trials)
        ]
        results = run_trials(specs, args.workers)
        for engine in args.engines:
            print(f"Median SDR {engine:<6} {median_sdr(results, engine):7.2f} dB")
        if "vi" in args.engines:
            print(f"vi converged within 30 iterations: {convergence_rate(results, 30):.0%}")
        failed = [r for r in results if r.error]
        if failed:
            print(f"Failed trials: {len(failed)}")
        text = format_trials_table(results)

    if args.table:
        with open(args.table, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"Table written to: {args.table}")
    else:
        print(text, end="")


if __name__ == "__main__":
    main()
