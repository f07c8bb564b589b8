#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Non-negative Factorial HMM Source Separation

Supervised separation of single-channel mixtures: train one N-HMM per
source on isolated audio, then resolve a mixture with structured
variational inference, exact joint-lattice inference or PLCA.

Commands:
- train:    WAV(s) -> source model file
- separate: mixture WAV + source models -> one WAV per source + report
- bench:    per-iteration timing of the vi and exact engines
- synth:    random source models, sampled audio and their mixture
- eval:     SDR/SIR/SAR of separated WAVs against references

Usage:
    python nfsep.py train --seed 0 -n 20 -k 20 -o speaker1.nhmm s1_a.wav s1_b.wav
    python nfsep.py separate -m speaker1.nhmm speaker2.nhmm --algo vi mix.wav
    python nfsep.py synth --seed 3 --out-dir synth/
"""

import argparse
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from evaluate_separation import evaluate_files, export_report, print_report
from inference_bench import (
    BenchConfig,
    SynthConfig,
    format_bench_table,
    run_bench,
    synthesize,
    write_synthetic,
)
from nfhmm import combine, save_posterior
from nfsep_common import (
    EXIT_FAILURE,
    EXIT_OK,
    Colors,
    NfsepError,
    ValidationError,
    draw_box,
    exit_code_for,
    format_time,
    log_error,
    log_info,
    log_step,
    log_warn,
)
from nhmm import TrainConfig, export_model_text, load_model, save_model, train_source
from separation import (
    ALGORITHMS,
    output_paths,
    posterior_mean_weights,
    run_inference,
    save_separation,
    separate,
)
from signal_io import (
    DEFAULT_HOP_LENGTH,
    DEFAULT_WINDOW_LENGTH,
    CountSpectrogram,
    StftConfig,
    WindowKind,
    concatenate,
    gain_for_quanta,
    load_wav,
    save_spectrogram,
    stft,
    to_counts,
)

COMMANDS = ("train", "separate", "bench", "synth", "eval")
# options argparse cannot mark required, since --config may supply them
REQUIRED_OPTIONS = {
    "train": ("output",),
    "separate": ("models",),
    "eval": ("estimates", "references"),
}


def print_banner():
    """Print the program banner"""
    print(f"{Colors.BLUE}")
    print("╔══════════════════════════════════════════════════════════════╗")
    print("║         NFSep - Non-negative Factorial HMM Separation        ║")
    print("║      Variational, Exact and PLCA Supervised Separation       ║")
    print("╚══════════════════════════════════════════════════════════════╝")
    print(f"{Colors.NC}")


# ============================================================
# Configuration
# ============================================================


def read_config_file(path: str) -> Dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment"""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ValidationError(f"Cannot read config file {path}: {e}") from e

    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _convert(action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        lowered = value.lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValidationError(f"'{action.dest}' expects a boolean, got '{value}'")
        return lowered in ("1", "true", "yes", "on")

    convert = action.type or str
    try:
        if action.nargs in ("+", "*"):
            result = [convert(v) for v in value.replace(",", " ").split()]
            bad = [v for v in result if action.choices and v not in action.choices]
        else:
            result = convert(value)
            bad = [result] if action.choices and result not in action.choices else []
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Bad value for '{action.dest}': {value} ({e})") from e
    if bad:
        raise ValidationError(f"'{action.dest}' must be one of {list(action.choices)}")
    return result


def apply_config_defaults(
    subparser: argparse.ArgumentParser, values: Dict[str, str]
):
    """Config values become sub-command defaults, so explicit flags still win"""
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        if key not in actions or not actions[key].option_strings:
            raise ValidationError(f"Unknown config key: {key}")
        defaults[key] = _convert(actions[key], value)
    subparser.set_defaults(**defaults)


# ============================================================
# Argument Parsing
# ============================================================


def _add_stft_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("STFT")
    g.add_argument(
        "--window-length",
        type=int,
        default=DEFAULT_WINDOW_LENGTH,
        help=f"Window length in samples (default: {DEFAULT_WINDOW_LENGTH}, 64ms at 16kHz)",
    )
    g.add_argument(
        "--hop-length",
        type=int,
        default=DEFAULT_HOP_LENGTH,
        help=f"Hop length in samples (default: {DEFAULT_HOP_LENGTH}, 16ms at 16kHz)",
    )
    g.add_argument(
        "--window",
        choices=[k.value for k in WindowKind],
        default=WindowKind.HANN.value,
        help="Analysis window (default: hann)",
    )
    g.add_argument(
        "--fft-length", type=int, default=None, help="FFT size (default: window length)"
    )
    g.add_argument(
        "--channel", type=int, default=0, help="Channel of multichannel WAVs (default: 0)"
    )
    q = p.add_mutually_exclusive_group()
    q.add_argument(
        "--gain", type=float, default=1.0, help="Quanta per unit magnitude (default: 1)"
    )
    q.add_argument(
        "--quanta-per-frame",
        type=float,
        default=None,
        help="Choose the gain so the mean frame holds this many quanta",
    )


def _add_common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="key = value defaults for this command")
    p.add_argument("--no-color", action="store_true", help="Disable colored output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfsep",
        description="NFSep - Non-negative Factorial HMM Source Separation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train one model per speaker (N dictionaries of K elements)
  python nfsep.py train --seed 0 -n 20 -k 20 -o spk1.nhmm spk1/*.wav

  # Flat PLCA dictionary (one dictionary of 30 elements)
  python nfsep.py train --seed 0 -n 1 -k 30 -o spk1.flat.nhmm spk1/*.wav

  # Separate with variational inference
  python nfsep.py separate -m spk1.nhmm spk2.nhmm --algo vi --out-dir out/ mix.wav

  # Compare engine speed
  python nfsep.py bench --seed 0 --n-values 2 5 10 20 -k 30

  # Synthetic data with known ground truth, then score a separation
  python nfsep.py synth --seed 1 --disjoint --out-dir synth/
  python nfsep.py eval -e out/mix.source1.wav out/mix.source2.wav -r synth/synth.source1.wav synth/synth.source2.wav

Multichannel WAVs are reduced to one channel (--channel, default 0).
Every command accepts --config FILE with `key = value` lines; flags win.
Required options (-o, -m, -e, -r) may also come from the config file.

Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 I/O, 4 validation, 5 numerical.
""",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    # train
    p = sub.add_parser("train", help="Train a source model from isolated audio")
    p.add_argument("inputs", nargs="+", help="WAV files of one source (concatenated)")
    p.add_argument("-o", "--output", help="Model file to write (required)")
    p.add_argument("-n", "--n-dicts", type=int, default=20, help="Dictionaries N (default: 20)")
    p.add_argument("-k", "--n-elems", type=int, default=20, help="Elements per dictionary K (default: 20)")
    p.add_argument("--max-iters", type=int, default=100, help="EM iterations (default: 100)")
    p.add_argument("--rel-tol", type=float, default=1e-5, help="Relative log-likelihood tolerance (default: 1e-5)")
    p.add_argument("--seed", type=int, default=None, help="Initialisation seed (REQUIRED)")
    p.add_argument("--text", metavar="FILE", help="Also write a text export of the model")
    p.add_argument("--dump-spectrogram", metavar="FILE", help="Write the training counts")
    _add_stft_args(p)
    _add_common_args(p)

    # separate
    p = sub.add_parser("separate", help="Separate a mixture with trained source models")
    p.add_argument("mixture", help="Mixture WAV file")
    p.add_argument("-m", "--models", nargs="+", help="Source model files, at least 2 (required)")
    p.add_argument("--algo", choices=ALGORITHMS, default="vi", help="Inference engine (default: vi)")
    p.add_argument("--gamma", type=float, default=1.0, help="Dirichlet concentration (default: 1)")
    p.add_argument("--max-iters", type=int, default=None, help="Iteration cap (default: engine default)")
    p.add_argument("--rel-tol", type=float, default=None, help="Stopping tolerance (default: engine default)")
    p.add_argument("--max-joint-states", type=int, default=4096, help="Exact lattice limit (default: 4096)")
    p.add_argument("--seed", type=int, default=None, help="Seed for --jitter")
    p.add_argument("--jitter", type=float, default=0.0, help="Random perturbation of the vi start (needs --seed)")
    p.add_argument("--out-dir", default="./nfsep_output", help="Output directory (default: ./nfsep_output)")
    p.add_argument("--stem", default=None, help="Output name stem (default: mixture file name)")
    p.add_argument("--posterior", metavar="FILE", help="Dump alpha_hat and d_hat (vi only)")
    _add_stft_args(p)
    _add_common_args(p)

    # bench
    p = sub.add_parser("bench", help="Time vi against exact inference")
    p.add_argument("--n-values", type=int, nargs="+", default=[2, 5, 10, 20], help="Dictionary counts to sweep")
    p.add_argument("-k", "--n-elems", type=int, default=30, help="Elements per dictionary (default: 30)")
    p.add_argument("--n-bins", type=int, default=64, help="Frequency bins (default: 64)")
    p.add_argument("--n-frames", type=int, default=100, help="Frames (default: 100)")
    p.add_argument("--max-iters", type=int, default=5, help="Timed iterations per engine (default: 5)")
    p.add_argument("--max-joint-states", type=int, default=4096, help="Exact lattice limit (default: 4096)")
    p.add_argument("--seed", type=int, default=None, help="Data seed (REQUIRED)")
    p.add_argument("--out-dir", default=None, help="Write bench.tsv here")
    _add_common_args(p)

    # synth
    p = sub.add_parser("synth", help="Generate synthetic sources and their mixture")
    p.add_argument("-n", "--n-dicts", type=int, default=3, help="Dictionaries per source (default: 3)")
    p.add_argument("-k", "--n-elems", type=int, default=4, help="Elements per dictionary (default: 4)")
    p.add_argument("--n-bins", type=int, default=129, help="Frequency bins (default: 129)")
    p.add_argument("--n-frames", type=int, default=100, help="Frames (default: 100)")
    p.add_argument("--quanta-per-frame", type=int, default=200, help="Sampled quanta per frame (default: 200)")
    p.add_argument("--mix-db", type=float, default=0.0, help="Level of source 1 over source 2 (default: 0)")
    p.add_argument("--disjoint", action="store_true", help="Give the sources disjoint frequency bands")
    p.add_argument("--stickiness", type=float, default=None, help="Cyclic chain with this determinism in [0, 1]")
    p.add_argument("--concentration", type=float, default=1.0, help="Dirichlet concentration of elements")
    p.add_argument("--sample-rate", type=int, default=16000, help="Sample rate (default: 16000)")
    p.add_argument("--seed", type=int, default=None, help="Generation seed (REQUIRED)")
    p.add_argument("--out-dir", default="./nfsep_synth", help="Output directory (default: ./nfsep_synth)")
    p.add_argument("--stem", default="synth", help="Output name stem (default: synth)")
    _add_common_args(p)

    # eval
    p = sub.add_parser("eval", help="Score separated WAVs against references")
    p.add_argument("-e", "--estimates", nargs="+", help="Separated WAV files (required)")
    p.add_argument("-r", "--references", nargs="+", help="Reference WAV files (required)")
    p.add_argument("--record", metavar="FILE", help="Write key=value scores")
    p.add_argument("--table", metavar="FILE", help="Write a TSV score table")
    _add_common_args(p)

    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ValidationError(f"Unknown command: {command}")


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse flags, folding in --config defaults for the chosen command"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        command = next((a for a in argv if a in COMMANDS), None)
        if command is not None:
            apply_config_defaults(_subparser(parser, command), read_config_file(known.config))

    args = parser.parse_args(argv)
    subparser = _subparser(parser, args.command)
    missing = [
        "/".join(a.option_strings)
        for a in subparser._actions
        if a.dest in REQUIRED_OPTIONS.get(args.command, ()) and not getattr(args, a.dest)
    ]
    if missing:
        subparser.error(f"the following arguments are required: {', '.join(missing)}")
    return args


def stft_config_from(args) -> StftConfig:
    return StftConfig(
        window_length=args.window_length,
        hop_length=args.hop_length,
        window_kind=args.window,
        fft_length=args.fft_length,
    )


def require_seed(args):
    if args.seed is None:
        raise ValidationError(f"--seed is required for '{args.command}'")
    if args.seed < 0:
        raise ValidationError("--seed must be non-negative")


def count_gain(args, spec) -> float:
    if args.quanta_per_frame is not None:
        return gain_for_quanta(spec, args.quanta_per_frame)
    return args.gain


def write_report(path: str, fields: Dict[str, object]):
    """key=value report, one field per line"""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in fields.items():
            f.write(f"{key}={value}\n")


def _join(values) -> str:
    return ",".join(f"{v:.10g}" for v in values)


# ============================================================
# Commands
# ============================================================


def cmd_train(args) -> int:
    require_seed(args)
    print(draw_box("Train", f"N={args.n_dicts} K={args.n_elems}"))
    config = stft_config_from(args)

    log_step(f"Loading {len(args.inputs)} file(s)")
    signal = concatenate(load_wav(p, args.channel) for p in args.inputs)
    spec = stft(signal, config)
    counts = to_counts(spec, count_gain(args, spec))
    log_info(f"Spectrogram: {counts.n_bins} bins x {counts.n_frames} frames")
    if args.dump_spectrogram:
        save_spectrogram(args.dump_spectrogram, counts)

    log_step("Running EM")
    result = train_source(
        counts,
        (args.n_dicts, args.n_elems, counts.n_bins),
        TrainConfig(max_iters=args.max_iters, rel_tol=args.rel_tol, seed=args.seed),
    )
    save_model(args.output, result.model)
    if args.text:
        export_model_text(args.text, result.model)

    print()
    print("=" * 60)
    print(f"{Colors.BOLD}Summary{Colors.NC}")
    print("=" * 60)
    print(f"  Iterations:       {result.iterations}")
    print(f"  Converged:        {result.converged}")
    print(f"  Log-likelihood:   {result.log_likelihood[-1]:.6f}")
    print(f"  Duration:         {format_time(result.elapsed)}")
    print(f"  Model:            {args.output}")
    return EXIT_OK


def cmd_separate(args) -> int:
    if len(args.models) < 2:
        raise ValidationError("separate needs at least two model files")
    if args.jitter > 0:
        require_seed(args)
    print(draw_box("Separate", f"algorithm: {args.algo}"))
    config = stft_config_from(args)

    models = [load_model(p) for p in args.models]
    for path, model in zip(args.models, models):
        if model.n_bins != config.n_bins:
            raise ValidationError(
                f"{path} has {model.n_bins} bins but the STFT config gives {config.n_bins}"
            )
    mixture_model = combine(models, args.gamma)

    signal = load_wav(args.mixture, args.channel)
    spec = stft(signal, config)
    gain = count_gain(args, spec)
    counts = to_counts(spec, gain)
    log_info(
        f"Mixture: {counts.n_bins} bins x {counts.n_frames} frames, "
        f"{mixture_model.n_elements} dictionary elements"
    )

    log_step(f"Inference ({args.algo})")
    start = time.time()
    posterior = run_inference(
        args.algo,
        mixture_model,
        counts,
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        max_joint_states=args.max_joint_states,
        seed=args.seed,
        jitter=args.jitter,
    )
    elapsed = time.time() - start

    log_step("Masking and resynthesis")
    result = separate(mixture_model, counts, spec, posterior_mean_weights(posterior), gain)
    stem = args.stem or os.path.splitext(os.path.basename(args.mixture))[0]
    paths = save_separation(result, args.out_dir, stem)

    if args.posterior:
        if args.algo == "vi":
            save_posterior(args.posterior, posterior)
        else:
            log_warn("--posterior is only written for --algo vi")

    report = separation_report(args, posterior, counts, paths, elapsed)
    report_path = os.path.join(args.out_dir, f"{stem}.report.txt")
    write_report(report_path, report)
    with open(os.path.join(args.out_dir, f"{stem}.trace.tsv"), "w", encoding="utf-8") as f:
        f.write(trace_table(posterior))

    print()
    print("=" * 60)
    print(f"{Colors.BOLD}Summary{Colors.NC}")
    print("=" * 60)
    print(f"  Iterations:       {posterior.iterations}")
    print(f"  Converged:        {posterior.converged}")
    print(f"  Per iteration:    {format_time(float(np.median(posterior.iteration_seconds)))}")
    print(f"  Duration:         {format_time(elapsed)}")
    for path in paths:
        print(f"  Output:           {path}")
    print(f"  Report:           {report_path}")
    return EXIT_OK


def _monitor(posterior) -> List[float]:
    return list(getattr(posterior, "monitor", None) or posterior.log_likelihood)


def separation_report(args, posterior, counts: CountSpectrogram, paths, elapsed) -> Dict[str, object]:
    report = {
        "algorithm": args.algo,
        "mixture": args.mixture,
        "models": ",".join(args.models),
        "gamma": args.gamma,
        "bins": counts.n_bins,
        "frames": counts.n_frames,
        "iterations": posterior.iterations,
        "converged": posterior.converged,
        "monitor": _join(_monitor(posterior)),
        "iteration_seconds": _join(posterior.iteration_seconds),
        "elapsed_seconds": f"{elapsed:.6f}",
    }
    if args.algo == "vi":
        for s, d in enumerate(posterior.d_hat, start=1):
            report[f"source{s}.states"] = ",".join(str(int(n)) for n in d.argmax(axis=1))
    elif args.algo == "exact":
        report["log_likelihood"] = _join(posterior.log_likelihood)
        for s in range(len(posterior.state_counts)):
            states = posterior.source_marginals(s).argmax(axis=1)
            report[f"source{s + 1}.states"] = ",".join(str(int(n)) for n in states)
    for k, path in enumerate(paths, start=1):
        report[f"source{k}.output"] = path
    return report


def trace_table(posterior) -> str:
    rows = ["iteration\tmonitor\tseconds"]
    for i, (m, sec) in enumerate(zip(_monitor(posterior), posterior.iteration_seconds), start=1):
        rows.append(f"{i}\t{m:.10g}\t{sec:.6g}")
    return "\n".join(rows) + "\n"


def cmd_bench(args) -> int:
    require_seed(args)
    print(draw_box("Bench", f"N in {args.n_values}, K={args.n_elems}"))
    rows = run_bench(
        BenchConfig(
            seed=args.seed,
            n_values=tuple(args.n_values),
            n_elems=args.n_elems,
            n_bins=args.n_bins,
            n_frames=args.n_frames,
            iterations=args.max_iters,
            max_joint_states=args.max_joint_states,
        )
    )

    print(f"{'N':>4} {'vi/iter':>12} {'exact/iter':>12} {'ratio':>8}")
    print("-" * 40)
    for r in rows:
        if r.error:
            print(f"{r.n_dicts:>4} {format_time(r.vi_seconds):>12} {Colors.YELLOW}{'refused':>12}{Colors.NC}")
            log_warn(r.error)
        else:
            print(
                f"{r.n_dicts:>4} {format_time(r.vi_seconds):>12} "
                f"{format_time(r.exact_seconds):>12} {r.ratio:>8.2f}"
            )

    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, "bench.tsv")
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_bench_table(rows))
        log_info(f"Table written to: {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    require_seed(args)
    print(draw_box("Synth", f"seed {args.seed}"))
    synth = synthesize(
        SynthConfig(
            seed=args.seed,
            n_dicts=args.n_dicts,
            n_elems=args.n_elems,
            n_bins=args.n_bins,
            n_frames=args.n_frames,
            quanta_per_frame=args.quanta_per_frame,
            mix_db=args.mix_db,
            disjoint=args.disjoint,
            stickiness=args.stickiness,
            concentration=args.concentration,
            sample_rate=args.sample_rate,
        )
    )
    written = write_synthetic(synth, args.out_dir, args.stem)
    cfg = synth.stft_config
    log_info(f"STFT for these models: --window-length {cfg.window_length} --hop-length {cfg.hop_length}")
    for key, path in written.items():
        log_info(f"{key}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_files(args.estimates, args.references)
    print_report(report)
    export_report(report, args.record, args.table)
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "separate": cmd_separate,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


# ============================================================
# Main Entry Point
# ============================================================


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except NfsepError as e:
        log_error(str(e))
        return exit_code_for(e)

    if args.no_color or not sys.stdout.isatty():
        Colors.disable()
    print_banner()

    try:
        return HANDLERS[args.command](args)
    except (NfsepError, OSError) as e:
        log_error(str(e))
        return exit_code_for(e)
    except Exception as e:  # noqa: BLE001
        log_error(f"Unexpected failure: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
