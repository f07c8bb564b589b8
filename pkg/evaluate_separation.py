#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Separation Quality Evaluation Script

Scores separated signals against reference sources with the BSS-EVAL
ratios in their zero-lag projection form:

- SDR: overall distortion (interference plus artifacts)
- SIR: leakage of the other references into the estimate
- SAR: everything outside the span of the references

The estimate is split into s_target (projection on the target reference),
e_interf (the rest of its projection on all references) and e_artif (the
residual). Scores are capped at +/-100 dB. Estimates are matched to
references by the permutation with the best mean SDR.

Usage:
    python evaluate_separation.py --estimates a.wav b.wav --references s1.wav s2.wav
    python evaluate_separation.py -e out/*.wav -r ref/*.wav --record scores.txt --table scores.tsv
"""

import argparse
import itertools
import os
import sys
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from nfsep_common import (
    EXIT_OK,
    Colors,
    NfsepError,
    ValidationError,
    exit_code_for,
    log_error,
    log_info,
)
from signal_io import TimeSignal, load_wav

SCORE_CAP = 100.0

SignalLike = Union[TimeSignal, np.ndarray]


@dataclass
class SepScores:
    """SDR, SIR and SAR in decibels"""

    sdr: float
    sir: float
    sar: float

    def as_dict(self) -> dict:
        return {"sdr": self.sdr, "sir": self.sir, "sar": self.sar}


@dataclass
class BssDecomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray


@dataclass
class EvaluationReport:
    """Scores per reference after permutation solving"""

    references: List[str]
    estimates: List[str]
    scores: List[SepScores] = field(default_factory=list)
    permutation: Tuple[int, ...] = ()

    @property
    def mean(self) -> SepScores:
        return SepScores(
            sdr=float(np.mean([s.sdr for s in self.scores])),
            sir=float(np.mean([s.sir for s in self.scores])),
            sar=float(np.mean([s.sar for s in self.scores])),
        )


def _samples(signal: SignalLike) -> np.ndarray:
    if isinstance(signal, TimeSignal):
        return signal.samples
    return np.asarray(signal, dtype=np.float64)


def _safe_db(num: float, den: float) -> float:
    if den <= 0:
        return SCORE_CAP
    if num <= 0:
        return -SCORE_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SCORE_CAP, SCORE_CAP))


def validate(estimate: np.ndarray, references: np.ndarray, target_index: int):
    if references.ndim != 2 or references.shape[0] < 1:
        raise ValidationError("At least one reference signal is required")
    if estimate.ndim != 1 or estimate.shape[0] != references.shape[1]:
        raise ValidationError(
            f"Estimate has {estimate.shape[-1]} samples, references have {references.shape[1]}"
        )
    if not 0 <= target_index < references.shape[0]:
        raise ValidationError(f"Target index {target_index} out of range")
    if not np.any(references[target_index]):
        raise ValidationError("Target reference is all zeros")
    if np.linalg.matrix_rank(references) < references.shape[0]:
        raise ValidationError("Reference signals are linearly dependent")


def bss_decompose(
    estimate: SignalLike, references: Sequence[SignalLike], target_index: int
) -> BssDecomposition:
    est = _samples(estimate)
    refs = np.stack([_samples(r) for r in references]) if references else np.zeros((0, 0))
    validate(est, refs, target_index)

    target = refs[target_index]
    s_target = (est @ target) / (target @ target) * target
    coef, *_ = np.linalg.lstsq(refs.T, est, rcond=None)
    projection = refs.T @ coef
    return BssDecomposition(
        s_target=s_target,
        e_interf=projection - s_target,
        e_artif=est - projection,
    )


def bss_eval(
    estimate: SignalLike, references: Sequence[SignalLike], target_index: int
) -> SepScores:
    d = bss_decompose(estimate, references, target_index)
    target_power = float(d.s_target @ d.s_target)
    interf_power = float(d.e_interf @ d.e_interf)
    artif_power = float(d.e_artif @ d.e_artif)
    distortion = d.e_interf + d.e_artif
    useful = d.s_target + d.e_interf
    return SepScores(
        sdr=_safe_db(target_power, float(distortion @ distortion)),
        sir=_safe_db(target_power, interf_power),
        sar=_safe_db(float(useful @ useful), artif_power),
    )


def bss_eval_sources(
    estimates: Sequence[SignalLike],
    references: Sequence[SignalLike],
    estimate_names: Sequence[str] = (),
    reference_names: Sequence[str] = (),
) -> EvaluationReport:
    """Score every estimate against every reference and keep the best-SDR matching"""
    n = len(references)
    if n == 0 or len(estimates) != n:
        raise ValidationError(
            f"Need as many estimates as references, got {len(estimates)} and {n}"
        )

    table = [[bss_eval(e, references, j) for j in range(n)] for e in estimates]
    best = max(
        itertools.permutations(range(n)),
        key=lambda perm: sum(table[perm[j]][j].sdr for j in range(n)),
    )
    return EvaluationReport(
        references=list(reference_names) or [f"reference{j + 1}" for j in range(n)],
        estimates=list(estimate_names) or [f"estimate{i + 1}" for i in range(n)],
        scores=[table[best[j]][j] for j in range(n)],
        permutation=tuple(best),
    )


def _score_color(sdr: float) -> str:
    if sdr >= 10:
        return Colors.GREEN
    if sdr >= 3:
        return Colors.YELLOW
    return Colors.RED


def print_report(report: EvaluationReport):
    """Print per-source and mean scores"""
    print()
    print("=" * 70)
    print(f"{Colors.BOLD}NFSep Separation Quality Report{Colors.NC}")
    print("=" * 70)
    print()
    print(f"{'Reference':<24} {'Estimate':<24} {'SDR':>6} {'SIR':>6} {'SAR':>6}")
    print("-" * 70)
    for j, scores in enumerate(report.scores):
        estimate = report.estimates[report.permutation[j]]
        color = _score_color(scores.sdr)
        print(
            f"{os.path.basename(report.references[j]):<24} {os.path.basename(estimate):<24} "
            f"{color}{scores.sdr:>6.2f}{Colors.NC} {scores.sir:>6.2f} {scores.sar:>6.2f}"
        )
    print("-" * 70)
    mean = report.mean
    print(
        f"{Colors.BOLD}{'Mean':<49}{Colors.NC} {_score_color(mean.sdr)}{mean.sdr:>6.2f}{Colors.NC} "
        f"{mean.sir:>6.2f} {mean.sar:>6.2f}"
    )
    print("=" * 70)


def format_record(report: EvaluationReport) -> str:
    """key=value lines, one metric per line"""
    lines = []
    for j, scores in enumerate(report.scores):
        lines.append(f"source{j + 1}.reference={report.references[j]}")
        lines.append(f"source{j + 1}.estimate={report.estimates[report.permutation[j]]}")
        for key, value in scores.as_dict().items():
            lines.append(f"source{j + 1}.{key}={value:.6f}")
    for key, value in report.mean.as_dict().items():
        lines.append(f"mean.{key}={value:.6f}")
    return "\n".join(lines) + "\n"


def format_table(report: EvaluationReport) -> str:
    """Tab-separated table with a header row"""
    rows = ["source\treference\testimate\tsdr\tsir\tsar"]
    for j, s in enumerate(report.scores):
        rows.append(
            f"{j + 1}\t{report.references[j]}\t{report.estimates[report.permutation[j]]}"
            f"\t{s.sdr:.6f}\t{s.sir:.6f}\t{s.sar:.6f}"
        )
    return "\n".join(rows) + "\n"


def export_report(report: EvaluationReport, record_path: str = None, table_path: str = None):
    for path, text in ((record_path, format_record), (table_path, format_table)):
        if not path:
            continue
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text(report))
        log_info(f"Exported to: {path}")


def evaluate_files(estimate_paths: Sequence[str], reference_paths: Sequence[str]) -> EvaluationReport:
    estimates = [load_wav(p) for p in estimate_paths]
    references = [load_wav(p) for p in reference_paths]
    return bss_eval_sources(estimates, references, estimate_paths, reference_paths)


def main():
    parser = argparse.ArgumentParser(
        description="Evaluate separated audio against reference sources",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Metrics (dB, capped at +/-100):
  SDR: source to distortion ratio (overall quality)
  SIR: source to interference ratio (suppression of other sources)
  SAR: source to artifacts ratio (processing artifacts)

Estimates are matched to references by the permutation with the best mean SDR.

Examples:
  python evaluate_separation.py -e mix.source1.wav mix.source2.wav -r s1.wav s2.wav
  python evaluate_separation.py -e out/*.wav -r refs/*.wav --table scores.tsv
""",
    )
    parser.add_argument(
        "-e", "--estimates", nargs="+", required=True, help="Separated WAV files"
    )
    parser.add_argument(
        "-r", "--references", nargs="+", required=True, help="Reference WAV files"
    )
    parser.add_argument("--record", metavar="FILE", help="Write key=value scores")
    parser.add_argument("--table", metavar="FILE", help="Write a TSV score table")
    parser.add_argument("--no-color", action="store_true", help="Disable colored output")

    args = parser.parse_args()
    if args.no_color or not sys.stdout.isatty():
        Colors.disable()

    try:
        report = evaluate_files(args.estimates, args.references)
    except (NfsepError, OSError) as e:
        log_error(str(e))
        sys.exit(exit_code_for(e))

    print_report(report)
    export_report(report, args.record, args.table)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
