#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep Test Suite - Separation Quality Evaluation Tests

Tests for the BSS-EVAL projection scores and report exports.
"""

import os

import numpy as np
import pytest

from evaluate_separation import (
    SCORE_CAP,
    EvaluationReport,
    SepScores,
    bss_decompose,
    bss_eval,
    bss_eval_sources,
    evaluate_files,
    export_report,
    format_record,
    format_table,
)
from nfsep_common import ValidationError
from signal_io import TimeSignal, save_wav


@pytest.fixture
def references():
    """Two equal-power orthogonal sinusoids over whole periods"""
    n = np.arange(8000)
    return [np.sin(2 * np.pi * 5 * n / 8000), np.sin(2 * np.pi * 13 * n / 8000)]


class TestBssEval:
    """Tests for bss_eval"""

    def test_perfect_estimate(self, references):
        """Test that the reference itself scores at the cap"""
        scores = bss_eval(references[0], references, 0)
        assert scores.sdr == SCORE_CAP
        assert scores.sir == SCORE_CAP
        assert scores.sar == SCORE_CAP

    def test_interference(self, references):
        """Test a known amount of leakage"""
        estimate = references[0] + 0.1 * references[1]
        scores = bss_eval(estimate, references, 0)

        assert scores.sir == pytest.approx(20.0, abs=1e-6)
        assert scores.sdr == pytest.approx(20.0, abs=1e-6)
        assert scores.sar == SCORE_CAP

    def test_mixture_as_estimate(self, references):
        """Test that the plain mixture has SIR 0 dB for equal powers"""
        scores = bss_eval(references[0] + references[1], references, 0)
        assert scores.sir == pytest.approx(0.0, abs=1e-6)

    def test_random_properties(self):
        """Test scale invariance, score bounds and exact decomposition on random triples"""
        rng = np.random.default_rng(0)
        for _ in range(100):
            refs = [rng.standard_normal(256), rng.standard_normal(256)]
            estimate = refs[0] + 0.3 * refs[1] + 0.2 * rng.standard_normal(256)
            d = bss_decompose(estimate, refs, 0)
            assert np.allclose(d.s_target + d.e_interf + d.e_artif, estimate, atol=1e-9)

            base = bss_eval(estimate, refs, 0)
            scaled = bss_eval(3.7 * estimate, refs, 0)
            assert scaled.sdr == pytest.approx(base.sdr, abs=1e-9)
            assert scaled.sir == pytest.approx(base.sir, abs=1e-9)
            assert scaled.sar == pytest.approx(base.sar, abs=1e-9)
            assert base.sdr <= min(base.sir, base.sar) + 3.02

            assert bss_eval(refs[1], refs, 1).sdr == SCORE_CAP

            noise = 0.1 * rng.standard_normal(256)
            basis = np.linalg.qr(np.stack(refs, axis=1))[0]
            noise -= basis @ (basis.T @ noise)
            noisy = bss_eval(refs[0] + noise, refs, 0)
            assert noisy.sdr < SCORE_CAP
            assert noisy.sar < SCORE_CAP
            assert noisy.sir == SCORE_CAP

    def test_accepts_time_signals(self, references):
        """Test TimeSignal inputs"""
        refs = [TimeSignal(r, 8000) for r in references]
        assert bss_eval(refs[1], refs, 1).sdr == SCORE_CAP

    def test_validation(self, references):
        """Test length, rank and silent-target checks"""
        with pytest.raises(ValidationError):
            bss_eval(references[0][:-1], references, 0)
        with pytest.raises(ValidationError):
            bss_eval(references[0], [references[0], 2 * references[0]], 0)
        with pytest.raises(ValidationError):
            bss_eval(references[0], [np.zeros(8000), references[1]], 0)
        with pytest.raises(ValidationError):
            bss_eval(references[0], references, 2)


class TestPermutation:
    """Tests for bss_eval_sources"""

    def test_swapped_estimates(self, references):
        """Test that estimates are matched to the right references"""
        estimates = [references[1] + 0.05 * references[0], references[0]]
        report = bss_eval_sources(estimates, references)
        direct = bss_eval_sources(estimates[::-1], references)

        assert report.permutation == (1, 0)
        assert direct.permutation == (0, 1)
        assert [s.sdr for s in report.scores] == pytest.approx([s.sdr for s in direct.scores])

    def test_count_mismatch(self, references):
        """Test that estimates and references must pair up"""
        with pytest.raises(ValidationError):
            bss_eval_sources([references[0]], references)


class TestReports:
    """Tests for report formatting and export"""

    def _report(self):
        return EvaluationReport(
            references=["a.wav", "b.wav"],
            estimates=["x.wav", "y.wav"],
            scores=[SepScores(10.0, 20.0, 30.0), SepScores(4.0, 6.0, 8.0)],
            permutation=(1, 0),
        )

    def test_mean(self):
        """Test averaged scores"""
        mean = self._report().mean
        assert (mean.sdr, mean.sir, mean.sar) == (7.0, 13.0, 19.0)

    def test_record(self):
        """Test key=value lines"""
        lines = format_record(self._report()).splitlines()
        assert "source1.reference=a.wav" in lines
        assert "source1.estimate=y.wav" in lines
        assert "source2.sar=8.000000" in lines
        assert lines[-3] == "mean.sdr=7.000000"

    def test_table(self):
        """Test the TSV header and rows"""
        rows = format_table(self._report()).splitlines()
        assert rows[0] == "source\treference\testimate\tsdr\tsir\tsar"
        assert rows[2].split("\t")[:3] == ["2", "b.wav", "x.wav"]

    def test_export_and_files(self, temp_dir, references):
        """Test evaluating WAV files and writing both exports"""
        paths = []
        for name, samples in (("r1", references[0]), ("r2", references[1])):
            path = os.path.join(temp_dir, f"{name}.wav")
            save_wav(path, TimeSignal(0.5 * samples, 8000))
            paths.append(path)

        report = evaluate_files(paths[::-1], paths)
        record = os.path.join(temp_dir, "out", "scores.txt")
        table = os.path.join(temp_dir, "out", "scores.tsv")
        export_report(report, record, table)

        assert report.permutation == (1, 0)
        assert report.mean.sdr == SCORE_CAP
        assert os.path.isfile(record)
        assert os.path.isfile(table)
