#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Reconstruction, Masking and Resynthesis

Turns per-frame element weights from any engine into per-source
spectrograms, distributes the mixture over the sources with a ratio mask
and goes back to audio with the mixture phase.
"""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from nfhmm import ExactConfig, MixtureModel, VIConfig, exact_infer, vi_infer
from nfsep_common import NumericalError, ValidationError
from plca import PlcaConfig, plca_separate
from signal_io import (
    ComplexSpectrogram,
    CountSpectrogram,
    TimeSignal,
    istft,
    save_wav,
)

CONSERVATION_TOL = 1e-9

ALGORITHMS = ("vi", "exact", "plca")


@dataclass
class SeparationResult:
    """Per-source raw estimates, masked spectrograms and signals"""

    raw_estimates: List[np.ndarray]
    masked: List[np.ndarray]
    signals: List[TimeSignal]

    @property
    def n_sources(self) -> int:
        return len(self.masked)


def run_inference(
    algo: str,
    mixture: MixtureModel,
    data: CountSpectrogram,
    max_iters: Optional[int] = None,
    rel_tol: Optional[float] = None,
    max_joint_states: Optional[int] = None,
    seed: Optional[int] = None,
    jitter: float = 0.0,
):
    """Dispatch to one engine; unset limits fall back to that engine's defaults"""
    overrides = {}
    if max_iters is not None:
        overrides["max_iters"] = max_iters
    if rel_tol is not None:
        overrides["rel_tol"] = rel_tol

    if algo == "vi":
        return vi_infer(mixture, data, VIConfig(seed=seed, jitter=jitter, **overrides))
    if algo == "exact":
        if max_joint_states is not None:
            overrides["max_joint_states"] = max_joint_states
        return exact_infer(mixture, data, ExactConfig(**overrides))
    if algo == "plca":
        return plca_separate(mixture.beta_all, data, PlcaConfig(**overrides))
    raise ValidationError(f"Unknown algorithm '{algo}', expected one of {ALGORITHMS}")


def posterior_mean_weights(posterior) -> np.ndarray:
    """T x K_total element weights from a VariationalState, ExactPosterior or PlcaWeights"""
    return np.asarray(posterior.element_weights(), dtype=np.float64)


def reconstruct(
    mixture: MixtureModel,
    weights: np.ndarray,
    frame_totals: np.ndarray,
    source: int,
) -> np.ndarray:
    """V_hat[l, t] = v_t * sum over the source's elements of w[t, k] beta[l, k]"""
    elements = mixture.source_elements(source)
    weights = np.asarray(weights, dtype=np.float64)
    frame_totals = np.asarray(frame_totals, dtype=np.float64)
    if weights.shape[1] != mixture.n_elements:
        raise ValidationError(
            f"Weights have {weights.shape[1]} elements, mixture has {mixture.n_elements}"
        )
    if frame_totals.shape != (weights.shape[0],):
        raise ValidationError("frame_totals must have one entry per weight row")

    scaled = weights[:, elements] * frame_totals[:, None]
    return mixture.beta_all[:, elements] @ scaled.T


def wiener_mask(
    mixture_mag: np.ndarray, estimates: Sequence[np.ndarray]
) -> List[np.ndarray]:
    """
    V*_s = V * V_hat_s / sum_s V_hat_s.

    Cells with a zero denominator give each source an equal share of V.
    """
    mixture_mag = np.asarray(mixture_mag, dtype=np.float64)
    if not estimates:
        raise ValidationError("wiener_mask needs at least one estimate")
    for e in estimates:
        if np.shape(e) != mixture_mag.shape:
            raise ValidationError(
                f"Estimate shape {np.shape(e)} does not match mixture {mixture_mag.shape}"
            )
        if np.any(np.asarray(e) < 0):
            raise ValidationError("Estimates must be non-negative")

    total = np.sum(estimates, axis=0)
    share = 1.0 / len(estimates)
    masked = []
    for e in estimates:
        ratio = np.divide(e, total, out=np.full_like(mixture_mag, share), where=total > 0)
        masked.append(mixture_mag * ratio)
    return masked


def check_conservation(mixture_mag: np.ndarray, masked: Sequence[np.ndarray]):
    residual = np.abs(np.sum(masked, axis=0) - mixture_mag)
    scale = max(1.0, float(np.max(mixture_mag)) if mixture_mag.size else 1.0)
    if np.any(residual > CONSERVATION_TOL * scale):
        raise NumericalError(
            f"Masked spectrograms do not sum to the mixture (max error {residual.max():.3e})"
        )


def resynthesize(
    masked: np.ndarray, mixture_spec: ComplexSpectrogram, gain: float = 1.0
) -> TimeSignal:
    """Masked quanta divided by the count gain, with the mixture phase, then istft"""
    if np.shape(masked) != mixture_spec.shape:
        raise ValidationError(
            f"Masked spectrogram {np.shape(masked)} does not match mixture {mixture_spec.shape}"
        )
    if not gain > 0:
        raise ValidationError("gain must be positive")
    bins = (np.asarray(masked) / gain) * mixture_spec.phase()
    spec = ComplexSpectrogram(
        bins=bins,
        config=mixture_spec.config,
        sample_rate=mixture_spec.sample_rate,
        signal_length=mixture_spec.signal_length,
    )
    return istft(spec)


def separate(
    mixture: MixtureModel,
    data: CountSpectrogram,
    mixture_spec: ComplexSpectrogram,
    weights: np.ndarray,
    gain: float = 1.0,
) -> SeparationResult:
    """Reconstruct every source, mask the mixture quanta, resynthesise"""
    if data.values.shape != mixture_spec.shape:
        raise ValidationError("Count spectrogram and complex spectrogram disagree in shape")

    raw = [
        reconstruct(mixture, weights, data.frame_totals, s)
        for s in range(mixture.n_sources)
    ]
    masked = wiener_mask(data.values, raw)
    check_conservation(data.values, masked)
    signals = [resynthesize(m, mixture_spec, gain) for m in masked]
    return SeparationResult(raw_estimates=raw, masked=masked, signals=signals)


def output_paths(out_dir: str, stem: str, n_sources: int) -> List[str]:
    """<out_dir>/<stem>.source<k>.wav with k starting at 1"""
    return [os.path.join(out_dir, f"{stem}.source{k}.wav") for k in range(1, n_sources + 1)]


def save_separation(result: SeparationResult, out_dir: str, stem: str) -> List[str]:
    paths = output_paths(out_dir, stem, result.n_sources)
    for path, signal in zip(paths, result.signals):
        save_wav(path, signal)
    return paths
