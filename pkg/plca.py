#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - PLCA Baseline

Per-frame mixture weights over one fixed concatenated dictionary with no
temporal model, estimated by EM from a uniform start.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import xlogy

from nfsep_common import (
    EmptySpectrogramError,
    NumericalError,
    ValidationError,
    ZeroSupportError,
    has_converged,
    log_warn,
)
from signal_io import CountSpectrogram


@dataclass
class PlcaConfig:
    max_iters: int = 200
    rel_tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if not self.rel_tol >= 0:
            raise ValidationError("rel_tol must be non-negative")


@dataclass
class PlcaWeights:
    """weights[t, k]: per-frame distribution over dictionary columns"""

    weights: np.ndarray
    log_likelihood: List[float] = field(default_factory=list)
    iteration_seconds: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def element_weights(self) -> np.ndarray:
        return self.weights


def check_dictionary(beta_all: np.ndarray, n_bins: int) -> np.ndarray:
    """Validate an L x K matrix of column-normalised elements"""
    beta_all = np.asarray(beta_all, dtype=np.float64)
    if beta_all.ndim != 2 or beta_all.shape[1] < 1:
        raise ValidationError("Dictionary must be an L x K matrix with K >= 1")
    if beta_all.shape[0] != n_bins:
        raise ValidationError(
            f"Dictionary has {beta_all.shape[0]} bins, spectrogram has {n_bins}"
        )
    if np.any(beta_all < 0) or np.any(np.abs(beta_all.sum(axis=0) - 1.0) > 1e-9):
        raise ValidationError("Dictionary columns must be non-negative and sum to 1")
    return beta_all


def check_support(beta_all: np.ndarray, data: CountSpectrogram):
    """Raise if quanta fall in a bin that no element covers"""
    dead = ~np.any(beta_all > 0, axis=1)
    hit = dead[:, None] & (data.values > 0)
    if np.any(hit):
        l, t = np.argwhere(hit)[0]
        raise ZeroSupportError(
            f"zero support: bin {l} has quanta at frame {t} but no dictionary element covers it"
        )


def frame_log_likelihood(
    beta_all: np.ndarray, weights: np.ndarray, data: CountSpectrogram
) -> np.ndarray:
    """sum_l V[l, t] log sum_k w[t, k] beta[l, k], per frame"""
    recon = weights @ beta_all.T
    return xlogy(data.values.T, recon).sum(axis=1)


def weight_update(
    beta_all: np.ndarray, weights: np.ndarray, counts: np.ndarray
) -> np.ndarray:
    """
    One multiplicative EM step for weights[..., k] against counts[..., l].

    Leading axes are independent problems; rows with no counts keep their
    weights.
    """
    recon = weights @ beta_all.T
    ratio = np.divide(
        counts, recon, out=np.zeros_like(recon), where=(counts > 0) & (recon > 0)
    )
    updated = weights * (ratio @ beta_all)
    totals = updated.sum(axis=-1, keepdims=True)
    return np.divide(updated, totals, out=weights.copy(), where=totals > 0)


def plca_separate(
    beta_all: np.ndarray,
    data: CountSpectrogram,
    config: Optional[PlcaConfig] = None,
) -> PlcaWeights:
    """Fixed-dictionary EM until the total log-likelihood settles"""
    config = config or PlcaConfig()
    beta_all = check_dictionary(beta_all, data.n_bins)
    if data.is_empty():
        raise EmptySpectrogramError("empty spectrogram: nothing to explain")
    check_support(beta_all, data)

    n_elements = beta_all.shape[1]
    counts = data.values.T
    result = PlcaWeights(weights=np.full((data.n_frames, n_elements), 1.0 / n_elements))

    for iteration in range(1, config.max_iters + 1):
        start = time.perf_counter()
        ll = float(frame_log_likelihood(beta_all, result.weights, data).sum())
        if not np.isfinite(ll):
            raise NumericalError("PLCA log-likelihood is not finite", iteration)
        result.log_likelihood.append(ll)
        result.weights = weight_update(beta_all, result.weights, counts)
        result.iteration_seconds.append(time.perf_counter() - start)
        result.iterations = iteration
        if has_converged(result.log_likelihood, config.rel_tol):
            result.converged = True
            break

    if not result.converged:
        log_warn(f"PLCA stopped at max_iters={config.max_iters} before converging")
    return result
