#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep Test Suite - Shared Fixtures

This module contains shared pytest fixtures used across all test modules.
"""

import os
import shutil
import sys
import tempfile

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from hmm_core import ChainParams  # noqa: E402
from nhmm import SourceModel  # noqa: E402
from signal_io import TimeSignal, save_wav  # noqa: E402


# ============================================================
# Helpers
# ============================================================


def random_chain(rng: np.random.Generator, n_states: int) -> ChainParams:
    """Column-stochastic transitions with strictly positive entries"""
    transition = rng.dirichlet(np.ones(n_states), size=n_states).T
    transition /= transition.sum(axis=0, keepdims=True)
    initial = rng.dirichlet(np.ones(n_states))
    initial /= initial.sum()
    return ChainParams(transition=transition, initial=initial)


def random_model(
    rng: np.random.Generator, n_dicts: int, n_elems: int, n_bins: int
) -> SourceModel:
    beta = rng.dirichlet(np.ones(n_bins), size=(n_dicts, n_elems))
    beta /= beta.sum(axis=2, keepdims=True)
    return SourceModel(dictionaries=beta, chain=random_chain(rng, n_dicts))


def banded_model(n_bins: int, band: slice, n_dicts: int = 2, n_elems: int = 1) -> SourceModel:
    """Elements spread evenly over band, each dictionary on its own sub-band"""
    bins = np.arange(n_bins)[band]
    beta = np.zeros((n_dicts, n_elems, n_bins))
    for d, part in enumerate(np.array_split(bins, n_dicts)):
        beta[d, :, part] = 1.0 / part.size
    sticky = 0.9 * np.eye(n_dicts) + 0.1 / n_dicts
    chain = ChainParams(
        transition=sticky / sticky.sum(axis=0, keepdims=True),
        initial=np.full(n_dicts, 1.0 / n_dicts),
    )
    return SourceModel(dictionaries=beta, chain=chain)


def single_state_model(beta: np.ndarray) -> SourceModel:
    """One dictionary (K x L), trivial chain"""
    beta = np.asarray(beta, dtype=np.float64)
    return SourceModel(
        dictionaries=beta[None, :, :],
        chain=ChainParams(transition=np.ones((1, 1)), initial=np.ones(1)),
    )


# ============================================================
# Fixtures
# ============================================================


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests"""
    tmp = tempfile.mkdtemp(prefix="nfsep_test_")
    yield tmp
    shutil.rmtree(tmp, ignore_errors=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    """N=3, K=2, L=8 source model with random parameters"""
    return random_model(rng, 3, 2, 8)


@pytest.fixture
def disjoint_pair():
    """Two sources on disjoint halves of 8 bins"""
    return banded_model(8, slice(0, 4)), banded_model(8, slice(4, 8))


@pytest.fixture
def tone_wav(temp_dir):
    """One second of a 440 Hz tone at 16 kHz"""
    t = np.arange(16000) / 16000.0
    signal = TimeSignal(0.5 * np.sin(2 * np.pi * 440.0 * t), 16000)
    path = os.path.join(temp_dir, "tone.wav")
    save_wav(path, signal)
    return path
