#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Non-negative Hidden Markov Model

Single-source model: one dictionary of K spectral elements per Markov
state, per-frame mixture weights over the active dictionary's elements,
and Markov transitions between dictionaries.

Provides:
- SourceModel / TrainState containers
- init_model, em_step, train (maximum-likelihood EM on isolated audio)
- decode_states and state_accuracy for checking a trained model
- sample (the generative process, used for synthetic data)
- Model files (binary container) and a text export for debugging
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import xlogy

from hmm_core import ChainParams, ChainPosterior, forward_backward
from nfsep_common import (
    AudioIOError,
    EmptySpectrogramError,
    NumericalError,
    ValidationError,
    has_converged,
    log_warn,
    read_container,
    split_payload,
    write_container,
)
from signal_io import CountSpectrogram

MODEL_MAGIC = b"NFSMODEL"
MODEL_VERSION = 1

PARAM_FLOOR = 1e-12
DIAGONAL_BOOST = 0.1
NORMALIZATION_TOL = 1e-12


# ============================================================
# Data Structures
# ============================================================


@dataclass(frozen=True, eq=False)
class SourceModel:
    """Dictionaries beta[d, z, l] plus the chain over the N dictionaries"""

    dictionaries: np.ndarray
    chain: ChainParams

    def __post_init__(self):
        beta = np.asarray(self.dictionaries, dtype=np.float64)
        if beta.ndim != 3 or min(beta.shape) < 1:
            raise ValidationError("Dictionaries must be a non-empty N x K x L array")
        if not np.all(np.isfinite(beta)) or np.any(beta < 0):
            raise ValidationError("Dictionary entries must be finite and non-negative")
        if np.any(np.abs(beta.sum(axis=2) - 1.0) > NORMALIZATION_TOL):
            raise ValidationError("Every dictionary element must sum to 1 over frequency")
        if self.chain.n_states != beta.shape[0]:
            raise ValidationError(
                f"Chain has {self.chain.n_states} states but there are {beta.shape[0]} dictionaries"
            )
        object.__setattr__(self, "dictionaries", beta)

    @property
    def dims(self) -> Tuple[int, int, int]:
        n, k, l = self.dictionaries.shape
        return n, k, l

    @property
    def n_states(self) -> int:
        return self.dictionaries.shape[0]

    @property
    def n_elements(self) -> int:
        return self.dictionaries.shape[1]

    @property
    def n_bins(self) -> int:
        return self.dictionaries.shape[2]

    def flat_dictionary(self) -> np.ndarray:
        """All N*K elements as columns of an L x (N*K) matrix, dictionary-major"""
        n, k, l = self.dims
        return self.dictionaries.reshape(n * k, l).T.copy()


@dataclass
class TrainState:
    """Per-frame weights theta[t, d, z] and the log-likelihood trace"""

    weights: np.ndarray
    log_likelihood: List[float] = field(default_factory=list)

    @classmethod
    def initial(cls, n_frames: int, n_states: int, n_elements: int) -> "TrainState":
        return cls(weights=np.full((n_frames, n_states, n_elements), 1.0 / n_elements))


@dataclass
class TrainConfig:
    max_iters: int = 100
    rel_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if not self.rel_tol >= 0:
            raise ValidationError("rel_tol must be non-negative")


@dataclass
class TrainResult:
    """Outcome of train_source, reported by the train command"""

    model: SourceModel
    log_likelihood: List[float]
    iterations: int
    converged: bool
    elapsed: float


# ============================================================
# Model Construction
# ============================================================


def _validate_dims(dims: Tuple[int, int, int]) -> Tuple[int, int, int]:
    if len(dims) != 3:
        raise ValidationError("dims must be (N, K, L)")
    n, k, l = (int(d) for d in dims)
    if min(n, k, l) < 1:
        raise ValidationError(f"All dimensions must be at least 1, got {(n, k, l)}")
    return n, k, l


def _normalize(values: np.ndarray, axis: int) -> np.ndarray:
    return values / values.sum(axis=axis, keepdims=True)


def _floor(values: np.ndarray, axis: int) -> np.ndarray:
    return _normalize(np.maximum(values, PARAM_FLOOR), axis)


def init_model(dims: Tuple[int, int, int], seed: int) -> SourceModel:
    """
    Random starting point for EM.

    Elements are drawn from a flat Dirichlet over frequency; transitions are
    uniform with a small diagonal boost; the initial distribution is uniform.
    """
    n, k, l = _validate_dims(dims)
    rng = np.random.default_rng(seed)

    beta = rng.dirichlet(np.ones(l), size=(n, k))
    beta = _floor(beta, axis=2)

    transition = _normalize(np.ones((n, n)) + DIAGONAL_BOOST * np.eye(n), axis=0)
    chain = ChainParams(transition=transition, initial=np.full(n, 1.0 / n))
    return SourceModel(dictionaries=beta, chain=chain)


# ============================================================
# EM
# ============================================================


def _check_data(model: SourceModel, data: CountSpectrogram):
    if data.n_bins != model.n_bins:
        raise ValidationError(
            f"Spectrogram has {data.n_bins} bins, model expects {model.n_bins}"
        )
    if data.is_empty():
        raise EmptySpectrogramError("empty spectrogram: no quanta to train on")


def state_log_likelihoods(
    model: SourceModel, data: CountSpectrogram, weights: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-frame, per-state multinomial log-likelihoods.

    Returns (log_lik[t, d], mix[t, d, l]) where mix is the frame
    distribution sum_z theta[t, d, z] beta[d, z, l].
    """
    mix = np.einsum("tdk,dkl->tdl", weights, model.dictionaries)
    counts = data.values.T[:, None, :]
    log_lik = xlogy(counts, mix).sum(axis=2)
    return log_lik, mix


def em_step(
    model: SourceModel,
    data: CountSpectrogram,
    state: TrainState,
    fixed_model: bool = False,
) -> Tuple[SourceModel, TrainState]:
    """
    One EM iteration.

    The log-likelihood appended to the trace is that of the incoming
    parameters. With fixed_model only the per-frame weights are updated.
    """
    _check_data(model, data)
    n, k, _ = model.dims
    if state.weights.shape != (data.n_frames, n, k):
        raise ValidationError(
            f"Weights shape {state.weights.shape} does not match "
            f"{(data.n_frames, n, k)}"
        )

    theta = state.weights
    beta = model.dictionaries
    log_lik, mix = state_log_likelihoods(model, data, theta)
    posterior = forward_backward(log_lik, model.chain)

    counts = data.values.T[:, None, :]
    ratio = np.divide(
        counts, mix, out=np.zeros_like(mix), where=(counts > 0) & (mix > 0)
    )

    # theta[t, d, z] <- theta * sum_l ratio * beta; the state posterior cancels
    theta_new = theta * np.einsum("tdl,dzl->tdz", ratio, beta)
    totals = theta_new.sum(axis=2, keepdims=True)
    theta_new = np.divide(theta_new, totals, out=theta.copy(), where=totals > 0)

    trace = state.log_likelihood + [posterior.log_evidence]
    new_state = TrainState(weights=theta_new, log_likelihood=trace)
    if fixed_model:
        return model, new_state

    gamma = posterior.marginals
    beta_new = beta * np.einsum("td,tdz,tdl->dzl", gamma, theta, ratio)
    mass = beta_new.sum(axis=2, keepdims=True)
    beta_new = np.where(mass > 0, beta_new, beta)
    beta_new = _floor(beta_new, axis=2)

    chain = _update_chain(model.chain, posterior)
    return SourceModel(dictionaries=beta_new, chain=chain), new_state


def _update_chain(chain: ChainParams, posterior: ChainPosterior) -> ChainParams:
    counts = posterior.transition_counts()
    col = counts.sum(axis=0, keepdims=True)
    transition = np.where(col > 0, counts, chain.transition)
    transition = _floor(transition, axis=0)
    initial = _normalize(posterior.marginals[0], axis=0)
    return ChainParams(transition=transition, initial=initial)


def train_source(
    data: CountSpectrogram,
    dims: Tuple[int, int, int],
    config: Optional[TrainConfig] = None,
) -> TrainResult:
    """Run EM from init_model until the log-likelihood settles"""
    config = config or TrainConfig()
    n, k, l = _validate_dims(dims)
    model = init_model((n, k, l), config.seed)
    _check_data(model, data)
    state = TrainState.initial(data.n_frames, n, k)

    start = time.time()
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iters + 1):
        model, state = em_step(model, data, state)
        if not np.isfinite(state.log_likelihood[-1]):
            raise NumericalError("Training diverged: non-finite log-likelihood", iteration)
        if has_converged(state.log_likelihood, config.rel_tol):
            converged = True
            break

    if not converged:
        log_warn(f"Training stopped at max_iters={config.max_iters} before converging")

    return TrainResult(
        model=model,
        log_likelihood=list(state.log_likelihood),
        iterations=iteration,
        converged=converged,
        elapsed=time.time() - start,
    )


def train(
    data: CountSpectrogram,
    dims: Tuple[int, int, int],
    config: Optional[TrainConfig] = None,
) -> SourceModel:
    """Train a SourceModel; per-frame weights are nuisance parameters and dropped"""
    return train_source(data, dims, config).model


# ============================================================
# Decoding
# ============================================================


def decode_states(
    model: SourceModel,
    data: CountSpectrogram,
    max_iters: int = 50,
    rel_tol: float = 1e-6,
) -> np.ndarray:
    """Most probable state per frame after fitting weights with the model held fixed"""
    _check_data(model, data)
    state = TrainState.initial(data.n_frames, model.n_states, model.n_elements)
    for _ in range(max_iters):
        _, state = em_step(model, data, state, fixed_model=True)
        if has_converged(state.log_likelihood, rel_tol):
            break

    log_lik, _ = state_log_likelihoods(model, data, state.weights)
    posterior = forward_backward(log_lik, model.chain)
    return posterior.marginals.argmax(axis=1)


def state_accuracy(decoded: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of frames matching truth under the best relabelling of decoded states"""
    decoded = np.asarray(decoded, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if decoded.shape != truth.shape or decoded.ndim != 1:
        raise ValidationError("State paths must be 1-D and of equal length")
    if decoded.size == 0:
        return 1.0

    size = int(max(decoded.max(), truth.max())) + 1
    overlap = np.zeros((size, size), dtype=np.int64)
    np.add.at(overlap, (decoded, truth), 1)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return float(overlap[rows, cols].sum()) / decoded.size


# ============================================================
# Sampling
# ============================================================


def sample(
    model: SourceModel, n_frames: int, quanta_per_frame: int, seed: int
) -> Tuple[CountSpectrogram, np.ndarray]:
    """
    Draw a spectrogram from the generative process.

    States follow (initial, transition); each frame draws its weights
    uniformly on the simplex, then distributes quanta_per_frame quanta over
    frequencies through the active dictionary.
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be at least 1")
    if quanta_per_frame < 1:
        raise ValidationError("quanta_per_frame must be at least 1")

    rng = np.random.default_rng(seed)
    n, k, l = model.dims
    transition = model.chain.transition

    path = np.empty(n_frames, dtype=np.int64)
    values = np.zeros((l, n_frames))
    state = rng.choice(n, p=model.chain.initial)
    for t in range(n_frames):
        if t > 0:
            state = rng.choice(n, p=transition[:, state])
        path[t] = state
        theta = rng.dirichlet(np.ones(k))
        profile = theta @ model.dictionaries[state]
        values[:, t] = rng.multinomial(int(quanta_per_frame), profile / profile.sum())

    return CountSpectrogram(values), path


# ============================================================
# Persistence
# ============================================================


def save_model(path: str, model: SourceModel):
    n, k, l = model.dims
    write_container(
        path,
        MODEL_MAGIC,
        [MODEL_VERSION, n, k, l],
        [model.dictionaries, model.chain.transition, model.chain.initial],
    )


def load_model(path: str) -> SourceModel:
    header, payload = read_container(path, MODEL_MAGIC)
    if len(header) != 4:
        raise AudioIOError(f"{path}: malformed model header")
    version, n, k, l = header
    if version != MODEL_VERSION:
        raise AudioIOError(f"{path}: unsupported model version {version}")
    beta, transition, initial = split_payload(path, payload, [(n, k, l), (n, n), (n,)])
    try:
        return SourceModel(
            dictionaries=beta, chain=ChainParams(transition=transition, initial=initial)
        )
    except ValidationError as e:
        raise AudioIOError(f"{path}: invalid model contents: {e}") from e


def export_model_text(path: str, model: SourceModel):
    """Human-readable dump, one dictionary element per line"""
    n, k, l = model.dims
    lines = [f"# nfsep model N={n} K={k} L={l}"]
    for d in range(n):
        for z in range(k):
            row = " ".join(f"{v:.17g}" for v in model.dictionaries[d, z])
            lines.append(f"element d={d} z={z}: {row}")
    for j in range(n):
        row = " ".join(f"{v:.17g}" for v in model.chain.transition[:, j])
        lines.append(f"transition from={j}: {row}")
    lines.append("initial: " + " ".join(f"{v:.17g}" for v in model.chain.initial))

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
