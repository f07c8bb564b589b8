#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Non-negative Factorial HMM

Combines S trained source models into one mixture model and resolves a
mixture spectrogram with either engine:

- vi_infer: structured mean-field inference. Each source keeps its own
  chain posterior; mixture weights get a Dirichlet posterior q(theta_t)
  with parameters alpha_hat; element responsibilities z_hat are per
  frequency bin. Per-source chains see surrogate log-likelihoods built from
  E[log theta].
- exact_infer: EM over the joint lattice of all N_1 * ... * N_S state
  combinations, with one weight vector per frame and joint state.

Global element order is source-major, then dictionary, then element.
"""

import math
import time
from dataclasses import dataclass, field
from functools import reduce
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import digamma as _digamma
from scipy.special import xlogy

from hmm_core import ChainParams, forward_backward
from nfsep_common import (
    AudioIOError,
    EmptySpectrogramError,
    LatticeLimitError,
    NumericalError,
    ValidationError,
    has_converged,
    log_warn,
    read_container,
    split_payload,
    write_container,
)
from nhmm import SourceModel
from plca import check_support
from signal_io import CountSpectrogram

POSTERIOR_MAGIC = b"NFSPOST1"
DEFAULT_GAMMA = 1.0
DEFAULT_MAX_JOINT_STATES = 4096

# Upper bound on floats held per E-step block of the exact engine
EXACT_BLOCK_CELLS = 1 << 22


# ============================================================
# Mixture Model
# ============================================================


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """
    S source models sharing L frequency bins.

    beta_all is L x K_total. mask[s] is an N_s x K_total 0/1 matrix with
    mask[s][n, k] = 1 iff global element k belongs to dictionary n of
    source s.
    """

    sources: List[SourceModel]
    gamma: float
    beta_all: np.ndarray
    mask: List[np.ndarray]
    element_source: np.ndarray
    offsets: np.ndarray

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_bins(self) -> int:
        return self.beta_all.shape[0]

    @property
    def n_elements(self) -> int:
        return self.beta_all.shape[1]

    @property
    def state_counts(self) -> List[int]:
        return [m.n_states for m in self.sources]

    def source_elements(self, source: int) -> np.ndarray:
        """Global indices of every element owned by the source"""
        self._check_source(source)
        return np.flatnonzero(self.element_source == source)

    def dictionary_elements(self, source: int, state: int) -> np.ndarray:
        """Global indices of the elements of one dictionary"""
        self._check_source(source)
        if not 0 <= state < self.sources[source].n_states:
            raise ValidationError(f"State {state} out of range for source {source}")
        k = self.sources[source].n_elements
        start = self.offsets[source] + state * k
        return np.arange(start, start + k)

    def _check_source(self, source: int):
        if not 0 <= source < self.n_sources:
            raise ValidationError(
                f"Unknown source index {source}; mixture has {self.n_sources} sources"
            )


def combine(sources: Sequence[SourceModel], gamma: float = DEFAULT_GAMMA) -> MixtureModel:
    sources = list(sources)
    if not sources:
        raise ValidationError("combine needs at least one source model")
    if not (gamma >= 0 and math.isfinite(gamma)):
        raise ValidationError(f"gamma must be finite and >= 0, got {gamma}")
    n_bins = {m.n_bins for m in sources}
    if len(n_bins) != 1:
        raise ValidationError(f"Source models disagree on frequency bins: {sorted(n_bins)}")

    sizes = [m.n_states * m.n_elements for m in sources]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    k_total = int(sum(sizes))

    beta_all = np.concatenate([m.flat_dictionary() for m in sources], axis=1)
    element_source = np.repeat(np.arange(len(sources)), sizes)

    mask = []
    for s, m in enumerate(sources):
        block = np.zeros((m.n_states, k_total))
        for n in range(m.n_states):
            start = offsets[s] + n * m.n_elements
            block[n, start : start + m.n_elements] = 1.0
        mask.append(block)

    return MixtureModel(
        sources=sources,
        gamma=float(gamma),
        beta_all=beta_all,
        mask=mask,
        element_source=element_source,
        offsets=offsets,
    )


def prior_alpha(mixture: MixtureModel, states: Sequence[int]) -> np.ndarray:
    """Dirichlet parameters of the weight prior given one state per source"""
    if len(states) != mixture.n_sources:
        raise ValidationError(
            f"Expected {mixture.n_sources} states, got {len(states)}"
        )
    alpha = np.ones(mixture.n_elements)
    for s, n in enumerate(states):
        if not 0 <= n < mixture.sources[s].n_states:
            raise ValidationError(f"State {n} out of range for source {s}")
        alpha += mixture.gamma * mixture.mask[s][n]
    return alpha


def _check_data(mixture: MixtureModel, data: CountSpectrogram):
    if data.n_bins != mixture.n_bins:
        raise ValidationError(
            f"Spectrogram has {data.n_bins} bins, models expect {mixture.n_bins}"
        )
    if data.is_empty():
        raise EmptySpectrogramError("empty spectrogram: nothing to separate")


# ============================================================
# Variational Inference
# ============================================================


def digamma(x):
    """Digamma on positive arguments"""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValidationError("digamma is only defined here for x > 0")
    result = _digamma(arr)
    return float(result) if np.ndim(x) == 0 else result


def expected_log_weights(alpha_hat: np.ndarray) -> np.ndarray:
    """E_q[log theta_t,k] = psi(alpha_hat) - psi(sum_k alpha_hat)"""
    return digamma(alpha_hat) - digamma(alpha_hat.sum(axis=1))[:, None]


def posterior_mean(alpha_hat: np.ndarray) -> np.ndarray:
    return alpha_hat / alpha_hat.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """
    Element responsibilities in factored form.

    z_hat[t, l, k] = beta_all[l, k] * scale[t, k] / norm[t, l]. Bins with no
    covering element have norm 0 and are reported uniform.
    """

    beta_all: np.ndarray
    scale: np.ndarray
    norm: np.ndarray

    def dense(self) -> np.ndarray:
        z = self.beta_all[None, :, :] * self.scale[:, None, :]
        norm = self.norm[:, :, None]
        uniform = 1.0 / self.beta_all.shape[1]
        return np.divide(z, norm, out=np.full_like(z, uniform), where=norm > 0)

    def weighted_counts(self, data: CountSpectrogram) -> np.ndarray:
        """sum_l V[l, t] z_hat[t, l, k] as a T x K_total matrix"""
        counts = data.values.T
        ratio = np.divide(
            counts, self.norm, out=np.zeros_like(counts), where=self.norm > 0
        )
        return self.scale * (ratio @ self.beta_all)


@dataclass
class VariationalState:
    alpha_hat: np.ndarray
    z_hat: Optional[Responsibilities] = None
    d_hat: List[np.ndarray] = field(default_factory=list)
    phi_hat: List[np.ndarray] = field(default_factory=list)
    monitor: List[float] = field(default_factory=list)
    iteration_seconds: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def element_weights(self) -> np.ndarray:
        return posterior_mean(self.alpha_hat)


@dataclass
class VIConfig:
    max_iters: int = 50
    rel_tol: float = 1e-4
    seed: Optional[int] = None
    jitter: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if not self.rel_tol >= 0:
            raise ValidationError("rel_tol must be non-negative")
        if self.jitter < 0:
            raise ValidationError("jitter must be non-negative")


def update_z(
    state: VariationalState,
    mixture: MixtureModel,
    data: Optional[CountSpectrogram] = None,
) -> Responsibilities:
    """
    Responsibilities from the current alpha_hat.

    log z = log beta + E[log theta] - log normaliser, with the per-frame
    maximum of E[log theta] subtracted before exponentiating. When data is
    given, quanta in uncovered bins raise ZeroSupportError.
    """
    alpha_hat = state.alpha_hat
    if alpha_hat.shape[1] != mixture.n_elements:
        raise ValidationError(
            f"alpha_hat has {alpha_hat.shape[1]} elements, mixture has {mixture.n_elements}"
        )
    if data is not None:
        check_support(mixture.beta_all, data)

    e_log = expected_log_weights(alpha_hat)
    scale = np.exp(e_log - e_log.max(axis=1, keepdims=True))
    norm = scale @ mixture.beta_all.T
    return Responsibilities(beta_all=mixture.beta_all, scale=scale, norm=norm)


def update_alpha(
    state: VariationalState, data: CountSpectrogram, mixture: MixtureModel
) -> np.ndarray:
    """alpha_hat = sum_l V z_hat + gamma * sum_s d_hat_s @ mask_s + 1"""
    if state.z_hat is None or len(state.d_hat) != mixture.n_sources:
        raise ValidationError("update_alpha needs z_hat and one d_hat per source")
    if data.n_bins != mixture.n_bins or state.z_hat.norm.shape != (data.n_frames, data.n_bins):
        raise ValidationError("Spectrogram does not match the responsibilities")

    prior = sum(d @ b for d, b in zip(state.d_hat, mixture.mask))
    return state.z_hat.weighted_counts(data) + mixture.gamma * prior + 1.0


def surrogate_likelihood(
    state: VariationalState, mixture: MixtureModel, source: int
) -> np.ndarray:
    """phi_hat[t, n] = sum over the elements of dictionary n of E[log theta_t,k]"""
    mixture._check_source(source)
    if state.alpha_hat.shape[1] != mixture.n_elements:
        raise ValidationError("alpha_hat does not match the mixture")
    return expected_log_weights(state.alpha_hat) @ mixture.mask[source].T


def reconstruction_cross_entropy(
    state: VariationalState, mixture: MixtureModel, data: CountSpectrogram
) -> float:
    """
    -sum V log P / sum V, P[l, t] = sum_k E[theta_t,k] beta[l, k].

    Infinite when quanta land where the reconstruction is zero.
    """
    return weights_cross_entropy(state.element_weights(), mixture.beta_all, data)


def weights_cross_entropy(
    weights: np.ndarray, beta_all: np.ndarray, data: CountSpectrogram
) -> float:
    total = data.total
    if total <= 0:
        raise EmptySpectrogramError("cross-entropy of an empty spectrogram")
    recon = weights @ beta_all.T
    counts = data.values.T
    if np.any((counts > 0) & (recon <= 0)):
        return math.inf
    return float(-xlogy(counts, recon).sum() / total)


def init_variational(
    mixture: MixtureModel, data: CountSpectrogram, config: VIConfig
) -> VariationalState:
    """Uniform d_hat, alpha_hat at the prior it implies, z_hat from that alpha_hat"""
    n_frames = data.n_frames
    d_hat = [np.full((n_frames, n), 1.0 / n) for n in mixture.state_counts]
    prior = sum(d @ b for d, b in zip(d_hat, mixture.mask))
    alpha_hat = 1.0 + mixture.gamma * prior
    if config.jitter > 0:
        rng = np.random.default_rng(config.seed)
        alpha_hat = alpha_hat + config.jitter * rng.random(alpha_hat.shape)

    state = VariationalState(alpha_hat=alpha_hat, d_hat=d_hat)
    state.z_hat = update_z(state, mixture, data)
    state.phi_hat = [
        surrogate_likelihood(state, mixture, s) for s in range(mixture.n_sources)
    ]
    return state


def vi_infer(
    mixture: MixtureModel,
    data: CountSpectrogram,
    config: Optional[VIConfig] = None,
) -> VariationalState:
    """Iterate z, alpha, surrogate likelihoods and per-source forward-backward"""
    config = config or VIConfig()
    _check_data(mixture, data)
    state = init_variational(mixture, data, config)

    for iteration in range(1, config.max_iters + 1):
        start = time.perf_counter()
        state.z_hat = update_z(state, mixture)
        state.alpha_hat = update_alpha(state, data, mixture)
        for s, source in enumerate(mixture.sources):
            state.phi_hat[s] = surrogate_likelihood(state, mixture, s)
            state.d_hat[s] = forward_backward(state.phi_hat[s], source.chain).marginals

        h = reconstruction_cross_entropy(state, mixture, data)
        if math.isnan(h):
            raise NumericalError("Variational monitor became NaN", iteration)
        state.monitor.append(h)
        state.iteration_seconds.append(time.perf_counter() - start)
        state.iterations = iteration
        if has_converged(state.monitor, config.rel_tol):
            state.converged = True
            break

    if not state.converged:
        log_warn(f"Variational inference stopped at max_iters={config.max_iters}")
    return state


# ============================================================
# Exact Inference
# ============================================================


@dataclass
class ExactConfig:
    max_iters: int = 50
    rel_tol: float = 1e-4
    max_joint_states: int = DEFAULT_MAX_JOINT_STATES

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if not self.rel_tol >= 0:
            raise ValidationError("rel_tol must be non-negative")
        if self.max_joint_states < 1:
            raise ValidationError("max_joint_states must be at least 1")


@dataclass
class ExactPosterior:
    """
    Joint-lattice posterior.

    weights[t, j, a] is the weight of element active[j, a] under joint state
    j; joint index j enumerates per-source states in C order (source 0
    slowest).
    """

    joint_marginals: np.ndarray
    weights: np.ndarray
    active: np.ndarray
    state_counts: List[int]
    n_elements: int
    log_likelihood: List[float] = field(default_factory=list)
    monitor: List[float] = field(default_factory=list)
    iteration_seconds: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def n_joint_states(self) -> int:
        return self.joint_marginals.shape[1]

    def source_marginals(self, source: int) -> np.ndarray:
        if not 0 <= source < len(self.state_counts):
            raise ValidationError(f"Unknown source index {source}")
        n_frames = self.joint_marginals.shape[0]
        grid = self.joint_marginals.reshape(n_frames, *self.state_counts)
        others = tuple(a + 1 for a in range(len(self.state_counts)) if a != source)
        return grid.sum(axis=others)

    def element_weights(self) -> np.ndarray:
        """Posterior-averaged weights scattered onto global elements (T x K_total)"""
        n_frames = self.joint_marginals.shape[0]
        contrib = self.joint_marginals[:, :, None] * self.weights
        out = np.zeros((n_frames, self.n_elements))
        np.add.at(out, (slice(None), self.active), contrib)
        return out


def joint_chain(mixture: MixtureModel) -> ChainParams:
    return reduce(lambda a, b: a.kron(b), [m.chain for m in mixture.sources])


def active_elements(mixture: MixtureModel) -> np.ndarray:
    """active[j] lists the global elements available under joint state j"""
    counts = mixture.state_counts
    rows = []
    for j in range(int(np.prod(counts))):
        states = np.unravel_index(j, counts)
        rows.append(
            np.concatenate(
                [mixture.dictionary_elements(s, int(n)) for s, n in enumerate(states)]
            )
        )
    return np.stack(rows)


def _exact_estep(
    beta_active: np.ndarray, theta: np.ndarray, counts: np.ndarray
):
    """
    Log-likelihoods and updated weights for a block of frames.

    beta_active is J x A x L, theta is J x T x A, counts is T x L.
    """
    mix = np.matmul(theta, beta_active)
    log_lik = xlogy(counts[None, :, :], mix).sum(axis=2)
    ratio = np.divide(
        counts[None, :, :],
        mix,
        out=np.zeros_like(mix),
        where=(counts[None, :, :] > 0) & (mix > 0),
    )
    updated = theta * np.matmul(ratio, beta_active.transpose(0, 2, 1))
    totals = updated.sum(axis=2, keepdims=True)
    updated = np.divide(updated, totals, out=theta.copy(), where=totals > 0)
    return log_lik, updated


def exact_infer(
    mixture: MixtureModel,
    data: CountSpectrogram,
    config: Optional[ExactConfig] = None,
) -> ExactPosterior:
    """EM over the joint state lattice, one weight pass per iteration"""
    config = config or ExactConfig()
    _check_data(mixture, data)

    n_joint = int(np.prod(mixture.state_counts))
    if n_joint > config.max_joint_states:
        raise LatticeLimitError(
            f"Joint lattice has {n_joint} states, limit is {config.max_joint_states}"
        )
    if n_joint > config.max_joint_states // 2:
        log_warn(f"Joint lattice of {n_joint} states is close to the configured limit")
    check_support(mixture.beta_all, data)

    chain = joint_chain(mixture)
    active = active_elements(mixture)
    beta_active = mixture.beta_all.T[active]
    n_active = active.shape[1]
    n_frames = data.n_frames
    counts = data.values.T
    block = max(1, EXACT_BLOCK_CELLS // (n_joint * max(mixture.n_bins, n_active)))

    theta = np.full((n_joint, n_frames, n_active), 1.0 / n_active)
    result = ExactPosterior(
        joint_marginals=np.full((n_frames, n_joint), 1.0 / n_joint),
        weights=theta.transpose(1, 0, 2),
        active=active,
        state_counts=list(mixture.state_counts),
        n_elements=mixture.n_elements,
    )

    for iteration in range(1, config.max_iters + 1):
        start = time.perf_counter()
        log_lik = np.empty((n_frames, n_joint))
        updated = np.empty_like(theta)
        for lo in range(0, n_frames, block):
            hi = min(n_frames, lo + block)
            ll, upd = _exact_estep(beta_active, theta[:, lo:hi], counts[lo:hi])
            log_lik[lo:hi] = ll.T
            updated[:, lo:hi] = upd

        posterior = forward_backward(log_lik, chain)
        if not math.isfinite(posterior.log_evidence):
            raise NumericalError("Exact inference log-likelihood is not finite", iteration)
        theta = updated

        result.joint_marginals = posterior.marginals
        result.weights = theta.transpose(1, 0, 2)
        result.log_likelihood.append(posterior.log_evidence)
        result.monitor.append(
            weights_cross_entropy(result.element_weights(), mixture.beta_all, data)
        )
        result.iteration_seconds.append(time.perf_counter() - start)
        result.iterations = iteration
        if has_converged(result.monitor, config.rel_tol):
            result.converged = True
            break

    if not result.converged:
        log_warn(f"Exact inference stopped at max_iters={config.max_iters}")
    return result


# ============================================================
# Posterior Dump
# ============================================================


def save_posterior(path: str, state: VariationalState):
    """Write alpha_hat and every source's d_hat"""
    n_frames, n_elements = state.alpha_hat.shape
    counts = [d.shape[1] for d in state.d_hat]
    write_container(
        path,
        POSTERIOR_MAGIC,
        [n_frames, n_elements, len(counts), *counts],
        [state.alpha_hat, *state.d_hat],
    )


def load_posterior(path: str) -> VariationalState:
    header, payload = read_container(path, POSTERIOR_MAGIC)
    if len(header) < 3 or len(header) != 3 + header[2]:
        raise AudioIOError(f"{path}: malformed posterior header")
    n_frames, n_elements, n_sources = header[:3]
    shapes = [(n_frames, n_elements)] + [(n_frames, n) for n in header[3:]]
    arrays = split_payload(path, payload, shapes)
    return VariationalState(alpha_hat=arrays[0], d_hat=arrays[1:])
