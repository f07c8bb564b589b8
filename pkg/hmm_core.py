#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Markov Chain Inference

Scaled forward-backward over one discrete chain driven by externally
supplied per-frame log-likelihoods. Shared by N-HMM training, the
variational engine (surrogate likelihoods) and the exact joint lattice.

Transition matrices are column-stochastic: transition[i, j] is the
probability of moving to state i from state j.
"""

from dataclasses import dataclass

import numpy as np

from nfsep_common import NumericalError, ValidationError

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ChainParams:
    """Transition matrix (destination in rows) and initial distribution"""

    transition: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=np.float64)
        initial = np.asarray(self.initial, dtype=np.float64)
        n = initial.size

        if initial.ndim != 1 or n < 1:
            raise ValidationError("Initial distribution must be a non-empty vector")
        if transition.shape != (n, n):
            raise ValidationError(
                f"Transition matrix shape {transition.shape} does not match {n} states"
            )
        if np.any(transition < 0) or np.any(initial < 0):
            raise ValidationError("Chain parameters must be non-negative")
        if np.any(np.abs(transition.sum(axis=0) - 1.0) > STOCHASTIC_TOL):
            raise ValidationError("Transition columns must sum to 1")
        if abs(initial.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValidationError("Initial distribution must sum to 1")

        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "initial", initial)

    @property
    def n_states(self) -> int:
        return self.initial.size

    @classmethod
    def uniform(cls, n_states: int) -> "ChainParams":
        return cls(
            transition=np.full((n_states, n_states), 1.0 / n_states),
            initial=np.full(n_states, 1.0 / n_states),
        )

    def kron(self, other: "ChainParams") -> "ChainParams":
        """Product chain; joint index = self_state * other.n_states + other_state"""
        return ChainParams(
            transition=np.kron(self.transition, other.transition),
            initial=np.kron(self.initial, other.initial),
        )


@dataclass(frozen=True, eq=False)
class ChainPosterior:
    """Smoothed marginals (T x N), adjacent pairs (T-1 x N x N), log evidence"""

    marginals: np.ndarray
    pairwise: np.ndarray
    log_evidence: float

    def transition_counts(self) -> np.ndarray:
        """Expected transitions, oriented like ChainParams (to, from)"""
        if self.pairwise.shape[0] == 0:
            n = self.marginals.shape[1]
            return np.zeros((n, n))
        return self.pairwise.sum(axis=0).T


def forward_backward(log_lik: np.ndarray, params: ChainParams) -> ChainPosterior:
    """
    Exact smoothing under the chain prior.

    Forward messages are normalised to sum to one at each frame and the log
    normalisers accumulated; likelihoods enter as exp(log_lik - row max).
    pairwise[t, i, j] = P(state_t = i, state_{t+1} = j | evidence).
    """
    log_lik = np.asarray(log_lik, dtype=np.float64)
    if log_lik.ndim != 2:
        raise ValidationError("log_lik must be a T x N matrix")
    n_frames, n_states = log_lik.shape
    if n_frames < 1:
        raise ValidationError("forward_backward needs at least one frame")
    if n_states != params.n_states:
        raise ValidationError(
            f"log_lik has {n_states} states, chain has {params.n_states}"
        )
    if np.any(np.isnan(log_lik)) or np.any(log_lik == np.inf):
        raise ValidationError("log_lik must be finite or -inf")

    shift = log_lik.max(axis=1)
    dead = np.flatnonzero(shift == -np.inf)
    if dead.size:
        raise NumericalError(
            f"Zero-probability evidence: every state has -inf log-likelihood at frame {dead[0]}"
        )
    lik = np.exp(log_lik - shift[:, None])

    A = params.transition
    alpha = np.empty((n_frames, n_states))
    scale = np.empty(n_frames)

    a = params.initial * lik[0]
    for t in range(n_frames):
        if t > 0:
            a = (A @ alpha[t - 1]) * lik[t]
        c = a.sum()
        if not c > 0:
            raise NumericalError(
                f"Zero-probability evidence under the chain prior at frame {t}"
            )
        alpha[t] = a / c
        scale[t] = c

    beta = np.empty((n_frames, n_states))
    beta[-1] = 1.0
    for t in range(n_frames - 2, -1, -1):
        beta[t] = A.T @ (lik[t + 1] * beta[t + 1]) / scale[t + 1]

    marginals = alpha * beta
    marginals /= marginals.sum(axis=1, keepdims=True)

    if n_frames > 1:
        # xi[t, i, j] = alpha_t(i) A[j, i] lik_{t+1}(j) beta_{t+1}(j) / c_{t+1}
        emit = lik[1:] * beta[1:] / scale[1:, None]
        pairwise = alpha[:-1, :, None] * A.T[None, :, :] * emit[:, None, :]
        pairwise /= pairwise.sum(axis=(1, 2), keepdims=True)
    else:
        pairwise = np.zeros((0, n_states, n_states))

    log_evidence = float(np.log(scale).sum() + shift.sum())
    return ChainPosterior(
        marginals=marginals, pairwise=pairwise, log_evidence=log_evidence
    )
