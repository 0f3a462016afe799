"""Shared instance builders and independent brute-force oracles.

The oracle helpers here deliberately avoid the package's enumeration
code paths: probabilities are multiplied out with plain Python loops
from raw tables or via single next_dist calls, so they can serve as an
independent cross-check of everything in seqcal.exact.
"""

import itertools
import math

import numpy as np
import pytest

from seqcal import MarkovModel, make_spec, stationary_distribution


def all_seqs(M, T):
    return list(itertools.product(range(M), repeat=T))


def model_probs(model):
    """{sequence tuple: probability} using only next_dist and Python math."""
    M, T = model.spec.M, model.spec.T
    out = {}
    for w in all_seqs(M, T):
        p = 1.0
        for t in range(T):
            p *= float(model.next_dist(w[:t])[w[t]])
        out[w] = p
    return out


def entropy_oracle(probs):
    return -math.fsum(p * math.log(p) for p in probs.values() if p > 0.0)


def cross_entropy_oracle(p_probs, q_probs, T):
    total = 0.0
    for w, p in p_probs.items():
        if p > 0.0:
            q = q_probs[w]
            if q == 0.0:
                return math.inf
            total += p * math.log(1.0 / q)
    return total / T


def kl_oracle(p_probs, q_probs):
    total = 0.0
    for w, p in p_probs.items():
        if p > 0.0:
            q = q_probs[w]
            if q == 0.0:
                return math.inf
            total += p * math.log(p / q)
    return total


def random_markov(rng, M, T, order, concentration=1.0):
    return MarkovModel.random(make_spec(M, T), order, rng, concentration=concentration)


def random_pair(rng, M=None, T=None, order=None, scale=0.25, concentration=1.2):
    """A random truth and a perturbed model of it, sharing support."""
    M = int(rng.integers(2, 5)) if M is None else M
    T = int(rng.integers(2, 7)) if T is None else T
    order = int(rng.integers(0, min(2, T - 1) + 1)) if order is None else order
    truth = random_markov(rng, M, T, order, concentration)
    return truth, truth.perturbed(rng, scale)


def stationary_sharp_truth(spec, rng, peak_lo=0.75, peak_hi=0.95):
    """Order-1 chain with uniformly sharp rows, started stationary."""
    M = spec.M
    transition = np.empty((M, M))
    for j in range(M):
        peak = rng.uniform(peak_lo, peak_hi)
        row = np.full(M, (1.0 - peak) / (M - 1))
        row[int(rng.integers(M))] = peak
        transition[j] = row
    pi = stationary_distribution(transition)
    return MarkovModel(spec, 1, [pi[None, :], transition])


def one_hot_model(spec, token=0):
    """All probability mass on a single token at every step."""
    M = spec.M
    row = np.zeros(M)
    row[token] = 1.0
    return MarkovModel(spec, 0, [row[None, :]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
