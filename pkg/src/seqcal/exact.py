"""Exact information-theoretic quantities by brute-force enumeration.

Everything here enumerates all ``M**T`` sequences (or all prefixes at a
step) and is therefore only usable on small instances, guarded by an
:class:`EnumerationBudget`.  These routines are the ground truth that
the Monte-Carlo estimators and all fitted quantities are tested against.

Conventions: natural log everywhere (nats); an infinite cross entropy or
divergence is returned as ``math.inf`` (never produced via floating
overflow); reductions over enumerated terms use compensated summation so
results do not depend on partitioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterator

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .models import ConditionalModel

# Probability floor used only when a logarithm of an exactly-zero entry
# must be finite (tilt features, comparator scoring).  Sampling and plain
# sequence scoring never floor.
P_MIN = 1e-300


class BudgetExceededError(RuntimeError):
    """An enumeration would exceed the configured state budget."""


@dataclass(frozen=True)
class EnumerationBudget:
    """Hard cap on the number of enumerated states.

    Operations that would exceed it fail fast instead of silently
    approximating; callers must fall back to the Monte-Carlo estimators.
    """

    max_states: int = 10**6

    def __post_init__(self):
        if self.max_states < 1:
            raise ValueError("max_states must be positive")

    def check(self, states: int, what: str) -> None:
        if states > self.max_states:
            raise BudgetExceededError(
                f"{what} needs {states} states, exceeding the budget of "
                f"{self.max_states}"
            )


DEFAULT_BUDGET = EnumerationBudget()


def default_budget() -> EnumerationBudget:
    return DEFAULT_BUDGET


def _fsum(values) -> float:
    """Compensated (exact) sum; order-independent up to reordering ties."""
    arr = np.asarray(values, dtype=float)
    return math.fsum(arr.ravel().tolist())


def logsumexp(a: np.ndarray, axis: int | None = None):
    """log(sum(exp(a))), max-shifted; handles -inf blocks cleanly."""
    a = np.asarray(a, dtype=float)
    if axis is None:
        m = float(np.max(a)) if a.size else -math.inf
        if not math.isfinite(m):
            return m
        with np.errstate(divide="ignore"):
            return float(np.log(np.sum(np.exp(a - m))) + m)
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis)) + np.squeeze(shift, axis=axis)
    return out


def enumerate_sequences(M: int, T: int, budget: EnumerationBudget | None = None) -> np.ndarray:
    """All length-T sequences in lexicographic order, shape (M**T, T)."""
    b = budget or DEFAULT_BUDGET
    b.check(M**T, "sequence enumeration")
    codes = np.arange(M**T, dtype=np.int64)
    powers = M ** np.arange(T - 1, -1, -1, dtype=np.int64)
    return (codes[:, None] // powers) % M


def sequence_log_probs(model: "ConditionalModel", budget: EnumerationBudget | None = None) -> np.ndarray:
    """log P(w) for every sequence, lexicographic order, shape (M**T,).

    Entries are -inf exactly where the model assigns zero probability.
    """
    M, T = model.spec.M, model.spec.T
    b = budget or DEFAULT_BUDGET
    b.check(M**T, "sequence enumeration")
    lp = np.zeros(1)
    ctx = np.zeros((1, 0), dtype=np.int64)
    for t in range(1, T + 1):
        rows = model.next_dist_batch(ctx)
        with np.errstate(divide="ignore"):
            lp = (lp[:, None] + np.log(rows)).reshape(-1)
        if t < T:
            ctx = np.hstack(
                [
                    np.repeat(ctx, M, axis=0),
                    np.tile(np.arange(M, dtype=np.int64), ctx.shape[0])[:, None],
                ]
            )
    return lp


def prefix_expansion(
    model: "ConditionalModel", budget: EnumerationBudget | None = None
) -> Iterator[tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (t, contexts, prefix_probs, next_rows) for t = 1..T.

    ``contexts`` holds every length-(t-1) prefix (lexicographic),
    ``prefix_probs`` their probabilities under `model`, and ``next_rows``
    the conditional rows at those contexts.
    """
    M, T = model.spec.M, model.spec.T
    b = budget or DEFAULT_BUDGET
    b.check(M**T, "prefix enumeration")
    ctx = np.zeros((1, 0), dtype=np.int64)
    weights = np.ones(1)
    for t in range(1, T + 1):
        rows = model.next_dist_batch(ctx)
        yield t, ctx, weights, rows
        if t < T:
            weights = (weights[:, None] * rows).reshape(-1)
            ctx = np.hstack(
                [
                    np.repeat(ctx, M, axis=0),
                    np.tile(np.arange(M, dtype=np.int64), ctx.shape[0])[:, None],
                ]
            )


class FunctionalF:
    """A scalar function on length-T sequences used as a tilt feature.

    Kinds:
      * ``log_prob`` / ``neg_log_prob`` -- (+/-) log probability under a
        model, floored at ``p_min`` so values stay finite;
      * ``table`` -- explicit values indexed by lexicographic sequence code;
      * ``callable`` -- arbitrary Python function of a token tuple.

    When a bound is declared, every evaluation checks |f(w)| <= bound.
    """

    def __init__(self, kind, *, model=None, table=None, fn=None, bound=None, p_min=P_MIN):
        if kind not in ("log_prob", "neg_log_prob", "table", "callable"):
            raise ValueError(f"unknown functional kind {kind!r}")
        self.kind = kind
        self.model = model
        self.table = None if table is None else np.asarray(table, dtype=float)
        self.fn = fn
        self.bound = None if bound is None else float(bound)
        self.p_min = float(p_min)

    @classmethod
    def log_prob(cls, model, bound=None, p_min=P_MIN) -> "FunctionalF":
        return cls("log_prob", model=model, bound=bound, p_min=p_min)

    @classmethod
    def neg_log_prob(cls, model, bound=None, p_min=P_MIN) -> "FunctionalF":
        return cls("neg_log_prob", model=model, bound=bound, p_min=p_min)

    @classmethod
    def from_table(cls, values, spec, bound=None) -> "FunctionalF":
        values = np.asarray(values, dtype=float)
        if values.shape != (spec.M**spec.T,):
            raise ValueError(
                f"table must have one value per sequence ({spec.M**spec.T}), "
                f"got shape {values.shape}"
            )
        f = cls("table", table=values, bound=bound)
        f.spec = spec
        return f

    @classmethod
    def from_callable(cls, fn: Callable, bound=None) -> "FunctionalF":
        return cls("callable", fn=fn, bound=bound)

    def values(self, seqs: np.ndarray) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.int64)
        if self.kind in ("log_prob", "neg_log_prob"):
            lp = self.model.seq_log_prob_batch(seqs)
            lp = np.maximum(lp, math.log(self.p_min))
            out = lp if self.kind == "log_prob" else -lp
        elif self.kind == "table":
            powers = self.spec.M ** np.arange(self.spec.T - 1, -1, -1, dtype=np.int64)
            out = self.table[seqs @ powers]
        else:
            out = np.array([self.fn(tuple(int(x) for x in row)) for row in seqs], dtype=float)
        if self.bound is not None and out.size:
            worst = float(np.max(np.abs(out)))
            if worst > self.bound + 1e-12:
                raise ValueError(
                    f"functional exceeded its declared bound: |f| reached {worst} "
                    f"> {self.bound}"
                )
        return out

    def descriptor(self) -> dict:
        from .models import model_hash  # deferred: avoids a module cycle

        desc = {"kind": self.kind, "bound": self.bound}
        if self.model is not None:
            desc["model_hash"] = model_hash(self.model)
            desc["p_min"] = self.p_min
        if self.table is not None:
            desc["table_size"] = int(self.table.size)
        return desc


# ---------------------------------------------------------------------------
# Exact quantities.
# ---------------------------------------------------------------------------


def entropy_exact(model: "ConditionalModel", budget: EnumerationBudget | None = None) -> float:
    """H(model) in nats, total over the sequence: sum_w P(w) log 1/P(w)."""
    lp = sequence_log_probs(model, budget)
    p = np.exp(lp)
    mask = p > 0.0
    return -_fsum(p[mask] * lp[mask])


def entropy_rate_exact(model: "ConditionalModel", budget: EnumerationBudget | None = None) -> float:
    """Per-token entropy H(model)/T in nats."""
    return entropy_exact(model, budget) / model.spec.T


def cross_entropy_exact(
    p: "ConditionalModel", q: "ConditionalModel", budget: EnumerationBudget | None = None
) -> float:
    """CE(p||q) = (1/T) E_{w~p}[log 1/q(w)] in nats per token.

    Returns ``math.inf`` when q assigns zero probability to any sequence
    p gives positive mass.
    """
    if p.spec != q.spec:
        raise ValueError("models must share the same sequence spec")
    lpp = sequence_log_probs(p, budget)
    lpq = sequence_log_probs(q, budget)
    pw = np.exp(lpp)
    mask = pw > 0.0
    if np.any(np.isneginf(lpq[mask])):
        return math.inf
    return -_fsum(pw[mask] * lpq[mask]) / p.spec.T


def kl_exact(
    p: "ConditionalModel", q: "ConditionalModel", budget: EnumerationBudget | None = None
) -> float:
    """KL(p||q) in nats, total over the sequence (not per token)."""
    if p.spec != q.spec:
        raise ValueError("models must share the same sequence spec")
    lpp = sequence_log_probs(p, budget)
    lpq = sequence_log_probs(q, budget)
    pw = np.exp(lpp)
    mask = pw > 0.0
    if np.any(np.isneginf(lpq[mask])):
        return math.inf
    return _fsum(pw[mask] * (lpp[mask] - lpq[mask]))


def mean_var_exact(
    dist: "ConditionalModel", f: FunctionalF, budget: EnumerationBudget | None = None
) -> tuple[float, float]:
    """Exact mean and variance of f under `dist`."""
    seqs = enumerate_sequences(dist.spec.M, dist.spec.T, budget)
    pw = np.exp(sequence_log_probs(dist, budget))
    fv = f.values(seqs)
    mu = _fsum(pw * fv)
    var = _fsum(pw * (fv - mu) ** 2)
    return mu, var


def log_partition_exact(
    base: "ConditionalModel",
    f: FunctionalF,
    alpha: float,
    budget: EnumerationBudget | None = None,
) -> float:
    """log Z_alpha = log sum_w exp(alpha f(w)) P(w), max-shifted for stability.

    Its derivatives in alpha are the tilted mean and variance of f.
    """
    seqs = enumerate_sequences(base.spec.M, base.spec.T, budget)
    lp = sequence_log_probs(base, budget)
    fv = f.values(seqs)
    return float(logsumexp(alpha * fv + lp))


def conditional_mi_exact(joint: np.ndarray) -> float:
    """I(Z; X | Y) in nats from an explicit joint indexed (Z, Y, X).

    Computed as H(Z|Y) - H(Z|Y,X) with each term by direct
    marginalization.  The joint must be a normalized distribution.
    """
    joint = np.asarray(joint, dtype=float)
    if joint.ndim != 3:
        raise ValueError("joint must be a 3-d array indexed (Z, Y, X)")
    if np.any(joint < 0.0):
        raise ValueError("joint must be nonnegative")
    total = _fsum(joint)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"joint must sum to 1, got {total}")

    pzy = joint.sum(axis=2)
    py = pzy.sum(axis=0)
    pyx = joint.sum(axis=0)

    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(pzy > 0.0, pzy * (np.log(pzy) - np.log(py[None, :])), 0.0)
        t2 = np.where(
            joint > 0.0, joint * (np.log(joint) - np.log(pyx[None, :, :])), 0.0
        )
    h_z_given_y = -_fsum(t1)
    h_z_given_yx = -_fsum(t2)
    return h_z_given_y - h_z_given_yx
