"""Long-term memory estimation via calibrated limited-memory comparisons.

The memory of a predictor at gap tau is the conditional mutual
information between its next-token prediction and the deep past, given
the most recent tau tokens.  Estimating it directly requires
marginalizing the predictor over deep pasts, which is exactly what is
statistically hard; instead, the predictor is first calibrated to a
limited-memory comparator (a one-parameter convex fit), after which

    I(prediction; deep past | recent tau)
        <=  CE(truth || comparator)  -  H(prediction | full past)

holds with both right-hand terms cheap to estimate.  On enumerable
instances the exact conditional mutual information is computed alongside
the bound for verification.

Because a single exponent is shared across the time steps being
measured, the tilt is applied only on those steps and every reported
quantity is averaged over the same steps; that keeps the zero-gradient
identity behind the bound aligned with what is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibrate import CalibrationResult, fit_per_step_tilt
from .exact import (
    P_MIN,
    EnumerationBudget,
    BudgetExceededError,
    conditional_mi_exact,
    default_budget,
    logsumexp,
)
from .models import (
    ConditionalModel,
    LimitedMemoryModel,
    context_codes,
    marginalize_to_window,
    model_from_dict,
    model_hash,
    model_to_dict,
    register_model_kind,
    row_entropies,
)


class MemoryTiltModel(ConditionalModel):
    """Full-context model tilted per step by a limited-memory comparator.

    On the active steps each conditional row is reweighted by
    comparator_row ** alpha and renormalized; other steps pass the full
    model through unchanged.  Comparator zeros are floored in log space
    so the tilt stays well defined for any alpha.
    """

    kind = "memory_tilt"

    def __init__(
        self,
        full: ConditionalModel,
        comparator: ConditionalModel,
        alpha: float,
        active_steps=None,
    ):
        super().__init__(full.spec)
        if comparator.spec != full.spec:
            raise ValueError("comparator must share the full model's sequence spec")
        self.full = full
        self.comparator = comparator
        self.alpha = float(alpha)
        self.active_steps = (
            None if active_steps is None else frozenset(int(t) for t in active_steps)
        )

    def _active(self, t: int) -> bool:
        return self.active_steps is None or t in self.active_steps

    def _row(self, context: np.ndarray) -> np.ndarray:
        full_row = np.asarray(self.full._row(context), dtype=float)
        if self.alpha == 0.0 or not self._active(len(context) + 1):
            return full_row
        comp_row = np.asarray(self.comparator._row(context), dtype=float)
        with np.errstate(divide="ignore"):
            logits = np.log(full_row) + self.alpha * np.log(np.maximum(comp_row, P_MIN))
        return np.exp(logits - logsumexp(logits))

    def next_dist_batch(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        full_rows = self.full.next_dist_batch(contexts)
        if self.alpha == 0.0 or not self._active(contexts.shape[1] + 1):
            return full_rows
        comp_rows = self.comparator.next_dist_batch(contexts)
        with np.errstate(divide="ignore"):
            logits = np.log(full_rows) + self.alpha * np.log(np.maximum(comp_rows, P_MIN))
        return np.exp(logits - logsumexp(logits, axis=1)[:, None])

    def params_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "base": model_to_dict(self.full),
            "comparator": model_to_dict(self.comparator),
            "steps": sorted(self.active_steps) if self.active_steps is not None else None,
        }


register_model_kind(
    "memory_tilt",
    lambda spec, params: MemoryTiltModel(
        model_from_dict(params["base"]),
        model_from_dict(params["comparator"]),
        params["alpha"],
        active_steps=params.get("steps"),
    ),
)


def fit_limited_memory(
    source,
    window: int,
    mode: str | None = None,
    spec=None,
    budget: EnumerationBudget | None = None,
    smoothing: float = 0.1,
    min_samples: int = 10,
) -> LimitedMemoryModel:
    """Learn a model conditioned only on the last `window` tokens.

    ``exact-marginal`` mode takes the true model and marginalizes deep
    pasts out exactly (enumeration, budget-guarded).  ``empirical-ngram``
    mode takes an (n, T) sample array and returns additive-smoothed
    window-gram tables; contexts never observed get (with positive
    smoothing) the uniform row.
    """
    if mode is None:
        mode = "exact-marginal" if isinstance(source, ConditionalModel) else "empirical-ngram"
    if mode == "exact-marginal":
        if not isinstance(source, ConditionalModel):
            raise ValueError("exact-marginal mode requires a model as source")
        return marginalize_to_window(source, window, budget)
    if mode != "empirical-ngram":
        raise ValueError(f"unknown mode {mode!r}")

    if spec is None:
        raise ValueError("spec is required for empirical-ngram mode")
    if smoothing < 0.0:
        raise ValueError("smoothing must be nonnegative")
    samples = np.asarray(source, dtype=np.int64)
    if samples.ndim != 2 or samples.shape[1] != spec.T:
        raise ValueError(f"samples must be an (n, {spec.T}) array")
    if samples.shape[0] < min_samples:
        raise ValueError(
            f"empirical-ngram mode needs at least {min_samples} samples, "
            f"got {samples.shape[0]}"
        )
    M, T = spec.M, spec.T
    eff = min(window, T - 1)
    counts = [np.zeros((M**ell, M)) for ell in range(eff + 1)]
    for t in range(1, T + 1):
        ell = min(eff, t - 1)
        codes = context_codes(samples[:, t - 1 - ell : t - 1], M)
        np.add.at(counts[ell], (codes, samples[:, t - 1]), 1.0)
    tables = []
    for table in counts:
        smoothed = table + smoothing
        mass = smoothed.sum(axis=1, keepdims=True)
        uniform = np.full_like(table, 1.0 / M)
        with np.errstate(invalid="ignore", divide="ignore"):
            rows = np.where(mass > 0.0, smoothed / np.where(mass > 0.0, mass, 1.0), uniform)
        tables.append(rows)
    return LimitedMemoryModel(spec, eff, tables)


def _default_steps(comparator: ConditionalModel, T: int):
    window = getattr(comparator, "window", None)
    if window is None or window + 1 > T:
        return tuple(range(1, T + 1))
    return tuple(range(window + 1, T + 1))


def calibrate_to_comparator(
    target,
    full: ConditionalModel,
    comparator: ConditionalModel,
    tolerance: float = 1e-10,
    budget: EnumerationBudget | None = None,
    steps=None,
    min_samples: int = 1000,
    provenance: dict | None = None,
) -> tuple[MemoryTiltModel, CalibrationResult]:
    """Calibrate `full` to the comparator's predictions on the given steps.

    Fits the shared exponent of full_row * comparator_row**alpha per
    step; at the optimum the tilted model is unimprovable within this
    family (zero gradient), which is the calibrated-model condition the
    memory bound requires.  `target` is the true model (exact mode) or
    an (n, T) sample array.

    Comparator zeros under positive full-model mass are floored in log
    space, which leaves alpha > 0 well defined; for alpha < 0 the
    objective blows up there and the convex fit simply stays in the
    finite region (the flooring is recorded in the result).
    """
    T = full.spec.T
    if steps is None:
        steps = _default_steps(comparator, T)
    floored = [False]

    def feature_fn(t, contexts):
        rows = comparator.next_dist_batch(contexts)
        if np.any(rows <= 0.0):
            floored[0] = True
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(rows, P_MIN))

    result = fit_per_step_tilt(
        target,
        full,
        feature_fn,
        active_steps=steps,
        tolerance=tolerance,
        budget=budget,
        min_samples=min_samples,
        f_descriptor={
            "kind": "log_comparator",
            "comparator_hash": model_hash(comparator),
        },
        provenance=provenance,
    )
    result.extras["feature_floored"] = floored[0]
    model = MemoryTiltModel(full, comparator, result.alpha_star, active_steps=steps)
    return model, result


@dataclass
class MemoryEstimate:
    """The memory bound at one gap, with everything needed to audit it."""

    tau: int
    ce_comparator: float
    cond_entropy: float
    bound: float
    alpha_star: float
    exact_mi: float | None
    t_policy: str
    steps: list
    per_step: dict
    mode: str
    valid: bool
    ce_stderr: float | None = None
    cond_entropy_stderr: float | None = None
    bound_stderr: float | None = None
    n_samples: int | None = None
    calibration: CalibrationResult | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "ce_comparator": self.ce_comparator,
            "cond_entropy": self.cond_entropy,
            "bound": self.bound,
            "alpha_star": self.alpha_star,
            "exact_mi": self.exact_mi,
            "t_policy": str(self.t_policy),
            "steps": list(self.steps),
            "per_step": {str(t): v for t, v in self.per_step.items()},
            "mode": self.mode,
            "valid": self.valid,
            "ce_stderr": self.ce_stderr,
            "cond_entropy_stderr": self.cond_entropy_stderr,
            "bound_stderr": self.bound_stderr,
            "n_samples": self.n_samples,
            "calibration": None if self.calibration is None else self.calibration.to_dict(),
            "provenance": self.provenance,
        }


def memory_table_csv(estimates, units: str = "nats") -> str:
    """CSV table of bounds across gaps (one estimate per row).

    Information-valued columns honor `units`; the tilt exponent is
    dimensionless and is never converted.
    """
    from .estimate import _unit_scale

    scale = _unit_scale(units)
    lines = ["tau,ce_comparator,bound,alpha_star,exact_mi,ce_stderr,bound_stderr"]
    for est in estimates:
        mi = "" if est.exact_mi is None else repr(float(est.exact_mi) * scale)
        ce_se = "" if est.ce_stderr is None else repr(float(est.ce_stderr) * scale)
        b_se = "" if est.bound_stderr is None else repr(float(est.bound_stderr) * scale)
        lines.append(
            f"{est.tau},{float(est.ce_comparator) * scale!r},{float(est.bound) * scale!r},"
            f"{float(est.alpha_star)!r},{mi},{ce_se},{b_se}"
        )
    return "\n".join(lines) + "\n"


def _prefix_level(model: ConditionalModel, t: int, budget: EnumerationBudget):
    """All length-(t-1) prefixes with their probabilities under `model`."""
    M = model.spec.M
    budget.check(M**t, "prefix enumeration")
    ctx = np.zeros((1, 0), dtype=np.int64)
    weights = np.ones(1)
    for step in range(1, t):
        rows = model.next_dist_batch(ctx)
        weights = (weights[:, None] * rows).reshape(-1)
        ctx = np.hstack(
            [
                np.repeat(ctx, M, axis=0),
                np.tile(np.arange(M, dtype=np.int64), ctx.shape[0])[:, None],
            ]
        )
    return ctx, weights


def prediction_joint(
    truth: ConditionalModel,
    predictor: ConditionalModel,
    tau: int,
    t: int,
    budget: EnumerationBudget | None = None,
) -> np.ndarray:
    """Joint (Z, Y, X) of the predictor's step-t token with the true past.

    Z is the predictor's next token at step t, Y the most recent
    min(tau, t-1) tokens, X the deep past before them; (X, Y) carries the
    truth's prefix distribution.  Feeding this to
    :func:`seqcal.exact.conditional_mi_exact` yields the exact memory at
    gap tau for this step.
    """
    if not 1 <= t <= truth.spec.T:
        raise ValueError(f"step t must lie in 1..{truth.spec.T}")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    b = budget if budget is not None else default_budget()
    M = truth.spec.M
    ctx, weights = _prefix_level(truth, t, b)
    rows = predictor.next_dist_batch(ctx)
    te = min(tau, t - 1)
    x_len = t - 1 - te
    joint = (weights[:, None] * rows).reshape(M**x_len, M**te, M)
    return joint.transpose(2, 1, 0)


def memory_bound(
    target,
    full: ConditionalModel,
    comparator: ConditionalModel,
    t_policy="average",
    tau: int | None = None,
    tolerance: float = 1e-10,
    budget: EnumerationBudget | None = None,
    attach_exact_mi: bool | None = None,
    min_samples: int = 1000,
    provenance: dict | None = None,
) -> MemoryEstimate:
    """Upper-bound the memory at gap tau of `full` using the comparator.

    Calibrates `full` to the comparator on the measured steps, then
    reports  bound = CE(truth || comparator) - H(calibrated next token |
    full past), each term averaged over the steps selected by
    `t_policy` ("average" pools t = tau+1..T; an integer selects a
    single step).  In exact mode the exact conditional mutual
    information is attached when the enumeration budget allows, and the
    bound dominates it by construction.  In sample mode both terms carry
    standard errors and a negative bound is reported as-is with the
    validity flag cleared rather than clamped.
    """
    T = full.spec.T
    if tau is None:
        tau = getattr(comparator, "window", None)
        if tau is None:
            raise ValueError("tau is required when the comparator has no window")
    tau = int(tau)
    if t_policy == "average":
        steps = tuple(range(min(tau + 1, T), T + 1))
    elif isinstance(t_policy, int) and not isinstance(t_policy, bool):
        if not 1 <= t_policy <= T:
            raise ValueError(f"t_policy step must lie in 1..{T}")
        steps = (t_policy,)
    else:
        raise ValueError(f"t_policy must be 'average' or a step index, got {t_policy!r}")

    exact_mode = isinstance(target, ConditionalModel)
    b = budget if budget is not None else default_budget()
    tilted, calibration = calibrate_to_comparator(
        target,
        full,
        comparator,
        tolerance=tolerance,
        budget=budget,
        steps=steps,
        min_samples=min_samples,
        provenance=provenance,
    )

    per_step: dict = {}
    if exact_mode:
        ce_vals, h_vals, mi_vals = [], [], []
        want_mi = attach_exact_mi is not False
        for t in steps:
            ctx, weights = _prefix_level(target, t, b)
            true_rows = target.next_dist_batch(ctx)
            comp_rows = comparator.next_dist_batch(ctx)
            with np.errstate(divide="ignore"):
                log_comp = np.log(comp_rows)
            joint_mass = weights[:, None] * true_rows
            if np.any((joint_mass > 0.0) & np.isneginf(log_comp)):
                ce_t = math.inf
            else:
                terms = np.where(joint_mass > 0.0, joint_mass * log_comp, 0.0)
                ce_t = -math.fsum(terms.ravel().tolist())
            h_t = math.fsum(
                (weights * row_entropies(tilted.next_dist_batch(ctx))).tolist()
            )
            mi_t = None
            if want_mi:
                try:
                    mi_t = conditional_mi_exact(prediction_joint(target, tilted, tau, t, b))
                except BudgetExceededError:
                    if attach_exact_mi is True:
                        raise
                    want_mi = False
                    mi_vals = []
            ce_vals.append(ce_t)
            h_vals.append(h_t)
            if mi_t is not None:
                mi_vals.append(mi_t)
            per_step[t] = {"ce": ce_t, "cond_entropy": h_t, "mi": mi_t}
        ce_term = float(np.mean(ce_vals))
        h_term = float(np.mean(h_vals))
        exact_mi = float(np.mean(mi_vals)) if len(mi_vals) == len(steps) else None
        bound = ce_term - h_term
        return MemoryEstimate(
            tau=tau,
            ce_comparator=ce_term,
            cond_entropy=h_term,
            bound=bound,
            alpha_star=calibration.alpha_star,
            exact_mi=exact_mi,
            t_policy=t_policy,
            steps=list(steps),
            per_step=per_step,
            mode="exact",
            valid=bound >= -1e-9,
            calibration=calibration,
            provenance=dict(provenance or {}),
        )

    samples = np.asarray(target, dtype=np.int64)
    n = samples.shape[0]
    idx = np.arange(n)
    ce_seq = np.zeros(n)
    h_seq = np.zeros(n)
    infinite = False
    for t in steps:
        ctx = samples[:, : t - 1]
        comp_rows = comparator.next_dist_batch(ctx)
        chosen = comp_rows[idx, samples[:, t - 1]]
        if np.any(chosen <= 0.0):
            infinite = True
            chosen = np.maximum(chosen, P_MIN)
        nll = -np.log(chosen)
        ent = row_entropies(tilted.next_dist_batch(ctx))
        ce_seq += nll
        h_seq += ent
        per_step[t] = {
            "ce": float(nll.mean()),
            "cond_entropy": float(ent.mean()),
            "mi": None,
        }
    ce_seq /= len(steps)
    h_seq /= len(steps)
    diff = ce_seq - h_seq
    ce_term = math.inf if infinite else float(ce_seq.mean())
    bound = math.inf if infinite else float(diff.mean())
    return MemoryEstimate(
        tau=tau,
        ce_comparator=ce_term,
        cond_entropy=float(h_seq.mean()),
        bound=bound,
        alpha_star=calibration.alpha_star,
        exact_mi=None,
        t_policy=t_policy,
        steps=list(steps),
        per_step=per_step,
        mode="mc",
        valid=(not infinite) and bound >= 0.0,
        ce_stderr=float(ce_seq.std(ddof=1) / math.sqrt(n)),
        cond_entropy_stderr=float(h_seq.std(ddof=1) / math.sqrt(n)),
        bound_stderr=float(diff.std(ddof=1) / math.sqrt(n)),
        n_samples=n,
        calibration=calibration,
        provenance=dict(provenance or {}),
    )
