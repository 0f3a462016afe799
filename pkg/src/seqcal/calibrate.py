"""One-parameter exponential-tilt calibration.

Two tilt families around a base model B:

* sequence-level (global):   B_a(w)        prop. exp(a f(w)) B(w)
* per-step (local):          B_a(w_t|w_<t) prop. B(w_t|w_<t) exp(a F_t(w_<=t))

Fitting minimizes CE(target || B_a) over the scalar a.  The objective is
convex: its derivative is the feature-mean mismatch between the tilted
model and the target, and its second derivative is the tilted feature
variance divided by T.  The optimizer is a safeguarded Newton on these
exact derivatives, with bisection fallback inside a bracket grown
geometrically from [-1, 1].  At the optimum the tilted model matches the
target's feature mean, which is the calibration property everything else
builds on.

The entropy-rate calibration specializes the global tilt to
f = log of the uniform-mixture-floored base, so the tilted family is the
floored base raised to the power (1 + a), renormalized.  The local
variant tilts each conditional by the one-step-lookahead entropy of the
base after appending the candidate token; the lookahead feature is 0 at
the final step, where no next step exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exact import (
    EnumerationBudget,
    FunctionalF,
    enumerate_sequences,
    logsumexp,
    prefix_expansion,
    sequence_log_probs,
)
from .models import (
    ConditionalModel,
    MarkovModel,
    MixtureModel,
    context_codes,
    model_from_dict,
    model_to_dict,
    register_model_kind,
    row_entropies,
)


class CalibrationDivergenceError(RuntimeError):
    """The calibration objective has no finite minimizer."""


@dataclass
class CalibrationResult:
    """Outcome of a one-parameter calibration fit.

    ``mu_target`` / ``mu_tilted`` are the matched feature means: the raw
    sequence-functional mean for the global tilt, the per-step average
    (1/T sum over steps) for per-step tilts.  ``trace`` records every
    (alpha, gradient) probe of the optimizer.
    """

    alpha_star: float
    objective: float
    baseline_objective: float
    gradient: float
    curvature: float
    mu_target: float
    mu_tilted: float
    mode: str
    tolerance: float
    n_iterations: int
    trace: list
    f_descriptor: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def improvement(self) -> float:
        return self.baseline_objective - self.objective

    def to_dict(self) -> dict:
        return {
            "alpha_star": self.alpha_star,
            "objective": self.objective,
            "baseline_objective": self.baseline_objective,
            "gradient": self.gradient,
            "curvature": self.curvature,
            "mu_target": self.mu_target,
            "mu_tilted": self.mu_tilted,
            "mode": self.mode,
            "tolerance": self.tolerance,
            "n_iterations": self.n_iterations,
            "trace": [[float(a), float(g)] for a, g in self.trace],
            "f_descriptor": self.f_descriptor,
            "extras": self.extras,
            "provenance": self.provenance,
        }


def _minimize_convex(evaluate, stop, bracket=(-1.0, 1.0), max_expansions=60, max_iter=300):
    """Safeguarded Newton for a convex 1-d objective given by its derivatives.

    `evaluate(x)` returns a dict with at least ``g`` (gradient) and ``c``
    (curvature >= 0); `stop(info)` decides convergence.  Newton steps are
    constrained to a sign-changing bracket grown geometrically from the
    initial one; out-of-bracket or degenerate steps fall back to
    bisection.
    """
    trace = []

    def probe(x):
        info = dict(evaluate(float(x)))
        info["alpha"] = float(x)
        trace.append(info)
        return info

    info0 = probe(0.0)
    if stop(info0):
        return 0.0, info0, trace

    lo, hi = float(bracket[0]), float(bracket[1])
    ilo = probe(lo)
    if stop(ilo):
        return lo, ilo, trace
    ihi = probe(hi)
    if stop(ihi):
        return hi, ihi, trace

    # Grow until the gradient changes sign across [lo, hi]; the gradient
    # of a convex objective is nondecreasing, so a one-signed gradient at
    # ever larger |alpha| means the objective decreases without bound.
    for _ in range(max_expansions):
        if ilo["g"] <= 0.0:
            break
        lo *= 2.0
        ilo = probe(lo)
        if stop(ilo):
            return lo, ilo, trace
    else:
        raise CalibrationDivergenceError(
            "objective keeps decreasing toward alpha = -inf; no finite minimizer"
        )
    for _ in range(max_expansions):
        if ihi["g"] >= 0.0:
            break
        hi *= 2.0
        ihi = probe(hi)
        if stop(ihi):
            return hi, ihi, trace
    else:
        raise CalibrationDivergenceError(
            "objective keeps decreasing toward alpha = +inf; no finite minimizer"
        )

    if abs(info0["g"]) <= min(abs(ilo["g"]), abs(ihi["g"])) and lo < 0.0 < hi:
        x, info = 0.0, info0
    elif abs(ilo["g"]) < abs(ihi["g"]):
        x, info = lo, ilo
    else:
        x, info = hi, ihi

    for _ in range(max_iter):
        if stop(info):
            return x, info, trace
        if info["g"] < 0.0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        cand = None
        if info["c"] > 0.0:
            step = x - info["g"] / info["c"]
            if math.isfinite(step) and lo < step < hi:
                cand = step
        if cand is None:
            cand = 0.5 * (lo + hi)
        x = cand
        info = probe(x)
        if hi - lo <= 1e-15 * max(1.0, abs(lo), abs(hi)):
            return x, info, trace
    raise RuntimeError("calibration optimizer did not converge")


# ---------------------------------------------------------------------------
# Tilted models.
# ---------------------------------------------------------------------------


class GlobalTiltModel(ConditionalModel):
    """Sequence-level tilt: P_a(w) = exp(a f(w)) B(w) / Z_a.

    The tilt does not factor across steps, so construction enumerates
    the full sequence distribution (budget-guarded) and precomputes a
    pyramid of prefix marginals; conditionals are then exact ratios of
    adjacent pyramid levels.  Contexts with zero probability under the
    tilt get a uniform row; they are unreachable.
    """

    kind = "global_tilt"

    def __init__(
        self,
        base: ConditionalModel,
        f: FunctionalF,
        alpha: float,
        budget: EnumerationBudget | None = None,
    ):
        super().__init__(base.spec)
        self.base = base
        self.f = f
        self.alpha = float(alpha)
        M, T = self.spec.M, self.spec.T
        seqs = enumerate_sequences(M, T, budget)
        lp = sequence_log_probs(base, budget)
        fv = f.values(seqs)
        weights = self.alpha * fv + lp
        self._log_partition = float(logsumexp(weights))
        levels = [None] * (T + 1)
        levels[T] = weights - self._log_partition
        for t in range(T - 1, -1, -1):
            levels[t] = logsumexp(levels[t + 1].reshape(-1, M), axis=1)
        self._levels = levels

    @property
    def log_partition(self) -> float:
        return self._log_partition

    def _row(self, context: np.ndarray) -> np.ndarray:
        M = self.spec.M
        L = len(context)
        code = int(context_codes(np.asarray(context)[None, :], M)[0])
        parent = self._levels[L][code] if L > 0 else self._levels[0][0]
        children = self._levels[L + 1][code * M : (code + 1) * M]
        if not np.isfinite(parent):
            return np.full(M, 1.0 / M)
        return np.exp(children - parent)

    def next_dist_batch(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        M = self.spec.M
        L = contexts.shape[1]
        codes = context_codes(contexts, M)
        parents = self._levels[L][codes]
        children = self._levels[L + 1].reshape(-1, M)[codes]
        safe = np.isfinite(parents)
        out = np.full((contexts.shape[0], M), 1.0 / M)
        out[safe] = np.exp(children[safe] - parents[safe, None])
        return out

    def seq_log_prob(self, seq) -> float:
        s = self._check_sequence(seq)
        code = int(context_codes(s[None, :], self.spec.M)[0])
        return float(self._levels[self.spec.T][code])

    def seq_log_prob_batch(self, seqs: np.ndarray) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.int64)
        codes = context_codes(seqs, self.spec.M)
        return self._levels[self.spec.T][codes]

    def params_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "f": _functional_to_doc(self.f),
            "base": model_to_dict(self.base),
        }


def lookahead_entropy_vector(base: ConditionalModel, context) -> np.ndarray:
    """Entropy of the base's next conditional after appending each token.

    Entry j is H(B(. | context + [j])) in nats; at the final step (where
    no next conditional exists) every entry is 0.
    """
    ctx = base._check_context(context)
    M, T = base.spec.M, base.spec.T
    if ctx.size + 1 == T:
        return np.zeros(M)
    ext = np.hstack(
        [np.repeat(ctx[None, :], M, axis=0), np.arange(M, dtype=np.int64)[:, None]]
    )
    return row_entropies(base.next_dist_batch(ext))


class LocalTiltModel(ConditionalModel):
    """Per-step lookahead-entropy tilt.

    Each conditional row of the base is reweighted by
    exp(a * H(next step | context + candidate)) and renormalized over
    the M candidates; the final step is untilted (feature 0).  Positive
    a favors candidates whose continuation has high entropy, negative a
    suppresses them.
    """

    kind = "local_tilt"

    def __init__(self, base: ConditionalModel, alpha: float):
        super().__init__(base.spec)
        self.base = base
        self.alpha = float(alpha)
        # Lookahead vectors for a Markov base depend only on a short
        # context tail; memoize them.
        self._memo: dict | None = {} if isinstance(base, MarkovModel) else None

    def _feature(self, context: np.ndarray) -> np.ndarray:
        T = self.spec.T
        if len(context) + 1 == T:
            return np.zeros(self.spec.M)
        if self._memo is None:
            return lookahead_entropy_vector(self.base, context)
        k = self.base.order
        L = len(context)
        if L + 1 <= k:
            key = (L, tuple(int(x) for x in context))
        else:
            tail = context[L - (k - 1) :] if k >= 1 else context[:0]
            key = (-1, tuple(int(x) for x in tail))
        hit = self._memo.get(key)
        if hit is None:
            hit = lookahead_entropy_vector(self.base, context)
            self._memo[key] = hit
        return hit

    def _row(self, context: np.ndarray) -> np.ndarray:
        base_row = np.asarray(self.base._row(context), dtype=float)
        if self.alpha == 0.0 or len(context) + 1 == self.spec.T:
            return base_row
        h = self._feature(context)
        with np.errstate(divide="ignore"):
            logits = np.log(base_row) + self.alpha * h
        return np.exp(logits - logsumexp(logits))

    def next_dist_batch(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        base_rows = self.base.next_dist_batch(contexts)
        n, L = contexts.shape
        if self.alpha == 0.0 or L + 1 == self.spec.T:
            return base_rows
        M = self.spec.M
        h = np.empty((n, M))
        for j in range(M):
            ext = np.hstack([contexts, np.full((n, 1), j, dtype=np.int64)])
            h[:, j] = row_entropies(self.base.next_dist_batch(ext))
        with np.errstate(divide="ignore"):
            logits = np.log(base_rows) + self.alpha * h
        return np.exp(logits - logsumexp(logits, axis=1)[:, None])

    def params_dict(self) -> dict:
        return {"alpha": self.alpha, "base": model_to_dict(self.base)}


# ---------------------------------------------------------------------------
# Fitting.
# ---------------------------------------------------------------------------


def fit_alpha_global(
    true_model: ConditionalModel,
    base: ConditionalModel,
    f: FunctionalF,
    tolerance: float = 1e-10,
    budget: EnumerationBudget | None = None,
    provenance: dict | None = None,
) -> CalibrationResult:
    """Fit the sequence-level tilt exponent minimizing CE(truth || B_a).

    Exact mode: the objective, gradient (feature-mean mismatch / T) and
    curvature (tilted variance / T) are computed by enumeration.  At the
    returned optimum the tilted feature mean matches the truth's within
    T * tolerance.
    """
    if true_model.spec != base.spec:
        raise ValueError("models must share the same sequence spec")
    M, T = base.spec.M, base.spec.T
    seqs = enumerate_sequences(M, T, budget)
    lp_base = sequence_log_probs(base, budget)
    fv = f.values(seqs)
    pw_true = np.exp(sequence_log_probs(true_model, budget))
    mask = pw_true > 0.0
    if np.any(np.isneginf(lp_base[mask])):
        raise CalibrationDivergenceError(
            "base assigns zero probability on the truth's support; the "
            "objective is infinite for every alpha"
        )
    mu_true = float(np.dot(pw_true, np.where(mask, fv, 0.0)))
    ce_base_term = -float(np.dot(pw_true[mask], lp_base[mask]))

    def evaluate(alpha: float) -> dict:
        weights = alpha * fv + lp_base
        log_z = float(logsumexp(weights))
        pt = np.exp(weights - log_z)
        mu = float(np.dot(pt, fv))
        var = float(np.dot(pt, (fv - mu) ** 2))
        obj = (ce_base_term - alpha * mu_true + log_z) / T
        return {"g": (mu - mu_true) / T, "c": var / T, "obj": obj, "mu": mu, "var": var}

    alpha_star, info, trace = _minimize_convex(
        evaluate, lambda i: abs(i["g"]) <= tolerance
    )
    baseline = next(i["obj"] for i in trace if i["alpha"] == 0.0)
    mu_base = next(i["mu"] for i in trace if i["alpha"] == 0.0)
    prov = dict(provenance or {})
    prov.setdefault("base_model_hash", _try_model_hash(base))
    return CalibrationResult(
        alpha_star=alpha_star,
        objective=info["obj"],
        baseline_objective=baseline,
        gradient=info["g"],
        curvature=info["c"],
        mu_target=mu_true,
        mu_tilted=info["mu"],
        mode="exact",
        tolerance=tolerance,
        n_iterations=len(trace),
        trace=[(i["alpha"], i["g"]) for i in trace],
        f_descriptor=f.descriptor(),
        extras={
            "mu_base": mu_base,
            "sigma2_tilted_at_opt": info["var"],
            "sigma2_path_max": max(i["var"] for i in trace),
        },
        provenance=prov,
    )


def _try_model_hash(model):
    from .models import model_hash

    try:
        return model_hash(model)
    except (NotImplementedError, ValueError):
        return None


def tilted_variance_max(
    base: ConditionalModel,
    f: FunctionalF,
    alphas,
    budget: EnumerationBudget | None = None,
) -> float:
    """max over the given alphas of Var_{B_a}(f), by enumeration."""
    seqs = enumerate_sequences(base.spec.M, base.spec.T, budget)
    lp = sequence_log_probs(base, budget)
    fv = f.values(seqs)
    worst = 0.0
    for alpha in np.asarray(alphas, dtype=float):
        w = alpha * fv + lp
        pt = np.exp(w - logsumexp(w))
        mu = float(np.dot(pt, fv))
        worst = max(worst, float(np.dot(pt, (fv - mu) ** 2)))
    return worst


def calibrate_entropy_rate(
    true_model: ConditionalModel,
    base: ConditionalModel,
    epsilon: float,
    tolerance: float = 1e-10,
    budget: EnumerationBudget | None = None,
    provenance: dict | None = None,
) -> tuple[GlobalTiltModel, CalibrationResult]:
    """Entropy-rate calibration via powering up the mixture-floored base.

    The base is first floored by the epsilon-mixture with uniform, then
    globally tilted with f = log of the floored model, so the family is
    the floored base to the power (1 + a) renormalized.  At the optimum
    the cross entropy against the truth equals the tilted model's own
    entropy rate.  `epsilon` is the caller's regret estimate for the
    base; the measured regret KL(truth || floored base)/T is reported
    alongside for bound checks.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    from .exact import kl_exact  # deferred: keeps module import order simple

    M, T = base.spec.M, base.spec.T
    mixture = MixtureModel(base, epsilon)
    f = FunctionalF.log_prob(mixture, bound=T * math.log(M) + math.log(1.0 / epsilon))
    result = fit_alpha_global(
        true_model, mixture, f, tolerance=tolerance, budget=budget, provenance=provenance
    )
    result.extras["epsilon"] = float(epsilon)
    result.extras["measured_epsilon"] = kl_exact(true_model, mixture, budget) / T
    model = GlobalTiltModel(mixture, f, result.alpha_star, budget)
    return model, result


# -- per-step tilts ----------------------------------------------------------


class _StepTiltProblem:
    """Flattened (step, context) data for fitting a shared per-step exponent.

    Rows carry the log base conditional, the per-candidate feature
    (zeroed on inactive steps, so those steps stay untilted and only add
    constants), the context weight, and the target feature moments --
    either exact conditional means under the truth or realized values
    from samples.
    """

    def __init__(self, weights, log_rows, feats, target_feat_sum, xent_sum, T, n_seqs=None, obs_feats=None):
        self.weights = weights
        self.log_rows = log_rows
        self.feats = feats
        self.target_feat_sum = target_feat_sum
        self.xent_sum = xent_sum
        self.T = T
        self.n_seqs = n_seqs
        self.obs_feats = obs_feats  # (T, n) realized features, sample mode only

    def evaluate(self, alpha: float) -> dict:
        logits = self.log_rows + alpha * self.feats
        log_z = logsumexp(logits, axis=1)
        rows = np.exp(logits - log_z[:, None])
        m = (rows * self.feats).sum(axis=1)
        var = (rows * (self.feats - m[:, None]) ** 2).sum(axis=1)
        g = (float(np.dot(self.weights, m)) - self.target_feat_sum) / self.T
        c = float(np.dot(self.weights, var)) / self.T
        obj = (
            self.xent_sum - alpha * self.target_feat_sum + float(np.dot(self.weights, log_z))
        ) / self.T
        info = {
            "g": g,
            "c": c,
            "obj": obj,
            "mu": float(np.dot(self.weights, m)) / self.T,
            "var": c * self.T,
        }
        if self.obs_feats is not None:
            per_seq = (
                m.reshape(self.T, self.n_seqs) - self.obs_feats
            ).sum(axis=0) / self.T
            info["g_stderr"] = float(per_seq.std(ddof=1) / math.sqrt(self.n_seqs))
        return info


def _exact_step_problem(truth, base, feature_fn, active, budget):
    T = truth.spec.T
    w_parts, lr_parts, f_parts = [], [], []
    target_sum = 0.0
    xent_sum = 0.0
    for t, ctx, weights, true_rows in prefix_expansion(truth, budget):
        base_rows = base.next_dist_batch(ctx)
        with np.errstate(divide="ignore"):
            log_rows = np.log(base_rows)
        support = (weights[:, None] * true_rows) > 0.0
        if np.any(support & np.isneginf(log_rows)):
            raise CalibrationDivergenceError(
                "base assigns zero probability on the truth's support; the "
                "objective is infinite for every alpha"
            )
        feats = feature_fn(t, ctx) if t in active else np.zeros_like(base_rows)
        xent_sum += -float(
            np.dot(weights, np.where(support, true_rows * log_rows, 0.0).sum(axis=1))
        )
        target_sum += float(np.dot(weights, (true_rows * feats).sum(axis=1)))
        w_parts.append(weights)
        lr_parts.append(log_rows)
        f_parts.append(feats)
    return _StepTiltProblem(
        np.concatenate(w_parts),
        np.vstack(lr_parts),
        np.vstack(f_parts),
        target_sum,
        xent_sum,
        T,
    )


def _sample_step_problem(samples, base, feature_fn, active, min_samples):
    samples = np.asarray(samples, dtype=np.int64)
    n, T = samples.shape
    if T != base.spec.T:
        raise ValueError(f"samples have length {T}, expected {base.spec.T}")
    if n < min_samples:
        raise ValueError(f"sample mode needs at least {min_samples} sequences, got {n}")
    lr_parts, f_parts = [], []
    obs = np.empty((T, n))
    xent_sum = 0.0
    idx = np.arange(n)
    for t in range(1, T + 1):
        ctx = samples[:, : t - 1]
        base_rows = base.next_dist_batch(ctx)
        with np.errstate(divide="ignore"):
            log_rows = np.log(base_rows)
        chosen = log_rows[idx, samples[:, t - 1]]
        if np.any(np.isneginf(chosen)):
            raise CalibrationDivergenceError(
                "base assigns zero probability to a sampled sequence; the "
                "objective is infinite for every alpha"
            )
        feats = feature_fn(t, ctx) if t in active else np.zeros_like(base_rows)
        xent_sum += -float(chosen.sum()) / n
        obs[t - 1] = feats[idx, samples[:, t - 1]]
        lr_parts.append(log_rows)
        f_parts.append(feats)
    return _StepTiltProblem(
        np.full(n * T, 1.0 / n),
        np.vstack(lr_parts),
        np.vstack(f_parts),
        float(obs.sum()) / n,
        xent_sum,
        T,
        n_seqs=n,
        obs_feats=obs,
    )


def fit_per_step_tilt(
    target,
    base: ConditionalModel,
    feature_fn,
    active_steps=None,
    tolerance: float = 1e-10,
    budget: EnumerationBudget | None = None,
    min_samples: int = 1000,
    f_descriptor: dict | None = None,
    provenance: dict | None = None,
) -> CalibrationResult:
    """Fit a shared per-step tilt exponent against a truth model or samples.

    `feature_fn(t, contexts)` returns the per-candidate feature rows at
    step t.  Steps outside `active_steps` stay untilted.  With a
    ConditionalModel target the fit is exact (stop at |gradient| <=
    tolerance); with an (n, T) sample array it is a sample-average
    approximation over the fixed sample (stop at |gradient| <= 0.1 *
    stderr(gradient)).
    """
    T = base.spec.T
    active = frozenset(active_steps) if active_steps is not None else frozenset(range(1, T + 1))
    if not active or not active.issubset(range(1, T + 1)):
        raise ValueError("active_steps must be a nonempty subset of 1..T")

    if isinstance(target, ConditionalModel):
        if target.spec != base.spec:
            raise ValueError("models must share the same sequence spec")
        problem = _exact_step_problem(target, base, feature_fn, active, budget)
        mode = "exact"
        stop = lambda info: abs(info["g"]) <= tolerance  # noqa: E731
    else:
        problem = _sample_step_problem(target, base, feature_fn, active, min_samples)
        mode = "sample-average"
        stop = lambda info: abs(info["g"]) <= max(0.1 * info["g_stderr"], 1e-13)  # noqa: E731

    alpha_star, info, trace = _minimize_convex(problem.evaluate, stop)
    baseline = next(i["obj"] for i in trace if i["alpha"] == 0.0)
    mu_base = next(i["mu"] for i in trace if i["alpha"] == 0.0)
    extras = {
        "mu_base": mu_base,
        "sigma2_tilted_at_opt": info["var"],
        "sigma2_path_max": max(i["var"] for i in trace),
        "active_steps": sorted(active),
    }
    if "g_stderr" in info:
        extras["gradient_stderr"] = info["g_stderr"]
        extras["n_sequences"] = problem.n_seqs
    prov = dict(provenance or {})
    prov.setdefault("base_model_hash", _try_model_hash(base))
    return CalibrationResult(
        alpha_star=alpha_star,
        objective=info["obj"],
        baseline_objective=baseline,
        gradient=info["g"],
        curvature=info["c"],
        mu_target=problem.target_feat_sum / T,
        mu_tilted=info["mu"],
        mode=mode,
        tolerance=tolerance,
        n_iterations=len(trace),
        trace=[(i["alpha"], i["g"]) for i in trace],
        f_descriptor=dict(f_descriptor or {}),
        extras=extras,
        provenance=prov,
    )


def fit_alpha_local(
    target,
    base: ConditionalModel,
    tolerance: float = 1e-10,
    budget: EnumerationBudget | None = None,
    min_samples: int = 1000,
    provenance: dict | None = None,
) -> tuple[LocalTiltModel, CalibrationResult]:
    """Fit the one-step-lookahead tilt exponent.

    `target` is either the true model (exact mode, enumeration) or an
    (n, T) array of sequences drawn from it (sample-average mode).
    """
    M, T = base.spec.M, base.spec.T

    def feature_fn(t, contexts):
        n = contexts.shape[0]
        if t == T:
            return np.zeros((n, M))
        h = np.empty((n, M))
        for j in range(M):
            ext = np.hstack([contexts, np.full((n, 1), j, dtype=np.int64)])
            h[:, j] = row_entropies(base.next_dist_batch(ext))
        return h

    result = fit_per_step_tilt(
        target,
        base,
        feature_fn,
        tolerance=tolerance,
        budget=budget,
        min_samples=min_samples,
        f_descriptor={"kind": "lookahead_entropy"},
        provenance=provenance,
    )
    return LocalTiltModel(base, result.alpha_star), result


# ---------------------------------------------------------------------------
# Closed-form amplification bounds for a mixture-floored near-optimal model.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AmplificationBound:
    """Worst-case bounds under a per-token regret of epsilon.

    ``mixture_kl_bound`` caps the per-token divergence from the truth
    after epsilon-mixing with uniform; ``generation_gap_bound`` caps the
    gap between the mixed model's cross entropy on real data and the
    entropy rate of its own generations.
    """

    epsilon: float
    T: int
    M: int
    mixture_kl_bound: float
    generation_gap_bound: float

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "T": self.T,
            "M": self.M,
            "mixture_kl_bound": self.mixture_kl_bound,
            "generation_gap_bound": self.generation_gap_bound,
        }


def amplification_bound(epsilon: float, T: int, M: int) -> AmplificationBound:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    mixture_kl = (1.0 + 1.0 / T) * epsilon
    gap = math.sqrt(2.0 * epsilon * (T + 1)) * (
        math.log(M) + math.log(1.0 / epsilon) / T
    )
    return AmplificationBound(
        epsilon=float(epsilon),
        T=int(T),
        M=int(M),
        mixture_kl_bound=mixture_kl,
        generation_gap_bound=gap,
    )


# ---------------------------------------------------------------------------
# Serialization hooks.
# ---------------------------------------------------------------------------


def _functional_to_doc(f: FunctionalF) -> dict:
    if f.kind in ("log_prob", "neg_log_prob"):
        return {
            "kind": f.kind,
            "bound": f.bound,
            "p_min": f.p_min,
            "model": model_to_dict(f.model),
        }
    if f.kind == "table":
        return {"kind": "table", "bound": f.bound, "values": f.table.tolist()}
    raise ValueError("callable functionals are not serializable")


def _functional_from_doc(doc: dict, spec) -> FunctionalF:
    kind = doc["kind"]
    if kind in ("log_prob", "neg_log_prob"):
        model = model_from_dict(doc["model"])
        return FunctionalF(kind, model=model, bound=doc.get("bound"), p_min=doc.get("p_min", 1e-300))
    if kind == "table":
        return FunctionalF.from_table(doc["values"], spec, bound=doc.get("bound"))
    raise ValueError(f"unknown functional kind {kind!r}")


register_model_kind(
    "global_tilt",
    lambda spec, params: GlobalTiltModel(
        model_from_dict(params["base"]),
        _functional_from_doc(params["f"], spec),
        params["alpha"],
    ),
)
register_model_kind(
    "local_tilt",
    lambda spec, params: LocalTiltModel(model_from_dict(params["base"]), params["alpha"]),
)
