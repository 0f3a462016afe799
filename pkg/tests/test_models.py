import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import seqcal as sc
from seqcal.exact import sequence_log_probs

from conftest import all_seqs, model_probs, one_hot_model, random_markov


class TestSpecTypes:
    def test_vocab_requires_two_tokens(self):
        with pytest.raises(ValueError):
            sc.Vocab(1)
        assert sc.Vocab(2).size == 2

    def test_length_positive(self):
        with pytest.raises(ValueError):
            sc.make_spec(3, 0)

    def test_row_validation(self):
        spec = sc.make_spec(2, 3)
        with pytest.raises(ValueError):
            sc.MarkovModel(spec, 0, [np.array([[0.7, 0.2]])])
        with pytest.raises(ValueError):
            sc.MarkovModel(spec, 0, [np.array([[1.2, -0.2]])])


class TestNextDist:
    def test_uniform_any_context(self, rng):
        model = sc.MarkovModel.uniform(sc.make_spec(5, 4))
        for ctx in ([], [0], [4, 2, 1]):
            np.testing.assert_allclose(model.next_dist(ctx), np.full(5, 0.2))

    def test_mixture_gamma_zero_is_base(self, rng):
        base = random_markov(rng, 3, 4, 1)
        mix = sc.MixtureModel(base, 0.0)
        for ctx in ([], [1], [2, 0, 1]):
            np.testing.assert_array_equal(mix.next_dist(ctx), base.next_dist(ctx))

    def test_mixture_conditional_matches_enumeration(self):
        # M=2, T=2, gamma=0.5, base puts all mass on (0, 0).  The four
        # sequence probabilities are (0.625, 0.125, 0.125, 0.125);
        # conditioning on first token 0 gives (0.625, 0.125)/0.75.
        spec = sc.make_spec(2, 2)
        mix = sc.MixtureModel(one_hot_model(spec), 0.5)
        probs = model_probs(mix)
        assert probs[(0, 0)] == pytest.approx(0.625, abs=1e-15)
        row = mix.next_dist([0])
        np.testing.assert_allclose(row, [5.0 / 6.0, 1.0 / 6.0], atol=1e-12)
        # cross-check against conditioning the enumerated distribution
        denom = probs[(0, 0)] + probs[(0, 1)]
        np.testing.assert_allclose(row, [probs[(0, 0)] / denom, probs[(0, 1)] / denom],
                                   atol=1e-12)

    def test_context_length_error(self, rng):
        model = random_markov(rng, 3, 3, 1)
        with pytest.raises(ValueError, match="length"):
            model.next_dist([0, 1, 2])

    def test_token_domain_error(self, rng):
        model = random_markov(rng, 3, 3, 1)
        with pytest.raises(ValueError, match="vocabulary"):
            model.next_dist([3])


class TestSeqLogProb:
    def test_uniform(self):
        model = sc.MarkovModel.uniform(sc.make_spec(4, 3))
        assert model.seq_log_prob([0, 3, 1]) == pytest.approx(-3 * math.log(4), abs=1e-12)

    def test_drift_p_zero_equals_base(self, rng):
        base = random_markov(rng, 3, 4, 1)
        drift = sc.DriftModel(base, 0.0)
        for w in ([0, 1, 2, 0], [2, 2, 2, 2]):
            assert drift.seq_log_prob(w) == base.seq_log_prob(w)

    def _switch_time_oracle(self, base, p, w):
        # Mode enters uniform before emitting step s (s = T+1: never).
        T, M = len(w), base.spec.M
        total = 0.0
        for s in range(1, T + 2):
            prob_s = (1 - p) ** (s - 1) * p if s <= T else (1 - p) ** T
            seq_p = 1.0
            for t in range(T):
                seq_p *= float(base.next_dist(w[:t])[w[t]]) if t + 1 < s else 1.0 / M
            total += prob_s * seq_p
        return math.log(total)

    def test_drift_p_one_marginalization(self, rng):
        base = random_markov(rng, 3, 3, 1)
        drift = sc.DriftModel(base, 1.0)
        w = [0, 1, 2]
        assert drift.seq_log_prob(w) == pytest.approx(self._switch_time_oracle(base, 1.0, w), abs=1e-12)
        assert drift.seq_log_prob(w) == pytest.approx(-3 * math.log(3), abs=1e-12)

    def test_drift_forward_recursion_vs_switch_times(self, rng):
        base = random_markov(rng, 2, 5, 2)
        drift = sc.DriftModel(base, 0.3)
        for w in all_seqs(2, 5):
            assert drift.seq_log_prob(w) == pytest.approx(
                self._switch_time_oracle(base, 0.3, w), abs=1e-10
            )

    def test_wrong_length(self, rng):
        model = random_markov(rng, 2, 4, 0)
        with pytest.raises(ValueError, match="length"):
            model.seq_log_prob([0, 1])

    def test_zero_probability_is_neg_inf(self):
        spec = sc.make_spec(2, 2)
        model = one_hot_model(spec)
        assert model.seq_log_prob([0, 1]) == -math.inf


class TestSampling:
    def test_deterministic_model(self, rng):
        model = one_hot_model(sc.make_spec(3, 6))
        np.testing.assert_array_equal(model.sample_sequence(rng), np.zeros(6, dtype=int))

    def test_prefix_preserved(self, rng):
        model = random_markov(rng, 3, 5, 1)
        prefix = [2, 0, 1, 2]
        out = model.sample_sequence(rng, prefix=prefix)
        np.testing.assert_array_equal(out[:4], prefix)

    def test_prefix_too_long(self, rng):
        model = random_markov(rng, 3, 3, 1)
        with pytest.raises(ValueError, match="exceeds"):
            model.sample_batch(2, rng, prefix=[0, 1, 2])

    def test_uniform_unigram_frequencies(self):
        # Binomial stderr oracle: sqrt(p(1-p)/n) per token.
        model = sc.MarkovModel.uniform(sc.make_spec(4, 2))
        rng = sc.named_stream(5, "unigram-test")
        n = 10**5
        seqs = model.sample_batch(n, rng)
        stderr = math.sqrt(0.25 * 0.75 / (2 * n))
        for token in range(4):
            freq = float(np.mean(seqs == token))
            assert abs(freq - 0.25) <= 3 * stderr

    def test_sampling_deterministic_given_stream(self, rng):
        model = random_markov(rng, 3, 4, 1)
        a = model.sample_batch(16, sc.named_stream(9, "gen"))
        b = model.sample_batch(16, sc.named_stream(9, "gen"))
        np.testing.assert_array_equal(a, b)


class TestMarginalizeToWindow:
    def test_order1_window1_recovers_transitions(self, rng):
        truth = random_markov(rng, 3, 5, 1)
        limited = sc.marginalize_to_window(truth, 1)
        np.testing.assert_allclose(limited.tables[1], truth.tables[1], atol=1e-12)
        np.testing.assert_allclose(limited.tables[0], truth.tables[0], atol=1e-12)

    def test_iid_any_window(self, rng):
        truth = random_markov(rng, 3, 4, 0)
        limited = sc.marginalize_to_window(truth, 2)
        for table in limited.tables:
            np.testing.assert_allclose(table, np.broadcast_to(truth.tables[0], table.shape),
                                       atol=1e-12)

    def test_order2_window1_matches_enumeration(self, rng):
        # Pool joint counts of (previous token, next token) over positions
        # t >= 2 from the 16 enumerated sequences.
        truth = random_markov(rng, 2, 4, 2)
        probs = model_probs(truth)
        joint = np.zeros((2, 2))
        for w, p in probs.items():
            for t in range(1, 4):
                joint[w[t - 1], w[t]] += p
        expected = joint / joint.sum(axis=1, keepdims=True)
        limited = sc.marginalize_to_window(truth, 1)
        np.testing.assert_allclose(limited.tables[1], expected, atol=1e-10)
        np.testing.assert_allclose(limited.tables[0][0], truth.tables[0][0], atol=1e-12)

    def test_budget_error(self, rng):
        truth = random_markov(rng, 3, 6, 1)
        with pytest.raises(sc.BudgetExceededError):
            sc.marginalize_to_window(truth, 2, budget=sc.EnumerationBudget(10))


class TestInvariants:
    def _model_zoo(self, rng):
        base = random_markov(rng, 3, 4, 1)
        return [
            base,
            sc.MixtureModel(base, 0.3),
            sc.PerTokenMixture(base, 0.3),
            sc.DriftModel(base, 0.25),
            sc.marginalize_to_window(random_markov(rng, 3, 4, 2), 1),
        ]

    def test_rows_are_distributions_on_random_contexts(self, rng):
        models = self._model_zoo(rng)
        for _ in range(1000 // len(models)):
            for model in models:
                L = int(rng.integers(0, model.spec.T))
                ctx = rng.integers(0, model.spec.M, size=L)
                row = model.next_dist(ctx)
                assert np.all(row >= 0.0)
                assert abs(row.sum() - 1.0) <= 1e-12

    def test_chain_rule_sums_to_one(self, rng):
        for model in self._model_zoo(rng):
            total = math.fsum(np.exp(sequence_log_probs(model)).tolist())
            assert abs(total - 1.0) <= 1e-9

    def test_seq_log_prob_matches_chain_of_conditionals(self, rng):
        # Holds structurally for table models; the mixture and drift
        # scorers use closed forms that must telescope to the same sum.
        for model in self._model_zoo(rng):
            for w in ([0, 1, 2, 0], [2, 2, 0, 1], [1, 0, 0, 0]):
                chained = sum(
                    math.log(model.next_dist(w[:t])[w[t]]) for t in range(4)
                )
                assert model.seq_log_prob(w) == pytest.approx(chained, abs=1e-10)

    def test_batch_matches_single(self, rng):
        for model in self._model_zoo(rng):
            ctxs = rng.integers(0, 3, size=(20, 2))
            rows = model.next_dist_batch(ctxs)
            for i in range(20):
                np.testing.assert_allclose(rows[i], model.next_dist(ctxs[i]), atol=1e-12)
            seqs = model.sample_batch(10, np.random.default_rng(3))
            lps = model.seq_log_prob_batch(seqs)
            for i in range(10):
                assert lps[i] == pytest.approx(model.seq_log_prob(seqs[i]), abs=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(gamma=st.floats(0.0, 1.0), seed=st.integers(0, 10**6))
    def test_mixture_sequence_identity(self, gamma, seed):
        rng = np.random.default_rng(seed)
        base = random_markov(rng, 2, 3, 1)
        mix = sc.MixtureModel(base, gamma)
        uni = 2.0 ** -3
        for w in all_seqs(2, 3):
            direct = (1 - gamma) * math.exp(base.seq_log_prob(w)) + gamma * uni
            assert math.exp(mix.seq_log_prob(w)) == pytest.approx(direct, abs=1e-12)

    def test_per_token_mixture_differs_from_sequence_mixture(self, rng):
        base = random_markov(rng, 2, 3, 1)
        seq_mix = sc.MixtureModel(base, 0.4)
        tok_mix = sc.PerTokenMixture(base, 0.4)
        diffs = [
            abs(seq_mix.seq_log_prob(w) - tok_mix.seq_log_prob(w)) for w in all_seqs(2, 3)
        ]
        assert max(diffs) > 1e-3

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), window=st.integers(1, 3))
    def test_limited_memory_truncation_invariance(self, seed, window):
        rng = np.random.default_rng(seed)
        truth = random_markov(rng, 2, 5, 2)
        limited = sc.marginalize_to_window(truth, window)
        suffix = rng.integers(0, 2, size=window)
        a = np.concatenate([rng.integers(0, 2, size=4 - window), suffix])
        b = np.concatenate([rng.integers(0, 2, size=4 - window), suffix])
        np.testing.assert_array_equal(limited.next_dist(a), limited.next_dist(b))


class TestStationary:
    def test_stationary_distribution(self, rng):
        transition = rng.dirichlet(np.ones(4), size=4)
        pi = sc.stationary_distribution(transition)
        np.testing.assert_allclose(pi @ transition, pi, atol=1e-10)
        assert pi.sum() == pytest.approx(1.0, abs=1e-12)


class TestSerialization:
    def _zoo(self, rng):
        base = random_markov(rng, 3, 4, 1)
        mixture = sc.MixtureModel(base, 0.2)
        f = sc.FunctionalF.log_prob(mixture)
        yield base
        yield sc.marginalize_to_window(random_markov(rng, 3, 4, 2), 1)
        yield mixture
        yield sc.PerTokenMixture(base, 0.15)
        yield sc.DriftModel(base, 0.3)
        yield sc.GlobalTiltModel(mixture, f, 0.37)
        yield sc.LocalTiltModel(base, -0.8)
        comparator = sc.marginalize_to_window(base, 1)
        yield sc.MemoryTiltModel(base, comparator, 0.21, active_steps=(2, 3, 4))

    def test_round_trip_preserves_scores(self, rng):
        probe_rng = np.random.default_rng(0)
        for model in self._zoo(rng):
            doc = sc.model_to_dict(model)
            clone = sc.model_from_dict(doc)
            probes = model.sample_batch(32, probe_rng)
            for w in probes:
                a, b = model.seq_log_prob(w), clone.seq_log_prob(w)
                assert a == pytest.approx(b, abs=1e-12)
            assert sc.model_hash(model) == sc.model_hash(clone)
            assert doc["format_version"] == 1
            assert set(doc) == {"format_version", "kind", "M", "T", "parameters"}

    def test_file_round_trip(self, rng, tmp_path):
        model = sc.MixtureModel(random_markov(rng, 2, 3, 1), 0.1)
        path = tmp_path / "model.json"
        sc.save_model(model, path)
        clone = sc.load_model(path)
        for w in all_seqs(2, 3):
            assert clone.seq_log_prob(w) == pytest.approx(model.seq_log_prob(w), abs=1e-12)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            sc.model_from_dict({"format_version": 1, "kind": "nope", "M": 2, "T": 2,
                                "parameters": {}})
