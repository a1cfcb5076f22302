"""Synthetic corpus: laws, generation, normalization, serialization."""

import numpy as np
import pytest

from prosodyflow.cascade import ContourSet
from prosodyflow.synthdata import (
    Corpus,
    CorpusError,
    ToyCorpusSpec,
    analytic_pdf,
    build_laws,
    generate_corpus,
    load_corpus,
    sample_token,
    save_corpus,
    token_features,
    unimodal_classes,
)


def small_spec(**kw):
    defaults = dict(n_utterances=12, n_realizations_per_utterance=4, seed=99)
    defaults.update(kw)
    return ToyCorpusSpec(**defaults)


class TestSpec:
    def test_empty_token_range_rejected(self):
        with pytest.raises(CorpusError, match="empty token range"):
            ToyCorpusSpec(tokens_min=9, tokens_max=5).validate()

    def test_degenerate_counts_rejected(self):
        with pytest.raises(CorpusError):
            ToyCorpusSpec(n_utterances=0).validate()

    def test_spec_hash_sensitive_to_fields(self):
        a = ToyCorpusSpec(seed=1).spec_hash()
        b = ToyCorpusSpec(seed=2).spec_hash()
        assert a != b


class TestLaws:
    def test_mixture_weights_sum_to_one(self):
        for law in build_laws(small_spec()):
            assert np.isclose(sum(law.pitch_weights), 1.0)
            assert all(s > 0 for s in law.pitch_sds)

    def test_pooled_standardization(self):
        # pooled pitch over a uniform class mix has mean 0, variance 1
        laws = build_laws(small_spec())
        means = np.array([law.pitch_moments()[0] for law in laws])
        m2 = np.array([
            np.dot(law.pitch_weights,
                   np.array(law.pitch_sds) ** 2 + np.array(law.pitch_means) ** 2)
            for law in laws
        ])
        np.testing.assert_allclose(means.mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(m2.mean() - means.mean() ** 2, 1.0, rtol=1e-12)

    def test_bimodal_flags_match_fraction(self):
        spec = small_spec(n_token_classes=16, bimodal_fraction=0.25)
        laws = build_laws(spec)
        assert sum(law.bimodal for law in laws) == 4
        assert len(unimodal_classes(spec)) == 12


class TestAnalyticPdf:
    @pytest.mark.parametrize("variable", ["pitch", "energy", "duration"])
    def test_normalization(self, variable):
        spec = small_spec()
        for c in (0, spec.n_token_classes - 1):
            mix = analytic_pdf(spec, c, variable)
            lo, hi = mix.span()
            grid = np.linspace(lo, hi, 40001)
            total = np.trapezoid(mix.pdf(grid), grid)
            assert 0.999 <= total <= 1.001

    def test_symmetric_mixture_is_symmetric(self):
        from prosodyflow.synthdata import MixtureDensity
        mix = MixtureDensity("normal", np.array([0.5, 0.5]),
                             np.array([-1.0, 1.0]), np.array([0.3, 0.3]))
        xs = np.linspace(0.0, 2.5, 50)
        np.testing.assert_allclose(mix.pdf(xs), mix.pdf(-xs), rtol=1e-12)

    def test_value_at_mean_matches_hand_computation(self):
        # scalar oracle: f(m1) = w1/(s1 sqrt(2 pi)) + w2 phi((m1-m2)/s2)/s2
        from prosodyflow.synthdata import MixtureDensity
        w1, w2 = 0.6, 0.4
        m1, m2 = -1.0, 1.5
        s1, s2 = 0.5, 0.7
        mix = MixtureDensity("normal", np.array([w1, w2]),
                             np.array([m1, m2]), np.array([s1, s2]))
        z = (m1 - m2) / s2
        by_hand = (w1 / (s1 * np.sqrt(2 * np.pi))
                   + w2 * np.exp(-0.5 * z * z) / (s2 * np.sqrt(2 * np.pi)))
        np.testing.assert_allclose(mix.pdf(np.array([m1]))[0], by_hand, rtol=1e-12)

    def test_unknown_class_rejected(self):
        with pytest.raises(CorpusError, match="unknown token class"):
            analytic_pdf(small_spec(), 999, "pitch")


class TestGeneration:
    def test_same_seed_identical(self, tmp_path):
        spec = small_spec()
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(generate_corpus(spec), a)
        save_corpus(generate_corpus(spec), b)
        assert a.read_bytes() == b.read_bytes()

    def test_content_hash_stable_across_runs(self):
        spec = small_spec()
        assert generate_corpus(spec).content_hash() == generate_corpus(spec).content_hash()

    def test_normalization_invariant(self):
        corpus = generate_corpus(small_spec())
        for rec in corpus.records:
            for real in rec.realizations:
                if rec.token_classes.shape[0] >= 2 and len(set(real.pitch)) >= 2:
                    assert abs(real.pitch.mean()) < 1e-9
                    assert abs(real.pitch.var() - 1.0) < 1e-6
                    assert abs(real.energy.mean()) < 1e-9
                    assert abs(real.energy.var() - 1.0) < 1e-6

    def test_durations_positive_integers(self):
        corpus = generate_corpus(small_spec())
        for rec in corpus.records:
            for real in rec.realizations:
                assert real.duration.dtype == np.int64
                assert np.all(real.duration >= 1)

    def test_realizations_share_tokens_and_features(self):
        corpus = generate_corpus(small_spec())
        for rec in corpus.records:
            assert all(r.tokens == rec.token_classes.shape[0] for r in rec.realizations)

    def test_features_pure_function_of_seed_and_tokens(self):
        spec = small_spec()
        ids = np.array([3, 1, 4, 1, 5])
        np.testing.assert_array_equal(token_features(spec, ids),
                                      token_features(spec, ids))
        other = ToyCorpusSpec(**{**spec.__dict__, "seed": spec.seed + 1})
        assert np.abs(token_features(other, ids) - token_features(spec, ids)).max() > 0

    def test_empirical_matches_analytic_mixture(self):
        # KDE of 1e5 law draws vs the analytic pdf: JS < 0.01 nats
        from prosodyflow.evalsuite import density_from_function, js_divergence, kde
        spec = small_spec()
        laws = build_laws(spec)
        rng = np.random.default_rng(11)
        for c in (0, spec.n_token_classes - 1):
            draws = np.array([
                sample_token(laws[c], spec.pitch_duration_coupling, rng)[0]
                for _ in range(100_000)
            ])
            mix = analytic_pdf(spec, c, "pitch")
            js = js_divergence(kde(draws), density_from_function(mix.pdf, *mix.span()))
            assert js.value_nats < 0.01

    def test_degenerate_spec_rejected(self):
        with pytest.raises(CorpusError):
            generate_corpus(ToyCorpusSpec(tokens_min=4, tokens_max=2))


class TestIO:
    def test_round_trip_equality(self, tmp_path):
        corpus = generate_corpus(small_spec())
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        loaded = load_corpus(path)
        assert loaded.spec == corpus.spec
        assert loaded.content_hash() == corpus.content_hash()
        for a, b in zip(loaded.records, corpus.records):
            assert a.utterance_id == b.utterance_id
            np.testing.assert_array_equal(a.token_classes, b.token_classes)
            np.testing.assert_array_equal(a.features, b.features)
            for ra, rb in zip(a.realizations, b.realizations):
                np.testing.assert_array_equal(ra.pitch, rb.pitch)
                np.testing.assert_array_equal(ra.duration, rb.duration)

    def test_truncated_file_rejected(self, tmp_path):
        corpus = generate_corpus(small_spec())
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(CorpusError, match="truncated"):
            load_corpus(path)

    def test_version_mismatch_names_both(self, tmp_path):
        corpus = generate_corpus(small_spec())
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        text = path.read_text().replace("toyprosody-v1", "toyprosody-v0", 1)
        path.write_text(text)
        with pytest.raises(CorpusError, match="toyprosody-v0.*toyprosody-v1"):
            load_corpus(path)

    def test_corrupted_body_rejected(self, tmp_path):
        corpus = generate_corpus(small_spec())
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        lines = path.read_text().splitlines()
        rec = lines[1].replace("utt-00000", "utt-xxxxx")
        path.write_text("\n".join([lines[0], rec, *lines[2:]]) + "\n")
        with pytest.raises(CorpusError, match="corpus hash"):
            load_corpus(path)

    def test_zero_variance_contour_realizations_identical(self):
        # single-token utterances skip normalization and store raw values;
        # a single class with (numerically) zero variance collapses them
        spec = small_spec(n_token_classes=1, tokens_min=1, tokens_max=1,
                          bimodal_fraction=0.0)
        laws = build_laws(spec)
        law = laws[0]
        law.pitch_sds = (1e-30, 1e-30)
        law.energy_sd = 1e-30
        law.dur_log_sd = 1e-30
        rng = np.random.default_rng(0)
        draws = {sample_token(law, 0.0, rng) for _ in range(32)}
        pitches = {round(p, 9) for p, _, _ in draws}
        durations = {d for _, _, d in draws}
        assert len(pitches) == 1 and len(durations) == 1
