"""Tests for personapp.likelihood."""

from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import make_sequence

from personapp import diffgraph as dg
from personapp.claims import StandardErrorBand, Tolerance
from personapp.decoders import ConstantDecoder, DecoderConfig, build_decoder, rmtpp_compensator, roll_states
from personapp.diffgraph import ParameterStore
from personapp.embeddings import MarkEmbedding
from personapp.events import Dataset, Sequence
from personapp.falsification import falsify
from personapp.likelihood import (
    MCConfig,
    allocate_samples,
    breakdown_over_time,
    elbo,
    importance_weighted_log_likelihood,
    log_likelihood,
    sce_over_time,
)
from personapp.model import PersonalizedMTPP
from personapp.verdicts import Evidence


class TestAllocateSamples:
    """Tests for allocate_samples()."""

    def test_proportional(self) -> None:
        """Counts follow segment lengths."""
        assert allocate_samples(np.array([1.0, 3.0]), 100).tolist() == [25, 75]

    def test_minimum_one(self) -> None:
        """Tiny non-empty segments still get a draw; empty ones get none."""
        counts = allocate_samples(np.array([1e-9, 0.0, 5.0]), 10)
        assert counts.tolist() == [1, 0, 9]


class TestLogLikelihood:
    """Tests for log_likelihood() on exact references."""

    def test_homogeneous_poisson(self, unit_rate: ConstantDecoder, three_events: Sequence) -> None:
        """Rate 1, K=1, T=2, three events: log p = -2, SCE = PP+ = 0, PP- = 1."""
        b = log_likelihood(unit_rate, None, three_events, MCConfig(eval_samples=50))
        assert b.log_lik == pytest.approx(-2.0)
        assert b.sce == pytest.approx(0.0)
        assert b.pp_plus == pytest.approx(0.0)
        assert b.pp_minus == pytest.approx(1.0)
        assert b.compensator_se == pytest.approx(0.0)

    def test_marked_poisson(self) -> None:
        """Rates (1, 3): log p = sum log lambda_k - 4 T, SCE = mean -log(lambda_k / 4)."""
        seq = make_sequence([0.5, 1.0, 1.5], [0, 1, 1], 2.0)
        b = log_likelihood(ConstantDecoder([1.0, 3.0]), None, seq, MCConfig())
        assert b.log_lik == pytest.approx(2.0 * math.log(3.0) - 8.0)
        assert b.sce == pytest.approx(-(math.log(0.25) + 2.0 * math.log(0.75)) / 3.0)
        assert b.pp_plus == pytest.approx(-math.log(4.0))

    def test_identity(self, tiny_model: PersonalizedMTPP, three_events: Sequence) -> None:
        """-log p = n (SCE + PP+) + T PP- for a random neural decoder."""
        z = dg.constant(np.array([0.3, -0.6]))
        b = log_likelihood(tiny_model.decoder, z, three_events, MCConfig(eval_samples=64), np.random.default_rng(0))
        assert abs(b.identity_residual()) < 1e-9
        assert b.graph is not None and b.graph.item() == pytest.approx(b.log_lik)

    def test_empty_sequence(self, unit_rate: ConstantDecoder) -> None:
        """No events leaves only the compensator."""
        b = log_likelihood(unit_rate, None, make_sequence([], [], 3.0), MCConfig())
        assert b.log_lik == pytest.approx(-3.0)
        assert b.n_events == 0

    def test_rmtpp_compensator_within_three_se(self) -> None:
        """The MC compensator agrees with the closed form within 3 standard errors."""
        store = ParameterStore(seed=9)
        cfg = DecoderConfig(model="rmtpp", hidden_size=4, d_mark=3, latent_size=0, K=3)
        dec = build_decoder(store, cfg, MarkEmbedding(store, 3, 3))
        dec.w.value[...] = np.array([[-0.8], [0.3], [-0.1]])
        seq = make_sequence([0.4, 1.3, 2.9], [0, 2, 1], 4.0)
        b = log_likelihood(dec, None, seq, MCConfig(eval_samples=500), np.random.default_rng(3))
        bounds = [0.0, *seq.times.tolist(), seq.horizon]
        states = roll_states(dec, None, seq.events)
        exact = sum(rmtpp_compensator(dec, states[j], bounds[j], bounds[j + 1]) for j in range(len(bounds) - 1))
        assert abs(b.compensator - exact) < 3.0 * b.compensator_se

    def test_deterministic(self, tiny_model: PersonalizedMTPP, three_events: Sequence) -> None:
        """Same generator state, same estimate."""
        z = dg.constant(np.zeros(2))
        a = log_likelihood(tiny_model.decoder, z, three_events, MCConfig(), np.random.default_rng(1))
        b = log_likelihood(tiny_model.decoder, z, three_events, MCConfig(), np.random.default_rng(1))
        assert a.log_lik == b.log_lik


class TestMonteCarloConvergence:
    """The Monte-Carlo compensator against closed forms and across sample counts."""

    @pytest.mark.parametrize(
        "rates,horizon,seed",
        [([1.0], 2.0, 0), ([0.5, 2.0], 5.0, 1), ([0.1, 0.2, 0.3, 0.4], 10.0, 2), ([3.0, 0.01], 1.5, 3), ([0.7] * 6, 20.0, 4)],
    )
    def test_constant_rate_closed_form(self, rates: list[float], horizon: float, seed: int) -> None:
        """Poisson log p = sum log lambda_k - T sum lambda at 10^4 samples."""
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 12))
        times = np.sort(rng.uniform(0.0, horizon, size=n)).tolist()
        marks = rng.integers(0, len(rates), size=n).tolist()
        seq = make_sequence(times, marks, horizon)
        b = log_likelihood(ConstantDecoder(rates), None, seq, MCConfig(eval_samples=10_000), rng)
        exact = float(sum(math.log(rates[k]) for k in marks) - horizon * sum(rates))
        result = falsify(Tolerance("constant-rate log-likelihood", rel_tol=1e-9, abs_tol=1e-9), Evidence({"estimate": b.log_lik, "reference": exact}))
        assert result.survived, result.reasoning

    @pytest.mark.parametrize("seed,decay", [(0, -0.8), (1, 0.3), (2, -2.0), (3, 0.05), (4, -0.3)])
    def test_rmtpp_compensator_converges(self, seed: int, decay: float) -> None:
        """Random RMTPP parameters at 10^4 samples stay within the standard-error band."""
        store = ParameterStore(seed=seed)
        cfg = DecoderConfig(model="rmtpp", hidden_size=4, d_mark=3, latent_size=0, K=2)
        dec = build_decoder(store, cfg, MarkEmbedding(store, 2, 3))
        dec.w.value[...] = np.array([[decay], [-0.5 * decay]])
        seq = make_sequence([0.3, 1.7, 2.2, 4.0], [1, 0, 0, 1], 5.0)
        b = log_likelihood(dec, None, seq, MCConfig(eval_samples=10_000), np.random.default_rng(seed + 100))
        bounds = [0.0, *seq.times.tolist(), seq.horizon]
        states = roll_states(dec, None, seq.events)
        exact = sum(rmtpp_compensator(dec, states[j], bounds[j], bounds[j + 1]) for j in range(len(bounds) - 1))
        evidence = Evidence({"estimate": b.compensator, "reference": exact, "se": b.compensator_se})
        assert falsify(StandardErrorBand("compensator matches closed form", k=4.0), evidence).survived

    @pytest.mark.parametrize("model", ["rmtpp", "nhp"])
    def test_sample_counts_agree(self, model: str, three_events: Sequence) -> None:
        """150- and 500-sample estimates agree within their combined standard error."""
        store = ParameterStore(seed=8)
        cfg = DecoderConfig(model=model, hidden_size=4, d_mark=3, latent_size=2, K=2)  # type: ignore[arg-type]
        dec = build_decoder(store, cfg, MarkEmbedding(store, 2, 3))
        z = dg.constant(np.array([0.4, -0.3]))
        small = log_likelihood(dec, z, three_events, MCConfig(eval_samples=150), np.random.default_rng(21))
        large = log_likelihood(dec, z, three_events, MCConfig(eval_samples=500), np.random.default_rng(22))
        se = math.hypot(small.compensator_se, large.compensator_se)
        evidence = Evidence({"estimate": small.log_lik, "reference": large.log_lik, "se": se})
        assert falsify(StandardErrorBand("150 and 500 samples agree", k=4.0), evidence).survived


class TestOverTime:
    """Tests for breakdown_over_time() and sce_over_time()."""

    def test_last_point_matches_breakdown(self, tiny_model: PersonalizedMTPP, three_events: Sequence) -> None:
        """At t = T the curve equals the full breakdown."""
        z = dg.constant(np.array([0.1, 0.2]))
        mc = MCConfig(eval_samples=40)
        full = log_likelihood(tiny_model.decoder, z, three_events, mc, np.random.default_rng(4))
        (point,) = breakdown_over_time(tiny_model.decoder, z, three_events, [2.0], mc, np.random.default_rng(4))
        assert point.sce == pytest.approx(full.sce)
        assert point.pp_plus == pytest.approx(full.pp_plus)
        assert point.pp_minus == pytest.approx(full.pp_minus)

    def test_single_event_sce(self) -> None:
        """One event with mark probability p has SCE = -log p at any t >= t_1."""
        seq = make_sequence([0.5], [1], 2.0)
        curve = sce_over_time(ConstantDecoder([1.0, 3.0]), None, seq, [0.2, 0.5, 1.0, 2.0])
        assert [t for t, _ in curve] == [0.5, 1.0, 2.0]
        for _, sce in curve:
            assert sce == pytest.approx(-math.log(0.75))

    def test_empty_prefix_absent(self, unit_rate: ConstantDecoder, three_events: Sequence) -> None:
        """Points before the first event have no SCE or PP+."""
        (point,) = breakdown_over_time(unit_rate, None, three_events, [0.1], MCConfig())
        assert point.n_events == 0 and point.sce is None and point.pp_plus is None
        assert point.pp_minus == pytest.approx(1.0, abs=0.5)

    def test_grid_refinement(self, tiny_model: PersonalizedMTPP, three_events: Sequence) -> None:
        """Adding grid points leaves the values at existing points unchanged."""
        z = dg.constant(np.zeros(2))
        mc = MCConfig(eval_samples=40)
        coarse = sce_over_time(tiny_model.decoder, z, three_events, [1.0, 2.0], mc, np.random.default_rng(2))
        fine = dict(sce_over_time(tiny_model.decoder, z, three_events, [0.5, 1.0, 1.5, 2.0], mc, np.random.default_rng(2)))
        for t, value in coarse:
            assert fine[t] == value

    def test_grid_bounds(self, unit_rate: ConstantDecoder, three_events: Sequence) -> None:
        """Grid points outside (0, T] raise."""
        with pytest.raises(ValueError):
            breakdown_over_time(unit_rate, None, three_events, [0.0], MCConfig())


class TestElbo:
    """Tests for elbo() and importance_weighted_log_likelihood()."""

    def test_beta_zero_is_reconstruction(self, tiny_model: PersonalizedMTPP, tiny_dataset: Dataset, three_events: Sequence) -> None:
        """beta = 0 gives exactly the reconstruction term."""
        refs = list(tiny_dataset.user("u0").reference_sequences)
        mc = MCConfig(train_samples=30)
        terms = elbo(tiny_model.decoder, tiny_model.encoder, refs, three_events, 0.0, mc, np.random.default_rng(0))
        assert terms.value.item() == terms.breakdown.log_lik

    def test_kl_penalty(self, tiny_model: PersonalizedMTPP, tiny_dataset: Dataset, three_events: Sequence) -> None:
        """beta > 0 subtracts beta * KL."""
        refs = list(tiny_dataset.user("u1").reference_sequences)
        mc = MCConfig(train_samples=30)
        terms = elbo(tiny_model.decoder, tiny_model.encoder, refs, three_events, 0.5, mc, np.random.default_rng(0))
        assert terms.value.item() == pytest.approx(terms.breakdown.log_lik - 0.5 * terms.kl)

    def test_prior_fallback_kl(self, tiny_model: PersonalizedMTPP, three_events: Sequence) -> None:
        """With no references the KL term is zero."""
        terms = elbo(tiny_model.decoder, tiny_model.encoder, [], three_events, 1.0, MCConfig(train_samples=20), np.random.default_rng(0))
        assert terms.kl == pytest.approx(0.0, abs=1e-12)

    def test_decoder_only(self, unit_rate: ConstantDecoder, three_events: Sequence) -> None:
        """Without an encoder the objective is the log-likelihood."""
        terms = elbo(unit_rate, None, [], three_events, 0.001, MCConfig())
        assert terms.kl == 0.0
        assert terms.value.item() == pytest.approx(-2.0)

    def test_negative_beta(self, unit_rate: ConstantDecoder, three_events: Sequence) -> None:
        """beta < 0 is rejected."""
        with pytest.raises(ValueError):
            elbo(unit_rate, None, [], three_events, -0.1, MCConfig())

    def test_gradients_reach_encoder(self, tiny_model: PersonalizedMTPP, tiny_dataset: Dataset, three_events: Sequence) -> None:
        """The objective differentiates into encoder and decoder parameters."""
        refs = list(tiny_dataset.user("u2").reference_sequences)
        terms = elbo(tiny_model.decoder, tiny_model.encoder, refs, three_events, 0.001, MCConfig(train_samples=20), np.random.default_rng(0))
        names = {p.name for p in dg.gradients(terms.value)}
        assert any(n.startswith("encoder.") for n in names)
        assert any(n.startswith("decoder.") for n in names)

    @pytest.mark.slow
    def test_elbo_lower_bounds_importance_estimate(self, tiny_model: PersonalizedMTPP, tiny_dataset: Dataset) -> None:
        """The beta = 1 ELBO sits below the 100-sample importance-weighted estimate in most trials."""
        mc = MCConfig(eval_samples=100, eval_z_samples=20)
        below = 0
        trials = 20
        for i in range(trials):
            seq = list(tiny_dataset.sequences())[i % 6]
            refs = [s for s in tiny_dataset.user(seq.user_id).reference_sequences if s.seq_id != seq.seq_id]
            rng = np.random.default_rng(i)
            bound = elbo(tiny_model.decoder, tiny_model.encoder, refs, seq, 1.0, mc, rng, training=False).value.item()
            iw = importance_weighted_log_likelihood(tiny_model.decoder, tiny_model.encoder, refs, seq, 100, mc, rng)
            below += bound <= iw
        assert below >= 0.9 * trials
