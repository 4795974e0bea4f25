"""Tests for personapp.encoder."""

from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import make_sequence
from hypothesis import given, settings
from hypothesis import strategies as st

from personapp import diffgraph as dg
from personapp.diffgraph import ParameterStore
from personapp.embeddings import MarkEmbedding, TemporalEmbeddingSpec
from personapp.encoder import (
    EncoderConfig,
    ExpertGaussian,
    PosteriorMixture,
    PriorFallback,
    SequenceEncoder,
    build_posterior,
    gaussian_kl,
    kl_estimate,
    log_density,
    prior_log_density,
    reparameterize,
    sample_z,
)


def _encoder(latent: int = 2) -> SequenceEncoder:
    store = ParameterStore(seed=0)
    cfg = EncoderConfig(d_time=4, d_mark=3, enc_hidden=3, latent=latent)
    return SequenceEncoder(store, cfg, MarkEmbedding(store, 4, 3), TemporalEmbeddingSpec(4, 5.0))


def _expert(mu: list[float], log_sigma: list[float]) -> ExpertGaussian:
    return ExpertGaussian(dg.constant(np.array(mu)), dg.constant(np.array(log_sigma)))


class TestEncode:
    """Tests for SequenceEncoder.encode()."""

    def test_zero_heads(self) -> None:
        """Zero weights and biases in the mean head give mu = 0."""
        enc = _encoder()
        enc.mu_head.weight.value[...] = 0.0
        expert = enc.encode(make_sequence([0.2, 1.1], [1, 3], 2.0))
        assert not expert.mu.value.any()
        assert expert.mu.shape == (2, 1)

    def test_empty_sequence(self) -> None:
        """Empty sequences cannot be encoded."""
        with pytest.raises(ValueError):
            _encoder().encode(make_sequence([], [], 1.0))

    def test_empty_reference_set(self) -> None:
        """No references falls back to the prior."""
        assert build_posterior(_encoder(), []) == PriorFallback(2)

    def test_one_expert_per_reference(self) -> None:
        """Each reference sequence contributes one expert."""
        seqs = [make_sequence([0.2], [0], 1.0, seq_id=f"s{i}") for i in range(3)]
        q = build_posterior(_encoder(), seqs)
        assert isinstance(q, PosteriorMixture)
        assert len(q.experts) == 3
        np.testing.assert_allclose(q.weights, 1.0 / 3.0)


class TestDensities:
    """Tests for log_density() and prior_log_density()."""

    def test_standard_normal_at_origin(self) -> None:
        """N(0, I) at z = 0 in two dimensions is -log(2 pi)."""
        q = PosteriorMixture((_expert([0.0, 0.0], [0.0, 0.0]),))
        z = dg.constant(np.zeros(2))
        assert log_density(q, z).item() == pytest.approx(-math.log(2.0 * math.pi))
        assert prior_log_density(z).item() == pytest.approx(-1.8379, abs=1e-4)

    def test_identical_experts_collapse(self) -> None:
        """Three identical experts have the single-expert density."""
        e = _expert([0.4, -1.0], [0.2, -0.3])
        z = dg.constant(np.array([0.1, 0.5]))
        single = log_density(PosteriorMixture((e,)), z).item()
        triple = log_density(PosteriorMixture((e, e, e)), z).item()
        assert triple == pytest.approx(single)

    def test_prior_fallback_density(self) -> None:
        """The fallback's density is the prior's."""
        z = dg.constant(np.array([0.3, -0.2]))
        assert log_density(PriorFallback(2), z).item() == pytest.approx(prior_log_density(z).item())

    @settings(max_examples=40, deadline=None)
    @given(
        params=st.lists(st.tuples(st.floats(-3.0, 3.0), st.floats(-1.0, 1.0)), min_size=2, max_size=5),
        point=st.floats(-3.0, 3.0),
        seed=st.integers(0, 1000),
    )
    def test_permutation_invariant(self, params: list[tuple[float, float]], point: float, seed: int) -> None:
        """Reordering the experts leaves the mixture density unchanged."""
        experts = [_expert([mu], [ls]) for mu, ls in params]
        order = np.random.default_rng(seed).permutation(len(experts))
        z = dg.constant(np.array([point]))
        a = log_density(PosteriorMixture(tuple(experts)), z).item()
        b = log_density(PosteriorMixture(tuple(experts[i] for i in order)), z).item()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


class TestSampling:
    """Tests for sample_z() and reparameterize()."""

    def test_zero_sigma_is_deterministic(self) -> None:
        """sigma -> 0 gives z = mu."""
        q = PosteriorMixture((_expert([1.5, -2.0], [-50.0, -50.0]),))
        z, info = sample_z(q, np.random.default_rng(0))
        np.testing.assert_allclose(z.value.ravel(), [1.5, -2.0])
        assert info.component == 0

    def test_mixture_mean(self) -> None:
        """Two tight experts at +1 and -1 average to about 0."""
        q = PosteriorMixture((_expert([1.0], [-30.0]), _expert([-1.0], [-30.0])))
        rng = np.random.default_rng(11)
        draws = [sample_z(q, rng)[0].item() for _ in range(100_000)]
        assert abs(np.mean(draws)) < 0.02

    def test_gradient_reaches_chosen_expert(self) -> None:
        """Reparameterized gradients flow into the chosen expert only."""
        store = ParameterStore()
        mus = [store.add(f"mu{i}", np.zeros(2)) for i in range(2)]
        q = PosteriorMixture(tuple(ExpertGaussian(m.node(), dg.constant(np.zeros(2))) for m in mus))
        z = reparameterize(q, 1, np.array([0.5, 0.5]))
        grads = dg.gradients(dg.sum_(z))
        assert mus[1] in grads and mus[0] not in grads

    def test_fallback_draw_is_noise(self) -> None:
        """A prior draw is the standard-normal noise itself."""
        z, info = sample_z(PriorFallback(3), np.random.default_rng(2))
        assert info.component is None
        np.testing.assert_allclose(z.value.ravel(), info.eps)


class TestKL:
    """Tests for kl_estimate() and gaussian_kl()."""

    def test_prior_kl_is_zero(self) -> None:
        """KL of the fallback against the prior is exactly zero."""
        q = PriorFallback(2)
        rng = np.random.default_rng(0)
        zs = [sample_z(q, rng)[0] for _ in range(10)]
        assert kl_estimate(q, zs).item() == pytest.approx(0.0, abs=1e-12)

    def test_converges_to_closed_form(self) -> None:
        """The MC estimate lies within 3 standard errors of the closed form at S = 10^4."""
        e = _expert([0.5, -0.3], [-0.4, 0.2])
        q = PosteriorMixture((e,))
        rng = np.random.default_rng(5)
        terms = []
        for _ in range(10_000):
            z, _ = sample_z(q, rng)
            terms.append(log_density(q, z).item() - prior_log_density(z).item())
        se = np.std(terms, ddof=1) / math.sqrt(len(terms))
        assert abs(np.mean(terms) - gaussian_kl(e)) < 3.0 * se

    def test_needs_samples(self) -> None:
        """kl_estimate() of no samples raises."""
        with pytest.raises(ValueError):
            kl_estimate(PriorFallback(2), [])
