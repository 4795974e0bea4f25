"""Tests for personapp.decoders."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from personapp import diffgraph as dg
from personapp.decoders import (
    ConstantDecoder,
    Decoder,
    DecoderConfig,
    NHPDecoder,
    RMTPPDecoder,
    build_decoder,
    rmtpp_compensator,
    roll_states,
)
from personapp.diffgraph import ParameterStore, numeric_gradient, relative_error
from personapp.embeddings import MarkEmbedding
from personapp.errors import ShapeError
from personapp.events import Event


def _decoder(model: str, K: int = 3, latent: int = 2, seed: int = 0) -> RMTPPDecoder | NHPDecoder:
    store = ParameterStore(seed=seed)
    config = DecoderConfig(model=model, hidden_size=4, d_mark=3, latent_size=latent, K=K)  # type: ignore[arg-type]
    return build_decoder(store, config, MarkEmbedding(store, K, 3))


def _zero_params(decoder: RMTPPDecoder | NHPDecoder) -> None:
    for name in ("W", "w", "b"):
        param = getattr(decoder, name, None)
        if param is not None:
            param.value[...] = 0.0


@pytest.fixture(params=["rmtpp", "nhp"])
def decoder(request: pytest.FixtureRequest) -> RMTPPDecoder | NHPDecoder:
    """A small personalized decoder of each kind."""
    return _decoder(request.param)


class TestInitState:
    """Tests for init_state()."""

    def test_zero_init_weights(self) -> None:
        """W_0 = 0, b_0 = 0 gives h_0 = 0."""
        dec = _decoder("rmtpp")
        dec.init.weight.value[...] = 0.0
        state = dec.init_state(dg.constant(np.array([1.0, -2.0])))
        assert not state.h.value.any()
        assert state.t_last == 0.0

    def test_zero_z_gives_tanh_bias(self) -> None:
        """z = 0 gives h_0 = tanh(b_0) whatever W_0 is."""
        dec = _decoder("rmtpp")
        dec.init.bias.value[...] = 0.5
        state = dec.init_state(dg.constant(np.zeros(2)))
        np.testing.assert_allclose(state.h.value, math.tanh(0.5))

    def test_missing_z(self, decoder: Decoder) -> None:
        """A personalized decoder requires z."""
        with pytest.raises(ShapeError):
            decoder.init_state(None)

    def test_decoder_only(self) -> None:
        """latent_size 0 ignores z and starts from a learned h_0."""
        dec = _decoder("nhp", latent=0)
        assert dec.init_state(None).h.shape == (4, 1)

    def test_nhp_decay_positive(self) -> None:
        """The initial NHP decay is a softplus."""
        state = _decoder("nhp").init_state(dg.constant(np.zeros(2)))
        assert state.decay is not None and np.all(state.decay.value > 0.0)


class TestUpdateAndRates:
    """Tests for update_state() and intensity queries."""

    def test_rates_positive(self, decoder: Decoder) -> None:
        """Every mark rate is positive and finite."""
        z = dg.constant(np.array([0.3, -0.7]))
        states = roll_states(decoder, z, [Event(0.5, 1), Event(1.2, 0)])
        rates = decoder.rates(states[-1], np.array([1.3, 2.0, 9.0])).value
        assert rates.shape == (3, 3)
        assert np.all(rates > 0.0) and np.all(np.isfinite(rates))

    def test_update_needs_later_event(self, decoder: Decoder) -> None:
        """An event at or before t_last is rejected."""
        z = dg.constant(np.zeros(2))
        state = decoder.update_state(decoder.init_state(z), Event(1.0, 0), z)
        with pytest.raises(ValueError):
            decoder.update_state(state, Event(1.0, 1), z)

    def test_first_event_at_zero(self, decoder: Decoder) -> None:
        """An event exactly at t=0 is accepted first."""
        z = dg.constant(np.zeros(2))
        assert decoder.update_state(decoder.init_state(z), Event(0.0, 0), z).n_events == 1

    def test_intensity_needs_later_time(self, decoder: Decoder) -> None:
        """intensity() requires t > t_last."""
        z = dg.constant(np.zeros(2))
        state = decoder.update_state(decoder.init_state(z), Event(1.0, 0), z)
        with pytest.raises(ValueError):
            decoder.intensity(state, 1.0)

    def test_mark_distribution_sums_to_one(self, decoder: Decoder) -> None:
        """mark_distribution() is a probability vector."""
        z = dg.constant(np.zeros(2))
        probs = decoder.mark_distribution(decoder.init_state(z), 0.4)
        assert probs.sum() == pytest.approx(1.0)

    def test_rmtpp_zero_parameters(self) -> None:
        """W = w = b = 0 gives unit rates and total K."""
        dec = _decoder("rmtpp", K=3)
        _zero_params(dec)
        state = dec.init_state(dg.constant(np.zeros(2)))
        assert dec.intensity(state, 0.7).rates.tolist() == [1.0, 1.0, 1.0]
        assert dec.total_intensity(state, 2.0) == pytest.approx(3.0)

    def test_rmtpp_exponent_clamped(self) -> None:
        """Huge exponents are clamped and counted instead of overflowing."""
        dec = _decoder("rmtpp", K=1)
        _zero_params(dec)
        dec.w.value[...] = 100.0
        state = dec.init_state(dg.constant(np.zeros(2)))
        rates = dec.rates(state, np.array([10.0])).value
        assert rates[0, 0] == pytest.approx(math.exp(30.0))
        assert dec.clamps.count == 1

    def test_nhp_rates_decay_toward_target(self) -> None:
        """With c_bar = 0 and o = 1, NHP rates follow softplus(W tanh(c e^{-delta dt}))."""
        dec = _decoder("nhp", K=2, latent=0)
        H = dec.config.hidden_size
        c = np.linspace(-1.0, 1.0, H).reshape(-1, 1)
        delta = np.full((H, 1), 0.8)
        base = dec.init_state(None)
        state = type(base)(
            h=base.h,
            t_last=0.0,
            cell=dg.constant(c),
            cell_target=dg.constant(np.zeros((H, 1))),
            decay=dg.constant(delta),
            gate_out=dg.constant(np.ones((H, 1))),
        )
        times = np.array([0.3, 1.5])
        got = dec.rates(state, times).value
        W = dec.W.value
        expected = np.stack([np.logaddexp(0.0, W @ np.tanh(c[:, 0] * np.exp(-0.8 * t))) for t in times], axis=1)
        np.testing.assert_allclose(got, expected)


class TestConstantDecoder:
    """Tests for ConstantDecoder."""

    def test_ignores_history(self) -> None:
        """Rates are fixed regardless of events."""
        dec = ConstantDecoder([0.5, 1.5])
        state = dec.update_state(dec.init_state(None), Event(0.4, 1), None)
        assert dec.intensity(state, 3.0).rates.tolist() == [0.5, 1.5]
        assert isinstance(dec, Decoder)

    def test_rejects_non_positive(self) -> None:
        """Rates must be positive."""
        with pytest.raises(ValueError):
            ConstantDecoder([1.0, 0.0])

    def test_mark_range(self) -> None:
        """Marks outside [0, K) are rejected."""
        dec = ConstantDecoder([1.0])
        with pytest.raises(ValueError):
            dec.update_state(dec.init_state(None), Event(0.1, 1), None)


class TestRMTPPCompensator:
    """Tests for rmtpp_compensator()."""

    def test_constant_rates(self) -> None:
        """w = 0 and unit rates over K=2 for length 3 integrate to 6."""
        dec = _decoder("rmtpp", K=2)
        _zero_params(dec)
        state = dec.init_state(dg.constant(np.zeros(2)))
        assert rmtpp_compensator(dec, state, 1.0, 4.0) == pytest.approx(6.0)

    def test_decaying_rate(self) -> None:
        """c = 0, w = -1 integrates to 1 over (0, infinity)."""
        dec = _decoder("rmtpp", K=1)
        _zero_params(dec)
        dec.w.value[...] = -1.0
        state = dec.init_state(dg.constant(np.zeros(2)))
        assert rmtpp_compensator(dec, state, 0.0, 60.0) == pytest.approx(1.0)

    def test_interval_check(self) -> None:
        """Intervals before the segment start raise."""
        dec = _decoder("rmtpp")
        z = dg.constant(np.zeros(2))
        state = dec.update_state(dec.init_state(z), Event(1.0, 0), z)
        with pytest.raises(ValueError):
            rmtpp_compensator(dec, state, 0.5, 2.0)


class TestDecoderGradients:
    """Finite-difference checks through a short event history."""

    @pytest.mark.parametrize("model", ["rmtpp", "nhp"])
    def test_log_rate_gradient(self, model: str) -> None:
        """d log lambda_k(t) / d params matches central differences."""
        dec = _decoder(model, seed=4)
        store_params = {p.name: p for p in _params(dec)}
        z = dg.constant(np.array([0.2, -0.1]))
        events = [Event(0.3, 2), Event(0.9, 0)]

        def build() -> dg.Node:
            state = roll_states(dec, z, events)[-1]
            return dg.log(dg.pick(dec.rates(state, np.array([1.4])), 1, 0))

        grads = dg.gradients(build())
        for name, param in store_params.items():
            if param not in grads:
                continue
            numeric = numeric_gradient(lambda: build().item(), param)
            assert relative_error(grads[param], numeric, floor=1e-3) < 1e-4, name


def _params(dec: RMTPPDecoder | NHPDecoder) -> list[dg.Parameter]:
    marks = dec.marks.table
    if isinstance(dec, RMTPPDecoder):
        return [marks, dec.W, dec.w, dec.b, dec.gru.W["z"], dec.init.weight]
    return [marks, dec.W, dec.cell.weight, dec.cell.bias, dec.init.bias, dec.init.weight]


class TestMarkovState:
    """The state alone determines future intensities."""

    def test_clone_matches_rebuilt(self, decoder: RMTPPDecoder | NHPDecoder) -> None:
        """A copied state and one rebuilt from the same history give identical rates."""
        z = dg.constant(np.array([0.4, -0.9]))
        events = [Event(0.2, 0), Event(0.7, 2), Event(1.6, 1)]
        state = roll_states(decoder, z, events)[-1]
        clone = replace(state)
        rebuilt = roll_states(decoder, z, events)[-1]
        times = np.array([1.7, 2.5, 6.0])
        expected = decoder.rates(state, times).value
        np.testing.assert_array_equal(decoder.rates(clone, times).value, expected)
        np.testing.assert_array_equal(decoder.rates(rebuilt, times).value, expected)

    def test_initial_rates_depend_on_z(self, decoder: RMTPPDecoder | NHPDecoder) -> None:
        """Before the first event, different z give different intensities."""
        times = np.array([0.1, 0.5])
        r1 = decoder.rates(decoder.init_state(dg.constant(np.array([3.0, -2.0]))), times).value
        r2 = decoder.rates(decoder.init_state(dg.constant(np.array([-3.0, 2.0]))), times).value
        assert not np.allclose(r1, r2)


class TestRMTPPLogAffine:
    """Within a segment RMTPP's log-rates are affine in time."""

    def test_three_points_collinear(self) -> None:
        """Slopes between three query times agree and equal w."""
        dec = _decoder("rmtpp", seed=7)
        z = dg.constant(np.array([0.5, 0.1]))
        state = roll_states(dec, z, [Event(0.4, 1), Event(1.0, 0)])[-1]
        t = np.array([1.2, 1.9, 3.5])
        log_rates = np.log(dec.rates(state, t).value)
        first = (log_rates[:, 1] - log_rates[:, 0]) / (t[1] - t[0])
        second = (log_rates[:, 2] - log_rates[:, 1]) / (t[2] - t[1])
        np.testing.assert_allclose(first, second, atol=1e-9)
        np.testing.assert_allclose(first, dec.w.value[:, 0], atol=1e-9)


class TestNHPInterpolation:
    """Continuity and limits of the interpolated hidden state."""

    def test_continuous_after_update(self) -> None:
        """h(t_last + 0) equals the post-update h."""
        dec = _decoder("nhp", seed=3)
        assert isinstance(dec, NHPDecoder)
        z = dg.constant(np.array([0.3, -0.6]))
        state = roll_states(dec, z, [Event(0.5, 1), Event(1.1, 2)])[-1]
        h = dec.hidden_at(state, np.array([state.t_last + 1e-12])).value
        np.testing.assert_allclose(h, state.h.value, atol=1e-10)

    @pytest.mark.parametrize("latent", [2, 0])
    def test_continuous_at_start(self, latent: int) -> None:
        """h(0+) equals h_0 for both the personalized and decoder-only variants."""
        dec = _decoder("nhp", latent=latent, seed=5)
        assert isinstance(dec, NHPDecoder)
        z = dg.constant(np.array([1.5, -0.5])) if latent else None
        state = dec.init_state(z)
        h = dec.hidden_at(state, np.array([1e-12, 2.0])).value
        np.testing.assert_allclose(h, np.tile(state.h.value, (1, 2)), atol=1e-10)
        if latent:
            np.testing.assert_allclose(state.h.value, np.tanh(dec.init(z).value))

    def test_long_gap_reaches_target(self) -> None:
        """As dt grows, h(t) tends to o * tanh(c_bar)."""
        dec = _decoder("nhp", seed=2)
        assert isinstance(dec, NHPDecoder)
        z = dg.constant(np.array([-0.2, 0.8]))
        state = roll_states(dec, z, [Event(0.6, 0)])[-1]
        assert state.cell_target is not None and state.gate_out is not None
        h = dec.hidden_at(state, np.array([state.t_last + 1e6])).value
        np.testing.assert_allclose(h[:, 0], (state.gate_out.value * np.tanh(state.cell_target.value))[:, 0], atol=1e-12)


class TestInitGradient:
    """d h_0 / d z against central differences."""

    @pytest.mark.parametrize("model", ["rmtpp", "nhp"])
    def test_h0_gradient(self, model: str) -> None:
        """A weighted sum of h_0 differentiates correctly in z."""
        dec = _decoder(model, seed=6)
        z = ParameterStore(seed=1).add("z", np.array([[0.3], [-0.4]]))
        weights = dg.constant(np.array([1.0, -2.0, 0.5, 3.0]))

        def build() -> dg.Node:
            return dg.sum_(dec.init_state(z.node()).h * weights)

        grads = dg.gradients(build())
        numeric = numeric_gradient(lambda: build().item(), z)
        assert relative_error(grads[z], numeric, floor=1e-6) < 1e-4
