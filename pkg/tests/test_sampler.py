"""Tests for personapp.sampler."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import make_sequence
from scipy import stats

from personapp import diffgraph as dg
from personapp.decoders import ConstantDecoder
from personapp.errors import NumericError
from personapp.model import PersonalizedMTPP
from personapp.sampler import ThinningConfig, sample_sequence, save_samples, thin, validate_dominance


class TestThinConstantRate:
    """Thinning a homogeneous Poisson process."""

    @pytest.fixture(scope="class")
    def samples(self) -> list[np.ndarray]:
        """200 draws of a rate-2 process on (0, 50)."""
        dec = ConstantDecoder([2.0])
        rng = np.random.default_rng(21)
        cfg = ThinningConfig(validation_points=50)
        return [thin(dec, None, make_sequence([], [], 50.0), (0.0, 50.0), cfg, rng).sequence.times for _ in range(200)]

    def test_mean_count(self, samples: list[np.ndarray]) -> None:
        """The mean count is 100 within 3 standard errors of the mean."""
        counts = np.array([t.size for t in samples])
        assert abs(counts.mean() - 100.0) < 3.0 * math.sqrt(100.0 / len(samples))

    def test_gaps_are_exponential(self, samples: list[np.ndarray]) -> None:
        """Inter-event gaps pass a KS test against Exponential(2) at 0.01."""
        gaps = np.concatenate([np.diff(np.concatenate([[0.0], t])) for t in samples])
        assert stats.kstest(gaps, "expon", args=(0.0, 0.5)).pvalue > 0.01

    def test_times_inside_window(self, samples: list[np.ndarray]) -> None:
        """Every sampled time lies in [0, 50)."""
        assert all(t.size == 0 or (t[0] >= 0.0 and t[-1] < 50.0) for t in samples)

    def test_mark_frequencies(self) -> None:
        """Marks follow lambda_k / lambda."""
        dec = ConstantDecoder([1.0, 3.0])
        seq = sample_sequence(dec, None, make_sequence([], [], 500.0), (0.0, 500.0), ThinningConfig(), np.random.default_rng(3))
        share = float(np.mean(seq.marks == 1))
        assert share == pytest.approx(0.75, abs=0.03)


class TestEscalation:
    """Dominating-rate escalation."""

    def test_escalates_once(self) -> None:
        """A dominating rate of 2 under a true rate of 3 doubles to 4 and succeeds."""
        dec = ConstantDecoder([3.0])
        result = thin(dec, None, make_sequence([], [], 5.0), (0.0, 5.0), ThinningConfig(lambda_star=2.0), np.random.default_rng(0))
        assert result.escalations == 1
        assert result.lambda_star == 4.0

    def test_exhausted(self) -> None:
        """Running out of escalations is a NumericError."""
        dec = ConstantDecoder([10.0])
        cfg = ThinningConfig(lambda_star=1.0, max_escalations=1)
        with pytest.raises(NumericError):
            thin(dec, None, make_sequence([], [], 50.0), (0.0, 50.0), cfg, np.random.default_rng(0))

    def test_default_start(self) -> None:
        """With no explicit rate, lambda* starts at start_factor times the total intensity."""
        dec = ConstantDecoder([0.5, 1.5])
        result = thin(dec, None, make_sequence([], [], 2.0), (0.0, 2.0), ThinningConfig(start_factor=4.0), np.random.default_rng(0))
        assert result.lambda_star == pytest.approx(8.0)
        assert result.escalations == 0


class TestValidateDominance:
    """Tests for validate_dominance()."""

    def test_dominated(self) -> None:
        """Rate 1 under lambda* = 2 passes."""
        seq = make_sequence([0.5, 1.5], [0, 0], 3.0)
        assert validate_dominance(ConstantDecoder([1.0]), None, seq, 2.0, 100, np.random.default_rng(0))

    def test_violated(self) -> None:
        """Rate 3 over lambda* = 2 fails."""
        seq = make_sequence([0.5, 1.5], [0, 0], 3.0)
        assert not validate_dominance(ConstantDecoder([3.0]), None, seq, 2.0, 100, np.random.default_rng(0))


class TestWindow:
    """Conditioning and window checks."""

    def test_prefix_kept(self) -> None:
        """Prefix events come first and new events lie in [c, T)."""
        prefix = make_sequence([0.4, 1.1], [0, 1], 6.0)
        seq = sample_sequence(ConstantDecoder([1.0, 1.0]), None, prefix, (2.0, 6.0), ThinningConfig(), np.random.default_rng(1))
        assert seq.events[:2] == prefix.events
        assert all(2.0 <= ev.time < 6.0 for ev in seq.events[2:])
        assert seq.horizon == 6.0

    def test_empty_window(self) -> None:
        """c >= T raises."""
        with pytest.raises(ValueError):
            thin(ConstantDecoder([1.0]), None, make_sequence([], [], 5.0), (5.0, 5.0), ThinningConfig(), np.random.default_rng(0))

    def test_prefix_past_start(self) -> None:
        """A prefix running past c raises."""
        prefix = make_sequence([3.0], [0], 5.0)
        with pytest.raises(ValueError):
            thin(ConstantDecoder([1.0]), None, prefix, (2.0, 5.0), ThinningConfig(), np.random.default_rng(0))

    def test_config_validation(self) -> None:
        """An escalation factor of 1 never grows lambda*."""
        with pytest.raises(ValueError):
            ThinningConfig(escalation=1.0)

    def test_neural_decoder(self, tiny_model: PersonalizedMTPP) -> None:
        """A random neural decoder samples within its window."""
        z = dg.constant(np.array([0.2, -0.4]))
        result = thin(tiny_model.decoder, z, make_sequence([0.3], [2], 4.0), (1.0, 4.0), ThinningConfig(), np.random.default_rng(8))
        assert all(1.0 <= ev.time < 4.0 for ev in result.sequence.events[1:])
        assert all(0 <= ev.mark < 4 for ev in result.sequence.events)


class TestSaveSamples:
    """Tests for save_samples()."""

    def test_provenance(self, tmp_path: Path) -> None:
        """Each line carries the model id, seed and lambda* used."""
        result = thin(ConstantDecoder([1.0]), None, make_sequence([], [], 3.0), (0.0, 3.0), ThinningConfig(lambda_star=5.0), np.random.default_rng(0))
        path = tmp_path / "out" / "samples.jsonl"
        save_samples([result, result], path, "rmtpp-moe", 42)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert record["provenance"] == {"model": "rmtpp-moe", "seed": 42, "lambda_star": 5.0, "escalations": 0}
        assert len(record["events"]) == len(result.sequence)
