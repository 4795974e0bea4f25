"""Pytest configuration and shared fixtures for personapp tests."""

from __future__ import annotations

import numpy as np
import pytest

from personapp import (
    ConstantDecoder,
    Dataset,
    Event,
    MCConfig,
    ModelConfig,
    PersonalizedMTPP,
    Sequence,
    UserRecord,
)
from personapp.synthgen import Population, SynthConfig, generate_population
from personapp.trainer import TrainConfig


def make_sequence(times: list[float], marks: list[int], horizon: float, user: str = "u1", seq_id: str = "s1") -> Sequence:
    """Build a Sequence from parallel time and mark lists."""
    return Sequence(tuple(Event(t, k) for t, k in zip(times, marks)), horizon, user, seq_id)


@pytest.fixture
def rng() -> np.random.Generator:
    """A fixed-seed generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def three_events() -> Sequence:
    """Three single-mark events in [0, 2]."""
    return make_sequence([0.3, 0.9, 1.6], [0, 0, 0], 2.0)


@pytest.fixture
def unit_rate() -> ConstantDecoder:
    """Homogeneous Poisson decoder, K=1, rate 1."""
    return ConstantDecoder([1.0])


@pytest.fixture
def tiny_dataset() -> Dataset:
    """Three users with two short sequences each over K=4 marks."""
    users = []
    for u in range(3):
        uid = f"u{u}"
        seqs = (
            make_sequence([0.5, 1.0 + u * 0.1, 2.5], [u, u, (u + 1) % 4], 4.0, uid, f"{uid}-s0"),
            make_sequence([0.2, 1.7, 3.1, 3.9], [u, (u + 2) % 4, u, u], 4.0, uid, f"{uid}-s1"),
        )
        users.append(UserRecord(uid, seqs))
    return Dataset(tuple(users), K=4, split="train")


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Small MoE RMTPP architecture."""
    return ModelConfig(model="rmtpp", personalization="moe", hidden_size=4, d_mark=3, d_time=4, enc_hidden=3, latent=2)


@pytest.fixture
def tiny_model(tiny_model_config: ModelConfig) -> PersonalizedMTPP:
    """An untrained MoE RMTPP over K=4."""
    return PersonalizedMTPP(tiny_model_config, K=4, t_max=4.0)


@pytest.fixture
def fast_mc() -> MCConfig:
    """Cheap Monte-Carlo settings."""
    return MCConfig(train_samples=20, eval_samples=30, train_z_samples=1, eval_z_samples=2, seed=0)


@pytest.fixture
def fast_train() -> TrainConfig:
    """Two short epochs."""
    return TrainConfig(lr=0.01, batch_size=4, max_epochs=2, patience=2, max_refs=3, seed=0)


@pytest.fixture
def small_synth() -> SynthConfig:
    """A small population preset."""
    return SynthConfig(n_users=6, n_valid_users=3, n_test_users=3, seqs_per_user=2, K=4, T=10.0, mean_rate=1.0, min_events=3, max_events=60, seed=7)


@pytest.fixture
def population(small_synth: SynthConfig) -> Population:
    """Population generated from `small_synth`."""
    return generate_population(small_synth)
