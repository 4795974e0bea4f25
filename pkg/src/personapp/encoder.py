"""Amortized mixture-of-experts posterior over the user embedding z.

Each reference sequence is read by a bidirectional GRU over inputs
[Phi(t_i); k_i]; the final states of both directions feed two affine heads
giving an expert N(mu, diag sigma^2). The posterior is the uniform mixture of
the experts, or the standard-normal prior when the reference set is empty.

Sampling picks a component uniformly and reparameterizes z = mu + sigma * eps,
so gradients reach only the chosen expert. The KL term is the Monte-Carlo
estimate mean_s [log q(z_s) - log p(z_s)], which depends on every expert.
"""

from __future__ import annotations

import math
from collections.abc import Sequence as SequenceOf
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import Node, ParameterStore
from .embeddings import MarkEmbedding, TemporalEmbeddingSpec, embed_mark, embed_time
from .errors import ShapeError
from .events import Sequence
from .layers import GRUCell, Linear

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder sizes."""

    d_time: int = 64
    d_mark: int = 32
    enc_hidden: int = 64
    latent: int = 32

    def __post_init__(self) -> None:
        if min(self.d_time, self.d_mark, self.enc_hidden, self.latent) < 1:
            raise ValueError(f"encoder sizes must be positive: {self}")


@dataclass(frozen=True)
class ExpertGaussian:
    """One mixture component N(mu, diag exp(log_sigma)^2)."""

    mu: Node
    log_sigma: Node

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.value)


@dataclass(frozen=True)
class PosteriorMixture:
    """Uniform-weight mixture over one expert per reference sequence."""

    experts: tuple[ExpertGaussian, ...]

    def __post_init__(self) -> None:
        if not self.experts:
            raise ValueError("a mixture needs at least one expert")

    @property
    def latent_size(self) -> int:
        return self.experts[0].mu.shape[0]

    @property
    def weights(self) -> np.ndarray:
        n = len(self.experts)
        return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class PriorFallback:
    """The standard-normal prior, used when a user has no reference sequences."""

    latent_size: int


Posterior = PosteriorMixture | PriorFallback


@dataclass(frozen=True)
class Reparameterization:
    """The frozen randomness behind one z draw."""

    component: int | None
    eps: np.ndarray


class SequenceEncoder:
    def __init__(
        self,
        store: ParameterStore,
        config: EncoderConfig,
        marks: MarkEmbedding,
        time_spec: TemporalEmbeddingSpec,
        prefix: str = "encoder",
    ) -> None:
        if marks.d_mark != config.d_mark or time_spec.d_time != config.d_time:
            raise ShapeError("encoder", (marks.d_mark, time_spec.d_time), (config.d_mark, config.d_time))
        self.config = config
        self.marks = marks
        self.time_spec = time_spec
        in_size = config.d_time + config.d_mark
        H = config.enc_hidden
        self.forward_cell = GRUCell(store, f"{prefix}.fwd", in_size, H)
        self.backward_cell = GRUCell(store, f"{prefix}.bwd", in_size, H)
        self.forward_h0 = store.bias(f"{prefix}.fwd.h0", H)
        self.backward_h0 = store.bias(f"{prefix}.bwd.h0", H)
        self.mu_head = Linear(store, f"{prefix}.mu", 2 * H, config.latent)
        self.sigma_head = Linear(store, f"{prefix}.log_sigma", 2 * H, config.latent)

    def _inputs(self, seq: Sequence) -> list[Node]:
        out = []
        prev = 0.0
        for ev in seq.events:
            out.append(dg.concat([embed_time(ev.time, prev, self.time_spec), embed_mark(self.marks, ev.mark)]))
            prev = ev.time
        return out

    def encode(self, seq: Sequence) -> ExpertGaussian:
        if not seq.events:
            raise ValueError(f"cannot encode empty sequence {seq.seq_id}")
        inputs = self._inputs(seq)
        h_fwd = self.forward_h0.node()
        for x in inputs:
            h_fwd = self.forward_cell(x, h_fwd)
        h_bwd = self.backward_h0.node()
        for x in reversed(inputs):
            h_bwd = self.backward_cell(x, h_bwd)
        h = dg.concat([h_fwd, h_bwd])
        return ExpertGaussian(mu=self.mu_head(h), log_sigma=self.sigma_head(h))


def encode_sequence(encoder: SequenceEncoder, seq: Sequence) -> ExpertGaussian:
    return encoder.encode(seq)


def build_posterior(encoder: SequenceEncoder, refs: SequenceOf[Sequence]) -> Posterior:
    if not refs:
        return PriorFallback(encoder.config.latent)
    return PosteriorMixture(tuple(encoder.encode(seq) for seq in refs))


def reparameterize(q: Posterior, component: int | None, eps: np.ndarray) -> Node:
    """z for a fixed component choice and standard-normal noise."""
    noise = dg.constant(np.asarray(eps, dtype=np.float64).reshape(-1, 1))
    if isinstance(q, PriorFallback):
        return noise
    if component is None:
        raise ValueError("a mixture draw needs a component index")
    expert = q.experts[component]
    return expert.mu + dg.exp(expert.log_sigma) * noise


def sample_z(q: Posterior, rng: np.random.Generator) -> tuple[Node, Reparameterization]:
    """One reparameterized draw from q."""
    component = None if isinstance(q, PriorFallback) else int(rng.integers(len(q.experts)))
    eps = rng.standard_normal(q.latent_size)
    info = Reparameterization(component, eps)
    return reparameterize(q, component, eps), info


def _gaussian_log_density(z: Node, mu: Node, log_sigma: Node) -> Node:
    scaled = (z - mu) * dg.exp(-log_sigma)
    d = z.shape[0]
    return -0.5 * dg.sum_(scaled * scaled) - dg.sum_(log_sigma) - 0.5 * d * LOG_2PI


def prior_log_density(z: Node) -> Node:
    """log N(z; 0, I)."""
    return -0.5 * dg.sum_(z * z) - 0.5 * z.shape[0] * LOG_2PI


def log_density(q: Posterior, z: Node) -> Node:
    """log q(z), with log-sum-exp over the mixture components."""
    if z.shape != (q.latent_size, 1):
        raise ShapeError("log_density", z.shape, (q.latent_size, 1))
    if isinstance(q, PriorFallback):
        return prior_log_density(z)
    parts = [_gaussian_log_density(z, e.mu, e.log_sigma) for e in q.experts]
    if len(parts) == 1:
        return parts[0]
    return dg.logsumexp(dg.concat(parts)) - math.log(len(parts))


def kl_estimate(q: Posterior, z_samples: SequenceOf[Node]) -> Node:
    """Monte-Carlo KL(q || N(0, I)) from draws of q."""
    if not z_samples:
        raise ValueError("kl_estimate needs at least one sample")
    terms = [log_density(q, z) - prior_log_density(z) for z in z_samples]
    return dg.add_all(terms) / len(terms)


def gaussian_kl(expert: ExpertGaussian) -> float:
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I))."""
    mu = expert.mu.value
    log_sigma = expert.log_sigma.value
    return float(0.5 * np.sum(np.exp(2.0 * log_sigma) + mu * mu - 1.0 - 2.0 * log_sigma))
