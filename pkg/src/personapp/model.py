"""Model variants: {RMTPP, NHP} decoder x {MoE posterior, decoder-only}.

A PersonalizedMTPP owns one ParameterStore holding the shared mark
embedding, the decoder and, for the MoE variants, the sequence encoder.
Checkpoints are the diffgraph JSON format with the model config, K and
T_max stored as metadata, so `load` can rebuild the same architecture.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence as SequenceOf
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np

from .decoders import DecoderConfig, ModelKind, build_decoder
from .diffgraph import Node, ParameterStore, read_checkpoint
from .embeddings import MarkEmbedding, TemporalEmbeddingSpec
from .encoder import EncoderConfig, Posterior, SequenceEncoder, build_posterior, sample_z
from .errors import DataError
from .events import Sequence
from .likelihood import ElboTerms, MCConfig, elbo

logger = logging.getLogger(__name__)

Personalization = Literal["moe", "none"]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one model variant."""

    model: ModelKind = "rmtpp"
    personalization: Personalization = "moe"
    """"moe" adds the user embedding z and its encoder; "none" is decoder-only."""

    hidden_size: int = 64
    d_mark: int = 32
    d_time: int = 64
    enc_hidden: int = 64
    latent: int = 32
    init_seed: int = 0
    """Seed for parameter initialization."""

    def __post_init__(self) -> None:
        if self.model not in ("rmtpp", "nhp"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.personalization not in ("moe", "none"):
            raise ValueError(f"unknown personalization {self.personalization!r}")

    @property
    def variant(self) -> str:
        return f"{self.model}-{self.personalization}"

    def decoder_config(self, K: int) -> DecoderConfig:
        latent = self.latent if self.personalization == "moe" else 0
        return DecoderConfig(self.model, self.hidden_size, self.d_mark, latent, K)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.d_time, self.d_mark, self.enc_hidden, self.latent)


class PersonalizedMTPP:
    def __init__(self, config: ModelConfig, K: int, t_max: float) -> None:
        self.config = config
        self.K = K
        self.t_max = t_max
        self.store = ParameterStore(seed=config.init_seed)
        self.marks = MarkEmbedding(self.store, K, config.d_mark)
        self.time_spec = TemporalEmbeddingSpec(config.d_time, t_max)
        self.decoder = build_decoder(self.store, config.decoder_config(K), self.marks)
        self.encoder: SequenceEncoder | None = None
        if config.personalization == "moe":
            self.encoder = SequenceEncoder(self.store, config.encoder_config(), self.marks, self.time_spec)
        logger.debug("built %s with %d parameter tensors", config.variant, len(self.store))

    @property
    def personalized(self) -> bool:
        return self.encoder is not None

    @property
    def variant(self) -> str:
        return self.config.variant

    def posterior(self, refs: SequenceOf[Sequence]) -> Posterior | None:
        """q(z | refs), or None for the decoder-only variant."""
        if self.encoder is None:
            return None
        return build_posterior(self.encoder, refs)

    def draw_z(self, refs: SequenceOf[Sequence], rng: np.random.Generator, n: int = 1) -> list[Node | None]:
        """n reparameterized draws of z; [None] * n for the decoder-only variant."""
        q = self.posterior(refs)
        if q is None:
            return [None] * n
        return [sample_z(q, rng)[0] for _ in range(n)]

    def objective(
        self,
        refs: SequenceOf[Sequence],
        target: Sequence,
        beta: float,
        mc: MCConfig,
        rng: np.random.Generator,
        *,
        training: bool = True,
    ) -> ElboTerms:
        return elbo(self.decoder, self.encoder, refs, target, beta, mc, rng, training=training)

    # Checkpoints

    def metadata(self) -> dict[str, Any]:
        return {"model": asdict(self.config), "K": self.K, "t_max": self.t_max, "variant": self.variant}

    def save(self, path: str | Path, **extra: Any) -> None:
        self.store.save(path, {**self.metadata(), **extra})

    @classmethod
    def load(cls, path: str | Path) -> PersonalizedMTPP:
        payload = read_checkpoint(path)
        meta = payload.get("metadata", {})
        try:
            config = ModelConfig(**meta["model"])
            model = cls(config, int(meta["K"]), float(meta["t_max"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"checkpoint metadata does not describe a model: {exc}", path=str(path)) from exc
        model.store.load(path)
        return model
