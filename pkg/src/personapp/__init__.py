"""personapp: personalized neural marked temporal point processes.

A recurrent decoder (RMTPP or a continuous-time LSTM) models one user's
event stream; a mixture-of-experts posterior over a user latent z, built
from that user's other sequences, personalizes it. Training maximizes a
beta-weighted ELBO with Monte-Carlo compensators, and every negative
log-likelihood splits into the sequence cross-entropy (SCE) and the
point-process terms PP+ and PP-.

## Quick Start

```python
from personapp import ModelConfig, PersonalizedMTPP, TrainConfig, generate_population, train

pop = generate_population(n_users=50, n_valid_users=10, n_test_users=10, K=5)
model = PersonalizedMTPP(ModelConfig(model="rmtpp", personalization="moe"), K=5, t_max=10.0)
result = train(model, pop.train, pop.valid, TrainConfig(max_epochs=3))
print(result.best_valid_nll)
```

## Checking claims

```python
from personapp import Improvement, Evidence, falsify

verdict = falsify(
    Improvement("moe beats none", k=3),
    Evidence({"a": 41.2, "b": 43.9, "se_a": 0.3, "se_b": 0.3}),
)
print(verdict.verdict)  # SURVIVED
```
"""

__version__ = "0.1.0"

from .claims import Claim, CoinFlipBand, FalsificationForm, Improvement, StandardErrorBand, Threshold, Tolerance
from .decoders import ConstantDecoder, DecoderConfig, DecoderState, NHPDecoder, RMTPPDecoder
from .encoder import EncoderConfig, PosteriorMixture
from .errors import DataError, NumericError, PersonappError, ShapeError, UsageError
from .events import Dataset, Event, Sequence, UserRecord, load_dataset, load_splits, save_dataset
from .falsification import claim, falsify, quick_check, verified
from .likelihood import LLBreakdown, MCConfig, elbo, log_likelihood
from .model import ModelConfig, PersonalizedMTPP
from .predictor import PredictConfig, predict_next
from .sampler import ThinningConfig, thin
from .synthgen import SynthConfig, generate_population
from .trainer import AblationPlan, TrainConfig, curriculum_ablate, evaluate, train
from .verdicts import Evidence, Verdict, VerdictResult

__all__ = [
    "__version__",
    # Event core
    "Event",
    "Sequence",
    "UserRecord",
    "Dataset",
    "load_dataset",
    "load_splits",
    "save_dataset",
    # Model
    "DecoderConfig",
    "DecoderState",
    "ConstantDecoder",
    "RMTPPDecoder",
    "NHPDecoder",
    "EncoderConfig",
    "PosteriorMixture",
    "ModelConfig",
    "PersonalizedMTPP",
    # Likelihood and training
    "MCConfig",
    "LLBreakdown",
    "log_likelihood",
    "elbo",
    "TrainConfig",
    "AblationPlan",
    "train",
    "evaluate",
    "curriculum_ablate",
    # Sampling and prediction
    "ThinningConfig",
    "thin",
    "PredictConfig",
    "predict_next",
    # Synthetic data
    "SynthConfig",
    "generate_population",
    # Claims and verdicts
    "Claim",
    "FalsificationForm",
    "Tolerance",
    "StandardErrorBand",
    "Improvement",
    "CoinFlipBand",
    "Threshold",
    "Evidence",
    "Verdict",
    "VerdictResult",
    "falsify",
    "quick_check",
    "claim",
    "verified",
    # Errors
    "PersonappError",
    "UsageError",
    "DataError",
    "NumericError",
    "ShapeError",
]
