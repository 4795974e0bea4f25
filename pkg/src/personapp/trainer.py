"""Optimization: Adam with linear warmup, cyclical beta annealing, early
stopping, held-out evaluation and the curriculum data-size ablation.

Every minibatch item gets its own tape and its own random substream keyed
by (seed, epoch, step, position). Items run on a thread pool; their
gradients come back in batch order and are summed in that order, so the
result does not depend on the number of workers.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Iterable
from collections.abc import Sequence as SequenceOf
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .diffgraph import Parameter
from .errors import DataError, NumericError
from .events import Dataset, Sequence
from .likelihood import MCConfig
from .model import PersonalizedMTPP
from .seeding import substream

logger = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings."""

    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: float = 1.0
    """The learning rate ramps linearly from 0 to lr over this many epochs."""

    beta_max: float = 1e-3
    """Ceiling of the KL weight."""

    beta_period: float = 0.2
    """Length of one beta ramp, as a fraction of an epoch."""

    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 3
    """Epochs without validation improvement before stopping."""

    eval_every: int = 1
    """Validate every this many epochs."""

    max_refs: int = 8
    """Cap on the reference set built for each target sequence."""

    include_target_in_refs: bool = False
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.beta_max < 0.0:
            raise ValueError(f"beta_max must be non-negative, got {self.beta_max}")
        if not 0.0 < self.beta_period <= 1.0:
            raise ValueError(f"beta_period must lie in (0, 1], got {self.beta_period}")
        if min(self.batch_size, self.max_epochs, self.patience, self.eval_every, self.threads) < 1:
            raise ValueError(f"counts must be positive: {self}")
        if self.max_refs < 0 or self.warmup_epochs < 0.0:
            raise ValueError(f"max_refs and warmup_epochs must be non-negative: {self}")


@dataclass(frozen=True)
class AblationPlan:
    """Nested training-set fractions for the curriculum ablation."""

    fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0)
    convergence_delta: float = 0.1
    """A stage ends once validation NLL improves by less than this."""

    def __post_init__(self) -> None:
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr or any(not 0.0 < f <= 1.0 for f in fr):
            raise ValueError(f"fractions must lie in (0, 1]: {fr}")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError(f"fractions must be strictly increasing: {fr}")
        if self.convergence_delta < 0.0:
            raise ValueError(f"convergence_delta must be non-negative, got {self.convergence_delta}")


# ---------------------------------------------------------------------------
# Schedules and optimizer
# ---------------------------------------------------------------------------


def warmup_lr(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """lr * min(1, step / warmup steps); 0 at step 0."""
    span = cfg.warmup_epochs * steps_per_epoch
    if span <= 0.0:
        return cfg.lr
    return cfg.lr * min(1.0, step / span)


def cyclical_beta(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Sawtooth 0 -> beta_max, restarting every beta_period epochs."""
    epochs = step / steps_per_epoch
    phase = math.fmod(epochs, cfg.beta_period) / cfg.beta_period
    return cfg.beta_max * min(1.0, phase)


class Adam:
    """Adam with bias correction; the learning rate is supplied per step."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    @classmethod
    def from_config(cls, params: Iterable[Parameter], cfg: TrainConfig) -> Adam:
        return cls(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def step(self, grads: dict[Parameter, Array], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Reference sets
# ---------------------------------------------------------------------------


def reference_set(
    dataset: Dataset,
    target: Sequence,
    max_refs: int,
    rng: np.random.Generator,
    include_target: bool = False,
) -> tuple[Sequence, ...]:
    """R^u for a target: the user's other sequences, uniformly subsampled to max_refs."""
    pool = [
        s for s in dataset.user(target.user_id).reference_sequences
        if include_target or s.seq_id != target.seq_id
    ]
    if len(pool) <= max_refs:
        return tuple(pool)
    keep = np.sort(rng.choice(len(pool), size=max_refs, replace=False))
    return tuple(pool[i] for i in keep)


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    stage: str
    epoch: int
    step: int
    split: str
    nll: float
    sce: float
    pp_plus: float
    pp_minus: float
    kl: float
    beta: float
    lr: float


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)
        logger.info(
            "[%s] epoch %d %s: nll=%.4f sce=%.4f pp+=%.4f pp-=%.4f kl=%.4f",
            row.stage, row.epoch, row.split, row.nll, row.sce, row.pp_plus, row.pp_minus, row.kl,
        )

    def extend(self, other: MetricsLog) -> None:
        self.rows.extend(other.rows)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for row in self.rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceScore:
    """Held-out scores of one sequence, averaged over z draws."""

    user_id: str
    seq_id: str
    n_events: int
    nll: float
    sce: float
    pp_plus: float
    pp_minus: float
    kl: float
    identity_residual: float


SCORE_FIELDS = ("nll", "sce", "pp_plus", "pp_minus", "kl")


@dataclass(frozen=True)
class EvalReport:
    scores: tuple[SequenceScore, ...]

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.scores], dtype=np.float64)

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def standard_error(self, name: str) -> float:
        v = self.values(name)
        return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0

    def summary(self) -> dict[str, float]:
        out: dict[str, float] = {"n_sequences": float(len(self.scores))}
        for name in SCORE_FIELDS:
            out[name] = self.mean(name)
            out[f"{name}_se"] = self.standard_error(name)
        out["max_identity_residual"] = float(np.max(np.abs(self.values("identity_residual"))))
        return out


def _score(model: PersonalizedMTPP, dataset: Dataset, target: Sequence, mc: MCConfig, max_refs: int, rng: np.random.Generator) -> SequenceScore:
    refs = reference_set(dataset, target, max_refs, rng)
    terms = model.objective(refs, target, 0.0, mc, rng, training=False)
    b = terms.breakdown
    return SequenceScore(
        user_id=target.user_id,
        seq_id=target.seq_id,
        n_events=b.n_events,
        nll=b.nll,
        sce=b.sce,
        pp_plus=b.pp_plus,
        pp_minus=b.pp_minus,
        kl=terms.kl,
        identity_residual=b.identity_residual(),
    )


def evaluate(
    model: PersonalizedMTPP,
    dataset: Dataset,
    mc: MCConfig,
    seed: int = 0,
    *,
    max_refs: int = 8,
    threads: int = 1,
) -> EvalReport:
    """Per-sequence NLL = -mean_z log p(H | z), with SCE, PP+, PP- and KL.

    Each sequence is conditioned on the other sequences of its user in the
    same split.
    """
    targets = list(dataset.sequences())
    if not targets:
        raise DataError(f"cannot evaluate an empty {dataset.split} split")

    def job(i: int) -> SequenceScore:
        return _score(model, dataset, targets[i], mc, max_refs, substream(seed, "evaluate", i))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        scores = tuple(pool.map(job, range(len(targets))))
    return EvalReport(scores)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: PersonalizedMTPP
    log: MetricsLog
    best_epoch: int
    best_valid_nll: float
    steps: int
    optimizer: Adam


@dataclass(frozen=True)
class _ItemResult:
    grads: dict[Parameter, Array]
    nll: float
    sce: float
    pp_plus: float
    pp_minus: float
    kl: float


def _grad_norm(grads: dict[Parameter, Array]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _run_item(
    model: PersonalizedMTPP,
    dataset: Dataset,
    target: Sequence,
    beta: float,
    cfg: TrainConfig,
    mc: MCConfig,
    rng: np.random.Generator,
) -> _ItemResult:
    refs = reference_set(dataset, target, cfg.max_refs, rng, cfg.include_target_in_refs)
    terms = model.objective(refs, target, beta, mc, rng, training=True)
    loss = -terms.value
    if not math.isfinite(loss.item()):
        raise NumericError(
            f"non-finite loss on {target.seq_id}",
            {"clamps": model.decoder.clamps.count, "loss": loss.item()},
        )
    b = terms.breakdown
    return _ItemResult(dg.gradients(loss), b.nll, b.sce, b.pp_plus, b.pp_minus, terms.kl)


def _reduce(results: SequenceOf[_ItemResult]) -> dict[Parameter, Array]:
    total: dict[Parameter, Array] = {}
    for r in results:
        for p, g in r.grads.items():
            acc = total.get(p)
            total[p] = g.copy() if acc is None else acc + g
    scale = 1.0 / len(results)
    return {p: g * scale for p, g in total.items()}


def _valid_row(model: PersonalizedMTPP, valid: Dataset, mc: MCConfig, cfg: TrainConfig, stage: str, epoch: int, step: int, beta: float, lr: float) -> MetricsRow:
    report = evaluate(model, valid, mc, cfg.seed, max_refs=cfg.max_refs, threads=cfg.threads)
    return MetricsRow(stage, epoch, step, "valid", *(report.mean(n) for n in SCORE_FIELDS), beta, lr)


def train(
    model: PersonalizedMTPP,
    train_set: Dataset,
    valid_set: Dataset | None,
    cfg: TrainConfig,
    mc: MCConfig | None = None,
    *,
    stage: str = "full",
    min_improvement: float = 0.0,
    optimizer: Adam | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Minimize the mean negative objective over (user, target sequence) pairs.

    Stops after `patience` validations that fail to improve the best
    validation NLL by more than `min_improvement`, then restores the best
    parameters.
    """
    mc = mc or MCConfig(seed=cfg.seed)
    targets = list(train_set.sequences())
    if not targets:
        raise DataError("training split holds no sequences")
    steps_per_epoch = math.ceil(len(targets) / cfg.batch_size)
    optimizer = optimizer or Adam.from_config(model.store, cfg)
    log = MetricsLog()
    step = start_step
    best_nll = math.inf
    best_epoch = 0
    best_state = model.store.state_dict()
    stale = 0
    beta = lr = 0.0

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for epoch in range(1, cfg.max_epochs + 1):
            order = substream(cfg.seed, f"shuffle:{stage}", epoch).permutation(len(targets))
            sums = np.zeros(len(SCORE_FIELDS))
            for b in range(steps_per_epoch):
                batch = [targets[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                beta = cyclical_beta(step, steps_per_epoch, cfg)
                lr = warmup_lr(step, steps_per_epoch, cfg)

                def job(pos: int, batch: list[Sequence] = batch, beta: float = beta, step: int = step) -> _ItemResult:
                    rng = substream(cfg.seed, f"train:{stage}", epoch, step, pos)
                    return _run_item(model, train_set, batch[pos], beta, cfg, mc, rng)

                results = list(pool.map(job, range(len(batch))))
                grads = _reduce(results)
                norm = _grad_norm(grads)
                if not math.isfinite(norm):
                    raise NumericError(
                        f"non-finite gradient at step {step}",
                        {"clamps": model.decoder.clamps.count, "grad_norm": norm},
                    )
                optimizer.step(grads, lr)
                batch_means = np.array([[getattr(r, n) for n in SCORE_FIELDS] for r in results]).mean(axis=0)
                sums += batch_means
                logger.debug("step %d: nll=%.4f beta=%.6f lr=%.6f |g|=%.4f", step, batch_means[0], beta, lr, norm)
                step += 1
            log.append(MetricsRow(stage, epoch, step, "train", *(float(x) for x in sums / steps_per_epoch), beta, lr))

            if valid_set is None or epoch % cfg.eval_every:
                continue
            row = _valid_row(model, valid_set, mc, cfg, stage, epoch, step, beta, lr)
            log.append(row)
            if row.nll < best_nll - min_improvement:
                best_nll, best_epoch, stale = row.nll, epoch, 0
                best_state = model.store.state_dict()
            else:
                if row.nll < best_nll:
                    best_nll, best_epoch = row.nll, epoch
                    best_state = model.store.state_dict()
                stale += 1
                if stale >= cfg.patience:
                    logger.info("[%s] stopping after epoch %d (best epoch %d)", stage, epoch, best_epoch)
                    break

    if valid_set is not None and best_epoch:
        model.store.load_state_dict(best_state)
    else:
        best_epoch = epoch
    return TrainResult(model, log, best_epoch, best_nll, step, optimizer)


# ---------------------------------------------------------------------------
# Curriculum ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    """Test metrics of one (fraction, variant) stage."""

    fraction: float
    variant: str
    n_users: int
    n_sequences: int
    epochs: int
    test_nll: float
    test_nll_se: float
    test_sce: float
    test_pp_plus: float
    test_pp_minus: float


def nested_user_subsets(dataset: Dataset, fractions: SequenceOf[float], seed: int) -> list[Dataset]:
    """User-level random subsets; each contains the users of every smaller one."""
    ids = sorted(dataset.user_ids)
    order = [ids[i] for i in substream(seed, "ablation-users").permutation(len(ids))]
    return [dataset.subset(order[: max(1, math.ceil(round(f * len(ids), 9)))]) for f in fractions]


@dataclass
class AblationResult:
    rows: list[AblationRow]
    log: MetricsLog

    def write_csv(self, path: str | Path) -> None:
        names = [f.name for f in fields(AblationRow)]
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for row in self.rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


def curriculum_ablate(
    model_factory: Callable[[], PersonalizedMTPP],
    train_set: Dataset,
    valid_set: Dataset,
    test_set: Dataset,
    plan: AblationPlan,
    cfg: TrainConfig,
    mc: MCConfig | None = None,
) -> AblationResult:
    """Train on growing nested user subsets, carrying the model across stages.

    A stage ends at the first validation that improves by less than
    plan.convergence_delta; every stage is then scored on the fixed test set.
    """
    mc = mc or MCConfig(seed=cfg.seed)
    model = model_factory()
    stage_cfg = replace(cfg, patience=1)
    optimizer: Adam | None = None
    step = 0
    rows: list[AblationRow] = []
    log = MetricsLog()
    for fraction, subset in zip(plan.fractions, nested_user_subsets(train_set, plan.fractions, cfg.seed)):
        logger.info("ablation stage %.2f: %d users, %d sequences", fraction, len(subset.users), subset.n_sequences)
        result = train(
            model, subset, valid_set, stage_cfg, mc,
            stage=f"{fraction:g}", min_improvement=plan.convergence_delta,
            optimizer=optimizer, start_step=step,
        )
        optimizer, step = result.optimizer, result.steps
        log.extend(result.log)
        report = evaluate(model, test_set, mc, cfg.seed, max_refs=cfg.max_refs, threads=cfg.threads)
        rows.append(
            AblationRow(
                fraction=fraction,
                variant=model.variant,
                n_users=len(subset.users),
                n_sequences=subset.n_sequences,
                epochs=max(r.epoch for r in result.log.rows),
                test_nll=report.mean("nll"),
                test_nll_se=report.standard_error("nll"),
                test_sce=report.mean("sce"),
                test_pp_plus=report.mean("pp_plus"),
                test_pp_minus=report.mean("pp_minus"),
            )
        )
    return AblationResult(rows, log)
