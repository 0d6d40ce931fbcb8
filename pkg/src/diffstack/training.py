"""Training loop: per-string truncated BPTT, entrywise clipping, Adam, lr patience.

Two regimes are supported.  ``sequential`` visits the whole train split every
epoch; ``incremental`` sorts it by length, cuts it into four equal-count
stages and trains on a growing prefix (stage ``s`` sees stages ``0..s``).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cells import Model, ModelParams, cfl_arrays, get_family, init_params, lm_arrays, save_checkpoint
from .cells import kernels
from .datagen import DatasetSplit, Sample
from .mathcore import NonFiniteError, RngStream

log = logging.getLogger(__name__)

MODES = ("sequential", "incremental")
TASKS = ("cfl", "lm")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    clip: float = 15.0
    bptt: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 3
    lr_decay: float = 0.5
    lr_floor: float = 1e-5
    mode: str = "sequential"
    noise: bool | None = None  # None: family default
    noise_mu: float = 0.0
    noise_sigma2: float = 1e-3
    carry_forward: bool | None = None  # None: family default
    hard_negatives: bool | None = None  # None: family default
    fraction_lo: float = 0.15
    fraction_hi: float = 0.30
    seed: int = 0
    trials: int = 10
    hidden: int = 8
    task: str = "cfl"
    stages: int = 4

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.bptt < 1:
            raise ValueError("bptt window must be at least 1")
        if self.epochs < 1 or self.trials < 1 or self.hidden < 1 or self.stages < 1:
            raise ValueError("epochs, trials, hidden and stages must be at least 1")
        if not (0 <= self.fraction_lo <= self.fraction_hi <= 1):
            raise ValueError("hard-negative fractions must satisfy 0 <= lo <= hi <= 1")
        if self.noise_sigma2 < 0:
            raise ValueError("noise variance must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        return self

    def resolved(self, family: str) -> "TrainConfig":
        """Fill the family-dependent switches left as ``None``."""
        fam = get_family(family)
        out = TrainConfig(**asdict(self))
        if out.noise is None:
            out.noise = fam.noise
        if out.carry_forward is None:
            out.carry_forward = fam.carry_forward
        if out.hard_negatives is None:
            out.hard_negatives = fam.hard_negatives
        return out

    def to_lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in asdict(self).items()]

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, e.g. a parsed ``key = value`` file."""
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise KeyError(f"unknown training option {key!r}")
            out[key] = _coerce(raw, kinds[key])
        return cls(**out).validate()


def _coerce(raw, kind: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if "bool" in kind:
        low = text.lower()
        if low in ("none", "default", ""):
            return None
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


# ---------------------------------------------------------------------------
# loss, clipping, optimiser, schedule


def sequence_loss(p_next, yhat, targets, label: float = -1.0) -> float:
    """sum_t [ -log p_next[t, target_t] + 0.5 (yhat_t - label)^2 ].

    ``label < 0`` drops the recognition term (language modelling).
    """
    p_next = np.asarray(p_next, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    T = len(targets)
    if p_next.shape[0] != T or (label >= 0 and yhat.shape[0] != T):
        raise ValueError(f"length mismatch: {p_next.shape[0]} predictions, {len(yhat)} scores, {T} targets")
    ce = -np.log(p_next[np.arange(T), targets]).sum()
    rec = 0.5 * np.sum((yhat - label) ** 2) if label >= 0 else 0.0
    return float(ce + rec)


def clip_gradient(g: np.ndarray, clip: float) -> np.ndarray:
    return np.clip(g, -clip, clip)


class Adam:
    """Adam over one flat parameter vector; gradients are clipped entrywise first."""

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8, clip=15.0):
        self.m1 = np.zeros(size)
        self.m2 = np.zeros(size)
        self.step_count = 0
        self.beta1, self.beta2, self.eps, self.clip = beta1, beta2, eps, clip

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.step_count += 1
        kernels.adam_update(
            theta, grad, self.m1, self.m2, self.step_count, lr,
            self.beta1, self.beta2, self.eps, self.clip,
        )


class PatienceSchedule:
    """Halve the rate after ``patience`` consecutive checks without improvement."""

    def __init__(self, lr: float, patience: int = 3, decay: float = 0.5, floor: float = 1e-5, higher_is_better=True):
        self.lr = lr
        self.patience = patience
        self.decay = decay
        self.floor = floor
        self.sign = 1.0 if higher_is_better else -1.0
        self.best = -math.inf
        self.stale = 0

    def observe(self, metric: float) -> float:
        score = self.sign * metric
        if score > self.best:
            self.best = score
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.decay, self.floor)
                self.stale = 0
        return self.lr


# ---------------------------------------------------------------------------
# reports


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    pool: int
    train_loss: float
    valid: float
    lr: float


@dataclass
class TrainReport:
    family: str
    seed: int
    mode: str = "sequential"
    task: str = "cfl"
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = float("nan")
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    extra: dict = field(default_factory=dict)
    updates: int = 0
    samples_seen: int = 0
    wall_time: float = 0.0
    status: str = "ok"
    error: str = ""

    @property
    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    @property
    def train_loss(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def valid_trace(self) -> list[float]:
        return [e.valid for e in self.epochs]

    def summary_lines(self) -> list[str]:
        keys = ("family", "seed", "mode", "task", "status", "error", "best_epoch", "best_valid",
                "train_accuracy", "test_accuracy", "updates", "samples_seen", "wall_time")
        lines = [f"{k}={getattr(self, k)}" for k in keys]
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        lines.append(f"epochs_run={len(self.epochs)}")
        return lines

    def write(self, stem: Path) -> None:
        """``stem.report`` (key=value lines) and ``stem.epochs.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        (stem.parent / f"{stem.name}.report").write_text("\n".join(self.summary_lines()) + "\n", encoding="utf-8")
        with open(stem.parent / f"{stem.name}.epochs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "stage", "pool", "train_loss", "valid", "lr"])
            for e in self.epochs:
                w.writerow([e.epoch, e.stage, e.pool, repr(e.train_loss), repr(e.valid), repr(e.lr)])


def read_report_lines(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# the loop


def incremental_stages(samples: Sequence[Sample], n_stages: int = 4) -> list[list[Sample]]:
    """Cumulative pools: stage s holds the shortest (s+1)/n_stages of the data.

    Sorting is stable, so equal-length strings keep their original order and
    every stage boundary falls at an exact quartile of the sample count.
    """
    order = sorted(range(len(samples)), key=lambda i: samples[i].length)
    n = len(order)
    cuts = [int(math.ceil(n * (s + 1) / n_stages)) for s in range(n_stages)]
    return [[samples[i] for i in order[:c]] for c in cuts]


def stage_epochs(epochs: int, n_stages: int = 4) -> list[int]:
    """Split the epoch budget as evenly as possible, earlier stages first."""
    base, extra = divmod(epochs, n_stages)
    return [base + (1 if s < extra else 0) for s in range(n_stages)]


def _arrays(sample, task: str, eos: int):
    if task == "lm":
        return lm_arrays(sample, eos)
    return cfl_arrays(sample.tokens, eos)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit after the last finished epoch."""

    epoch: int
    params: list
    best: list
    best_score: float
    adam_step: int
    adam_m1: list
    adam_m2: list
    lr: float
    sched_best: float
    sched_stale: int
    rng_state: dict
    steps: int
    report: dict

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self)) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "TrainState":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _report_dict(report: TrainReport) -> dict:
    d = asdict(report)
    d["epochs"] = [asdict(e) for e in report.epochs]
    return d


def _restore_report(report: TrainReport, d: dict) -> None:
    for k, v in d.items():
        if k == "epochs":
            report.epochs = [EpochRecord(**e) for e in v]
        else:
            setattr(report, k, v)


def _fit(
    params: ModelParams,
    schedule: list[tuple[list, int]],
    validate: Callable[[Model], float],
    cfg: TrainConfig,
    eos: int,
    rng: RngStream,
    report: TrainReport,
    checkpoint: Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    state_path: Path | None = None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
) -> ModelParams:
    cfg = cfg.resolved(params.family)
    model = Model(params, carry_forward=cfg.carry_forward)
    lm = cfg.task == "lm"
    adam = Adam(params.flat.size, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip)
    sched = PatienceSchedule(cfg.lr, cfg.patience, cfg.lr_decay, cfg.lr_floor, higher_is_better=not lm)
    grad = np.zeros_like(params.flat)
    best = params.copy()
    best_score = -math.inf
    sign = -1.0 if lm else 1.0
    start = 0
    if resume is not None:
        params.flat[:] = resume.params
        params.steps = resume.steps
        best.flat[:] = resume.best
        best_score = resume.best_score
        adam.step_count = resume.adam_step
        adam.m1[:] = resume.adam_m1
        adam.m2[:] = resume.adam_m2
        sched.lr, sched.best, sched.stale = resume.lr, resume.sched_best, resume.sched_stale
        rng.generator.bit_generator.state = resume.rng_state
        _restore_report(report, resume.report)
        start = resume.epoch
    epoch = 0
    t0 = time.perf_counter()
    try:
        for stage, (pool, n_epochs) in enumerate(schedule):
            for _ in range(n_epochs):
                if epoch < start:
                    epoch += 1
                    continue
                if stop_after is not None and epoch >= stop_after:
                    raise _Stop
                order = rng.generator.permutation(len(pool))
                lr = sched.lr
                total = 0.0
                for i in order:
                    sample = pool[int(i)]
                    inputs, targets = _arrays(sample, cfg.task, eos)
                    noise = model.noise(len(inputs), rng if cfg.noise else None, cfg.noise_mu, cfg.noise_sigma2)
                    label = -1.0 if lm else float(sample.label)
                    grad[:] = 0.0
                    out = model.run(inputs, targets, label, noise, want_grad=True, bptt=cfg.bptt, grad=grad)
                    adam.step(params.flat, grad, lr)
                    params.steps += 1
                    total += out.loss
                if not np.all(np.isfinite(params.flat)):
                    raise NonFiniteError("params")
                report.updates += len(pool)
                report.samples_seen += len(pool)
                score = validate(model)
                rec = EpochRecord(epoch, stage, len(pool), total / max(len(pool), 1), score, lr)
                report.epochs.append(rec)
                if sign * score > best_score:
                    best_score = sign * score
                    best = params.copy()
                    report.best_epoch, report.best_valid = epoch, score
                    if checkpoint is not None:
                        save_checkpoint(best, checkpoint)
                sched.observe(score)
                epoch += 1
                if state_path is not None:
                    TrainState(
                        epoch, params.flat.tolist(), best.flat.tolist(), best_score,
                        adam.step_count, adam.m1.tolist(), adam.m2.tolist(),
                        sched.lr, sched.best, sched.stale,
                        rng.generator.bit_generator.state, params.steps, _report_dict(report),
                    ).write(state_path)
                if on_epoch is not None:
                    on_epoch(rec)
                log.debug("%s epoch %d loss %.4f valid %.4f lr %.2e", params.family, rec.epoch, rec.train_loss, score, lr)
    except _Stop:
        report.status = "stopped"
    except (NonFiniteError, FloatingPointError) as exc:
        report.status = "diverged"
        report.error = str(exc)
        log.warning("%s seed %d diverged at epoch %d: %s", params.family, report.seed, epoch, exc)
    report.wall_time += time.perf_counter() - t0
    return best


class _Stop(Exception):
    pass


def _validator(cfg: TrainConfig, valid, eos: int) -> Callable[[Model], float]:
    from . import evaluation

    if cfg.task == "lm":
        return lambda model: evaluation.perplexity(model, valid, eos)
    return lambda model: evaluation.evaluate_split(model, valid, eos).accuracy


def train_one(
    params: ModelParams,
    train: DatasetSplit | Sequence,
    valid: DatasetSplit | Sequence,
    cfg: TrainConfig,
    eos: int,
    rng: RngStream | None = None,
    checkpoint: Path | None = None,
    on_epoch=None,
    state_path: Path | None = None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Sequential regime.  Returns the best-validation parameters and the report.

    For ``task="lm"`` ``train``/``valid`` are lists of sentences (index lists
    ending in EOS) and validation uses perplexity.  ``state_path`` receives a
    :class:`TrainState` after every epoch, ``resume`` continues from one and
    ``stop_after`` ends the run before that epoch index.
    """
    cfg.validate()
    rng = rng or RngStream(params.seed)
    report = TrainReport(params.family, params.seed, "sequential", cfg.task)
    pool = train.samples if isinstance(train, DatasetSplit) else list(train)
    best = _fit(params, [(pool, cfg.epochs)], _validator(cfg, valid, eos), cfg, eos, rng, report,
                checkpoint, on_epoch, state_path, resume, stop_after)
    return best, report


def train_incremental(
    params: ModelParams,
    train: DatasetSplit | Sequence,
    valid: DatasetSplit | Sequence,
    cfg: TrainConfig,
    eos: int,
    rng: RngStream | None = None,
    checkpoint: Path | None = None,
    on_epoch=None,
    state_path: Path | None = None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Curriculum regime over length-sorted cumulative stages; see :func:`incremental_stages`."""
    cfg.validate()
    if cfg.task == "lm":
        raise ValueError("the incremental regime is defined for recognition tasks only")
    rng = rng or RngStream(params.seed)
    report = TrainReport(params.family, params.seed, "incremental", cfg.task)
    samples = train.samples if isinstance(train, DatasetSplit) else list(train)
    pools = incremental_stages(samples, cfg.stages)
    schedule = list(zip(pools, stage_epochs(cfg.epochs, cfg.stages)))
    best = _fit(params, schedule, _validator(cfg, valid, eos), cfg, eos, rng, report,
                checkpoint, on_epoch, state_path, resume, stop_after)
    return best, report


# ---------------------------------------------------------------------------
# trials


def trial_seed(seed: int, trial: int) -> int:
    """Per-trial seed from (run seed, trial index); independent of other trials."""
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


@dataclass
class TrialSummary:
    family: str
    reports: list[TrainReport]
    accuracies: list[float]
    mean: float
    best: float
    failed: int
    extra: dict = field(default_factory=dict)

    @property
    def completed(self) -> int:
        return len(self.accuracies)


def aggregate(accuracies: Sequence[float]) -> tuple[float, float]:
    """(mean, max) over completed trials; NaN for none."""
    acc = [a for a in accuracies if not math.isnan(a)]
    if not acc:
        return float("nan"), float("nan")
    return float(np.mean(acc)), float(np.max(acc))


def run_trial(
    family: str,
    trial: int,
    splits: dict,
    cfg: TrainConfig,
    eos: int,
    vocab_size: int,
    train_split=None,
    probes=None,
    state_path: Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
) -> tuple[TrainReport, ModelParams]:
    """Train and score one trial; touches no files except ``state_path``."""
    from . import evaluation

    cfg = cfg.resolved(family).validate()
    train = train_split if train_split is not None else splits["train"]
    seed = trial_seed(cfg.seed, trial)
    params = init_params(family, vocab_size, cfg.hidden, seed)
    prior = None
    if resume and state_path is not None and Path(state_path).exists():
        prior = TrainState.read(state_path)
    fit = train_incremental if cfg.mode == "incremental" else train_one
    best, rep = fit(params, train, splits["valid"], cfg, eos, RngStream(seed),
                    state_path=state_path, resume=prior, stop_after=stop_after)
    if prior is not None:
        rep.extra["resumed_at"] = prior.epoch
    if rep.status == "ok" and rep.best_epoch >= 0 and cfg.task == "cfl":
        model = Model(best, carry_forward=cfg.carry_forward)
        rep.train_accuracy = evaluation.evaluate_split(model, train, eos).accuracy
        rep.test_accuracy = evaluation.evaluate_split(model, splits["test"], eos).accuracy
        if probes and "long_test" in splits:
            for name, acc in evaluation.evaluate_long(model, splits["long_test"], eos, probes).items():
                rep.extra[f"long_{name}"] = acc
    elif rep.status == "ok" and rep.best_epoch >= 0:
        model = Model(best, carry_forward=cfg.carry_forward)
        rep.extra["valid_perplexity"] = rep.best_valid
        if "test" in splits:
            rep.extra["test_perplexity"] = evaluation.perplexity(model, splits["test"], eos)
    return rep, best


def _trial_job(args):
    return run_trial(*args)


def run_trials(
    family: str,
    splits: dict,
    cfg: TrainConfig,
    eos: int,
    vocab_size: int,
    out_dir: Path | None = None,
    train_split=None,
    probes=None,
    progress: Callable[[str], None] | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    workers: int = 1,
) -> TrialSummary:
    """Train ``cfg.trials`` independent models and score each best checkpoint on ``splits['test']``.

    ``train_split`` overrides ``splits['train']`` (easy-negative variants).
    ``probes`` evaluates long-string buckets on ``splits['long_test']``; the
    per-probe accuracies land in each report's ``extra``.  With ``out_dir``
    every trial keeps a resumable state file and ``resume`` picks those up.

    ``workers > 1`` trains trials in separate processes.  Trials are seeded
    independently, so the results do not depend on the worker count.  All
    reports and checkpoints are written here, in trial order.  Per-epoch
    state files are only kept when ``workers == 1``.
    """
    cfg = cfg.resolved(family).validate()
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def job(i):
        state = None if out is None or workers > 1 else out / f"{family}.trial{i}.state"
        return (family, i, splits, cfg, eos, vocab_size, train_split, probes, state, resume, stop_after)

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_trial_job, [job(i) for i in range(cfg.trials)])
            results = list(results)
    else:
        results = (_trial_job(job(i)) for i in range(cfg.trials))

    reports, accs = [], []
    failed = 0
    for i, (rep, best) in enumerate(results):
        ok = rep.status == "ok" and rep.best_epoch >= 0
        if not ok:
            failed += 1
        elif cfg.task == "cfl":
            accs.append(rep.test_accuracy)
        else:
            accs.append(rep.extra.get("test_perplexity", rep.best_valid))
        reports.append(rep)
        if out is not None:
            rep.write(out / f"{family}.trial{i}")
            if ok:
                save_checkpoint(best, out / f"{family}.trial{i}.ckpt")
        if progress is not None:
            score = f"test {rep.test_accuracy:.2f}%" if cfg.task == "cfl" else f"ppl {accs[-1]:.2f}" if ok else "n/a"
            progress(f"{family} trial {i + 1}/{cfg.trials}: {score} ({rep.status}, {rep.wall_time:.0f}s)")
    if failed:
        log.warning("%s: %d of %d trials failed; aggregating %d", family, failed, cfg.trials, len(accs))
    mean, best = aggregate(accs)
    if cfg.task == "lm":
        best = float(min(accs)) if accs else float("nan")
    return TrialSummary(family, reports, accs, mean, best, failed)
