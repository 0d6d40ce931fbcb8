"""Command-line interface: gen, train, eval, repro, inspect.

Exit codes: 0 ok, 1 user error (bad flags, missing or mismatched data),
2 internal error.  Outputs go under ``$DIFFSTACK_ROOT`` (default ``runs``)
unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cells import DISPLAY_NAMES, FAMILY_ORDER, CheckpointError, Model, get_family, load_checkpoint
from .datagen import (
    InfeasibleWindow,
    alphabet_for,
    build_benchmark,
    default_spec,
    easy_train_split,
    file_sha256,
    load_corpus,
    read_benchmark,
    read_split,
    write_benchmark,
    write_split,
)
from .evaluation import (
    DEFAULT_PROBES,
    EvalResult,
    ResultRow,
    ablation_table,
    eval_csv,
    eval_markdown,
    evaluate_split,
    long_counts,
    perplexity,
    results_csv,
)
from .training import TrainConfig, run_trials, trial_seed

log = logging.getLogger(__name__)

ROOT_ENV = "DIFFSTACK_ROOT"
GRAMMARS = ("d2", "d3", "d6", "palindrome")
NON_STACK = ("rnn", "lstm", "gru")
ABLATION_ROWS = ("rnn", "lstm", "stackrnn", "diffstk-rnn", "diffstk-mrnn", "diffstk-mirnn")
EASY_TRAIN = "train_easy.txt"


class UserError(Exception):
    """Bad input from the operator; exit code 1."""


class DataMismatchError(UserError):
    """Checkpoint and dataset disagree (vocabulary or family)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def output_root() -> Path:
    import os

    return Path(os.environ.get(ROOT_ENV, "runs"))


def _onoff(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def read_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    argv: list
    version: str
    config: dict
    datasets: dict  # file name -> sha256
    seeds: dict
    paths: dict
    started: str = ""
    finished: str = ""
    environment: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(command, argv, config, datasets, seeds, paths) -> RunManifest:
    env = {"python": platform.python_version(), "numpy": np.__version__, "platform": platform.platform()}
    return RunManifest(command, list(argv), __version__, config, datasets, seeds, paths, _now(), "", env)


# ---------------------------------------------------------------------------
# data


def generate_dataset(grammar: str, seed: int, scale: float, out_dir: Path) -> dict[str, str]:
    """Build and write a benchmark plus its easy-negative train split; returns checksums."""
    spec = default_spec(grammar, scale)
    splits = build_benchmark(spec, seed)
    sums = write_benchmark(out_dir, splits, spec, seed)
    easy = easy_train_split(spec, seed)
    path = Path(out_dir) / EASY_TRAIN
    write_split(path, easy, grammar, seed, spec.pcfg)
    sums[path.name] = file_sha256(path)
    return sums


def _checksums(data_dir: Path) -> dict[str, str]:
    return {p.name: file_sha256(p) for p in sorted(Path(data_dir).glob("*.txt"))}


def load_dataset(data_dir: Path):
    """(grammar, splits, easy_train or None) from a ``gen`` output directory."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UserError(f"missing dataset directory {data_dir}")
    try:
        grammar, splits = read_benchmark(data_dir)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    easy = read_split(data_dir / EASY_TRAIN)[1] if (data_dir / EASY_TRAIN).exists() else None
    return grammar, splits, easy


def _train_split_for(cfg: TrainConfig, splits, easy):
    if cfg.hard_negatives:
        return None
    if easy is None:
        raise UserError("easy-negative training needs train_easy.txt; regenerate the data with 'gen'")
    return easy


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    if args.corpus:
        corpus = load_corpus(Path(args.corpus), args.vocab_cap)
        out = Path(args.out or output_root() / "data" / Path(args.corpus).name)
        out.mkdir(parents=True, exist_ok=True)
        (out / "vocab.txt").write_text("\n".join(corpus.vocab) + "\n", encoding="utf-8")
        stats = {k: {"sentences": len(v), "tokens": sum(map(len, v))} for k, v in corpus.splits.items()}
        (out / "corpus.json").write_text(json.dumps({"source": str(args.corpus), "vocab_cap": args.vocab_cap,
                                                     "vocab_size": len(corpus.vocab), "splits": stats},
                                                    indent=1, sort_keys=True) + "\n", encoding="utf-8")
        print(f"vocabulary {len(corpus.vocab)} words -> {out}")
        return 0
    if not args.grammar:
        raise UserError("gen needs --grammar or --corpus")
    out = Path(args.out or output_root() / "data" / f"{args.grammar}-s{args.seed}")
    try:
        sums = generate_dataset(args.grammar, args.seed, args.scale, out)
    except InfeasibleWindow as exc:
        raise UserError(f"infeasible dataset: {exc}") from exc
    _manifest("gen", sys.argv[1:], {"grammar": args.grammar, "seed": args.seed, "scale": args.scale},
              sums, {"data": args.seed}, {"out": str(out)}).write(out / "manifest.json")
    for name, digest in sums.items():
        print(f"{name}  {digest[:16]}")
    return 0


# ---------------------------------------------------------------------------
# train


_FLAG_KEYS = {
    "epochs": "epochs", "lr": "lr", "hidden": "hidden", "trials": "trials", "seed": "seed",
    "noise": "noise", "noise_mu": "noise_mu", "noise_sigma2": "noise_sigma2",
    "carry_forward": "carry_forward", "mode": "mode", "bptt": "bptt", "clip": "clip",
}


def effective_config(args, task: str) -> TrainConfig:
    """Defaults, then task defaults, then ``--config`` file, then flags."""
    values: dict = {"task": task}
    if task == "lm":
        values.update(hidden=100, epochs=50)
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    cfg_names = {f.name for f in fields(TrainConfig)}
    for key, value in file_values.items():
        if key not in cfg_names:
            raise UserError(f"unknown config key {key!r}")
        values[key] = value
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    neg = getattr(args, "negatives", None)
    if neg is not None:
        values["hard_negatives"] = neg == "hard"
    try:
        return TrainConfig.from_mapping(values)
    except (KeyError, ValueError, TypeError) as exc:
        raise UserError(f"invalid training config: {exc}") from exc


def _summary_rows(summary, grammar, regime, task="cfl") -> list[ResultRow]:
    done = [r for r in summary.reports if r.status == "ok" and r.best_epoch >= 0]
    n = len(done)
    if task == "lm":
        return [ResultRow(summary.family, grammar, regime, "test_ppl", summary.mean, summary.best, n)]
    train = [r.train_accuracy for r in done]
    rows = [
        ResultRow(summary.family, grammar, regime, "train",
                  float(np.mean(train)) if train else None, float(np.max(train)) if train else None, n),
        ResultRow(summary.family, grammar, regime, "test",
                  summary.mean if n else None, summary.best if n else None, n),
    ]
    for probe in DEFAULT_PROBES:
        key = f"long_{probe}"
        if not any(key in r.extra for r in done):
            continue
        got = [r.extra[key] for r in done if r.extra.get(key) is not None]
        top = max(done, key=lambda r: r.best_valid)
        rows.append(ResultRow(summary.family, grammar, regime, probe, float(np.mean(got)) if got else None,
                              top.extra.get(key), len(got)))
    return rows


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    sources = [s for s in (args.grammar, args.data, args.corpus) if s]
    if len(sources) != 1:
        raise UserError("train needs exactly one of --grammar, --data or --corpus")
    task = "lm" if args.corpus else "cfl"
    cfg = effective_config(args, task)
    resolved = cfg.resolved(args.family)
    tag = args.grammar or Path(args.data or args.corpus).name
    out = Path(args.out or output_root() / "train" / f"{args.family}-{tag}-s{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)

    easy = None
    if task == "lm":
        try:
            corpus = load_corpus(Path(args.corpus), args.vocab_cap)
        except FileNotFoundError as exc:
            raise UserError(str(exc)) from exc
        if "valid" not in corpus.splits:
            raise UserError("language modelling needs a valid split")
        splits, eos, vocab = corpus.splits, corpus.eos, len(corpus.vocab)
        sums = {p.name: file_sha256(p) for p in sorted(Path(args.corpus).glob("*.txt"))}
        grammar = "lm"
    else:
        if args.grammar:
            data_dir = out / "data"
            try:
                sums = generate_dataset(args.grammar, cfg.seed, args.scale, data_dir)
            except InfeasibleWindow as exc:
                raise UserError(f"infeasible dataset: {exc}") from exc
        else:
            data_dir = Path(args.data)
        grammar, splits, easy = load_dataset(data_dir)
        if not args.grammar:
            sums = _checksums(data_dir)
        alphabet = alphabet_for(grammar)
        eos, vocab = alphabet.eos, alphabet.size
    train_split = None if task == "lm" else _train_split_for(resolved, splits, easy)

    manifest = _manifest(
        "train", sys.argv[1:],
        {"family": args.family, "grammar": grammar, **asdict(resolved)}, sums,
        {"run": cfg.seed, "trials": [trial_seed(cfg.seed, i) for i in range(cfg.trials)]},
        {"out": str(out), "data": str(args.data or args.corpus or out / "data")},
    )
    manifest.write(out / "manifest.json")
    (out / "config.txt").write_text("\n".join(resolved.to_lines()) + "\n", encoding="utf-8")

    probes = DEFAULT_PROBES if (args.long and task == "cfl") else None
    summary = run_trials(args.family, splits, cfg, eos, vocab, out_dir=out, train_split=train_split,
                         probes=probes, progress=_progress, resume=args.resume,
                         stop_after=args.stop_after, workers=args.workers)
    rows = _summary_rows(summary, grammar, resolved.mode, task)
    (out / "results.csv").write_text(results_csv(rows), encoding="utf-8")
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    stopped = sum(r.status == "stopped" for r in summary.reports)
    if task == "lm":
        print(f"{args.family} {grammar}: test perplexity mean {summary.mean:.2f} best {summary.best:.2f} "
              f"({summary.completed}/{cfg.trials} trials)")
    else:
        print(f"{args.family} {grammar} {resolved.mode}: test mean {summary.mean:.2f} best {summary.best:.2f} "
              f"({summary.completed}/{cfg.trials} trials, {summary.failed} failed)")
    if stopped:
        print(f"{stopped} trial(s) stopped early; continue with --resume")
    print(f"outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        params = load_checkpoint(Path(args.checkpoint))
    except FileNotFoundError as exc:
        raise UserError(f"missing checkpoint {args.checkpoint}") from exc
    if args.family and args.family != params.family:
        raise DataMismatchError(f"checkpoint holds a {params.family} model, not {args.family}")
    cf = args.carry_forward if args.carry_forward is not None else get_family(params.family).carry_forward
    model = Model(params, carry_forward=cf)
    out = Path(args.out or Path(args.checkpoint).parent / f"eval-{Path(args.checkpoint).stem}")
    if args.corpus:
        corpus = load_corpus(Path(args.corpus), args.vocab_cap)
        if params.d != len(corpus.vocab):
            raise DataMismatchError(f"checkpoint vocabulary {params.d} != corpus vocabulary {len(corpus.vocab)}")
        if args.split not in corpus.splits:
            raise UserError(f"corpus has no {args.split} split")
        sents = corpus.splits[args.split]
        result = EvalResult(args.split, sum(map(len, sents)), 0, 0, 0, 0,
                            perplexity=perplexity(model, sents, corpus.eos))
    else:
        if args.data:
            grammar, splits, _ = load_dataset(Path(args.data))
        elif args.grammar:
            grammar = args.grammar
            splits = build_benchmark(default_spec(grammar, args.scale), args.seed)
        else:
            raise UserError("eval needs --data, --grammar or --corpus")
        alphabet = alphabet_for(grammar)
        if params.d != alphabet.size:
            raise DataMismatchError(f"checkpoint vocabulary {params.d} != {grammar} vocabulary {alphabet.size}")
        if args.split not in splits:
            raise UserError(f"dataset has no {args.split} split")
        result = evaluate_split(model, splits[args.split], alphabet.eos)
        if args.long:
            if "long_test" not in splits:
                raise UserError("--long needs a long_test split")
            result.long = long_counts(model, splits["long_test"], alphabet.eos)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(eval_csv(result), encoding="utf-8")
    md = eval_markdown(result)
    (out / "eval.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return 0


# ---------------------------------------------------------------------------
# repro


@dataclass(frozen=True)
class TableSpec:
    title: str
    grammars: tuple
    families: tuple
    regimes: tuple = (("default", ()),)  # (label, overrides)
    columns: str = "regime"  # regime | train_test | long


TABLES = {
    "table1": TableSpec("D2 test accuracy with and without state noise", ("d2",), ABLATION_ROWS,
                        (("with noise", (("noise", True),)), ("without noise", (("noise", False),)))),
    "table2": TableSpec("D2 test accuracy with and without noise plus carry-forward", ("d2",), ABLATION_ROWS,
                        (("with changes", (("noise", True), ("carry_forward", True))),
                         ("without changes", (("noise", False), ("carry_forward", False))))),
    "table3": TableSpec("D2 test accuracy, sequential vs incremental training", ("d2",), ABLATION_ROWS,
                        (("sequential", (("mode", "sequential"),)), ("incremental", (("mode", "incremental"),)))),
    "table4": TableSpec("D2 train and test accuracy", ("d2",), FAMILY_ORDER, columns="train_test"),
    "table5": TableSpec("D3, D6 and palindrome train and test accuracy", ("d3", "d6", "palindrome"),
                        FAMILY_ORDER, columns="train_test"),
    "table6": TableSpec("Long-string accuracy on D2 and D3", ("d2", "d3"), FAMILY_ORDER, columns="long"),
    "table7": TableSpec("Long-string accuracy on D6 and palindrome", ("d6", "palindrome"), FAMILY_ORDER,
                        columns="long"),
}


def _config_key(cfg: TrainConfig, family: str, sums: dict) -> str:
    blob = json.dumps({"family": family, "cfg": asdict(cfg), "data": sums}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def _view(rows: list[ResultRow], spec: TableSpec) -> tuple[list[ResultRow], list[str]]:
    """Relabel result rows so each table column group is one 'regime'."""
    view, cols = [], []
    for r in rows:
        if spec.columns == "regime" and r.split == "test":
            label = r.regime if len(spec.grammars) == 1 else f"{r.grammar} {r.regime}"
        elif spec.columns == "train_test" and r.split in ("train", "test"):
            label = r.split if len(spec.grammars) == 1 else f"{r.grammar} {r.split}"
        elif spec.columns == "long" and r.split in DEFAULT_PROBES:
            label = f"{r.grammar} {r.split}"
        else:
            continue
        if label not in cols:
            cols.append(label)
        view.append(ResultRow(r.family, r.grammar, label, r.split, r.mean, r.best, r.n_trials))
    return view, cols


def run_table(name: str, seed: int, trials: int, epochs: int, scale: float, out: Path,
              families=None, grammars=None, workers: int = 1, progress=_progress) -> tuple[list[ResultRow], list[dict]]:
    spec = TABLES[name]
    fams = [f for f in spec.families if not families or f in families]
    grams = [g for g in spec.grammars if not grammars or g in grammars]
    if not fams or not grams:
        raise UserError("the family/grammar filter leaves nothing to run")
    out.mkdir(parents=True, exist_ok=True)
    base = TrainConfig(epochs=epochs, trials=trials, seed=seed)
    probes = DEFAULT_PROBES if spec.columns == "long" else None
    data_sums, rows, status = {}, [], []
    for g in grams:
        data_dir = out / "data" / g
        try:
            data_sums[g] = generate_dataset(g, seed, scale, data_dir)
        except InfeasibleWindow as exc:
            raise UserError(f"infeasible dataset for {g}: {exc}") from exc
    manifest = _manifest("repro", sys.argv[1:],
                         {"table": name, "epochs": epochs, "trials": trials, "scale": scale,
                          "families": fams, "grammars": grams, "base": asdict(base)},
                         {f"{g}/{k}": v for g, s in data_sums.items() for k, v in s.items()},
                         {"run": seed, "trials": [trial_seed(seed, i) for i in range(trials)]},
                         {"out": str(out)})
    manifest.write(out / "manifest.json")
    for g in grams:
        _, splits, easy = load_dataset(out / "data" / g)
        alphabet = alphabet_for(g)
        for fam in fams:
            for label, overrides in spec.regimes:
                cfg = TrainConfig(**{**asdict(base), **dict(overrides)}).resolved(fam)
                run_dir = out / "runs" / g / fam / f"{label.replace(' ', '-')}-{_config_key(cfg, fam, data_sums[g])}"
                try:
                    summary = run_trials(fam, splits, cfg, alphabet.eos, alphabet.size, out_dir=run_dir,
                                         train_split=_train_split_for(cfg, splits, easy), probes=probes,
                                         progress=progress, resume=True, workers=workers)
                except UserError:
                    raise
                except Exception as exc:  # keep the sweep going; report the cell
                    log.exception("%s %s %s failed", g, fam, label)
                    status.append({"family": fam, "grammar": g, "regime": label, "completed": 0,
                                   "failed": trials, "status": f"error: {exc}"})
                    continue
                rows += _summary_rows(summary, g, label)
                state = "ok" if not summary.failed else ("failed" if not summary.completed else "partial")
                status.append({"family": fam, "grammar": g, "regime": label, "completed": summary.completed,
                               "failed": summary.failed, "status": state})
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    return rows, status


def write_table(name: str, rows: list[ResultRow], status: list[dict], out: Path) -> str:
    spec = TABLES[name]
    (out / "results.csv").write_text(results_csv(rows), encoding="utf-8")
    lines = ["family,grammar,regime,completed,failed,status"]
    lines += [f"{s['family']},{s['grammar']},{s['regime']},{s['completed']},{s['failed']},{s['status']}" for s in status]
    (out / "status.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    view, cols = _view(rows, spec)
    table_csv, table_md = ablation_table(view, cols)
    (out / "table.csv").write_text(table_csv, encoding="utf-8")
    md = f"{spec.title}\n\n{table_md}"
    if spec.columns == "long":
        md += "\nmean: average over trials; best: the trial with the best validation accuracy\n"
    (out / "table.md").write_text(md, encoding="utf-8")
    return md


def cmd_repro(args) -> int:
    out = Path(args.out or output_root() / "repro" / f"{args.table}-s{args.seed}")
    fams = args.families.split(",") if args.families else None
    grams = args.grammars.split(",") if args.grammars else None
    for f in fams or ():
        if f not in FAMILY_ORDER:
            raise UserError(f"unknown family {f!r}")
    rows, status = run_table(args.table, args.seed, args.trials, args.epochs, args.scale, out,
                             fams, grams, args.workers)
    print(write_table(args.table, rows, status, out), end="")
    bad = [s for s in status if s["status"] != "ok"]
    if bad:
        print("cells with failed trials:")
        for s in bad:
            print(f"  {s['family']} {s['grammar']} {s['regime']}: {s['completed']} ok, {s['failed']} failed ({s['status']})")
    print(f"outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    try:
        params = load_checkpoint(Path(args.checkpoint))
    except FileNotFoundError as exc:
        raise UserError(f"missing checkpoint {args.checkpoint}") from exc
    fam = get_family(params.family)
    print(f"family      {params.family} ({DISPLAY_NAMES.get(params.family, params.family)})")
    print(f"core        {fam.core}  stack={params.stack}  k={params.k}")
    print(f"vocabulary  {params.d}")
    print(f"hidden      {params.m}")
    print(f"seed        {params.seed}")
    print(f"updates     {params.steps}")
    print(f"parameters  {params.flat.size}")
    for name, arr in params.as_dict().items():
        print(f"  {name:8s} {str(arr.shape):12s} |w|max={np.abs(arr).max():.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffstack", description="Differentiable-stack recurrent recognizers.")
    p.add_argument("--version", action="version", version=f"diffstack {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a benchmark or index a text corpus")
    g.add_argument("--grammar", choices=GRAMMARS)
    g.add_argument("--corpus", help="directory with train/valid/test text files")
    g.add_argument("--vocab-cap", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=float, default=1.0, help="shrink every split by this factor")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train independent trials of one family")
    t.add_argument("--family", required=True, choices=FAMILY_ORDER)
    t.add_argument("--grammar", choices=GRAMMARS, help="generate the benchmark inside the run directory")
    t.add_argument("--data", help="benchmark directory written by 'gen'")
    t.add_argument("--corpus", help="text corpus directory (language modelling)")
    t.add_argument("--vocab-cap", type=int, default=10_000)
    t.add_argument("--scale", type=float, default=1.0)
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--seed", type=int)
    t.add_argument("--trials", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--bptt", type=int)
    t.add_argument("--clip", type=float)
    t.add_argument("--noise", type=_onoff, metavar="on|off")
    t.add_argument("--noise-mu", type=float)
    t.add_argument("--noise-sigma2", type=float)
    t.add_argument("--carry-forward", type=_onoff, metavar="on|off")
    t.add_argument("--negatives", choices=("easy", "hard"))
    t.add_argument("--mode", choices=("sequential", "incremental"))
    t.add_argument("--long", action="store_true", help="also score the n=120/n=160 probes")
    t.add_argument("--workers", type=int, default=1, help="train trials in this many processes")
    t.add_argument("--resume", action="store_true", help="continue trials from their state files")
    t.add_argument("--stop-after", type=int, help="stop each trial before this epoch")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--grammar", choices=GRAMMARS)
    e.add_argument("--corpus")
    e.add_argument("--vocab-cap", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--scale", type=float, default=1.0)
    e.add_argument("--split", default="test")
    e.add_argument("--family", choices=FAMILY_ORDER, help="reject checkpoints of another family")
    e.add_argument("--carry-forward", type=_onoff, metavar="on|off")
    e.add_argument("--long", action="store_true", help="add n=120/n=160 probe rows")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("repro", help="regenerate one results table")
    r.add_argument("table", choices=sorted(TABLES))
    r.add_argument("--seed", type=int, default=7)
    r.add_argument("--trials", type=int, default=10)
    r.add_argument("--epochs", type=int, default=30)
    r.add_argument("--scale", type=float, default=1.0)
    r.add_argument("--families", help="comma-separated subset of rows")
    r.add_argument("--grammars", help="comma-separated subset of grammars")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out")
    r.set_defaults(func=cmd_repro)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
