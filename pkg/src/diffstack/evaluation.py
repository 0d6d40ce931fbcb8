"""Whole-string accuracy, length buckets, long-string probes, perplexity, tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cells import DISPLAY_NAMES, FAMILY_ORDER, Model, cfl_arrays, lm_arrays
from .datagen import DatasetSplit

DEFAULT_PROBES = {"n120": (115, 125), "n160": (155, 160)}


def classify_string(model: Model, tokens, eos: int, rule: str = "final") -> bool:
    """Accept iff the recognition score exceeds 0.5 (a score of exactly 0.5 rejects).

    ``rule="final"`` reads the score at the last step (the one predicting EOS);
    ``rule="mean"`` averages the scores over all steps.
    """
    inputs, targets = cfl_arrays(tokens, eos)
    y = model.run(inputs, targets).yhat
    score = y[-1] if rule == "final" else float(np.mean(y))
    return bool(score > 0.5)


@dataclass
class EvalResult:
    split: str
    total: int
    tp: int
    fp: int
    tn: int
    fn: int
    buckets: dict = field(default_factory=dict)  # (lo, hi) -> [correct, total]
    perplexity: float | None = None
    long: dict = field(default_factory=dict)  # probe -> (lo, hi, correct, total)

    @property
    def correct(self) -> int:
        return self.tp + self.tn

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else float("nan")

    def bucket_accuracy(self) -> dict:
        return {b: 100.0 * c / n for b, (c, n) in sorted(self.buckets.items())}

    def to_rows(self) -> list[list]:
        rows = [["split", "lo", "hi", "correct", "total", "accuracy"]]
        rows.append([self.split, "all", "all", self.correct, self.total, repr(self.accuracy)])
        for (lo, hi), (c, n) in sorted(self.buckets.items()):
            rows.append([self.split, lo, hi, c, n, repr(100.0 * c / n)])
        return rows


def _bucket(length: int, width: int) -> tuple[int, int]:
    lo = (length // width) * width
    return lo, lo + width - 1


def evaluate_split(model: Model, split: DatasetSplit, eos: int, bucket_width: int = 10, rule: str = "final") -> EvalResult:
    tp = fp = tn = fn = 0
    buckets: dict = {}
    for s in split.samples:
        accept = classify_string(model, s.tokens, eos, rule)
        if accept and s.label:
            tp += 1
        elif accept:
            fp += 1
        elif s.label:
            fn += 1
        else:
            tn += 1
        b = buckets.setdefault(_bucket(s.length, bucket_width), [0, 0])
        b[0] += int(accept == bool(s.label))
        b[1] += 1
    return EvalResult(split.name, len(split.samples), tp, fp, tn, fn, buckets)


def long_counts(model: Model, split: DatasetSplit, eos: int, probes: dict | None = None) -> dict[str, tuple]:
    """probe -> (lo, hi, correct, total) over each inclusive length range."""
    probes = DEFAULT_PROBES if probes is None else probes
    out = {}
    for name, (lo, hi) in probes.items():
        hits = [s for s in split.samples if lo <= s.length <= hi]
        correct = sum(classify_string(model, s.tokens, eos) == bool(s.label) for s in hits)
        out[name] = (lo, hi, correct, len(hits))
    return out


def evaluate_long(model: Model, split: DatasetSplit, eos: int, probes: dict | None = None) -> dict[str, float | None]:
    """Accuracy restricted to each probe's inclusive length range; ``None`` if a range is empty."""
    return {name: (100.0 * c / n if n else None) for name, (_, _, c, n) in long_counts(model, split, eos, probes).items()}


EVAL_FIELDS = ("split", "kind", "name", "lo", "hi", "tp", "fp", "tn", "fn", "correct", "total", "value")


def eval_csv(result: EvalResult) -> str:
    """Lossless CSV form of an :class:`EvalResult`; ``value`` is display only."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_FIELDS)
    sp = result.split
    if result.perplexity is not None:
        w.writerow([sp, "perplexity", "", "", "", "", "", "", "", "", result.total, repr(result.perplexity)])
    else:
        w.writerow([sp, "all", "", "", "", result.tp, result.fp, result.tn, result.fn,
                    result.correct, result.total, _fmt(result.accuracy)])
    for (lo, hi), (c, n) in sorted(result.buckets.items()):
        w.writerow([sp, "bucket", "", lo, hi, "", "", "", "", c, n, _fmt(100.0 * c / n)])
    for name, (lo, hi, c, n) in result.long.items():
        w.writerow([sp, "long", name, lo, hi, "", "", "", "", c, n, _fmt(100.0 * c / n if n else None)])
    return buf.getvalue()


def parse_eval_csv(text: str) -> EvalResult:
    res = None
    for rec in csv.DictReader(io.StringIO(text)):
        if res is None:
            res = EvalResult(rec["split"], 0, 0, 0, 0, 0)
        kind = rec["kind"]
        if kind == "all":
            res.total = int(rec["total"])
            res.tp, res.fp, res.tn, res.fn = (int(rec[k]) for k in ("tp", "fp", "tn", "fn"))
        elif kind == "perplexity":
            res.total = int(rec["total"])
            res.perplexity = float(rec["value"])
        elif kind == "bucket":
            res.buckets[(int(rec["lo"]), int(rec["hi"]))] = [int(rec["correct"]), int(rec["total"])]
        elif kind == "long":
            res.long[rec["name"]] = (int(rec["lo"]), int(rec["hi"]), int(rec["correct"]), int(rec["total"]))
        else:
            raise ValueError(f"unknown row kind {kind!r}")
    if res is None:
        raise ValueError("empty evaluation CSV")
    return res


def eval_markdown(result: EvalResult) -> str:
    if result.perplexity is not None:
        return markdown(["split", "tokens", "perplexity"], [[result.split, result.total, f"{result.perplexity:.2f}"]])
    body = [["all", result.correct, result.total, _fmt(result.accuracy)]]
    body += [[f"{lo}-{hi}", c, n, _fmt(100.0 * c / n)] for (lo, hi), (c, n) in sorted(result.buckets.items())]
    body += [[f"{name} ({lo}-{hi})", c, n, _fmt(100.0 * c / n if n else None)]
             for name, (lo, hi, c, n) in result.long.items()]
    return markdown([f"{result.split} lengths", "correct", "total", "accuracy"], body)


def perplexity(model: Model, sentences: Sequence[Sequence[int]], eos: int) -> float:
    """exp(mean per-token cross-entropy) over all tokens, EOS included."""
    total, count = 0.0, 0
    for sent in sentences:
        inputs, targets = lm_arrays(sent, eos)
        out = model.run(inputs, targets)
        total += float(out.ce.sum())
        count += len(targets)
    if count == 0:
        raise ValueError("perplexity of an empty corpus")
    return math.exp(total / count)


def unigram_perplexity(train: Sequence[Sequence[int]], test: Sequence[Sequence[int]], vocab_size: int, alpha: float = 1.0) -> float:
    """Add-``alpha`` smoothed unigram baseline."""
    counts = np.full(vocab_size, alpha)
    for sent in train:
        np.add.at(counts, np.asarray(sent), 1.0)
    logp = np.log(counts / counts.sum())
    toks = np.concatenate([np.asarray(s) for s in test])
    return float(np.exp(-logp[toks].mean()))


# ---------------------------------------------------------------------------
# tables

CSV_FIELDS = ("family", "grammar", "regime", "split", "mean", "best", "n_trials")


@dataclass
class ResultRow:
    family: str
    grammar: str
    regime: str
    split: str
    mean: float | None
    best: float | None
    n_trials: int


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "N/A"
    return f"{v:.2f}"


def _family_key(name: str) -> tuple:
    return (FAMILY_ORDER.index(name) if name in FAMILY_ORDER else len(FAMILY_ORDER), name)


def sort_rows(rows: Sequence[ResultRow], regimes: Sequence[str] | None = None) -> list[ResultRow]:
    order = list(regimes) if regimes else sorted({r.regime for r in rows})
    return sorted(rows, key=lambda r: (_family_key(r.family), r.grammar, r.split, order.index(r.regime) if r.regime in order else len(order)))


def results_csv(rows: Sequence[ResultRow], regimes: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sort_rows(rows, regimes):
        w.writerow([r.family, r.grammar, r.regime, r.split, _fmt(r.mean), _fmt(r.best), r.n_trials])
    return buf.getvalue()


def parse_results_csv(text: str) -> list[ResultRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        num = lambda s: None if s == "N/A" else float(s)
        rows.append(ResultRow(rec["family"], rec["grammar"], rec["regime"], rec["split"],
                              num(rec["mean"]), num(rec["best"]), int(rec["n_trials"])))
    return rows


def ablation_table(rows: Sequence[ResultRow], regimes: Sequence[str]) -> tuple[str, str]:
    """Families as rows and one (mean, best) column pair per regime.

    Returns ``(csv_text, markdown_text)``.  Rows follow the declared family
    order no matter how the input is ordered.
    """
    cells = {(r.family, r.regime): r for r in rows}
    families = sorted({r.family for r in rows}, key=_family_key)
    header = ["Model"] + [f"{reg} {stat}" for reg in regimes for stat in ("mean", "best")]
    body = []
    for fam in families:
        line = [DISPLAY_NAMES.get(fam, fam)]
        for reg in regimes:
            r = cells.get((fam, reg))
            line += [_fmt(r.mean if r else None), _fmt(r.best if r else None)]
        body.append(line)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue(), markdown(header, body)


def markdown(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    fmt = lambda row: "| " + " | ".join(str(c).ljust(w) for c, w in zip(row, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(header), sep, *map(fmt, body)]) + "\n"
