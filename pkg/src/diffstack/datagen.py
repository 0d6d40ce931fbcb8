"""Formal-language datasets: Dyck-n and even palindromes, plus plain-text corpora.

Token layout for Dyck-n: pair ``j`` uses index ``2j`` for the opening and
``2j + 1`` for the closing symbol; EOS is always the last vocabulary entry.
Length windows are inclusive ``(min, max)`` pairs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .mathcore import RngStream

log = logging.getLogger(__name__)

EOS = "<eos>"
UNK = "<unk>"

_BRACKETS = [("(", ")"), ("[", "]"), ("{", "}"), ("<", ">"), ("«", "»"), ("‹", "›")]


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")
        if EOS in self.symbols:
            raise ValueError("EOS is reserved")

    @classmethod
    def dyck(cls, n_pairs: int) -> "Alphabet":
        if n_pairs < 1:
            raise ValueError("need at least one bracket pair")
        pairs = [_BRACKETS[j] if j < len(_BRACKETS) else (f"({j}", f"){j}") for j in range(n_pairs)]
        return cls(tuple(s for p in pairs for s in p), tuple(pairs))

    @classmethod
    def palindrome(cls) -> "Alphabet":
        return cls(("a", "b"))

    @property
    def vocab(self) -> tuple[str, ...]:
        return self.symbols + (EOS,)

    @property
    def eos(self) -> int:
        return len(self.symbols)

    @property
    def size(self) -> int:
        """Vocabulary size including EOS."""
        return len(self.symbols) + 1

    def encode(self, text: str | Sequence[str]) -> tuple[int, ...]:
        lookup = {s: i for i, s in enumerate(self.symbols)}
        try:
            return tuple(lookup[s] for s in text)
        except KeyError as exc:
            raise ValueError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, tokens: Iterable[int]) -> str:
        return "".join(self.vocab[t] for t in tokens)


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    label: int

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class DatasetSplit:
    name: str
    samples: list[Sample]
    window: tuple[int, int]
    positive_fraction: float = 0.5

    def __len__(self):
        return len(self.samples)

    def check(self) -> None:
        lo, hi = self.window
        for s in self.samples:
            if not lo <= s.length <= hi:
                raise ValueError(f"{self.name}: length {s.length} outside window {self.window}")
        if self.samples:
            frac = sum(s.label for s in self.samples) / len(self.samples)
            if abs(frac - self.positive_fraction) > 0.01:
                raise ValueError(f"{self.name}: positive fraction {frac:.3f} != {self.positive_fraction}")

    def length_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(s.length for s in self.samples).items()))


@dataclass(frozen=True)
class PcfgParams:
    p: float = 0.5
    p1: float = 0.25

    def __post_init__(self):
        if self.p < 0 or self.p1 < 0 or self.p + self.p1 >= 1:
            raise ValueError(f"invalid PCFG params p={self.p} p1={self.p1}")

    @property
    def p_eps(self) -> float:
        return 1.0 - (self.p + self.p1)


class InfeasibleWindow(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# oracles


def dyck_oracle(tokens: Sequence[int], n_pairs: int) -> bool:
    stack = []
    for t in tokens:
        if not 0 <= t < 2 * n_pairs:
            raise ValueError(f"symbol index {t} is not in the D{n_pairs} alphabet")
        if t % 2 == 0:
            stack.append(t)
        elif not stack or stack.pop() != t - 1:
            return False
    return not stack


def palindrome_oracle(tokens: Sequence[int]) -> bool:
    """Even-length palindromes w w^R (the empty string included)."""
    n = len(tokens)
    if n % 2:
        return False
    i, j = 0, n - 1
    while i < j:
        if tokens[i] != tokens[j]:
            return False
        i += 1
        j -= 1
    return True


def oracle_for(grammar: str) -> Callable[[Sequence[int]], bool]:
    if grammar == "palindrome":
        return palindrome_oracle
    n = _dyck_pairs(grammar)
    return lambda tokens: dyck_oracle(tokens, n)


def alphabet_for(grammar: str) -> Alphabet:
    if grammar == "palindrome":
        return Alphabet.palindrome()
    return Alphabet.dyck(_dyck_pairs(grammar))


def _dyck_pairs(grammar: str) -> int:
    g = grammar.lower()
    if len(g) < 2 or g[0] != "d" or not g[1:].isdigit() or int(g[1:]) < 1:
        raise ValueError(f"unknown grammar {grammar!r}")
    return int(g[1:])


# ---------------------------------------------------------------------------
# generators


def sample_dyck(
    params: PcfgParams,
    n_pairs: int,
    window: tuple[int, int],
    rng: RngStream,
    retries: int = 10_000,
) -> Sample:
    """Draw from the Dyck PCFG conditioned (by rejection) on the length window."""
    lo, hi = window
    if hi < 2:
        raise ValueError("window max must be at least 2")
    for _ in range(retries):
        tokens = _derive(params, n_pairs, hi, rng)
        if tokens is not None and len(tokens) >= lo:
            return Sample(tuple(tokens), 1)
    raise InfeasibleWindow(f"no D{n_pairs} string with length in {window} after {retries} draws")


def _derive(params: PcfgParams, n_pairs: int, max_len: int, rng: RngStream):
    # one S expansion per draw: bracket j w.p. p/n, S S w.p. p1, epsilon otherwise
    bracket_mass = params.p
    split_mass = params.p + params.p1
    out: list[int] = []
    pending: list[int] = [-1]  # -1 is the nonterminal S, others are closing symbols
    committed = 0  # emitted symbols plus closing symbols still owed
    while pending:
        item = pending.pop()
        if item >= 0:
            out.append(item)
            continue
        r = rng.random()
        if r < bracket_mass:
            j = min(int(r / bracket_mass * n_pairs), n_pairs - 1)
            committed += 2
            if committed > max_len:
                return None
            out.append(2 * j)
            pending.append(2 * j + 1)
            pending.append(-1)
        elif r < split_mass:
            pending.append(-1)
            pending.append(-1)
    return out


def sample_palindrome(window: tuple[int, int], rng: RngStream) -> Sample:
    lo, hi = window
    if lo < 2 and hi >= 2:
        lo = 2
    evens = [n for n in range(max(lo, 2), hi + 1) if n % 2 == 0]
    if not evens:
        raise ValueError(f"window {window} holds no even length")
    n = evens[int(rng.integers(len(evens)))]
    half = [int(v) for v in rng.integers(0, 2, size=n // 2)]
    return Sample(tuple(half + half[::-1]), 1)


def random_negative(length: int, n_symbols: int, oracle, rng: RngStream, retries: int = 1000) -> Sample:
    """Uniform random string of the given length that the oracle rejects."""
    for _ in range(retries):
        tokens = tuple(int(v) for v in rng.integers(0, n_symbols, size=length))
        if not oracle(tokens):
            return Sample(tokens, 0)
    raise InfeasibleWindow(f"could not draw a rejected string of length {length}")


@dataclass
class NegativeReport:
    fraction: float
    target: int
    skipped: int = 0


def make_negatives(
    positives: Sequence[Sample],
    oracle,
    n_symbols: int,
    rng: RngStream,
    n_negatives: int | None = None,
    fraction_range: tuple[float, float] = (0.15, 0.30),
    swap_counts: Sequence[int] = (1, 3),
    fraction: float | None = None,
    budget: int = 100,
) -> tuple[list[Sample], NegativeReport]:
    """Hard negatives: positives with 1 or 3 positions overwritten, oracle-rejected.

    The number produced is ``round(fraction * n_negatives)``, with ``fraction``
    drawn uniformly from ``fraction_range`` unless given.
    """
    if n_negatives is None:
        n_negatives = len(positives)
    if fraction is None:
        fraction = rng.uniform(*fraction_range)
    target = int(round(fraction * n_negatives))
    report = NegativeReport(fraction, target)
    out: list[Sample] = []
    if not positives or target == 0:
        return out, report
    order = [int(i) for i in rng.generator.permutation(len(positives))]
    exhausted: set[int] = set()
    cursor = 0
    while len(out) < target and len(exhausted) < len(order):
        i = order[cursor % len(order)]
        cursor += 1
        if i in exhausted:
            continue
        mutant = _mutate(positives[i].tokens, oracle, n_symbols, swap_counts, rng, budget)
        if mutant is None:
            exhausted.add(i)
            report.skipped += 1
            continue
        out.append(Sample(mutant, 0))
    if report.skipped:
        log.warning("%d positives stayed accepted after %d mutations", report.skipped, budget)
    return out, report


def _mutate(tokens, oracle, n_symbols, swap_counts, rng, budget):
    n = len(tokens)
    if n == 0:
        return None
    for _ in range(budget):
        k = min(int(swap_counts[int(rng.integers(len(swap_counts)))]), n)
        positions = rng.generator.choice(n, size=k, replace=False)
        new = list(tokens)
        for pos in positions:
            new[int(pos)] = int(rng.integers(n_symbols))
        new = tuple(new)
        if not oracle(new):
            return new
    return None


# ---------------------------------------------------------------------------
# benchmark construction


@dataclass(frozen=True)
class SplitSpec:
    name: str
    size: int
    window: tuple[int, int]


@dataclass
class BenchmarkSpec:
    grammar: str
    splits: tuple[SplitSpec, ...]
    pcfg: PcfgParams = field(default_factory=PcfgParams)
    hard_negatives: bool = True
    fraction_range: tuple[float, float] = (0.15, 0.30)
    swap_counts: tuple[int, ...] = (1, 3)
    allow_train_duplicates: bool = True


SPLIT_NAMES = ("train", "valid", "test", "long_test")


def default_spec(grammar: str, scale: float = 1.0) -> BenchmarkSpec:
    """Paper-sized splits; ``scale`` shrinks every split for quick runs."""
    grammar = grammar.lower()
    if grammar == "d6":
        sizes = (15000, 2000, 4000, 1500)
    elif grammar in ("d2", "d3", "palindrome") or grammar.startswith("d"):
        alphabet_for(grammar)
        sizes = (6230, 1000, 3000, 1500)
    else:
        raise ValueError(f"unknown grammar {grammar!r}")
    windows = ((2, 55), (21, 70), (56, 102), (106, 160))
    splits = tuple(
        SplitSpec(name, max(2, int(round(size * scale))), win)
        for name, size, win in zip(SPLIT_NAMES, sizes, windows)
    )
    return BenchmarkSpec(grammar, splits)


def check_feasible(spec: BenchmarkSpec) -> None:
    """Reject window/parameter combinations before anything is generated or written."""
    alphabet_for(spec.grammar)
    for s in spec.splits:
        lo, hi = s.window
        if lo > hi or hi < 2:
            raise InfeasibleWindow(f"{s.name}: empty window {s.window}")
        if not any(n % 2 == 0 for n in range(max(lo, 2), hi + 1)):
            raise InfeasibleWindow(f"{s.name}: window {s.window} holds no even length")
        if spec.grammar != "palindrome":
            mass = window_mass(spec.pcfg, lo, hi)
            if mass < 1e-4:
                raise InfeasibleWindow(f"{s.name}: PCFG mass {mass:.2e} in window {s.window} is too small")
    lo_long = [s.window for s in spec.splits if s.name == "long_test"]
    train = [s.window for s in spec.splits if s.name == "train"]
    if lo_long and train and not (lo_long[0][0] > train[0][1] or lo_long[0][1] < train[0][0]):
        raise InfeasibleWindow("long_test window overlaps the train window")


def pcfg_length_distribution(params: PcfgParams, max_pairs: int) -> list[float]:
    """Exact P(yield has k bracket pairs), k = 0..max_pairs.

    q_k = eps[k=0] + p q_{k-1} + p1 sum_i q_i q_{k-i}; the q_k q_0 terms are
    moved to the left-hand side.
    """
    p, p1, eps = params.p, params.p1, params.p_eps
    if p1 == 0:
        q0 = eps
    else:
        q0 = (1 - math.sqrt(1 - 4 * p1 * eps)) / (2 * p1)
    q = [q0]
    for k in range(1, max_pairs + 1):
        acc = p * q[k - 1] + p1 * sum(q[i] * q[k - i] for i in range(1, k))
        q.append(acc / (1 - 2 * p1 * q0))
    return q


def window_mass(params: PcfgParams, lo: int, hi: int) -> float:
    q = pcfg_length_distribution(params, hi // 2)
    return sum(q[k] for k in range(len(q)) if lo <= 2 * k <= hi)


def _positives(spec: BenchmarkSpec, n: int, window, rng: RngStream) -> list[Sample]:
    if spec.grammar == "palindrome":
        return [sample_palindrome(window, rng) for _ in range(n)]
    n_pairs = _dyck_pairs(spec.grammar)
    return [sample_dyck(spec.pcfg, n_pairs, window, rng) for _ in range(n)]


def build_split(spec: BenchmarkSpec, split: SplitSpec, rng: RngStream, exclude: set | None = None) -> DatasetSplit:
    alphabet = alphabet_for(spec.grammar)
    oracle = oracle_for(spec.grammar)
    n_sym = len(alphabet.symbols)
    n_pos = split.size // 2
    n_neg = split.size - n_pos
    pos: list[Sample] = []
    seen: set = set()
    dedupe = split.name != "train" or not spec.allow_train_duplicates
    attempts = 0
    while len(pos) < n_pos:
        attempts += 1
        if attempts > 100 * split.size + 10_000:
            raise InfeasibleWindow(f"{split.name}: could not collect {n_pos} distinct positives")
        s = _positives(spec, 1, split.window, rng)[0]
        if (exclude and s.tokens in exclude) or (dedupe and s.tokens in seen):
            continue
        seen.add(s.tokens)
        pos.append(s)
    # easy negatives mirror the positive length profile
    lengths = [pos[int(i)].length for i in rng.integers(0, len(pos), size=n_neg)]
    neg = []
    for L in lengths:
        while True:
            s = random_negative(L, n_sym, oracle, rng)
            if not (exclude and s.tokens in exclude):
                break
        neg.append(s)
    if spec.hard_negatives:
        hard, _ = make_negatives(
            pos, oracle, n_sym, rng, n_negatives=n_neg,
            fraction_range=spec.fraction_range, swap_counts=spec.swap_counts,
        )
        if exclude:
            hard = [h for h in hard if h.tokens not in exclude]
        slots = rng.generator.choice(len(neg), size=len(hard), replace=False)
        for slot, h in zip(slots, hard):
            neg[int(slot)] = h
    samples = pos + neg
    rng.shuffle(samples)
    out = DatasetSplit(split.name, samples, split.window, positive_fraction=n_pos / split.size)
    out.check()
    return out


def build_benchmark(spec: BenchmarkSpec | str, seed: int = 0) -> dict[str, DatasetSplit]:
    if isinstance(spec, str):
        spec = default_spec(spec)
    check_feasible(spec)
    master = RngStream(seed)
    out: dict[str, DatasetSplit] = {}
    train_tokens: set = set()
    for k, split in enumerate(spec.splits):
        rng = master.spawn(k)
        exclude = train_tokens if split.name in ("test", "long_test") else None
        out[split.name] = build_split(spec, split, rng, exclude)
        if split.name == "train":
            train_tokens = {s.tokens for s in out[split.name].samples}
    verify_closure(out, spec.grammar)
    return out


def easy_train_split(spec: BenchmarkSpec | str, seed: int = 0) -> DatasetSplit:
    """The train split of ``build_benchmark(spec, seed)`` with easy negatives only.

    Positives are drawn before negatives from the same stream, so they match
    the hard-negative build exactly.
    """
    if isinstance(spec, str):
        spec = default_spec(spec)
    spec = replace(spec, hard_negatives=False)
    k = [s.name for s in spec.splits].index("train")
    return build_split(spec, spec.splits[k], RngStream(seed).spawn(k))


def verify_closure(splits: dict[str, DatasetSplit], grammar: str) -> None:
    oracle = oracle_for(grammar)
    for split in splits.values():
        for s in split.samples:
            if bool(oracle(s.tokens)) != bool(s.label):
                raise AssertionError(f"{split.name}: label {s.label} disagrees with oracle")


# ---------------------------------------------------------------------------
# files


def write_split(path: Path, split: DatasetSplit, grammar: str, seed: int, pcfg: PcfgParams | None = None) -> None:
    alphabet = alphabet_for(grammar)
    lo, hi = split.window
    lines = [f"#grammar={grammar} seed={seed} window={lo},{hi}"]
    for s in split.samples:
        lines.append(f"{s.label}\t{' '.join(alphabet.symbols[t] for t in s.tokens)}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "split": split.name,
        "size": len(split),
        "positive_fraction": sum(s.label for s in split.samples) / max(len(split), 1),
        "window": [lo, hi],
        "length_histogram": {str(k): v for k, v in split.length_histogram().items()},
        "pcfg": None if pcfg is None or grammar == "palindrome" else {"p": pcfg.p, "p1": pcfg.p1},
    }
    path.with_suffix(".meta").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_split(path: Path) -> tuple[str, DatasetSplit]:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing header line")
    header = dict(kv.split("=", 1) for kv in text[0][1:].split())
    grammar = header["grammar"]
    lo, hi = (int(v) for v in header["window"].split(","))
    alphabet = alphabet_for(grammar)
    samples = []
    for line in text[1:]:
        if not line:
            continue
        label, _, body = line.partition("\t")
        samples.append(Sample(alphabet.encode(body.split()), int(label)))
    frac = sum(s.label for s in samples) / max(len(samples), 1)
    return grammar, DatasetSplit(path.stem, samples, (lo, hi), frac)


def write_benchmark(out_dir: Path, splits: dict[str, DatasetSplit], spec: BenchmarkSpec, seed: int) -> dict[str, str]:
    """Write every split plus sidecars; returns sha256 checksums per file name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sums = {}
    for name, split in splits.items():
        path = out_dir / f"{name}.txt"
        write_split(path, split, spec.grammar, seed, spec.pcfg)
        sums[path.name] = file_sha256(path)
    return sums


def read_benchmark(data_dir: Path) -> tuple[str, dict[str, DatasetSplit]]:
    data_dir = Path(data_dir)
    grammar = None
    splits = {}
    for name in SPLIT_NAMES:
        path = data_dir / f"{name}.txt"
        if path.exists():
            grammar, splits[name] = read_split(path)
    if not splits:
        raise FileNotFoundError(f"no dataset splits in {data_dir}")
    return grammar, splits


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# plain-text corpora


@dataclass
class Corpus:
    vocab: list[str]
    splits: dict[str, list[list[int]]]  # split -> sentences of indices, each ending in EOS

    @property
    def unk(self) -> int:
        return self.vocab.index(UNK)

    @property
    def eos(self) -> int:
        return self.vocab.index(EOS)

    def stream(self, split: str) -> list[int]:
        return [t for sent in self.splits[split] for t in sent]


def _corpus_file(root: Path, split: str) -> Path:
    for name in (f"{split}.txt", f"ptb.{split}.txt"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"no {split} file under {root}")


def _read_lines(path: Path) -> list[list[str]]:
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ValueError(f"{path} is empty")
    return [line.split() for line in text.splitlines() if line.strip()]


def load_corpus(path: Path, vocab_cap: int = 10_000, splits: Sequence[str] = ("train", "valid", "test")) -> Corpus:
    """Whitespace-tokenised corpus; each line ends with EOS, rare words map to UNK."""
    root = Path(path)
    raw = {}
    for split in splits:
        try:
            raw[split] = _read_lines(_corpus_file(root, split))
        except FileNotFoundError:
            if split == "train":
                raise
    counts = Counter(w for line in raw["train"] for w in line if w != UNK)
    words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:vocab_cap]
    vocab = words + [UNK, EOS]
    index = {w: i for i, w in enumerate(vocab)}
    unk, eos = index[UNK], index[EOS]
    out = {
        split: [[index.get(w, unk) for w in line] + [eos] for line in lines]
        for split, lines in raw.items()
    }
    return Corpus(vocab, out)
