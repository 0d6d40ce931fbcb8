import json
import random

import numpy as np
import pytest

from _oracles import all_strings, cyk_accepts, simulate_pcfg_length
from diffstack import datagen as dg
from diffstack.datagen import Alphabet, PcfgParams, Sample
from diffstack.mathcore import RngStream

D2 = Alphabet.dyck(2)


def test_alphabet():
    assert D2.symbols == ("(", ")", "[", "]")
    assert D2.vocab[-1] == dg.EOS and D2.eos == 4 and D2.size == 5
    assert D2.decode(D2.encode("([])")) == "([])"
    with pytest.raises(ValueError):
        D2.encode("(x")
    with pytest.raises(ValueError):
        Alphabet(("a", "a"))
    assert len(Alphabet.dyck(6).pairs) == 6


def test_dyck_oracle_examples():
    assert dg.dyck_oracle((), 2)
    assert not dg.dyck_oracle(D2.encode("([)]"), 2)
    assert dg.dyck_oracle(D2.encode("([])[]"), 2)
    assert not dg.dyck_oracle(D2.encode(")("), 2)
    assert not dg.dyck_oracle(D2.encode("(("), 2)
    with pytest.raises(ValueError):
        dg.dyck_oracle((0, 7), 2)


@pytest.mark.parametrize("n", range(1, 9))
def test_dyck_oracle_matches_cyk(n):
    strings = all_strings(n)
    cyk = cyk_accepts(strings)
    mine = np.array([dg.dyck_oracle(tuple(s), 2) for s in strings.tolist()])
    np.testing.assert_array_equal(cyk, mine)


def test_palindrome():
    ab = Alphabet.palindrome()
    assert dg.palindrome_oracle(ab.encode("abba"))
    assert not dg.palindrome_oracle(ab.encode("ab"))
    rng = RngStream(0)
    for _ in range(10_000):
        s = dg.sample_palindrome((2, 20), rng)
        assert dg.palindrome_oracle(s.tokens) and s.length % 2 == 0
    with pytest.raises(ValueError):
        dg.sample_palindrome((3, 3), rng)


def test_sample_dyck_forced_pair():
    rng = RngStream(1)
    for _ in range(50):
        s = dg.sample_dyck(PcfgParams(p=0.5, p1=0.0), 1, (2, 2), rng)
        assert s.tokens == (0, 1)


def test_sample_dyck_accepted_and_in_window():
    rng = RngStream(2)
    for _ in range(2000):
        s = dg.sample_dyck(PcfgParams(), 2, (10, 40), rng)
        assert 10 <= s.length <= 40 and dg.dyck_oracle(s.tokens, 2)


def test_sample_dyck_unreachable_window():
    with pytest.raises(dg.InfeasibleWindow):
        dg.sample_dyck(PcfgParams(), 2, (3, 3), RngStream(0), retries=50)


def test_pcfg_mean_length_matches_simulation():
    n = 20_000
    rng = RngStream(5)
    mine = np.mean([dg.sample_dyck(PcfgParams(), 2, (2, 55), rng).length for _ in range(n)])
    py = random.Random(5)
    ref = np.mean([simulate_pcfg_length(0.5, 0.25, 2, 55, py) for _ in range(n)])
    q = dg.pcfg_length_distribution(PcfgParams(), 27)
    exact = sum(2 * k * q[k] for k in range(1, 28)) / sum(q[1:28])
    assert abs(mine - ref) < 0.5
    assert abs(mine - exact) < 0.35


def test_length_distribution_is_normalised():
    q = dg.pcfg_length_distribution(PcfgParams(), 4000)
    # an empty yield needs eps directly or S S with both halves empty: q0 = eps + p1 q0^2
    q0 = min(np.roots([0.25, -1.0, 0.25]).real)
    assert q[0] == pytest.approx(q0, rel=1e-12)
    # critical process: mass converges slowly to 1 from below
    assert 0.97 < sum(q) <= 1.0
    assert dg.window_mass(PcfgParams(), 2, 55) == pytest.approx(sum(q[1:28]))


def test_one_swap_variants_of_pair():
    pos = [Sample(D2.encode("[]"), 1)]
    variants = {(x, 3) for x in range(4)} | {(2, y) for y in range(4)}
    variants.discard((2, 3))
    assert all(not dg.dyck_oracle(v, 2) for v in variants)
    out, rep = dg.make_negatives(pos, lambda t: dg.dyck_oracle(t, 2), 4, RngStream(0),
                                 n_negatives=100, swap_counts=(1,), fraction=1.0)
    assert len(out) == 100 and rep.target == 100
    assert {s.tokens for s in out} <= variants
    assert len({s.tokens for s in out}) == len(variants)


def test_negative_count_arithmetic():
    rng = RngStream(3)
    pos = [dg.sample_dyck(PcfgParams(), 2, (2, 55), rng) for _ in range(1000)]
    oracle = dg.oracle_for("d2")
    for n_neg in (1000, 999, 37):
        out, rep = dg.make_negatives(pos, oracle, 4, rng, n_negatives=n_neg, fraction=0.2)
        assert len(out) == rep.target == round(0.2 * n_neg)
        assert all(not oracle(s.tokens) and s.label == 0 for s in out)
    out, rep = dg.make_negatives(pos, oracle, 4, rng)
    assert 0.15 <= rep.fraction <= 0.30 and len(out) == round(rep.fraction * 1000)


def test_unmutable_positive_is_skipped():
    # every string over a one-symbol alphabet is a palindrome
    out, rep = dg.make_negatives([Sample((0, 0), 1)], dg.palindrome_oracle, 1, RngStream(0), fraction=1.0, budget=5)
    assert out == [] and rep.skipped == 1


@pytest.fixture(scope="module")
def d2_bench():
    return dg.build_benchmark("d2", seed=7)


def test_benchmark_sizes_and_windows(d2_bench):
    sizes = {k: len(v) for k, v in d2_bench.items()}
    assert sizes == {"train": 6230, "valid": 1000, "test": 3000, "long_test": 1500}
    bounds = {"train": (2, 55), "valid": (21, 70), "test": (56, 102), "long_test": (106, 160)}
    for name, split in d2_bench.items():
        lo, hi = bounds[name]
        assert all(lo <= s.length <= hi for s in split.samples)
        frac = np.mean([s.label for s in split.samples])
        assert abs(frac - 0.5) <= 0.01


def test_benchmark_closure_and_hygiene(d2_bench):
    oracle = dg.oracle_for("d2")
    for split in d2_bench.values():
        for s in split.samples:
            assert oracle(s.tokens) == bool(s.label)
    train = {s.tokens for s in d2_bench["train"].samples}
    for name in ("test", "long_test"):
        assert not train & {s.tokens for s in d2_bench[name].samples}
    for name in ("valid", "test", "long_test"):
        toks = [s.tokens for s in d2_bench[name].samples if s.label]
        assert len(toks) == len(set(toks))


def test_benchmark_contains_hard_negatives(d2_bench):
    # type-mismatch negatives are balanced by count alone; only mutation produces many of them
    neg = [s for s in d2_bench["test"].samples if not s.label]
    balanced = [s for s in neg if sum(1 if t % 2 == 0 else -1 for t in s.tokens) == 0]
    assert 0.10 * len(neg) < len(balanced) < 0.40 * len(neg)


def test_easy_train_split_shares_positives(d2_bench):
    easy = dg.easy_train_split("d2", seed=7)
    pos = lambda sp: sorted(s.tokens for s in sp.samples if s.label)
    assert pos(easy) == pos(d2_bench["train"])


def test_files_round_trip_and_determinism(tmp_path, d2_bench):
    spec = dg.default_spec("d2")
    sums_a = dg.write_benchmark(tmp_path / "a", d2_bench, spec, 7)
    sums_b = dg.write_benchmark(tmp_path / "b", dg.build_benchmark("d2", seed=7), spec, 7)
    assert sums_a == sums_b and len(sums_a) == 4
    grammar, splits = dg.read_benchmark(tmp_path / "a")
    assert grammar == "d2"
    for name, split in d2_bench.items():
        assert splits[name].samples == split.samples
        assert splits[name].window == split.window
    meta = json.loads((tmp_path / "a" / "train.meta").read_text())
    assert meta["size"] == 6230 and meta["pcfg"] == {"p": 0.5, "p1": 0.25}
    assert sum(meta["length_histogram"].values()) == 6230
    first = (tmp_path / "a" / "test.txt").read_text().splitlines()[0]
    assert first == "#grammar=d2 seed=7 window=56,102"


def test_infeasible_spec_rejected():
    spec = dg.default_spec("d2")
    bad = dg.BenchmarkSpec("d2", (dg.SplitSpec("train", 10, (3, 3)),))
    with pytest.raises(dg.InfeasibleWindow):
        dg.check_feasible(bad)
    with pytest.raises(ValueError):
        dg.default_spec("d9x")
    with pytest.raises(ValueError):
        dg.build_benchmark("q2")
    assert spec.splits[0].size == 6230


def test_d6_sizes():
    spec = dg.default_spec("d6")
    assert [s.size for s in spec.splits] == [15000, 2000, 4000, 1500]


def test_load_corpus_small(tmp_path):
    (tmp_path / "train.txt").write_text("a a b\n")
    (tmp_path / "valid.txt").write_text("a c\n")
    c = dg.load_corpus(tmp_path, vocab_cap=10)
    assert c.vocab == ["a", "b", dg.UNK, dg.EOS]
    assert c.splits["train"] == [[0, 0, 1, 3]]
    assert c.splits["valid"] == [[0, 2, 3]]


def test_load_corpus_counts(tmp_path):
    rng = random.Random(0)
    words = [f"w{i}" for i in range(40)]
    train = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 12))) for _ in range(200)]
    valid = [" ".join(rng.choice(words + ["zz"]) for _ in range(rng.randint(1, 12))) for _ in range(50)]
    (tmp_path / "ptb.train.txt").write_text("\n".join(train) + "\n")
    (tmp_path / "ptb.valid.txt").write_text("\n".join(valid) + "\n")
    c = dg.load_corpus(tmp_path, vocab_cap=30)
    assert len(c.stream("train")) == sum(len(l.split()) for l in train) + len(train)
    kept = set(c.vocab[:30])
    unk_ref = sum(w not in kept for l in valid for w in l.split())
    assert sum(t == c.unk for t in c.stream("valid")) == unk_ref
    assert len(c.vocab) == 32


def test_load_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        dg.load_corpus(tmp_path)
    (tmp_path / "train.txt").write_text("   \n")
    with pytest.raises(ValueError):
        dg.load_corpus(tmp_path)
