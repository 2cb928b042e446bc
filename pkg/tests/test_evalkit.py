import itertools
import math

import pytest
from hypothesis import given, strategies as st

from helpers import exhaustive_distance
from mmasr.dataset import SNR_GRID
from mmasr.evalkit import EvalReport, corpus_wer, edit_distance, normalize_text, relative_benefit, wer


def all_sequences(alphabet="abc", max_len=4):
    for n in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=n)


words = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=8)


class TestNormalize:
    @pytest.mark.parametrize("text,want", [
        ("Hello,  World!", ["hello", "world"]),
        ("Three PLUS five", ["three", "plus", "five"]),
        ("", []),
        ("  x\t-y\n", ["x", "y"]),
        ("log16=4", ["log16", "4"]),
    ])
    def test_examples(self, text, want):
        assert normalize_text(text) == want

    @given(st.text())
    def test_idempotent(self, s):
        once = normalize_text(s)
        assert normalize_text(" ".join(once)) == once
        assert all(w and set(w) <= set("abcdefghijklmnopqrstuvwxyz0123456789") for w in once)


class TestWer:
    def test_examples(self):
        assert wer(list("abc"), list("abc")) == 0.0
        assert wer(list("abc"), list("axc")) == pytest.approx(1 / 3)
        assert wer(["a", "b"], []) == 1.0
        assert wer(["a"], ["a", "b"]) == 1.0

    def test_empty_reference(self):
        with pytest.raises(ValueError):
            wer([], ["a"])

    def test_dp_matches_exhaustive(self):
        seqs = list(all_sequences())
        assert len(seqs) == 121
        for r in seqs:
            for h in seqs:
                assert edit_distance(r, h) == exhaustive_distance(r, h)

    @given(words.filter(bool), words)
    def test_bounds(self, r, h):
        assert wer(r, r) == 0
        assert 0 <= wer(r, h) <= max(len(r), len(h)) / len(r)

    def test_corpus_pooling(self):
        refs = [["a", "b", "c"], ["d", "e", "f"]]
        hyps = [["a", "x", "c"], ["d", "e", "f"]]
        assert corpus_wer(refs, hyps) == pytest.approx(1 / 6)
        refs = [["a"], ["b", "c", "d", "e"]]
        hyps = [[], ["b", "c", "d", "e"]]
        assert corpus_wer(refs, hyps) == pytest.approx(1 / 5)  # per-utterance mean would be 1/2


class TestBenefit:
    def test_examples(self):
        assert relative_benefit(0.5, 0.4) == pytest.approx(0.2)
        assert relative_benefit(0.5, 0.55) == pytest.approx(-0.1)

    def test_undefined_baseline(self):
        assert relative_benefit(0.0, 0.1) is None

    def test_sign_convention(self):
        # an added modality that lowers WER reports a positive benefit
        assert relative_benefit(0.30, 0.30 * (1 - 0.113)) == pytest.approx(0.113)

    @given(st.floats(0.01, 2), st.floats(0, 2), st.floats(0.01, 100))
    def test_scale_invariant(self, a, x, k):
        assert relative_benefit(a * k, x * k) == pytest.approx(relative_benefit(a, x), abs=1e-9)


def rows_for(configs, wers):
    return [{"config": c, "snr_db": s if math.isfinite(s) else ("inf" if s > 0 else "-inf"), "wer": w}
            for c in configs for s, w in zip(SNR_GRID, wers[c])]


class TestReport:
    def test_complete_and_averages(self):
        wers = {"A": [0.1, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], "O+A": [0.1] * 9}
        rep = EvalReport.from_rows(rows_for(wers, wers))
        assert rep.missing_cells() == []
        assert rep.average("A") == pytest.approx(sum(wers["A"]) / 9)
        assert rep.benefit("O+A", 0.0) == pytest.approx((0.4 - 0.1) / 0.4)
        assert rep.benefit("O+A", math.inf) == pytest.approx(0.0)
        assert rep.average_benefit("O+A") == pytest.approx((rep.average("A") - 0.1) / rep.average("A"))
        recs = rep.records()
        assert len(recs) == 2 * 10
        assert {r["snr_db"] for r in recs} == {"inf", "-inf", 20, 10, 5, 0, -5, -10, -20, "avg"}

    def test_missing_cells_listed(self):
        rows = rows_for(["A"], {"A": [0.2] * 9})[:-2]
        rep = EvalReport.from_rows(rows)
        assert rep.missing_cells() == [("A", -20.0), ("A", -math.inf)]

    def test_zero_baseline_cell(self):
        wers = {"A": [0.0] + [0.5] * 8, "L+A": [0.1] * 9}
        rep = EvalReport.from_rows(rows_for(wers, wers))
        assert rep.benefit("L+A", math.inf) is None
        assert "n/a" not in rep.table()  # the table shows WERs and average benefit only

    def test_table_layout(self):
        wers = {"A": [0.5] * 9, "I+A": [0.4] * 9}
        lines = EvalReport.from_rows(rows_for(wers, wers)).table().splitlines()
        assert len(lines) == 3
        head = lines[0].split()
        assert head == ["config", "inf", "20", "10", "5", "0", "-5", "-10", "-20", "-inf", "Avg", "Benefit"]
        assert lines[1].split()[-1] == "-"
        assert lines[2].split()[-2:] == ["40.0", "+20.0"]
        assert len({len(x) for x in lines}) == 1
