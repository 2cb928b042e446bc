"""Text normalization, WER, relative benefit and per-SNR report tables."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from .dataset import SNR_GRID, DatasetHandle, format_snr, parse_snr
from .model import assemble, greedy_decode

_NON_ALNUM = re.compile(r"[^a-z0-9 ]")


def normalize_text(s: str) -> list[str]:
    s = _NON_ALNUM.sub(" ", s.lower())
    return s.split()


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Total edits over total reference words (not a mean of per-utterance WERs)."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise ValueError("WER is undefined for an empty reference")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / n_ref


def relative_benefit(wer_a: float, wer_xa: float) -> float | None:
    """``(WER_A - WER_X+A) / WER_A``; None when the baseline WER is zero."""
    if wer_a is None or wer_xa is None or wer_a <= 0 or math.isnan(wer_a) or math.isnan(wer_xa):
        return None
    return (wer_a - wer_xa) / wer_a


def decode_examples(model, sequences, vocab, max_new: int = 40, batch_size: int = 64) -> list[list[str]]:
    """Greedy transcripts (as normalized words) for assembled sequences."""
    outs = greedy_decode(model, [s.prefix for s in sequences], max_new, vocab.eos, vocab.pad, batch_size)
    return [normalize_text(" ".join(vocab.decode_words(o))) for o in outs]


def evaluate(model, handle: DatasetHandle, snr_grid=SNR_GRID, config_label: str = "A",
             modality_set=("A",), ocr_variant: str = "oracle3", task: str = "asr",
             split: str = "test", limit: int | None = None, max_new: int = 40) -> list[dict]:
    """Corpus WER of greedy transcripts at each SNR of the grid.

    Returns one row per SNR: ``{config, snr_db, wer, edits, ref_words, n}``.
    """
    rows = []
    for snr in snr_grid:
        seqs, refs = [], []
        for ex in handle.examples(split, snr, modality_set, ocr_variant, limit):
            seqs.append(assemble(ex, handle.vocab, task, model.cfg.max_seq_len))
            refs.append(normalize_text(ex.triple.transcript))
        if not seqs:
            raise ValueError(f"split {split!r} is empty")
        hyps = decode_examples(model, seqs, handle.vocab, max_new)
        edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
        n_ref = sum(len(r) for r in refs)
        rows.append({"config": config_label, "snr_db": format_snr(snr), "wer": edits / n_ref,
                     "edits": edits, "ref_words": n_ref, "n": len(seqs)})
    return rows


def _fmt(x: float | None, pct: bool = False, signed: bool = False) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    if pct:
        return f"{100 * x:+.1f}" if signed else f"{100 * x:.1f}"
    return f"{x:.4f}"


@dataclass
class EvalReport:
    """WER per (config, snr) with averages and benefits against ``baseline``.

    Averages are unweighted means over the grid; the average benefit is
    computed from the averaged WERs of the config and the baseline.
    """

    wer: dict[str, dict[float, float]] = field(default_factory=dict)
    baseline: str = "A"
    grid: tuple = SNR_GRID

    @classmethod
    def from_rows(cls, rows, baseline: str = "A", grid=SNR_GRID) -> "EvalReport":
        rep = cls(baseline=baseline, grid=tuple(grid))
        for r in rows:
            rep.wer.setdefault(r["config"], {})[parse_snr(r["snr_db"])] = r["wer"]
        return rep

    @property
    def configs(self) -> list[str]:
        return list(self.wer)

    def missing_cells(self) -> list[tuple[str, float]]:
        return [(c, s) for c in self.wer for s in self.grid if s not in self.wer[c]]

    def average(self, config: str) -> float:
        vals = [self.wer[config][s] for s in self.grid]
        return sum(vals) / len(vals)

    def benefit(self, config: str, snr: float) -> float | None:
        return relative_benefit(self.wer[self.baseline].get(snr), self.wer[config].get(snr))

    def average_benefit(self, config: str) -> float | None:
        return relative_benefit(self.average(self.baseline), self.average(config))

    def records(self) -> list[dict]:
        out = []
        for c in self.wer:
            for s in self.grid:
                out.append({"config": c, "snr_db": format_snr(s), "wer": self.wer[c].get(s),
                            "benefit": self.benefit(c, s) if self.baseline in self.wer else None})
            out.append({"config": c, "snr_db": "avg", "wer": self.average(c),
                        "benefit": self.average_benefit(c) if self.baseline in self.wer else None})
        return out

    def table(self) -> str:
        """Aligned text table: rows = configs, columns = SNR grid, Avg, Benefit (WER in %)."""
        head = ["config"] + [str(format_snr(s)) for s in self.grid] + ["Avg", "Benefit"]
        body = []
        for c in self.wer:
            row = [c] + [_fmt(self.wer[c].get(s), pct=True) for s in self.grid]
            row += [_fmt(self.average(c), pct=True)]
            row += ["-" if c == self.baseline else _fmt(self.average_benefit(c), pct=True, signed=True)]
            body.append(row)
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = ["  ".join(x.rjust(w) if i else x.ljust(w) for i, (x, w) in enumerate(zip(r, widths)))
                 for r in [head] + body]
        return "\n".join(lines)
