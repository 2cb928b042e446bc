"""Symbolic modality channels over one shared discrete vocabulary.

Each encoder turns an :class:`~mmasr.eqgen.EquationTriple` into a
:class:`TokenStream` whose ids live in that modality's id block:

* audio (A): one unit per lexicon word, repeated ``repeat_rate`` times, with
  SNR-controlled substitutions on the second half of every spoken equation;
* lip (L): characters folded through an 8-class viseme table (noise-free but
  ambiguous);
* image (I): a fixed-length lossy hash of character bigrams over all three
  written equations;
* OCR (O): the written characters, optionally with i.i.d. substitutions.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field
from functools import cached_property

from .eqgen import LEXICON, EquationTriple, derive_seed, generate_equation

MODALITIES = ("A", "I", "L", "O", "T")
INPUT_ORDER = ("A", "I", "L", "O")
TASKS = ("asr", "lip_to_text")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")

# 8 viseme classes; "th" is folded into the labiodental class before lookup.
VISEME_CLASSES = (
    ("bilabial", "bmp"),
    ("labiodental", "fv"),
    ("alveolar", "tdszln"),
    ("velar", "kgcqxh"),
    ("rhotic", "rj"),
    ("vowel_open", "a"),
    ("vowel_spread", "eiy"),
    ("vowel_round", "ouw"),
)
VISEME_OF = {ch: i for i, (_, chars) in enumerate(VISEME_CLASSES) for ch in chars}
LIP_REST = "rest"

OCR_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz+-/^=()"

DEFAULT_IMAGE_CODEBOOK = 64
DEFAULT_REAL_OCR_ERROR = 0.05


def snr_to_corruption(snr_db: float) -> float:
    """Substitution probability ``1 / (1 + 10**(snr_db/10))``.

    Exact at the limits: +inf -> 0.0, -inf -> 1.0, 0 -> 0.5.
    """
    x = float(snr_db) * math.log(10.0) / 10.0
    if math.isnan(x):
        raise ValueError("snr_db is NaN")
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = math.inf
    region: str = "second_half_per_equation"

    def __post_init__(self):
        if self.region not in ("second_half_per_equation", "whole", "none"):
            raise ValueError(f"unknown corruption region {self.region!r}")

    @property
    def probability(self) -> float:
        return 0.0 if self.region == "none" else snr_to_corruption(self.snr_db)


def lip_units(word: str) -> list[int]:
    """Viseme class ids for one word; consecutive repeats merge into one."""
    units: list[int] = []
    i = 0
    while i < len(word):
        if word.startswith("th", i):
            cls = VISEME_OF["f"]
            i += 2
        else:
            cls = VISEME_OF[word[i]]
            i += 1
        if not units or units[-1] != cls:
            units.append(cls)
    return units


def compact_text(text: str) -> str:
    """OCR-style cleaning: keep letters, digits and operators, drop spaces."""
    return "".join(ch for ch in text if ch in OCR_ALPHABET)


def bigram_unit(bigram: str, codebook: int) -> int:
    h = hashlib.blake2b(bigram.encode(), digest_size=4).digest()
    return int.from_bytes(h, "little") % codebook


class Vocabulary:
    """Disjoint id blocks for every modality plus special and prompt tokens.

    Layout: specials, task prompts (one per task x non-empty input subset),
    modality tags, then content blocks T, A, L, I, O.
    """

    def __init__(self, image_codebook: int = DEFAULT_IMAGE_CODEBOOK):
        self.image_codebook = image_codebook
        symbols: list[tuple[str, str]] = [("special", s) for s in SPECIALS]
        for task in TASKS:
            for mask in range(1, 16):
                symbols.append(("prompt", f"{task}:{mask}"))
        symbols += [("tag", m) for m in INPUT_ORDER]
        symbols += [("T", w) for w in LEXICON]
        symbols += [("A", w) for w in LEXICON]
        symbols += [("L", name) for name, _ in VISEME_CLASSES] + [("L", LIP_REST)]
        symbols += [("I", f"u{k}") for k in range(image_codebook)] + [("I", "pad")]
        symbols += [("O", ch) for ch in OCR_ALPHABET]
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}
        if len(self.index) != len(symbols):
            raise AssertionError("vocabulary symbols collide")
        self.blocks: dict[str, range] = {}
        for kind in ("special", "prompt", "tag", *MODALITIES):
            ids = [i for i, (k, _) in enumerate(symbols) if k == kind]
            self.blocks[kind] = range(ids[0], ids[-1] + 1)

        self.pad, self.bos, self.eos, self.sep = (self.index[("special", s)] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, modality: str, symbol: str) -> int:
        return self.index[(modality, symbol)]

    def lookup(self, token_id: int) -> tuple[str, str]:
        return self.symbols[token_id]

    def modality_of(self, token_id: int) -> str:
        return self.symbols[token_id][0]

    def tag(self, modality: str) -> int:
        return self.index[("tag", modality)]

    def prompt(self, task: str, modalities) -> int:
        mask = sum(1 << INPUT_ORDER.index(m) for m in set(modalities))
        if not mask:
            raise ValueError("task prompt needs at least one input modality")
        return self.index[("prompt", f"{task}:{mask}")]

    def block_ids(self, modality: str, include_sep: bool = True) -> set[int]:
        ids = set(self.blocks[modality])
        return ids | {self.sep} if include_sep else ids

    def decode_words(self, ids) -> list[str]:
        """Text-block ids to words; stops at EOS, other ids become ``unk``."""
        words = []
        for i in ids:
            if i == self.eos:
                break
            kind, sym = self.symbols[i]
            words.append(sym if kind == "T" else "unk")
        return words

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self.symbols).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TokenStream:
    """Token ids of one modality; ``spans`` are ``(equation_index, start, end)``."""

    modality: str
    ids: tuple[int, ...]
    spans: tuple[tuple[int, int, int], ...] = field(default=())

    def __len__(self) -> int:
        return len(self.ids)

    def segments(self) -> list[tuple[int, ...]]:
        return [self.ids[s:e] for _, s, e in self.spans]

    def validate(self, vocab: Vocabulary) -> None:
        allowed = set(vocab.blocks[self.modality]) | {vocab.sep}
        if self.modality == "T":
            allowed.add(vocab.eos)
        bad = [i for i in self.ids if i not in allowed]
        if bad:
            raise ValueError(f"{self.modality} stream holds foreign ids {bad[:5]}")
        prev_end = 0
        for _, s, e in self.spans:
            if s < prev_end or e < s or e > len(self.ids):
                raise ValueError(f"bad span layout {self.spans}")
            prev_end = e


def _join_segments(modality: str, segments: list[tuple[int, list[int]]], sep: int) -> TokenStream:
    ids: list[int] = []
    spans = []
    for k, (eq_index, seg) in enumerate(segments):
        if k:
            ids.append(sep)
        spans.append((eq_index, len(ids), len(ids) + len(seg)))
        ids.extend(seg)
    return TokenStream(modality, tuple(ids), tuple(spans))


def first_noisy_offset(span_len: int) -> int:
    """Index (within a span) of the first corruptible token."""
    return math.ceil(span_len / 2)


def encode_audio(triple: EquationTriple, vocab: Vocabulary, repeat_rate: int = 2,
                 noise: NoiseSpec = NoiseSpec(), rng_seed: int = 0) -> TokenStream:
    if repeat_rate < 1:
        raise ValueError("repeat_rate must be >= 1")
    p = noise.probability
    audio_block = vocab.blocks["A"]
    rng = random.Random(derive_seed(rng_seed, "audio-noise"))
    segments = []
    for i in triple.spoken_indices:
        seg = [vocab.id("A", w) for w in triple.equations[i].words for _ in range(repeat_rate)]
        if p > 0:
            start = 0 if noise.region == "whole" else first_noisy_offset(len(seg))
            for t in range(start, len(seg)):
                if rng.random() < p:
                    seg[t] = audio_block[rng.randrange(len(audio_block))]
        segments.append((i, seg))
    return _join_segments("A", segments, vocab.sep)


def encode_lip(triple: EquationTriple, vocab: Vocabulary) -> TokenStream:
    rest = vocab.id("L", LIP_REST)
    base = vocab.blocks["L"][0]
    segments = []
    for i in triple.spoken_indices:
        seg: list[int] = []
        for k, word in enumerate(triple.equations[i].words):
            if k:
                seg.append(rest)
            seg.extend(base + u for u in lip_units(word))
        segments.append((i, seg))
    return _join_segments("L", segments, vocab.sep)


def encode_image(triple: EquationTriple, vocab: Vocabulary, grid_len: int = 48) -> TokenStream:
    base = vocab.blocks["I"][0]
    pad = vocab.id("I", "pad")
    ids: list[int] = []
    spans = []
    for i, eq in enumerate(triple.equations):
        chars = compact_text(eq.text)
        units = [base + bigram_unit(chars[k:k + 2], vocab.image_codebook) for k in range(len(chars) - 1)]
        units = units[:max(0, grid_len - len(ids))]
        if units:
            spans.append((i, len(ids), len(ids) + len(units)))
            ids.extend(units)
    ids.extend([pad] * (grid_len - len(ids)))
    return TokenStream("I", tuple(ids), tuple(spans))


def distractor_equations(triple: EquationTriple, count: int = 7, depth_limit: int = 2):
    return [generate_equation(derive_seed(triple.seed, "distractor", k), depth_limit) for k in range(count)]


def _ocr_chars(text: str, vocab: Vocabulary, rng: random.Random, error_rate: float) -> list[int]:
    out = []
    for ch in compact_text(text):
        if error_rate > 0 and rng.random() < error_rate:
            ch = OCR_ALPHABET[rng.randrange(len(OCR_ALPHABET))]
        out.append(vocab.id("O", ch))
    return out


def ocr_sentences(triple: EquationTriple, n_sentences: int = 3, depth_limit: int = 2) -> list[str]:
    if n_sentences not in (3, 10):
        raise ValueError(f"n_sentences must be 3 or 10, got {n_sentences}")
    texts = [eq.text for eq in triple.equations]
    if n_sentences == 10:
        texts += [eq.text for eq in distractor_equations(triple, 7, depth_limit)]
    return texts


def encode_ocr(triple: EquationTriple, vocab: Vocabulary, char_error_rate: float = 0.0,
               rng_seed: int = 0, n_sentences: int = 3, depth_limit: int = 2) -> TokenStream:
    if not 0.0 <= char_error_rate <= 1.0:
        raise ValueError("char_error_rate must lie in [0, 1]")
    texts = ocr_sentences(triple, n_sentences, depth_limit)
    rng = random.Random(derive_seed(rng_seed, "ocr-noise"))
    segments = [(i, _ocr_chars(t, vocab, rng, char_error_rate)) for i, t in enumerate(texts)]
    return _join_segments("O", segments, vocab.sep)


def encode_ocr_words(words: list[tuple[int, str]], vocab: Vocabulary) -> TokenStream:
    """OCR stream from already selected ``(sentence_index, word)`` pairs, SEP-delimited."""
    segments = [(i, [vocab.id("O", ch) for ch in compact_text(w)]) for i, w in words]
    return _join_segments("O", segments, vocab.sep)


def encode_target(triple: EquationTriple, vocab: Vocabulary) -> TokenStream:
    ids: list[int] = []
    spans = []
    for i in triple.spoken_indices:
        words = triple.equations[i].words
        spans.append((i, len(ids), len(ids) + len(words)))
        ids.extend(vocab.id("T", w) for w in words)
    ids.append(vocab.eos)
    return TokenStream("T", tuple(ids), tuple(spans))
