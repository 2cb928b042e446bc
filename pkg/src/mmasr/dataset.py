"""Example assembly, splits, FQ filtering and the on-disk dataset format.

A dataset directory holds ``manifest.json`` plus one ``<split>.jsonl`` per
split, one example per line.  Training records carry the noisy audio they
were drawn with; dev/test records are stored clean and re-noised on load,
keyed by ``(example seed, snr)`` so every load of the same cell agrees.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import random
import re
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

from . import channels as ch
from .channels import NoiseSpec, TokenStream, Vocabulary
from .eqgen import EquationTriple, derive_seed, generate_triple

SNR_GRID = (math.inf, 20.0, 10.0, 5.0, 0.0, -5.0, -10.0, -20.0, -math.inf)
SPLITS = ("train", "dev", "test")
FORMAT_VERSION = 1
OCR_VARIANTS = ("none", "real", "oracle3", "oracle10")


def format_snr(snr: float) -> str | float | int:
    snr = float(snr)
    if math.isinf(snr):
        return "inf" if snr > 0 else "-inf"
    return int(snr) if snr.is_integer() else snr


def parse_snr(value) -> float:
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("inf", "+inf", "infinity"):
            return math.inf
        if v in ("-inf", "-infinity"):
            return -math.inf
    return float(value)


def parse_ocr_variant(variant: str) -> tuple[str, int | None]:
    """``"filtered:10"`` -> ``("filtered", 10)``; plain names pass through."""
    if variant.startswith("filtered"):
        m = re.fullmatch(r"filtered[:(]?(\d+)\)?", variant)
        if not m or int(m.group(1)) < 1:
            raise ValueError(f"bad filtered OCR variant {variant!r}")
        return "filtered", int(m.group(1))
    if variant not in OCR_VARIANTS:
        raise ValueError(f"unknown OCR variant {variant!r}")
    return variant, None


@dataclass(frozen=True)
class ChannelConfig:
    repeat_rate: int = 2
    image_grid: int = 48
    image_codebook: int = ch.DEFAULT_IMAGE_CODEBOOK
    real_ocr_error: float = ch.DEFAULT_REAL_OCR_ERROR
    depth_limit: int = 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Example:
    id: str
    triple: EquationTriple
    streams: dict[str, TokenStream]
    target: TokenStream
    snr_db: float
    ocr_variant: str = "none"


@dataclass
class DatasetManifest:
    seed: int
    n_examples: int
    counts: dict[str, int]
    split_ratios: tuple[float, float, float]
    channel_config: dict
    snr_schedule: list = field(default_factory=lambda: [format_snr(s) for s in SNR_GRID])
    vocab_fingerprint: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def config_hash(self) -> str:
        payload = json.dumps({k: v for k, v in dataclasses.asdict(self).items()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["config_hash"] = self.config_hash
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        stored = d.pop("config_hash", None)
        d["split_ratios"] = tuple(d["split_ratios"])
        m = cls(**d)
        if stored is not None and stored != m.config_hash:
            raise ValueError("manifest config_hash does not match its contents")
        return m


class FrequencyTable:
    """Word -> rank (1 = most frequent); unknown words rank +inf."""

    def __init__(self, ranks: dict[str, int]):
        if len(set(ranks.values())) != len(ranks) or any(r < 1 for r in ranks.values()):
            raise ValueError("ranks must be positive and unique")
        self.ranks = dict(ranks)

    @classmethod
    def from_lines(cls, lines) -> "FrequencyTable":
        words = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
        ranks: dict[str, int] = {}
        for w in words:
            ranks.setdefault(w, len(ranks) + 1)
        return cls(ranks)

    @classmethod
    def bundled(cls) -> "FrequencyTable":
        text = resources.files("mmasr.data").joinpath("word_freq.txt").read_text()
        return cls.from_lines(text.splitlines())

    def rank(self, word: str) -> float:
        return self.ranks.get(word, math.inf)


def fq_filter(ocr_words: list[str], table: FrequencyTable, k: int) -> list[str]:
    """Keep at most ``k`` rarest distinct words, in their original order."""
    if k < 1:
        raise ValueError("K must be >= 1")
    unique = list(dict.fromkeys(ocr_words))
    # rarest first; ties keep the earlier word
    keep = sorted(range(len(unique)), key=lambda i: (-table.rank(unique[i]), i))[:k]
    return [unique[i] for i in sorted(keep)]


def ocr_words(text: str) -> list[str]:
    return re.findall(r"[a-z]+|[0-9]+", ch.compact_text(text))


def _filtered_ocr(triple: EquationTriple, vocab: Vocabulary, cfg: ChannelConfig,
                  k: int, table: FrequencyTable) -> TokenStream:
    source: dict[str, int] = {}
    flat = []
    for i, text in enumerate(ch.ocr_sentences(triple, 10, cfg.depth_limit)):
        for w in ocr_words(text):
            source.setdefault(w, i)
            flat.append(w)
    kept = fq_filter(flat, table, k)
    return ch.encode_ocr_words([(source[w], w) for w in kept], vocab)


def encode_ocr_variant(triple: EquationTriple, vocab: Vocabulary, cfg: ChannelConfig,
                       variant: str, table: FrequencyTable | None = None) -> TokenStream:
    kind, k = parse_ocr_variant(variant)
    if kind == "oracle3":
        return ch.encode_ocr(triple, vocab, 0.0, n_sentences=3)
    if kind == "oracle10":
        return ch.encode_ocr(triple, vocab, 0.0, n_sentences=10, depth_limit=cfg.depth_limit)
    if kind == "real":
        return ch.encode_ocr(triple, vocab, cfg.real_ocr_error,
                             rng_seed=derive_seed(triple.seed, "ocr-real"), n_sentences=3)
    if kind == "filtered":
        return _filtered_ocr(triple, vocab, cfg, k, table or FrequencyTable.bundled())
    raise ValueError(f"OCR variant {variant!r} yields no stream")


def audio_seed(triple: EquationTriple, snr_db: float) -> int:
    return derive_seed(triple.seed, "audio", format_snr(snr_db))


def make_example(example_id: str, triple: EquationTriple, snr_db: float, modalities,
                 vocab: Vocabulary, cfg: ChannelConfig, ocr_variant: str = "oracle3",
                 table: FrequencyTable | None = None) -> Example:
    modalities = set(modalities)
    unknown = modalities - set(ch.INPUT_ORDER)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    streams: dict[str, TokenStream] = {}
    if "A" in modalities:
        streams["A"] = ch.encode_audio(triple, vocab, cfg.repeat_rate, NoiseSpec(snr_db),
                                       audio_seed(triple, snr_db))
    if "I" in modalities:
        streams["I"] = ch.encode_image(triple, vocab, cfg.image_grid)
    if "L" in modalities:
        streams["L"] = ch.encode_lip(triple, vocab)
    if "O" in modalities:
        streams["O"] = encode_ocr_variant(triple, vocab, cfg, ocr_variant, table)
    return Example(
        id=example_id, triple=triple, streams=streams, target=ch.encode_target(triple, vocab),
        snr_db=float(snr_db), ocr_variant=ocr_variant if "O" in modalities else "none",
    )


def example_to_record(ex: Example) -> dict:
    rec = {
        "id": ex.id,
        "seed": ex.triple.seed,
        "snr_db": format_snr(ex.snr_db),
        "spoken_indices": list(ex.triple.spoken_indices),
        "equations": [e.text for e in ex.triple.equations],
        "ocr_variant": ex.ocr_variant,
    }
    for m in (*ch.INPUT_ORDER, "T"):
        s = ex.target if m == "T" else ex.streams.get(m)
        if s is not None:
            rec[f"tokens_{m}"] = list(s.ids)
            rec[f"spans_{m}"] = [list(sp) for sp in s.spans]
    return rec


def _stream(rec: dict, m: str) -> TokenStream:
    return TokenStream(m, tuple(rec[f"tokens_{m}"]), tuple(tuple(s) for s in rec[f"spans_{m}"]))


def record_to_example(rec: dict, depth_limit: int = 2) -> Example:
    triple = generate_triple(rec["seed"], depth_limit)
    if [e.text for e in triple.equations] != rec["equations"] or \
            list(triple.spoken_indices) != rec["spoken_indices"]:
        raise ValueError(f"record {rec['id']} does not match its seed")
    streams = {m: _stream(rec, m) for m in ch.INPUT_ORDER if f"tokens_{m}" in rec}
    return Example(id=rec["id"], triple=triple, streams=streams, target=_stream(rec, "T"),
                   snr_db=parse_snr(rec["snr_db"]), ocr_variant=rec["ocr_variant"])


def _atomic_write(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.chmod(tmp, 0o644)
    with os.fdopen(fd, "w") as f:
        f.write(data)
    os.replace(tmp, path)


def split_sizes(n: int, ratios) -> list[int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    n_train = round(n * ratios[0])
    n_dev = round(n * ratios[1])
    return [n_train, n_dev, n - n_train - n_dev]


def generate_examples(n_examples: int, seed: int, cfg: ChannelConfig = ChannelConfig(),
                      split_ratios=(0.8, 0.1, 0.1)) -> dict[str, list[Example]]:
    """All examples of a dataset in memory, keyed by split."""
    if n_examples < 10:
        raise ValueError("n_examples must be >= 10")
    sizes = split_sizes(n_examples, split_ratios)
    vocab = Vocabulary(cfg.image_codebook)
    order = list(range(n_examples))
    random.Random(derive_seed(seed, "split")).shuffle(order)
    bounds = [0, sizes[0], sizes[0] + sizes[1], n_examples]
    out: dict[str, list[Example]] = {}
    for k, split in enumerate(SPLITS):
        exs = []
        for idx in sorted(order[bounds[k]:bounds[k + 1]]):
            triple = generate_triple(derive_seed(seed, "example", idx), cfg.depth_limit)
            if split == "train":
                snr = SNR_GRID[random.Random(derive_seed(seed, "snr", idx)).randrange(len(SNR_GRID))]
            else:
                snr = math.inf
            exs.append(make_example(f"ex{idx:06d}", triple, snr, ch.INPUT_ORDER, vocab, cfg, "oracle3"))
        out[split] = exs
    return out


def build_dataset(path, n_examples: int, seed: int, cfg: ChannelConfig = ChannelConfig(),
                  split_ratios=(0.8, 0.1, 0.1)) -> DatasetManifest:
    path = Path(path)
    splits = generate_examples(n_examples, seed, cfg, split_ratios)
    for split, exs in splits.items():
        lines = [json.dumps(example_to_record(ex), separators=(",", ":")) for ex in exs]
        _atomic_write(path / f"{split}.jsonl", "\n".join(lines) + "\n")
    manifest = DatasetManifest(
        seed=seed, n_examples=n_examples, counts={s: len(v) for s, v in splits.items()},
        split_ratios=tuple(split_ratios), channel_config=cfg.to_dict(),
        vocab_fingerprint=Vocabulary(cfg.image_codebook).fingerprint,
    )
    _atomic_write(path / "manifest.json", json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> DatasetManifest:
    p = Path(path) / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no dataset manifest at {p}")
    return DatasetManifest.from_dict(json.loads(p.read_text()))


class DatasetHandle:
    """A built dataset directory plus its manifest, vocabulary and channel config."""

    def __init__(self, path):
        self.path = Path(path)
        self.manifest = read_manifest(self.path)
        self.channel_config = ChannelConfig(**self.manifest.channel_config)
        self.vocab = Vocabulary(self.channel_config.image_codebook)
        if self.vocab.fingerprint != self.manifest.vocab_fingerprint:
            raise ValueError("dataset was built with a different vocabulary layout")
        self._table: FrequencyTable | None = None

    @property
    def table(self) -> FrequencyTable:
        if self._table is None:
            self._table = FrequencyTable.bundled()
        return self._table

    def records(self, split: str) -> Iterator[dict]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        p = self.path / f"{split}.jsonl"
        if not p.exists():
            raise FileNotFoundError(f"missing split file {p}")
        with open(p) as f:
            for line in f:
                if line.strip():
                    yield json.loads(line)

    def examples(self, split: str, snr_db=None, modalities=("A",), ocr_variant: str = "oracle3",
                 limit: int | None = None) -> Iterator[Example]:
        modalities = set(modalities)
        if "O" in modalities:
            parse_ocr_variant(ocr_variant)
        cfg = self.channel_config
        for n, rec in enumerate(self.records(split)):
            if limit is not None and n >= limit:
                break
            stored = record_to_example(rec, cfg.depth_limit)
            snr = stored.snr_db if snr_db is None else parse_snr(snr_db)
            ex = make_example(stored.id, stored.triple, snr, modalities, self.vocab, cfg,
                              ocr_variant, self.table)
            yield ex


def load_examples(path, split: str, snr_db=None, modality_set=("A",), ocr_variant: str = "oracle3",
                  limit: int | None = None) -> Iterator[Example]:
    """Stream examples of ``split`` with exactly the requested modality streams.

    ``snr_db=None`` keeps each record's stored SNR (the training draw, or
    clean for dev/test); otherwise audio is re-noised at ``snr_db``.
    """
    return DatasetHandle(path).examples(split, snr_db, modality_set, ocr_variant, limit)
