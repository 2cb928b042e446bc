"""Experiment plans: train one model per (config, seed), evaluate on the SNR grid,
aggregate over seeds and compute the trend verdicts.

Bundle layout under ``out``::

    plan.json            resolved plan with every default filled in
    cells/<config>/seed<k>/
        model.ckpt       best checkpoint
        train_log.jsonl  training log
        cell.json        done marker: cell key, checkpoint sha256, per-SNR rows
    results.json         per-seed WERs, seed-aggregated benefits, verdicts
    report.txt           seed-mean WER table
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import statistics
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import SNR_GRID, DatasetHandle, _atomic_write, build_dataset, format_snr, parse_snr
from .evalkit import EvalReport, evaluate, relative_benefit
from .model import ModelConfig
from .trainer import TrainConfig, fresh_model, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("exp1_modality_ablation", "exp2_noise_curves", "exp3_irrelevance")
BASELINE = "A"
FINITE_GRID = tuple(s for s in SNR_GRID if math.isfinite(s))
_OCR_TOKEN = re.compile(r"^O_(real|oracle3|oracle10|filtered(\d+))$")
_PLAN_KEYS = {"experiment", "configs", "seeds", "dataset", "train", "model", "eval", "cell_store"}


class PlanError(ValueError):
    pass


class IncompleteGrid(ValueError):
    def __init__(self, cells):
        self.cells = cells
        super().__init__("incomplete grid, missing cells: " + ", ".join(f"{c}@{s}" for c, s in cells))


def parse_config_label(label: str) -> tuple[tuple[str, ...], str]:
    """Map a label such as ``O_real+L+A`` to (modality set, OCR variant)."""
    parts = label.split("+")
    if len(set(parts)) != len(parts) or "A" not in parts:
        raise PlanError(f"bad config label {label!r}: needs A and no repeats")
    mods, variant = [], "oracle3"
    for p in parts:
        if p in ("A", "I", "L"):
            mods.append(p)
            continue
        m = _OCR_TOKEN.match(p)
        if not m:
            raise PlanError(f"bad modality {p!r} in config label {label!r}")
        mods.append("O")
        variant = f"filtered:{m.group(2)}" if m.group(2) else m.group(1)
    order = {m: k for k, m in enumerate("AILO")}
    return tuple(sorted(mods, key=order.__getitem__)), variant


@dataclass
class ExperimentPlan:
    experiment: str
    configs: list[str]
    seeds: list[int]
    dataset: dict
    train: dict
    model: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    cell_store: str | None = None
    base_dir: Path = field(default=Path("."), repr=False)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise PlanError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if BASELINE not in self.configs:
            raise PlanError("every plan must include the audio-only baseline 'A'")
        if len(set(self.configs)) != len(self.configs):
            raise PlanError("duplicate config labels")
        for c in self.configs:
            parse_config_label(c)
        if self.experiment == "exp3_irrelevance" and not any(
                "O_oracle10" in c or "O_filtered" in c for c in self.configs):
            raise PlanError("exp3 plans need O_oracle10 or O_filtered<K>")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise PlanError("seeds must be a nonempty list of distinct ints")
        if "path" not in self.dataset:
            raise PlanError("dataset.path is required")
        if "max_steps" not in self.train:
            raise PlanError("train.max_steps is required (the fine-tuning budget has no default)")
        allowed = {f.name for f in fields(TrainConfig)} - {"seed", "modality_set", "ocr_variant"}
        if set(self.train) - allowed:
            raise PlanError(f"unknown train keys {sorted(set(self.train) - allowed)}")
        if set(self.model) - {f.name for f in fields(ModelConfig)}:
            raise PlanError(f"unknown model keys {sorted(set(self.model) - {f.name for f in fields(ModelConfig)})}")
        if set(self.eval) - {"limit", "max_new", "split"}:
            raise PlanError(f"unknown eval keys {sorted(set(self.eval) - {'limit', 'max_new', 'split'})}")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentPlan":
        unknown = set(d) - _PLAN_KEYS
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        missing = {"experiment", "configs", "seeds", "dataset", "train"} - set(d)
        if missing:
            raise PlanError(f"missing plan keys {sorted(missing)}")
        return cls(**d, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def dataset_path(self) -> Path:
        return self.resolve(self.dataset["path"])

    def train_config(self, label: str, seed: int) -> TrainConfig:
        mods, variant = parse_config_label(label)
        return TrainConfig(**self.train, seed=seed, modality_set=mods, ocr_variant=variant)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(**{"vocab_size": vocab_size, **self.model})

    def eval_settings(self) -> dict:
        return {"limit": None, "max_new": 40, "split": "test", **self.eval}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def resolved(self, vocab_size: int) -> dict:
        """The plan with every default spelled out, for the bundle."""
        d = self.to_dict()
        d["train"] = {k: v for k, v in self.train_config(BASELINE, 0).to_dict().items()
                      if k not in ("seed", "modality_set", "ocr_variant")}
        d["model"] = self.model_config(vocab_size).to_dict()
        d["eval"] = self.eval_settings()
        d["snr_grid"] = [format_snr(s) for s in SNR_GRID]
        d["config_modalities"] = {c: dict(zip(("modalities", "ocr_variant"), parse_config_label(c)))
                                  for c in self.configs}
        return d


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cell_dir(store: Path, label: str, seed: int) -> Path:
    return store / label / f"seed{seed}"


def cell_key(plan: ExperimentPlan, label: str, seed: int, dataset_hash: str, vocab_size: int) -> str:
    spec = {
        "config": label, "seed": seed, "dataset": dataset_hash,
        "train": plan.train_config(label, seed).to_dict(),
        "model": plan.model_config(vocab_size).to_dict(),
        "eval": plan.eval_settings(),
    }
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()


def cell_done(cdir: Path, key: str) -> dict | None:
    """The stored cell record if it is complete and its checkpoint hash still matches."""
    marker = cdir / "cell.json"
    if not marker.exists():
        return None
    rec = json.loads(marker.read_text())
    ckpt = cdir / "model.ckpt"
    if rec.get("status") != "ok" or rec.get("key") != key or not ckpt.exists():
        return None
    if _sha256(ckpt) != rec.get("checkpoint_sha256"):
        return None
    return rec


def run_cell(plan: ExperimentPlan, handle: DatasetHandle, label: str, seed: int, cdir: Path, key: str) -> dict:
    tcfg = plan.train_config(label, seed)
    mcfg = plan.model_config(len(handle.vocab))
    ev = plan.eval_settings()
    cdir.mkdir(parents=True, exist_ok=True)
    res = train(fresh_model(mcfg, seed), handle, tcfg, log_path=cdir / "train_log.jsonl")
    res.checkpoint.save(cdir / "model.ckpt")
    rows = evaluate(res.checkpoint.to_model(), handle, SNR_GRID, label, tcfg.modality_set, tcfg.ocr_variant,
                    tcfg.task, ev["split"], ev["limit"], ev["max_new"])
    rec = {"status": "ok", "key": key, "config": label, "seed": seed,
           "checkpoint_sha256": _sha256(cdir / "model.ckpt"),
           "best_step": res.best_step, "best_dev_wer": res.best_dev_wer, "rows": rows}
    _atomic_write(cdir / "cell.json", json.dumps(rec, indent=1))
    return rec


def _ensure_dataset(plan: ExperimentPlan) -> DatasetHandle:
    path = plan.dataset_path
    if not (path / "manifest.json").exists():
        if "n_examples" not in plan.dataset:
            raise FileNotFoundError(f"no dataset at {path} and no n_examples to build one")
        log.info("building dataset at %s", path)
        build_dataset(path, plan.dataset["n_examples"], plan.dataset.get("seed", 0))
    handle = DatasetHandle(path)
    if "seed" in plan.dataset and handle.manifest.seed != plan.dataset["seed"]:
        raise PlanError(f"dataset at {path} was built with seed {handle.manifest.seed}")
    return handle


@dataclass
class CellStatus:
    config: str
    seed: int
    status: str  # ok | cached | failed
    error: str = ""


def run_plan(plan: ExperimentPlan, out, runner=run_cell) -> dict:
    """Train and evaluate every (config, seed) cell, then aggregate into ``out``.

    Completed cells (matching key and checkpoint hash) are skipped.  A failing
    cell is recorded and the remaining cells still run.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handle = _ensure_dataset(plan)
    store = plan.resolve(plan.cell_store) if plan.cell_store else out / "cells"
    _atomic_write(out / "plan.json", json.dumps(plan.resolved(len(handle.vocab)), indent=1))
    dataset_hash = handle.manifest.config_hash
    statuses, records = [], []
    for label in plan.configs:
        for seed in plan.seeds:
            cdir = cell_dir(store, label, seed)
            key = cell_key(plan, label, seed, dataset_hash, len(handle.vocab))
            rec = cell_done(cdir, key)
            if rec is not None:
                statuses.append(CellStatus(label, seed, "cached"))
                records.append(rec)
                continue
            log.info("running cell %s seed %d", label, seed)
            try:
                rec = runner(plan, handle, label, seed, cdir, key)
                statuses.append(CellStatus(label, seed, "ok"))
                records.append(rec)
            except Exception as exc:  # noqa: BLE001 - reported per cell
                log.error("cell %s seed %d failed: %s", label, seed, exc)
                cdir.mkdir(parents=True, exist_ok=True)
                _atomic_write(cdir / "cell.json", json.dumps(
                    {"status": "failed", "key": key, "config": label, "seed": seed,
                     "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}, indent=1))
                statuses.append(CellStatus(label, seed, "failed", f"{type(exc).__name__}: {exc}"))
    bundle = aggregate(plan, records)
    bundle["cells"] = [asdict(s) for s in statuses]
    m = handle.manifest
    bundle["dataset"] = {"n_examples": m.n_examples, "seed": m.seed, "config_hash": m.config_hash}
    write_bundle(out, bundle)
    return bundle


def aggregate(plan: ExperimentPlan, records: list[dict]) -> dict:
    """Per-seed WERs, seed-mean/spread of per-seed benefits and the verdicts."""
    per_seed: dict[str, dict[int, dict[float, float]]] = {}
    for rec in records:
        per_seed.setdefault(rec["config"], {})[rec["seed"]] = {parse_snr(r["snr_db"]): r["wer"] for r in rec["rows"]}
    missing = [(c, s) for c in plan.configs for s in plan.seeds if s not in per_seed.get(c, {})]
    summary = summarize(per_seed, plan.configs, plan.seeds)
    verdicts = compute_verdicts(summary, plan.configs) if not missing else {}
    return {
        "experiment": plan.experiment,
        "configs": plan.configs,
        "seeds": plan.seeds,
        "grid": [format_snr(s) for s in SNR_GRID],
        "wer": {c: {str(seed): {str(format_snr(s)): w for s, w in cells.items()}
                    for seed, cells in per_seed.get(c, {}).items()} for c in plan.configs},
        "benefit": summary,
        "missing": [[c, s] for c, s in missing],
        "verdicts": verdicts,
    }


def _mean_spread(values):
    vals = [v for v in values if v is not None]
    if not vals or len(vals) != len(values):
        return None, None
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)


def summarize(per_seed, configs, seeds) -> dict:
    """For each non-baseline config: per-SNR and average benefit, mean and spread over seeds.

    Each seed's benefit pairs the config with the baseline trained on the same
    seed; the average benefit of one seed is computed from its grid-averaged WERs.
    Spread is the sample standard deviation across seeds.
    """
    out = {}
    base = per_seed.get(BASELINE, {})
    for c in configs:
        if c == BASELINE:
            continue
        cells = per_seed.get(c, {})
        usable = [s for s in seeds if s in cells and s in base]
        entry = {"per_snr": {}, "avg": None}
        for snr in SNR_GRID:
            vals = [relative_benefit(base[s].get(snr), cells[s].get(snr)) for s in usable]
            mean, spread = _mean_spread(vals) if usable else (None, None)
            entry["per_snr"][str(format_snr(snr))] = {"mean": mean, "spread": spread}
        avg_vals = []
        for s in usable:
            if all(snr in base[s] and snr in cells[s] for snr in SNR_GRID):
                avg_vals.append(relative_benefit(statistics.fmean(base[s][x] for x in SNR_GRID),
                                                 statistics.fmean(cells[s][x] for x in SNR_GRID)))
            else:
                avg_vals.append(None)
        mean, spread = _mean_spread(avg_vals) if usable else (None, None)
        entry["avg"] = {"mean": mean, "spread": spread}
        out[c] = entry
    return out


def _b(summary, config, snr=None):
    e = summary.get(config)
    if e is None:
        return None
    return e["avg"]["mean"] if snr is None else e["per_snr"][str(format_snr(snr))]["mean"]


def _interior_peak(summary, config):
    vals = [_b(summary, config, s) for s in FINITE_GRID]
    if any(v is None for v in vals):
        return None
    k = max(range(len(vals)), key=vals.__getitem__)  # ties resolve to the cleaner SNR
    return 0 < k < len(vals) - 1


def _lt(a, b):
    return None if a is None or b is None else a < b


def compute_verdicts(summary: dict, configs) -> dict:
    """Trend checks over seed-mean benefits; only checks whose configs are in the plan appear.

    A value of None means the check applies but a needed benefit was undefined.
    """
    v = {}
    have = set(configs)
    if "L+A" in have:
        lo, hi = _b(summary, "L+A", -10.0), _b(summary, "L+A", 20.0)
        v["lip_amplifies"] = _lt(hi, lo)
    if "I+A" in have:
        v["image_interior_peak"] = _interior_peak(summary, "I+A")
    if "O_real+A" in have:
        v["ocr_interior_peak"] = _interior_peak(summary, "O_real+A")
    if {"I+A", "O_real+A", "O_oracle3+A"} <= have:
        a, b, c = (_b(summary, x) for x in ("I+A", "O_real+A", "O_oracle3+A"))
        v["quality_ladder"] = None if None in (a, b, c) else a < b < c
    if {"O_oracle10+A", "O_oracle3+A"} <= have:
        v["irrelevance_penalty"] = _lt(_b(summary, "O_oracle10+A"), _b(summary, "O_oracle3+A"))
    filtered = sorted((int(m.group(1)), c) for c in have if (m := re.fullmatch(r"O_filtered(\d+)\+A", c)))
    if filtered and "O_oracle10+A" in have:
        f, o = _b(summary, filtered[0][1]), _b(summary, "O_oracle10+A")
        v["filtering_helps"] = None if None in (f, o) else f >= o
    return v


def seed_mean_report(bundle: dict) -> EvalReport:
    rows = []
    for c, seeds in bundle["wer"].items():
        for snr in bundle["grid"]:
            vals = [cells[str(snr)] for cells in seeds.values() if str(snr) in cells]
            if vals and len(vals) == len(seeds):
                rows.append({"config": c, "snr_db": snr, "wer": statistics.fmean(vals)})
    return EvalReport.from_rows(rows, BASELINE)


def format_summary(bundle: dict) -> str:
    lines = [f"experiment: {bundle['experiment']}  seeds: {bundle['seeds']}", "",
             "seed-mean WER (%)", seed_mean_report(bundle).table(), "",
             "relative benefit vs A (%), mean +- spread over seeds"]
    head = ["config"] + [str(s) for s in bundle["grid"]] + ["avg"]
    body = []
    for c, e in bundle["benefit"].items():
        cells = [e["per_snr"][str(s)] for s in bundle["grid"]] + [e["avg"]]
        body.append([c] + ["n/a" if x["mean"] is None else f"{100 * x['mean']:+.1f}+-{100 * x['spread']:.1f}"
                           for x in cells])
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    for r in [head] + body:
        lines.append("  ".join(x.rjust(w) if i else x.ljust(w) for i, (x, w) in enumerate(zip(r, widths))))
    lines.append("")
    lines.append("verdicts:")
    for name, val in bundle["verdicts"].items():
        lines.append(f"  {name}: {'n/a' if val is None else ('PASS' if val else 'FAIL')}")
    if bundle["missing"]:
        lines.append("missing cells: " + ", ".join(f"{c}/seed{s}" for c, s in bundle["missing"]))
    return "\n".join(lines)


def write_bundle(out, bundle: dict) -> None:
    out = Path(out)
    _atomic_write(out / "results.json", json.dumps(bundle, indent=1))
    _atomic_write(out / "report.txt", format_summary(bundle) + "\n")


def load_bundle(out) -> dict:
    path = Path(out) / "results.json"
    if not path.exists():
        raise FileNotFoundError(f"no results bundle at {path}")
    return json.loads(path.read_text())


def recompute(bundle: dict) -> dict:
    """Benefits and verdicts rebuilt from the stored per-cell WERs only."""
    per_seed = {c: {int(s): {parse_snr(k): w for k, w in cells.items()} for s, cells in seeds.items()}
                for c, seeds in bundle["wer"].items()}
    summary = summarize(per_seed, bundle["configs"], bundle["seeds"])
    return {"benefit": summary, "verdicts": compute_verdicts(summary, bundle["configs"])}


PLOT_COLUMNS = ("config", "snr_db", "benefit_mean", "benefit_spread")


def plot_rows(bundle: dict) -> list[tuple]:
    missing = [(c, f"seed{s}") for c, s in bundle["missing"]]
    for c, seeds in bundle["wer"].items():
        for s, cells in seeds.items():
            missing += [(c, f"seed{s}/{g}") for g in bundle["grid"] if str(g) not in cells]
    if missing:
        raise IncompleteGrid(missing)
    rows = []
    for c, e in bundle["benefit"].items():
        for snr in bundle["grid"]:
            cell = e["per_snr"][str(snr)]
            rows.append((c, str(snr), cell["mean"], cell["spread"]))
    return rows


def emit_plots(bundle: dict, path) -> Path:
    """Tab-separated series, one block of grid rows per non-baseline config.

    Columns: config, snr_db, benefit_mean, benefit_spread.  Infinite SNRs are
    written as ``inf``/``-inf``, undefined benefits as ``nan``.
    """
    rows = plot_rows(bundle)

    def num(x):
        return "nan" if x is None else repr(float(x))

    lines = ["\t".join(PLOT_COLUMNS)] + ["\t".join((c, s, num(m), num(sp))) for c, s, m, sp in rows]
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path
