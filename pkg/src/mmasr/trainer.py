"""Fine-tuning loop: AdamW with decoupled decay and dev-WER early stopping."""
from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import SNR_GRID, DatasetHandle, make_example
from .eqgen import derive_seed
from .evalkit import corpus_wer, decode_examples
from .model import DecoderLM, ModelCheckpoint, ModelConfig, assemble, sequence_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay.

    Per step::

        m = b1*m + (1-b1)*g ;  v = b2*v + (1-b2)*g^2
        p = p * (1 - weight_decay) - lr * m_hat / (sqrt(v_hat) + eps)

    The decay factor is not multiplied by ``lr``, so with ``lr=0`` parameters
    still shrink geometrically and gradients have no effect.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(b1).add_(p.grad, alpha=1 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                p.mul_(1 - group["weight_decay"])
                p.sub_(group["lr"] * m_hat / (v_hat.sqrt() + group["eps"]))


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 4
    patience: int = 5
    max_steps: int = 5000
    eval_every: int = 500
    seed: int = 0
    modality_set: tuple[str, ...] = ("A",)
    ocr_variant: str = "oracle3"
    task: str = "asr"
    max_grad_norm: float = 1.0
    dev_limit: int | None = 200
    decode_max_new: int = 40

    def __post_init__(self):
        self.modality_set = tuple(self.modality_set)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_set"] = list(self.modality_set)
        return d


class EarlyStopper:
    """Stops after ``patience`` consecutive evaluations without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_step: int | None = None
        self.bad_evals = 0

    def update(self, metric: float, step: int) -> bool:
        """Record one evaluation; True means training should stop."""
        if metric < self.best:
            self.best, self.best_step, self.bad_evals = metric, step, 0
        else:
            self.bad_evals += 1
        return self.bad_evals >= self.patience


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_dev_wer: float = math.inf
    stopped_early: bool = False


def dev_wer(model: DecoderLM, sequences, vocab, max_new: int) -> float:
    hyps = decode_examples(model, sequences, vocab, max_new)
    refs = [vocab.decode_words(s.ids[s.prefix_len:]) for s in sequences]
    return corpus_wer(refs, hyps)


def _assembled(handle: DatasetHandle, split: str, cfg: TrainConfig, max_seq_len: int, limit=None):
    return [assemble(ex, handle.vocab, cfg.task, max_seq_len)
            for ex in handle.examples(split, None, cfg.modality_set, cfg.ocr_variant, limit)]


def dev_sequences(handle: DatasetHandle, cfg: TrainConfig, max_seq_len: int):
    """Dev examples, each at a fixed SNR drawn from the training schedule by its seed."""
    out = []
    for ex in handle.examples("dev", None, (), cfg.ocr_variant, cfg.dev_limit):
        snr = SNR_GRID[derive_seed(ex.triple.seed, "dev-snr") % len(SNR_GRID)]
        full = make_example(ex.id, ex.triple, snr, cfg.modality_set, handle.vocab,
                            handle.channel_config, cfg.ocr_variant, handle.table)
        out.append(assemble(full, handle.vocab, cfg.task, max_seq_len))
    return out


def train(init: ModelCheckpoint | DecoderLM, handle: DatasetHandle, cfg: TrainConfig,
          log_path=None, train_sequences=None, dev_seqs=None) -> TrainResult:
    """Fine-tune ``init`` and return the checkpoint with the best dev WER.

    ``train_sequences``/``dev_seqs`` override the sequences read from
    ``handle`` (used by the memorization check).
    """
    model = init.to_model() if isinstance(init, ModelCheckpoint) else copy.deepcopy(init)
    vocab_hash = handle.vocab.fingerprint if handle is not None else ""
    if cfg.max_steps == 0:
        ckpt = init if isinstance(init, ModelCheckpoint) else ModelCheckpoint.from_model(model, vocab_hash)
        return TrainResult(ckpt, [], 0, math.nan)

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    msl = model.cfg.max_seq_len
    train_seqs = train_sequences if train_sequences is not None else _assembled(handle, "train", cfg, msl)
    dev = dev_seqs if dev_seqs is not None else dev_sequences(handle, cfg, msl)
    vocab = handle.vocab

    opt = AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    records: list[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")

    order: list[int] = []
    losses: list[float] = []
    stopped = False
    try:
        model.train()
        for step in range(1, cfg.max_steps + 1):
            if len(order) < cfg.batch_size:
                perm = list(range(len(train_seqs)))
                rng.shuffle(perm)
                order.extend(perm)
            batch = [train_seqs[i] for i in order[:cfg.batch_size]]
            del order[:cfg.batch_size]
            loss = sequence_loss(model, batch, vocab.pad)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            opt.step()
            losses.append(loss.item())

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                wer = dev_wer(model, dev, vocab, cfg.decode_max_new)
                model.train()
                rec = {"step": step, "train_loss": float(np.mean(losses)), "dev_wer": wer, "lr": cfg.lr}
                losses = []
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                log.info("step %d loss %.4f dev_wer %.4f", step, rec["train_loss"], wer)
                improved = wer < stopper.best
                stop = stopper.update(wer, step)
                if improved:
                    best_state = copy.deepcopy(model.state_dict())
                if stop:
                    stopped = True
                    break
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best_state)
    meta = {
        "best_step": stopper.best_step,
        "best_dev_wer": stopper.best,
        "dev_wer_history": [[r["step"], r["dev_wer"]] for r in records],
        "train_config": cfg.to_dict(),
    }
    ckpt = ModelCheckpoint.from_model(model, vocab_hash, meta)
    return TrainResult(ckpt, records, stopper.best_step or 0, stopper.best, stopped)


def fresh_model(model_cfg: ModelConfig, seed: int) -> ModelCheckpoint:
    return ModelCheckpoint.from_model(DecoderLM(model_cfg, seed=seed))

