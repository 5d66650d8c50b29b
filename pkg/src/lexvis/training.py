"""Seq2seq training loop: SGD under the warmup schedule, early stopping on
dev BLEU, deterministic batching and dropout given a seed.

The loop owns the model parameters exclusively; evaluation runs on frozen
snapshots. Baseline mode (``model.fusion is None``) and fusion mode share
every code path except the fusion call, so an empty dictionary reproduces
baseline losses bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dictionary import WordImageDictionary
from .evaluation import bleu4
from .features import ImageFeatureStore
from .fusion import fusion_backward, fusion_forward
from .model import Seq2SeqModel, assemble_batch, translate_batch
from .transformer import (
    DropoutPlan,
    Grads,
    decode_batch,
    decode_batch_bwd,
    encode_batch,
    encode_batch_bwd,
)
from .vocab import BOS, EOS, PAD


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int
    batch_size: int = 32
    warmup_steps: int = 100
    dropout: float = 0.15
    patience: int = 10
    seed: int = 0
    m: int = 5
    max_out_len: int = 32
    optimizer: str = "adam"  # "adam" or "sgd"; both step with lr_at(step)

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        for name in ("batch_size", "patience", "m", "max_out_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainExample:
    src: list[str]
    tgt: list[str]
    image_id: str | None = None


@dataclass
class TrainResult:
    model: Seq2SeqModel       # best-dev checkpoint
    metrics: list[dict]       # one record per epoch
    step_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))


def lr_at(step: int, d_model: int, warmup_steps: int) -> float:
    """Inverse square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


def cross_entropy(logits, targets, pad_id: int):
    """Mean negative log-likelihood over non-pad positions, with gradient.

    Accepts any leading shape: logits (..., V) against integer targets (...).
    Pad positions contribute zero loss and zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    nonpad = targets != pad_id
    n = int(nonpad.sum())
    if n == 0:
        raise ValueError("cross_entropy needs at least one non-pad target")
    safe = np.where(nonpad, targets, 0)
    if safe.min() < 0 or safe.max() >= vocab:
        raise IndexError("target id out of range")

    mx = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - mx)
    z = ex.sum(axis=-1, keepdims=True)
    logp = (logits - mx) - np.log(z)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = float(-(picked * nonpad).sum() / n)

    dlogits = ex / z
    flat = dlogits.reshape(-1, vocab)
    flat[np.arange(flat.shape[0]), safe.reshape(-1)] -= 1.0
    dlogits *= (nonpad / n)[..., None]
    return loss, dlogits


def _pad_rows(rows: list[list[int]], pad: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _merge(grads: Grads, extra: Grads) -> None:
    for k, v in extra.items():
        grads[k] = grads[k] + v if k in grads else v


class _Optimizer:
    """SGD or Adam; either applies step size lr_at(step) to every tensor.

    Adam moments start at zero, so tensors whose gradient stays zero are
    never moved, which keeps the empty-dictionary parity with baseline
    training exact.
    """

    def __init__(self, kind: str, beta1=0.9, beta2=0.98, eps=1e-9):
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, name: str, arr: np.ndarray, grad: np.ndarray, lr: float, step: int):
        if self.kind == "sgd":
            arr -= lr * grad
            return
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        mhat = m / (1.0 - self.beta1**step)
        vhat = v / (1.0 - self.beta2**step)
        arr -= lr * mhat / (np.sqrt(vhat) + self.eps)


def train(
    model: Seq2SeqModel,
    corpus: list[TrainExample],
    dev_set: list[TrainExample],
    cfg: TrainConfig,
    d: WordImageDictionary | None = None,
    store: ImageFeatureStore | None = None,
) -> TrainResult:
    """Run SGD to ``max_steps`` or patience exhaustion; keep the best-dev model.

    In fusion mode (``model.fusion`` set) every sentence gets an image tensor
    assembled from dictionary retrieval plus, when the example carries one,
    its own paired image in slot 0.
    """
    fusion_mode = model.fusion is not None
    if fusion_mode and (d is None or store is None):
        raise ValueError("fusion-mode training requires a dictionary and feature store")
    if not corpus:
        raise ValueError("empty training corpus")
    if not dev_set:
        raise ValueError("empty dev set")
    mcfg = model.cfg

    src_rows = [model.src_vocab.encode(ex.src) + [EOS] for ex in corpus]
    tgt_rows = [[BOS] + model.tgt_vocab.encode(ex.tgt) + [EOS] for ex in corpus]
    order = sorted(range(len(corpus)), key=lambda i: (len(src_rows[i]), i))
    batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]

    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(cfg.optimizer)
    best = model.clone()
    best_bleu = -1.0
    stale_epochs = 0
    step = 0
    epoch = 0
    step_losses: list[float] = []
    metrics: list[dict] = []

    while step < cfg.max_steps:
        epoch += 1
        epoch_losses: list[float] = []
        for b_idx in rng.permutation(len(batches)):
            if step == cfg.max_steps:
                break
            step += 1
            batch = batches[b_idx]
            loss = _train_step(model, batch, src_rows, tgt_rows, corpus, cfg, step, opt, d, store)
            step_losses.append(loss)
            epoch_losses.append(loss)

        dev_bleu = _dev_bleu(model, dev_set, cfg, d, store)
        metrics.append({
            "epoch": epoch,
            "step": step,
            "train_loss": float(np.mean(epoch_losses)),
            "dev_bleu": dev_bleu,
            "lr": lr_at(step, mcfg.d_model, cfg.warmup_steps),
        })
        if dev_bleu > best_bleu:
            best_bleu = dev_bleu
            best = model.clone()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                break

    return TrainResult(model=best, metrics=metrics, step_losses=np.asarray(step_losses))


def _train_step(model, batch, src_rows, tgt_rows, corpus, cfg, step, opt, d, store):
    mcfg = model.cfg
    src = _pad_rows([src_rows[i] for i in batch], PAD)
    tgt = _pad_rows([tgt_rows[i] for i in batch], PAD)
    src_mask = src != PAD
    tgt_in, tgt_out = tgt[:, :-1], tgt[:, 1:]

    plan = DropoutPlan(cfg.seed, step, cfg.dropout)
    grads: Grads = {}
    h, enc_cache = encode_batch(src, model.params, mcfg, src_mask=src_mask, plan=plan)

    fusion_cache = None
    if model.fusion is not None:
        batch_tokens = [corpus[i].src + ["<eos>"] for i in batch]
        paired = [corpus[i].image_id for i in batch]
        tensor = assemble_batch(d, store, batch_tokens, paired, cfg.m, src.shape[1])
        fused, fusion_cache = fusion_forward(h, tensor, model.fusion)
    else:
        fused = h

    logits, dec_cache = decode_batch(
        tgt_in, fused, model.params, mcfg,
        src_mask=src_mask, tgt_mask=tgt_in != PAD, plan=plan,
    )
    loss, dlogits = cross_entropy(logits, tgt_out, PAD)
    if not np.isfinite(loss):
        raise TrainingDiverged(step, loss)

    dmem = decode_batch_bwd(dlogits, dec_cache, grads)
    if fusion_cache is not None:
        dh, _, fusion_grads = fusion_backward(fusion_cache, dmem)
        _merge(grads, fusion_grads)
    else:
        dh = dmem
    encode_batch_bwd(dh, enc_cache, grads)

    lr = lr_at(step, mcfg.d_model, cfg.warmup_steps)
    for name, arr in model.params.items():
        if name in grads:
            opt.update(name, arr, grads[name], lr, step)
    if model.fusion is not None:
        for name, arr in model.fusion.tensors().items():
            if name in grads:
                opt.update(name, arr, grads[name], lr, step)
    return loss


def _dev_bleu(model, dev_set, cfg, d, store):
    hyps = translate_batch(
        model,
        [ex.src for ex in dev_set],
        [ex.image_id for ex in dev_set],
        d, store,
        max_out_len=cfg.max_out_len,
    )
    return bleu4(hyps, [ex.tgt for ex in dev_set])
