"""Model bundle, checkpoint serialization, and greedy decoding.

A :class:`Seq2SeqModel` packages everything inference needs: transformer
parameters, optional fusion parameters, both vocabularies, and the exact
preprocessing (tokenizer + stoplist) used at training time.

Checkpoint layout (little-endian):

    magic    4 bytes  b"LVM1"
    hlen     u32      JSON header length
    header   UTF-8 JSON: model config, vocabularies, tokenizer settings,
             stop words, retrieval width m, and the ordered tensor name list
    tensors  for each name, in header order:
             u32 rank, u32 x rank dims, float64 data

Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import StopWordList, TokenizerConfig
from .dictionary import WordImageDictionary
from .features import ImageFeatureStore, ImageTensor, assemble_image_tensor
from .fusion import FusionParameters, fusion_forward, init_fusion_params
from .transformer import (
    ModelConfig,
    Params,
    decode_batch,
    encode_batch,
    init_params,
    param_names,
)
from .vocab import BOS, EOS, PAD, Vocab

MAGIC = b"LVM1"


class CheckpointError(ValueError):
    """Checkpoint file is truncated or structurally inconsistent."""


@dataclass
class Seq2SeqModel:
    cfg: ModelConfig
    params: Params
    src_vocab: Vocab
    tgt_vocab: Vocab
    tok_cfg: TokenizerConfig
    stop_words: StopWordList
    fusion: FusionParameters | None = None
    m: int = 5

    def clone(self) -> "Seq2SeqModel":
        fusion = None
        if self.fusion is not None:
            fusion = FusionParameters(
                proj_weight=self.fusion.proj_weight.copy(),
                proj_bias=self.fusion.proj_bias.copy(),
                gate_weight=self.fusion.gate_weight.copy(),
                gate_bias=self.fusion.gate_bias.copy(),
            )
        return Seq2SeqModel(
            cfg=self.cfg,
            params={k: v.copy() for k, v in self.params.items()},
            src_vocab=self.src_vocab,
            tgt_vocab=self.tgt_vocab,
            tok_cfg=self.tok_cfg,
            stop_words=self.stop_words,
            fusion=fusion,
            m=self.m,
        )


def new_model(
    cfg: ModelConfig,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    tok_cfg: TokenizerConfig,
    stop_words: StopWordList,
    seed: int,
    fusion_d_img: int | None = None,
    m: int = 5,
) -> Seq2SeqModel:
    """Fresh seeded model; pass ``fusion_d_img`` to attach a fusion layer."""
    fusion = None
    if fusion_d_img is not None:
        fusion = init_fusion_params(fusion_d_img, cfg.d_model, seed)
    return Seq2SeqModel(
        cfg=cfg,
        params=init_params(cfg, seed),
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        tok_cfg=tok_cfg,
        stop_words=stop_words,
        fusion=fusion,
        m=m,
    )


def assemble_batch(
    d: WordImageDictionary,
    store: ImageFeatureStore,
    batch_tokens: list[list[str]],
    paired_ids: list[str | None],
    m: int,
    n_max: int,
) -> ImageTensor:
    """Stack per-sentence image tensors into (b, n_max, m, dim) with padding."""
    b = len(batch_tokens)
    values = np.zeros((b, n_max, m, store.dim), dtype=np.float64)
    mask = np.zeros((b, n_max, m), dtype=bool)
    for i, tokens in enumerate(batch_tokens):
        t = assemble_image_tensor(d, store, tokens, m, paired_id=paired_ids[i])
        values[i, : len(tokens)] = t.values
        mask[i, : len(tokens)] = t.mask
    return ImageTensor(values=values, mask=mask)


def _encode_and_fuse(model, src_ids, src_mask, batch_tokens, paired_ids, d, store):
    h, _ = encode_batch(src_ids, model.params, model.cfg, src_mask=src_mask)
    if model.fusion is None or d is None or store is None:
        return h
    tensor = assemble_batch(d, store, batch_tokens, paired_ids, model.m, src_ids.shape[1])
    fused, _ = fusion_forward(h, tensor, model.fusion)
    return fused


def greedy_translate(
    src_ids,
    model: Seq2SeqModel,
    max_out_len: int,
    d: WordImageDictionary | None = None,
    store: ImageFeatureStore | None = None,
    paired_id: str | None = None,
) -> list[int]:
    """Argmax decoding of one source id sequence; output excludes bos/eos."""
    ids = np.asarray(list(src_ids), dtype=np.int64)[None, :]
    src_mask = np.ones(ids.shape, dtype=bool)
    tokens = model.src_vocab.decode(list(src_ids))
    fused = _encode_and_fuse(model, ids, src_mask, [tokens], [paired_id], d, store)
    out: list[int] = []
    ys = [BOS]
    limit = min(max_out_len, model.cfg.max_len - 1)
    for _ in range(limit):
        logits, _ = decode_batch(
            np.asarray(ys, dtype=np.int64)[None, :], fused, model.params, model.cfg,
            src_mask=src_mask,
        )
        nxt = int(np.argmax(logits[0, -1]))
        if nxt == EOS:
            break
        out.append(nxt)
        ys.append(nxt)
    return out


def translate_batch(
    model: Seq2SeqModel,
    sentences: list[list[str]],
    paired_ids: list[str | None] | None = None,
    d: WordImageDictionary | None = None,
    store: ImageFeatureStore | None = None,
    max_out_len: int = 32,
) -> list[list[str]]:
    """Greedy-decode many tokenized sentences at once; returns target tokens."""
    if not sentences:
        return []
    if paired_ids is None:
        paired_ids = [None] * len(sentences)
    batch_tokens = [toks + ["<eos>"] for toks in sentences]
    b = len(batch_tokens)
    n_max = max(len(t) for t in batch_tokens)
    src_ids = np.full((b, n_max), PAD, dtype=np.int64)
    src_mask = np.zeros((b, n_max), dtype=bool)
    for i, toks in enumerate(sentences):
        row = model.src_vocab.encode(toks) + [EOS]
        src_ids[i, : len(row)] = row
        src_mask[i, : len(row)] = True
    fused = _encode_and_fuse(model, src_ids, src_mask, batch_tokens, paired_ids, d, store)

    ys = np.full((b, 1), BOS, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    limit = min(max_out_len, model.cfg.max_len - 1)
    for _ in range(limit):
        logits, _ = decode_batch(
            ys, fused, model.params, model.cfg,
            src_mask=src_mask, tgt_mask=ys != PAD,
        )
        nxt = logits[:, -1, :].argmax(axis=-1)
        nxt = np.where(finished, PAD, nxt)
        finished |= nxt == EOS
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
        if finished.all():
            break

    outputs: list[list[str]] = []
    for i in range(b):
        row: list[str] = []
        for t in ys[i, 1:]:
            if t in (EOS, PAD):
                break
            row.append(model.tgt_vocab.itos[int(t)])
        outputs.append(row)
    return outputs


def save_model(model: Seq2SeqModel, path: str) -> None:
    names = list(param_names(model.cfg))
    tensors: dict[str, np.ndarray] = dict(model.params)
    fusion_d_img = None
    if model.fusion is not None:
        ft = model.fusion.tensors()
        names += list(ft)
        tensors.update(ft)
        fusion_d_img = model.fusion.d_img
    header = {
        "config": {
            "d_model": model.cfg.d_model,
            "n_layers_enc": model.cfg.n_layers_enc,
            "n_layers_dec": model.cfg.n_layers_dec,
            "n_heads": model.cfg.n_heads,
            "d_ff": model.cfg.d_ff,
            "vocab_src": model.cfg.vocab_src,
            "vocab_tgt": model.cfg.vocab_tgt,
            "dropout": model.cfg.dropout,
            "max_len": model.cfg.max_len,
        },
        "m": model.m,
        "fusion_d_img": fusion_d_img,
        "src_vocab": model.src_vocab.itos,
        "tgt_vocab": model.tgt_vocab.itos,
        "tokenizer": {
            "mode": model.tok_cfg.mode,
            "lowercase": model.tok_cfg.lowercase,
            "merges": [list(r) for r in model.tok_cfg.merges],
        },
        "stop_words": sorted(model.stop_words.words),
        "tensors": names,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path: str) -> Seq2SeqModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen

    tensors: dict[str, np.ndarray] = {}
    for name in header["tensors"]:
        if offset + 4 > len(data):
            raise CheckpointError(f"{path}: truncated before tensor {name!r}")
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", data, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated inside tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).copy()
        tensors[name] = arr.reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    cfg = ModelConfig(**header["config"])
    fusion = None
    if header["fusion_d_img"] is not None:
        fusion = FusionParameters(
            proj_weight=tensors.pop("fusion.proj_weight"),
            proj_bias=tensors.pop("fusion.proj_bias"),
            gate_weight=tensors.pop("fusion.gate_weight"),
            gate_bias=tensors.pop("fusion.gate_bias"),
        )
    tok = header["tokenizer"]
    src_itos = header["src_vocab"]
    tgt_itos = header["tgt_vocab"]
    return Seq2SeqModel(
        cfg=cfg,
        params=tensors,
        src_vocab=Vocab(itos=src_itos, stoi={t: i for i, t in enumerate(src_itos)}),
        tgt_vocab=Vocab(itos=tgt_itos, stoi={t: i for i, t in enumerate(tgt_itos)}),
        tok_cfg=TokenizerConfig(
            mode=tok["mode"],
            lowercase=tok["lowercase"],
            merges=tuple(tuple(r) for r in tok["merges"]),
        ),
        stop_words=StopWordList(words=frozenset(header["stop_words"])),
        fusion=fusion,
        m=header["m"],
    )
