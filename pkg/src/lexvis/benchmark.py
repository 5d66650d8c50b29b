"""Controllable word-sense disambiguation benchmark.

Each source sentence holds one ambiguous token plus filler context tokens.
The correct translation of the ambiguous token depends on a latent sense that
is sampled independently of the text, so no text-only model can beat chance
at ambiguous positions. The sense IS recoverable from the sentence's paired
image feature vector: per (type, sense) the vectors cluster around separated
centers, with fresh seeded noise per sentence.

Sense draws use a balanced deck over (type, sense), so marginal sense
frequencies are balanced by construction, not by luck.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import SentenceImagePair, StopWordList, TokenizerConfig, tokenize
from .features import ImageFeatureStore

GoldEntry = tuple[list[str], int]  # target tokens, ambiguous position


@dataclass(frozen=True)
class DisambiguationSpec:
    n_ambiguous_types: int = 10
    senses_per_type: int = 2
    n_context_tokens: int = 3    # context vocabulary size
    n_train: int = 5000
    n_test: int = 500
    d_img: int = 16
    seed: int = 0
    context_slots: int = 3       # filler tokens per sentence
    sense_separation: float = 16.0
    noise_scale: float = 0.5

    def __post_init__(self):
        if self.n_ambiguous_types < 1 or self.senses_per_type < 2:
            raise ValueError("need >= 1 ambiguous type and >= 2 senses")
        if self.n_context_tokens < 1 or self.context_slots < 1:
            raise ValueError("need a non-trivial context")
        if self.n_train < 0 or self.n_test < 0 or self.d_img < 1:
            raise ValueError("bad sizes")


@dataclass
class DisambiguationBenchmark:
    spec: DisambiguationSpec
    train_pairs: list[SentenceImagePair] = field(default_factory=list)
    train_gold: list[GoldEntry] = field(default_factory=list)
    test_pairs: list[SentenceImagePair] = field(default_factory=list)
    test_gold: list[GoldEntry] = field(default_factory=list)
    store: ImageFeatureStore | None = None


def _sense_centers(spec: DisambiguationSpec, rng) -> np.ndarray:
    """(types, senses, d_img) centers; senses of one type sit
    ``sense_separation`` apart along a per-type random direction."""
    k, s, d = spec.n_ambiguous_types, spec.senses_per_type, spec.d_img
    base = rng.normal(0.0, 1.0, size=(k, 1, d))
    direction = rng.normal(size=(k, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    offsets = (np.arange(s) - (s - 1) / 2.0) * spec.sense_separation
    return base + offsets[None, :, None] * direction[:, None, :]


def _balanced_deck(n: int, k: int, s: int, rng) -> list[tuple[int, int]]:
    cells = [(i, j) for i in range(k) for j in range(s)]
    deck = cells * (n // len(cells)) + cells[: n % len(cells)]
    rng.shuffle(deck)
    return deck


def gen_disambiguation_benchmark(spec: DisambiguationSpec) -> DisambiguationBenchmark:
    rng = np.random.default_rng(spec.seed)
    centers = _sense_centers(spec, rng)
    length = spec.context_slots + 1

    vectors: dict[str, np.ndarray] = {}
    counter = 0

    def make_split(n: int):
        nonlocal counter
        pairs: list[SentenceImagePair] = []
        gold: list[GoldEntry] = []
        deck = _balanced_deck(n, spec.n_ambiguous_types, spec.senses_per_type, rng)
        for k, s in deck:
            pos = int(rng.integers(0, length))
            ctx = rng.integers(0, spec.n_context_tokens, size=length - 1)
            src = [f"ctx{c:02d}" for c in ctx]
            src.insert(pos, f"amb{k:02d}")
            tgt = [f"tctx{c:02d}" for c in ctx]
            tgt.insert(pos, f"sense{k:02d}{chr(ord('a') + s)}")
            image_id = f"img{counter:06d}"
            counter += 1
            vec = centers[k, s] + spec.noise_scale * rng.normal(size=spec.d_img)
            vectors[image_id] = vec.astype(np.float32)
            pairs.append(SentenceImagePair(text=" ".join(src), image_id=image_id))
            gold.append((tgt, pos))
        return pairs, gold

    train_pairs, train_gold = make_split(spec.n_train)
    test_pairs, test_gold = make_split(spec.n_test)
    store = ImageFeatureStore(dim=spec.d_img, vectors=vectors)
    return DisambiguationBenchmark(
        spec=spec,
        train_pairs=train_pairs, train_gold=train_gold,
        test_pairs=test_pairs, test_gold=test_gold,
        store=store,
    )


def write_pairs(pairs: list[SentenceImagePair], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.text}\t{p.image_id}\n")


def write_gold(gold: list[GoldEntry], path: str) -> None:
    """One target sentence per line, ambiguous position appended after a TAB."""
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, pos in gold:
            fh.write(f"{' '.join(tokens)}\t{pos}\n")


def load_gold(path: str) -> list[GoldEntry]:
    gold: list[GoldEntry] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            text, _, pos = line.rpartition("\t")
            gold.append((text.split(), int(pos)))
    return gold


def to_examples(
    pairs: list[SentenceImagePair],
    gold: list[GoldEntry],
    cfg: TokenizerConfig,
    stoplist: StopWordList,
):
    """Pair benchmark files into training examples (src tokens, tgt tokens, image)."""
    from .training import TrainExample

    if len(pairs) != len(gold):
        raise ValueError(f"{len(pairs)} pairs vs {len(gold)} gold lines")
    return [
        TrainExample(
            src=tokenize(p.text, cfg, stoplist),
            tgt=list(tokens),
            image_id=p.image_id,
        )
        for p, (tokens, _) in zip(pairs, gold)
    ]
