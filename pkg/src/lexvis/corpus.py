"""Corpus ingestion and preprocessing.

Handles the sentence-image paired corpus format (one ``<sentence>TAB<image_id>``
record per line), stop-word filtering, and subword segmentation. Filtering is
applied to whitespace words before segmentation, so dictionary keys and task
tokens stay aligned.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

MergeRule = tuple[str, str]


class ParseError(ValueError):
    """A corpus file line that does not follow the expected record format."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class SentenceImagePair:
    text: str
    image_id: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("pair text is empty")
        if not self.image_id:
            raise ValueError("pair image_id is empty")


@dataclass(frozen=True)
class StopWordList:
    """Set of lowercase words excluded from tokenization output."""

    words: frozenset[str] = frozenset()

    def __post_init__(self):
        bad = [w for w in self.words if w != w.lower()]
        if bad:
            raise ValueError(f"stop words must be lowercase: {bad[:5]}")

    def __contains__(self, word: str) -> bool:
        return word in self.words


@dataclass(frozen=True)
class TokenizerConfig:
    """Segmentation settings shared by dictionary building and task data.

    ``mode`` is "whitespace" or "bpe". In bpe mode, ``merges`` is the ordered
    list of symbol-pair rules applied greedily, in rule order, inside each
    whitespace word.
    """

    mode: str = "whitespace"
    lowercase: bool = True
    merges: tuple[MergeRule, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in ("whitespace", "bpe"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == "bpe":
            if not self.merges:
                raise ValueError("bpe mode requires a non-empty merge list")
            known = set()
            for i, (a, b) in enumerate(self.merges):
                for sym in (a, b):
                    if len(sym) > 1 and sym not in known:
                        raise ValueError(
                            f"merge rule {i} uses symbol {sym!r} not produced "
                            "by any earlier rule"
                        )
                known.add(a + b)


def load_pairs(path: str) -> list[SentenceImagePair]:
    """Read a paired corpus file: one ``<sentence>TAB<image_id>`` per line.

    Blank lines are skipped. Raises ParseError with the offending line number
    on malformed records.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(
                    path, line_no,
                    f"expected '<sentence>TAB<image_id>', got {len(parts)} fields",
                )
            text, image_id = parts
            if not text.strip():
                raise ParseError(path, line_no, "empty sentence")
            if not image_id.strip():
                raise ParseError(path, line_no, "empty image id")
            pairs.append(SentenceImagePair(text=text, image_id=image_id.strip()))
    return pairs


def load_stop_words(path: str) -> StopWordList:
    """Read a stoplist file: one lowercase word per line, blanks ignored."""
    with open(path, encoding="utf-8") as fh:
        words = frozenset(w.strip() for w in fh if w.strip())
    return StopWordList(words=words)


def default_stop_words() -> StopWordList:
    """The bundled English stoplist."""
    text = (
        importlib.resources.files("lexvis.data")
        .joinpath("stopwords_en.txt")
        .read_text(encoding="utf-8")
    )
    return StopWordList(words=frozenset(w.strip() for w in text.splitlines() if w.strip()))


def filter_stop_words(
    tokens: list[str], stoplist: StopWordList, lowercase: bool = True
) -> list[str]:
    """Drop stoplisted tokens, preserving order.

    Membership is tested on the lowercased token when ``lowercase`` is on,
    matching the dictionary-building convention.
    """
    if lowercase:
        return [t for t in tokens if t.lower() not in stoplist]
    return [t for t in tokens if t not in stoplist]


def _apply_merges(word: str, merges: tuple[MergeRule, ...]) -> list[str]:
    # Greedy application: each rule, in order, merges all its left-to-right
    # non-overlapping occurrences before the next rule runs.
    symbols = list(word)
    for a, b in merges:
        i = 0
        merged: list[str] = []
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                merged.append(a + b)
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return symbols


def tokenize(text: str, cfg: TokenizerConfig, stoplist: StopWordList) -> list[str]:
    """Filter stop words, then segment.

    Whitespace mode splits on runs of whitespace; bpe mode further splits each
    surviving word by the configured merge rules. Empty input yields [].
    """
    words = text.split()
    if cfg.lowercase:
        words = [w.lower() for w in words]
    words = filter_stop_words(words, stoplist, lowercase=cfg.lowercase)
    if cfg.mode == "whitespace":
        return words
    tokens: list[str] = []
    for word in words:
        tokens.extend(_apply_merges(word, cfg.merges))
    return tokens


def learn_bpe(texts: list[str], num_merges: int) -> list[MergeRule]:
    """Learn merge rules by greedy pair-frequency counting.

    At each step the most frequent adjacent symbol pair across the corpus is
    merged; ties break lexicographically on the pair. Learning stops early
    once no pair occurs at least twice.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    words: list[list[str]] = []
    for text in texts:
        for word in text.split():
            words.append(list(word))

    merges: list[MergeRule] = []
    for _ in range(num_merges):
        counts: dict[MergeRule, int] = {}
        for word in words:
            for i in range(len(word) - 1):
                pair = (word[i], word[i + 1])
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        a, b = pair
        for w_idx, word in enumerate(words):
            i = 0
            merged: list[str] = []
            while i < len(word):
                if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            words[w_idx] = merged
    return merges


def load_merges(path: str) -> tuple[MergeRule, ...]:
    """Read merge rules: one rule per line, two space-separated symbols."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParseError(path, line_no, "expected two space-separated symbols")
            rules.append((parts[0], parts[1]))
    return tuple(rules)


def save_merges(rules: tuple[MergeRule, ...] | list[MergeRule], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in rules:
            fh.write(f"{a} {b}\n")
