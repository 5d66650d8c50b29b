"""Word-image dictionary: token -> occurrence-counted image associations.

Built once from a sentence-image paired corpus and then treated as immutable.
Each entry is ordered by descending co-occurrence count, ties by first
appearance in the corpus, so lookups are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import SentenceImagePair, StopWordList, TokenizerConfig, tokenize

Entry = list[tuple[str, int]]


class DictionaryFormatError(ValueError):
    """A persisted dictionary file that violates the entry invariants."""


@dataclass
class WordImageDictionary:
    entries: dict[str, Entry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.entries


def build_dictionary(
    pairs: list[SentenceImagePair],
    cfg: TokenizerConfig,
    stoplist: StopWordList,
) -> WordImageDictionary:
    """Count token/image co-occurrences over the paired corpus.

    A token repeated inside one sentence contributes its paired image once for
    that pair. Entries end up sorted by count descending, first-seen order on
    ties.
    """
    counts: dict[str, dict[str, int]] = {}
    for pair in pairs:
        tokens = tokenize(pair.text, cfg, stoplist)
        for token in dict.fromkeys(tokens):  # de-duplicate, keep order
            images = counts.setdefault(token, {})
            images[pair.image_id] = images.get(pair.image_id, 0) + 1

    entries: dict[str, Entry] = {}
    for token, images in counts.items():
        ranked = sorted(
            images.items(),
            key=lambda kv: -kv[1],  # stable sort keeps first-seen order on ties
        )
        entries[token] = [(image_id, n) for image_id, n in ranked]
    return WordImageDictionary(entries=entries)


def lookup(d: WordImageDictionary, token: str, m: int) -> list[str]:
    """Top ``m`` image ids for ``token``; unknown tokens yield [].

    Missing tokens are the common case (coverage is well below 100%), so this
    degrades gracefully instead of raising.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    entry = d.entries.get(token)
    if entry is None:
        return []
    return [image_id for image_id, _ in entry[:m]]


def save_dictionary(d: WordImageDictionary, path: str) -> None:
    """Write as a JSON object token -> [[image_id, count], ...], stored order."""
    obj = {token: [[i, c] for i, c in entry] for token, entry in d.entries.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=0)
        fh.write("\n")


def load_dictionary(path: str) -> WordImageDictionary:
    """Read a dictionary written by :func:`save_dictionary`.

    Validates the per-entry invariants (counts positive and non-increasing,
    image ids unique) and raises DictionaryFormatError naming the bad key.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DictionaryFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DictionaryFormatError(f"{path}: top level must be an object")

    entries: dict[str, Entry] = {}
    for token, raw in obj.items():
        if not isinstance(raw, list):
            raise DictionaryFormatError(f"{path}: entry for {token!r} is not an array")
        entry: Entry = []
        seen: set[str] = set()
        prev = None
        for item in raw:
            if (
                not isinstance(item, list)
                or len(item) != 2
                or not isinstance(item[0], str)
                or not isinstance(item[1], int)
                or isinstance(item[1], bool)
            ):
                raise DictionaryFormatError(
                    f"{path}: entry for {token!r} has a malformed [image_id, count] item"
                )
            image_id, count = item
            if count < 1:
                raise DictionaryFormatError(
                    f"{path}: entry for {token!r} has count < 1"
                )
            if image_id in seen:
                raise DictionaryFormatError(
                    f"{path}: entry for {token!r} repeats image id {image_id!r}"
                )
            if prev is not None and count > prev:
                raise DictionaryFormatError(
                    f"{path}: entry for {token!r} is not sorted by count"
                )
            seen.add(image_id)
            prev = count
            entry.append((image_id, count))
        entries[token] = entry
    return WordImageDictionary(entries=entries)
