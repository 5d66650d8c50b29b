"""Token/id mapping with reserved special symbols."""

from __future__ import annotations

from dataclasses import dataclass

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int]

    @classmethod
    def build(cls, token_seqs: list[list[str]]) -> "Vocab":
        seen = sorted({t for seq in token_seqs for t in seq})
        itos = SPECIALS + seen
        return cls(itos=itos, stoi={t: i for i, t in enumerate(itos)})

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.itos[i] for i in ids]
