"""Caption vocabulary with fixed reserved tokens and line-per-token file I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; ids 0..3 are PAD, BOS, EOS, UNK."""

    tokens: tuple[str, ...]
    _ids: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError(f"tokens must start with the reserved tokens {RESERVED_TOKENS}")
        ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"token {tok!r} is empty or contains whitespace")
            if tok in ids:
                raise ValueError(f"duplicate token {tok!r}")
            ids[tok] = i
        object.__setattr__(self, "_ids", ids)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Reserved tokens followed by the given words, first occurrence kept."""
        seen = dict.fromkeys(RESERVED_TOKENS)
        for w in words:
            seen.setdefault(w)
        return cls(tokens=tuple(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        """Id of a token, UNK for out-of-vocabulary words."""
        return self._ids.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def encode(self, words: list[str], length: int) -> list[int]:
        """BOS + word ids + EOS, padded with PAD to the given length."""
        if len(words) + 2 > length:
            raise ValueError(
                f"caption of {len(words)} words does not fit length {length} "
                f"with BOS/EOS framing"
            )
        ids = [BOS_ID] + [self.id(w) for w in words] + [EOS_ID]
        return ids + [PAD_ID] * (length - len(ids))

    def decode(self, ids) -> list[str]:
        """Words between BOS and the first EOS, special tokens dropped."""
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.tokens[i])
        return words

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh if line.strip())
        return cls(tokens=tokens)
