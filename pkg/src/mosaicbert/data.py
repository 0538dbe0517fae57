"""Corpus ingestion, WordPiece tokenization, vocabularies and MLM masking."""
from __future__ import annotations

import os
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, IngestionError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
RESERVED_PREFIX = "[unused_pad"
IGNORE_INDEX = -100


def round_vocab(size: int, multiple: int = 64) -> int:
    """Smallest integer >= size divisible by ``multiple``."""
    if size < 1 or multiple < 1:
        raise ConfigError(f"size and multiple must be >= 1, got {size}, {multiple}")
    return -(-size // multiple) * multiple


class Vocab:
    """Ordered token list; a token's id is its index (vocab.txt convention)."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.token_to_id:
                raise DataError(f"duplicate vocab entry {tok!r} at line {i}")
            self.token_to_id[tok] = i
        missing = [t for t in SPECIAL_TOKENS if t not in self.token_to_id]
        if missing:
            raise DataError(f"vocab is missing special tokens {missing}")
        reserved = [i for i, t in enumerate(self.tokens) if t.startswith(RESERVED_PREFIX)]
        self.real_size = reserved[0] if reserved else len(self.tokens)

    @property
    def effective_size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def special_ids(self) -> np.ndarray:
        return np.array(sorted(self.token_to_id[t] for t in SPECIAL_TOKENS))

    def normal_ids(self) -> np.ndarray:
        """Ids eligible as random MLM replacements: real, non-special tokens."""
        ids = np.arange(self.real_size)
        return ids[~np.isin(ids, self.special_ids)]

    def padded(self, multiple: int = 64) -> "Vocab":
        """Append inert reserved entries up to a multiple of ``multiple``."""
        target = round_vocab(len(self.tokens), multiple)
        start = len(self.tokens) - self.real_size
        extra = [f"{RESERVED_PREFIX}{start + i}]" for i in range(target - len(self.tokens))]
        return Vocab(self.tokens + extra)

    def padded_to(self, size: int) -> "Vocab":
        """Append reserved entries up to exactly ``size`` (a multiple of 64)."""
        if size % 64 or size < len(self.tokens):
            raise ConfigError(f"cannot pad a {len(self.tokens)}-token vocab to {size}")
        return self.padded(size)

    def id_to_token(self, i: int) -> str:
        return self.tokens[i]

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "Vocab":
        raw = Path(path).read_bytes()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise IngestionError(f"{path}: vocab is not valid UTF-8 ({e})") from e
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def to_file(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes("".join(t + "\n" for t in self.tokens).encode("utf-8"))


def build_vocab(documents: Iterable[str], max_size: int, lowercase: bool = True, multiple: int = 64) -> Vocab:
    """Desk-scale vocabulary: specials, every seen character (plus its ##
    continuation), then whole words by frequency.  Not a trained WordPiece
    vocabulary; it only has to make the greedy matcher lossless on a
    synthetic corpus."""
    from collections import Counter

    words: Counter[str] = Counter()
    chars: set[str] = set()
    for doc in documents:
        for w in basic_tokenize(doc, lowercase):
            words[w] += 1
            chars.update(w)
    tokens = list(SPECIAL_TOKENS)
    for c in sorted(chars):
        tokens.append(c)
        tokens.append("##" + c)
    seen = set(tokens)
    for w, _ in sorted(words.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if w not in seen:
            tokens.append(w)
            seen.add(w)
    return Vocab(tokens).padded(multiple)


# -- tokenization -------------------------------------------------------

def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _strip_accents(text: str) -> str:
    return "".join(c for c in unicodedata.normalize("NFD", text) if unicodedata.category(c) != "Mn")


def basic_tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace split, then every punctuation character becomes its own token."""
    text = "".join(" " if c.isspace() else c for c in text
                   if not (unicodedata.category(c).startswith("C") and not c.isspace()))
    if lowercase:
        text = _strip_accents(text.lower())
    out: list[str] = []
    for word in text.split():
        buf = ""
        for ch in word:
            if _is_punctuation(ch):
                if buf:
                    out.append(buf)
                    buf = ""
                out.append(ch)
            else:
                buf += ch
        if buf:
            out.append(buf)
    return out


def wordpiece(word: str, vocab: Vocab, max_chars: int = 100) -> list[int]:
    """Greedy longest-match-first split of one word; [UNK] if any piece fails."""
    if len(word) > max_chars:
        return [vocab.unk_id]
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab.token_to_id:
                found = vocab.token_to_id[piece]
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        ids.append(found)
        start = end
    return ids


def wordpiece_tokenize(text: str, vocab: Vocab, lowercase: bool = True) -> list[int]:
    ids: list[int] = []
    for word in basic_tokenize(text, lowercase):
        ids.extend(wordpiece(word, vocab))
    return ids


def ids_to_tokens(ids: Iterable[int], vocab: Vocab) -> list[str]:
    return [vocab.tokens[int(i)] for i in ids]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    """Join pieces back into words ("##" pieces attach to the previous one)."""
    words: list[str] = []
    for tok in ids_to_tokens(ids, vocab):
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)


def prepare_sequence(ids: Sequence[int], vocab: Vocab, max_seq_len: int = 128) -> list[int]:
    """[CLS] + content truncated to max_seq_len - 2 + [SEP].  No padding."""
    if max_seq_len < 3:
        raise ConfigError(f"max_seq_len must be >= 3, got {max_seq_len}")
    return [vocab.cls_id, *list(ids)[: max_seq_len - 2], vocab.sep_id]


# -- masking ------------------------------------------------------------

@dataclass
class MLMBatch:
    input_ids: np.ndarray  # [B, L]
    labels: np.ndarray  # [B, L], IGNORE_INDEX where nothing is predicted
    attention_mask: np.ndarray  # [B, L] bool
    segment_ids: np.ndarray  # [B, L]

    @property
    def n_real_tokens(self) -> int:
        return int(self.attention_mask.sum())

    @property
    def n_predictions(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())


def mask_rng(seed: int, step: int, row: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), int(row)])


def mlm_mask(ids: Sequence[int], ratio: float, seed: int, vocab: Vocab, step: int = 0, row: int = 0,
             rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic MLM corruption of one row.

    Each non-special token is selected with probability ``ratio``; selected
    positions become [MASK] 80% of the time, a random normal token 10%, and
    stay unchanged 10%.  Returns (input_ids, labels).  The draw is a pure
    function of (seed, step, row) unless an explicit ``rng`` is given.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"masking ratio must lie in (0, 1), got {ratio}")
    ids = np.asarray(ids, dtype=np.int64)
    eligible = ~np.isin(ids, vocab.special_ids)
    if rng is None:
        rng = mask_rng(seed, step, row)
    selected = eligible & (rng.random(ids.shape) < ratio)
    action = rng.random(ids.shape)
    replacement = rng.choice(vocab.normal_ids(), size=ids.shape)
    out = ids.copy()
    out[selected & (action < 0.8)] = vocab.mask_id
    rand = selected & (action >= 0.8) & (action < 0.9)
    out[rand] = replacement[rand]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return out, labels


def collate(sequences: Sequence[Sequence[int]], vocab: Vocab, length: int | None = None):
    """Right-pad to ``length`` (default: longest).  Returns (ids, mask)."""
    length = length or max(len(s) for s in sequences)
    ids = np.full((len(sequences), length), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, s in enumerate(sequences):
        if len(s) > length:
            raise DataError(f"sequence {i} has {len(s)} tokens, longer than {length}")
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_mlm_batch(sequences: Sequence[Sequence[int]], vocab: Vocab, ratio: float, seed: int, step: int,
                   length: int | None = None) -> MLMBatch:
    ids, mask = collate(sequences, vocab, length)
    inputs = np.empty_like(ids)
    labels = np.empty_like(ids)
    for r in range(ids.shape[0]):
        inputs[r], labels[r] = mlm_mask(ids[r], ratio, seed, vocab, step=step, row=r)
    return MLMBatch(inputs, labels, mask, np.zeros_like(ids))


# -- corpus -------------------------------------------------------------

def _corpus_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".txt" and p.is_file())
    return [path]


def corpus_reader(path: str | os.PathLike, shuffle_seed: int | None = None) -> Iterator[str]:
    """Documents, one per non-empty line, from a file or a directory of
    ``.txt`` shards read in sorted filename order.  With ``shuffle_seed`` the
    whole document list is permuted deterministically."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"corpus path {path} does not exist")
    docs: list[str] = []
    for f in _corpus_files(path):
        with open(f, "rb") as fh:
            for lineno, raw in enumerate(fh, start=1):
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError as e:
                    raise IngestionError(f"{f}:{lineno}: invalid UTF-8 ({e.reason})") from e
                line = line.strip()
                if line:
                    docs.append(line)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(docs))
        docs = [docs[i] for i in order]
    yield from docs


_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


def synthetic_lexicon(n_words: int = 400, seed: int = 1234) -> list[str]:
    """Distinct pronounceable pseudo-words of two or three syllables."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n_words:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(int(rng.integers(2, 4))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def synthetic_corpus(n_docs: int, seed: int = 0, n_words: int = 400, doc_len: tuple[int, int] = (60, 120),
                     branching: int = 4) -> list[str]:
    """Documents from a sparse first-order Markov chain over a pseudo-lexicon.

    Every word has ``branching`` likely successors, so masked tokens are
    predictable from their neighbours; sentence breaks are inserted as ".".
    The chain itself is fixed (seeded independently of ``seed``).
    """
    lexicon = synthetic_lexicon(n_words)
    chain = np.random.default_rng(4321)
    successors = chain.integers(0, n_words, size=(n_words, branching))
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        n = int(rng.integers(doc_len[0], doc_len[1] + 1))
        cur = int(rng.choice(n_words, p=zipf))
        out = [lexicon[cur]]
        for i in range(1, n):
            cur = int(successors[cur, rng.integers(branching)]) if rng.random() < 0.85 else int(
                rng.choice(n_words, p=zipf))
            out.append(lexicon[cur])
            if rng.random() < 0.1:
                out[-1] += "."
        docs.append(" ".join(out) + ".")
    return docs
