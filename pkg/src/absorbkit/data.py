"""Corpus loading, tokenization and deterministic batch serving."""

from __future__ import annotations

import ast
import hashlib
import json
import sysconfig
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

WORD_SPECIALS = ("<unk>", "<eos>")


class DataError(ValueError):
    """The corpus is empty or too short for the requested batching."""


@dataclass
class Corpus:
    ids: np.ndarray
    vocab_size: int
    kind: str
    split: int
    vocab: dict[str, int] | None = None
    sha256: str = ""

    @property
    def train(self) -> np.ndarray:
        return self.ids[: self.split]

    @property
    def val(self) -> np.ndarray:
        return self.ids[self.split:]

    def save_vocab(self, path) -> None:
        if self.vocab is None:
            raise ValueError("byte-level corpora have no vocabulary file")
        Path(path).write_text(json.dumps(self.vocab, ensure_ascii=False, indent=0, sort_keys=True))


def build_word_vocab(words: list[str]) -> dict[str, int]:
    """Specials first, then words by descending frequency (ties alphabetical)."""
    counts = Counter(words)
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    vocab = {s: i for i, s in enumerate(WORD_SPECIALS)}
    for w in ordered:
        vocab.setdefault(w, len(vocab))
    return vocab


def tokenize_words(text: str, vocab: dict[str, int] | None = None) -> tuple[np.ndarray, dict[str, int]]:
    lines = text.splitlines()
    words: list[str] = []
    for line in lines:
        words.extend(line.split())
        words.append("<eos>")
    if vocab is None:
        vocab = build_word_vocab([w for w in words if w not in WORD_SPECIALS])
    unk = vocab["<unk>"]
    return np.array([vocab.get(w, unk) for w in words], dtype=np.int64), vocab


def load_corpus(path, tokenizer_kind: str = "byte", val_fraction: float = 0.1) -> Corpus:
    """Tokenize a text file and split it by position (validation is the tail)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    if not raw:
        raise DataError(f"corpus {path} is empty")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    digest = hashlib.sha256(raw).hexdigest()
    if tokenizer_kind == "byte":
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        vocab, vsize = None, 256
    elif tokenizer_kind == "word":
        ids, vocab = tokenize_words(raw.decode("utf-8"))
        vsize = len(vocab)
        if ids.size == 0:
            raise DataError(f"corpus {path} has no tokens")
    else:
        raise ValueError(f"unknown tokenizer kind {tokenizer_kind!r}")
    split = int(round(len(ids) * (1.0 - val_fraction)))
    return Corpus(ids, vsize, tokenizer_kind, split, vocab, digest)


def chunk_starts(n_tokens: int, seq_len: int) -> np.ndarray:
    """Starts of non-overlapping ``seq_len + 1`` windows."""
    return np.arange(n_tokens // (seq_len + 1)) * (seq_len + 1)


def batches(ids, seq_len: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled ``(tokens, targets)`` batches, each ``[B, n]``.

    Chunks never overlap; the order is a pure function of ``(ids, seed, epoch)``.
    The trailing partial batch is dropped.
    """
    ids = np.asarray(ids)
    starts = chunk_starts(len(ids), seq_len)
    if len(starts) < batch_size:
        raise DataError(
            f"{len(ids)} tokens give {len(starts)} chunks of {seq_len + 1}; need at least {batch_size}"
        )
    order = np.random.default_rng([seed, epoch]).permutation(len(starts))
    offs = np.arange(seq_len + 1)
    for b in range(len(starts) // batch_size):
        sel = starts[order[b * batch_size:(b + 1) * batch_size]]
        window = ids[sel[:, None] + offs]
        yield window[:, :-1], window[:, 1:]


@dataclass
class BatchStream:
    """Endless batch stream that reshuffles every epoch."""

    ids: np.ndarray
    seq_len: int
    batch_size: int
    seed: int
    epoch: int = 0
    _it: Iterator | None = field(default=None, repr=False)

    def __iter__(self):
        return self

    def __next__(self) -> tuple[np.ndarray, np.ndarray]:
        while True:
            if self._it is None:
                self._it = batches(self.ids, self.seq_len, self.batch_size, self.seed, self.epoch)
            try:
                return next(self._it)
            except StopIteration:
                self._it = None
                self.epoch += 1


def eval_batches(ids, seq_len: int, batch_size: int, max_batches: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sequential, unshuffled chunks for validation; a short final batch is kept."""
    ids = np.asarray(ids)
    starts = chunk_starts(len(ids), seq_len)
    if len(starts) == 0:
        raise DataError(f"validation split of {len(ids)} tokens is shorter than one chunk")
    offs = np.arange(seq_len + 1)
    out = []
    for b in range(0, len(starts), batch_size):
        window = ids[starts[b:b + batch_size, None] + offs]
        out.append((window[:, :-1], window[:, 1:]))
        if max_batches is not None and len(out) >= max_batches:
            break
    return out


# --------------------------------------------------------------------------
# local desk corpus


def build_desk_corpus(path, min_bytes: int = 1_100_000) -> Path:
    """Write a deterministic English corpus of at least ``min_bytes`` bytes.

    Text comes from the local Python installation: the language-reference
    topics shipped with pydoc, then standard-library docstrings in sorted
    module order. No network access is needed.
    """
    path = Path(path)
    if path.exists() and path.stat().st_size >= min_bytes:
        return path
    parts: list[str] = []
    size = 0
    try:
        from pydoc_data import topics

        for key in sorted(topics.topics):
            parts.append(topics.topics[key].strip() + "\n\n")
            size += len(parts[-1])
    except ImportError:
        pass
    stdlib = Path(sysconfig.get_paths()["stdlib"])
    for src in sorted(stdlib.rglob("*.py")):
        if size >= min_bytes:
            break
        if any(part in ("test", "tests", "idlelib", "site-packages", "dist-packages") for part in src.parts):
            continue
        try:
            tree = ast.parse(src.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 80:
                    parts.append(doc.strip() + "\n\n")
                    size += len(parts[-1])
    text = "".join(parts)
    data = text.encode("ascii", errors="ignore")
    if len(data) < min_bytes:
        raise DataError(f"could only assemble {len(data)} bytes of local text")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path
