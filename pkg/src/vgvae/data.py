"""Corpus ingestion: paraphrase and STS TSVs, bracketed trees, vocabulary."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

UNK, BOS, EOS = 0, 1, 2
RESERVED = ("<unk>", "<s>", "</s>")
MAX_SKIP_FRACTION = 0.10


class DataFormatError(ValueError):
    pass


class TreeParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class Vocab:
    tokens: list[str]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index and self.index[token] >= len(RESERVED)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
    """IDs by descending count, ties broken lexicographically; rare words map to UNK."""
    counts = Counter(tok for sent in corpus for tok in sent)
    for reserved in RESERVED:
        counts.pop(reserved, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept, min_count=min_count)


@dataclass
class SentencePair:
    raw1: list[str]
    raw2: list[str]
    x1: list[int] = field(default_factory=list)
    x2: list[int] = field(default_factory=list)

    def encode(self, vocab: Vocab) -> "SentencePair":
        self.x1 = vocab.encode(self.raw1)
        self.x2 = vocab.encode(self.raw2)
        return self


def _read_lines(path) -> list[str]:
    try:
        with open(path, encoding="utf-8", newline="\n") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _check_skips(path, skipped: int, total: int) -> None:
    if skipped:
        log.warning("%s: skipped %d of %d lines", path, skipped, total)
    if total and skipped / total > MAX_SKIP_FRACTION:
        raise DataFormatError(f"{path}: {skipped} of {total} lines malformed")


def load_paraphrases(path, vocab: Vocab | None = None, stats: dict | None = None) -> list[SentencePair]:
    """One ``sent1<TAB>sent2`` pair per line, tokens separated by single spaces."""
    lines = _read_lines(path)
    pairs, skipped = [], 0
    for line in lines:
        fields = line.split("\t")
        if len(fields) != 2:
            skipped += 1
            continue
        a, b = fields[0].split(), fields[1].split()
        if not a or not b:
            skipped += 1
            continue
        pair = SentencePair(a, b)
        pairs.append(pair.encode(vocab) if vocab is not None else pair)
    if stats is not None:
        stats["skipped"] = skipped
        stats["lines"] = len(lines)
    _check_skips(path, skipped, len(lines))
    return pairs


@dataclass
class StsItem:
    sent1: list[str]
    sent2: list[str]
    score: float


def load_sts(path, stats: dict | None = None) -> list[StsItem]:
    """``sent1<TAB>sent2<TAB>score`` with score in [0, 5]."""
    lines = _read_lines(path)
    items, skipped = [], 0
    for lineno, line in enumerate(lines, 1):
        fields = line.split("\t")
        if len(fields) != 3:
            skipped += 1
            continue
        a, b = fields[0].split(), fields[1].split()
        if not a or not b:
            skipped += 1
            continue
        try:
            score = float(fields[2])
        except ValueError:
            skipped += 1
            continue
        if not 0.0 <= score <= 5.0:
            raise DataFormatError(f"{path}:{lineno}: score {fields[2]!r} outside [0, 5]")
        items.append(StsItem(a, b, score))
    if stats is not None:
        stats["skipped"] = skipped
        stats["lines"] = len(lines)
    _check_skips(path, skipped, len(lines))
    return items


def load_sentences(path) -> list[list[str]]:
    return [line.split() for line in _read_lines(path) if line.strip()]


# ---------------------------------------------------------------------------
# trees


@dataclass
class ParseTree:
    label: str
    children: list["ParseTree"] = field(default_factory=list)
    token: str | None = None

    @property
    def is_preterminal(self) -> bool:
        return self.token is not None

    def leaves(self) -> list[str]:
        if self.token is not None:
            return [self.token]
        return [w for c in self.children for w in c.leaves()]

    def pos_tags(self) -> list[str]:
        if self.token is not None:
            return [self.label]
        return [t for c in self.children for t in c.pos_tags()]

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def __str__(self) -> str:
        return serialize(self)


def _tokenize(line: str):
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            yield ch, i
            i += 1
        else:
            j = i
            while j < n and not line[j].isspace() and line[j] not in "()":
                j += 1
            yield line[i:j], i
            i = j


def parse_bracketed(line: str) -> ParseTree:
    """Read one tree in Penn-style bracketed notation.

    ``(X w)`` is a preterminal; a node whose only child is a bare word is a
    preterminal, and a node with no children is a label-only leaf (the shape
    produced by :func:`strip_tokens`). An outer ``( ... )`` with no label is
    unwrapped.
    """
    tokens = list(_tokenize(line))
    if not tokens:
        raise TreeParseError("empty input", 0)
    pos = 0

    def node() -> ParseTree:
        nonlocal pos
        tok, off = tokens[pos]
        if tok != "(":
            raise TreeParseError(f"expected '(' but found {tok!r}", off)
        pos += 1
        if pos >= len(tokens):
            raise TreeParseError("unbalanced parentheses", len(line))
        label = ""
        if tokens[pos][0] not in "()":
            label = tokens[pos][0]
            pos += 1
        children: list[ParseTree] = []
        words: list[str] = []
        while True:
            if pos >= len(tokens):
                raise TreeParseError("unbalanced parentheses", len(line))
            tok, off = tokens[pos]
            if tok == ")":
                pos += 1
                break
            if tok == "(":
                children.append(node())
            else:
                words.append(tok)
                pos += 1
        if words:
            if children or len(words) != 1:
                raise TreeParseError(f"node {label!r} mixes words and subtrees", off)
            return ParseTree(label, [], words[0])
        return ParseTree(label, children)

    tree = node()
    if pos != len(tokens):
        raise TreeParseError("trailing input after tree", tokens[pos][1])
    while tree.label == "" and tree.token is None and len(tree.children) == 1:
        tree = tree.children[0]
    if tree.label == "" and tree.token is None and not tree.children:
        raise TreeParseError("empty tree", 0)
    return tree


def serialize(tree: ParseTree) -> str:
    if tree.token is not None:
        return f"({tree.label} {tree.token})"
    if not tree.children:
        return f"({tree.label})"
    return f"({tree.label} " + " ".join(serialize(c) for c in tree.children) + ")"


def strip_tokens(tree: ParseTree) -> ParseTree:
    """Same shape and labels with words removed; preterminals become leaves."""
    return ParseTree(tree.label, [strip_tokens(c) for c in tree.children], None)


def load_trees(path) -> list[ParseTree]:
    trees = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        try:
            trees.append(parse_bracketed(line))
        except TreeParseError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return trees


def write_trees(path, trees: Iterable[ParseTree]) -> None:
    Path(path).write_text("".join(serialize(t) + "\n" for t in trees), encoding="utf-8")
