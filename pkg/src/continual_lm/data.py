"""Corpora, byte tokenization, synthetic languages and benchmark record loaders."""
from __future__ import annotations

import json
import os
import random
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .model import BOS, EOS, PAD
from .numerics import ContractError

SPECIALS = {BOS, EOS, PAD}


class RecordError(ValueError):
    """Malformed or invalid benchmark record; message carries the line number."""


@dataclass
class Corpus:
    name: str
    documents: list[bytes]
    language: str = ""

    def __post_init__(self):
        if not self.documents:
            raise ContractError(f"corpus {self.name!r} has no documents")

    @property
    def n_bytes(self) -> int:
        return sum(len(d) for d in self.documents)

    def split(self, n_heldout: int) -> tuple["Corpus", "Corpus"]:
        """(train, held-out); held-out is the last ``n_heldout`` documents."""
        if not 0 < n_heldout < len(self.documents):
            raise ContractError("held-out split must leave both parts non-empty")
        return (
            Corpus(self.name + "-train", self.documents[:-n_heldout], self.language),
            Corpus(self.name + "-heldout", self.documents[-n_heldout:], self.language),
        )


@dataclass(frozen=True)
class MCItem:
    question: str
    choices: tuple[str, ...]
    gold_index: int

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(self.choices) < 2:
            raise RecordError("an MC item needs at least 2 choices")
        if not 0 <= self.gold_index < len(self.choices):
            raise RecordError(
                f"gold index {self.gold_index} out of range for {len(self.choices)} choices"
            )
        if len(set(self.choices)) != len(self.choices):
            raise RecordError("choices must be pairwise distinct")


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str

    def __post_init__(self):
        if not self.question or not self.answer:
            raise RecordError("question and answer must be non-empty")


# --- tokenization ----------------------------------------------------------


def tokenize(text: bytes | str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = list(text)
    if add_bos:
        ids.insert(0, BOS)
    if add_eos:
        ids.append(EOS)
    return ids


def detokenize(ids: Sequence[int]) -> bytes:
    return bytes(int(i) for i in ids if int(i) not in SPECIALS)


# --- corpora on disk -------------------------------------------------------


def load_corpus(path: str | os.PathLike, name: str | None = None, language: str = "") -> Corpus:
    """Read every ``.txt`` file under ``path`` (sorted) as one raw-bytes document."""
    root = Path(path)
    files = sorted(root.rglob("*.txt"))
    docs = [f.read_bytes() for f in files]
    docs = [d for d in docs if d]
    return Corpus(name or root.name, docs, language)


def save_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    width = len(str(len(corpus.documents)))
    for i, doc in enumerate(corpus.documents):
        (root / f"doc{i:0{width}d}.txt").write_bytes(doc)


# --- synthetic languages ---------------------------------------------------
#
# Both languages spell words over the full a-z alphabet but with disjoint
# letter transitions: in A the next letter is 0 or 1 places (mod 4) after the
# previous one, in B 2 or 3 places. Word-initial and word-final letters are
# likewise split by residue, so the only byte bigrams the languages share
# involve punctuation. Words follow an order-2 Markov chain whose transition
# table is a fixed function of the grammar id.

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
GRAMMARS = {
    #    allowed step (mod 4), word-edge residues (mod 4), inventory seed
    "A": ((0, 1), (0, 1), 1001),
    "B": ((2, 3), (2, 3), 2002),
}
N_WORDS = 32
N_SUCCESSORS = 3
# the word two back only matters through its parity
N_CLASSES = 2


@dataclass
class Grammar:
    gid: str
    words: list[str]
    _table: dict = field(default_factory=dict, repr=False)

    def successors(self, w1: int, w2: int) -> tuple[list[int], list[float]]:
        key = (w1 % N_CLASSES, w2)
        if key not in self._table:
            rng = random.Random(zlib.crc32(f"{self.gid}:{key[0]}:{w2}".encode()))
            nxt = rng.sample(range(len(self.words)), N_SUCCESSORS)
            weights = sorted((rng.random() + 0.2 for _ in nxt), reverse=True)
            total = sum(weights)
            self._table[key] = (nxt, [w / total for w in weights])
        return self._table[key]


def _make_word(rng: random.Random, steps: tuple[int, ...], edges: tuple[int, ...]) -> str:
    while True:
        length = rng.randint(2, 6)
        first = rng.choice([c for c in ALPHABET if (ord(c) - 97) % 4 in edges])
        word = [first]
        for _ in range(length - 1):
            prev = ord(word[-1]) - 97
            word.append(rng.choice([c for c in ALPHABET if (ord(c) - 97 - prev) % 4 in steps]))
        if (ord(word[-1]) - 97) % 4 in edges:
            return "".join(word)


def grammar(gid: str) -> Grammar:
    if gid not in GRAMMARS:
        raise ContractError(f"unknown grammar {gid!r}; expected one of {sorted(GRAMMARS)}")
    steps, edges, inv_seed = GRAMMARS[gid]
    rng = random.Random(inv_seed)
    while True:
        words: list[str] = []
        while len(words) < N_WORDS:
            w = _make_word(rng, steps, edges)
            if w not in words:
                words.append(w)
        # every letter must occur so that no letter embedding is task-specific
        if set("".join(words)) == set(ALPHABET):
            return Grammar(gid, words)


def _sentence(g: Grammar, rng: random.Random, state: list[int], end: str) -> str:
    n = rng.randint(4, 12)
    out = []
    for _ in range(n):
        nxt, probs = g.successors(state[0], state[1])
        w = rng.choices(nxt, probs)[0]
        out.append(g.words[w])
        state[0], state[1] = state[1], w
    return " ".join(out) + end


def synth_text(g: Grammar, rng: random.Random, n_sentences: int) -> str:
    state = [rng.randrange(N_WORDS), rng.randrange(N_WORDS)]
    return " ".join(_sentence(g, rng, state, ".") for _ in range(n_sentences))


def synth_corpus(language_spec: str, n_docs: int, seed: int) -> Corpus:
    """``n_docs`` documents of 3-12 sentences drawn from grammar ``language_spec``."""
    if n_docs < 1:
        raise ContractError("n_docs must be >= 1")
    g = grammar(language_spec)
    rng = random.Random(f"{language_spec}:{seed}")
    docs = [synth_text(g, rng, rng.randint(3, 12)).encode() for _ in range(n_docs)]
    return Corpus(f"synth-{language_spec}", docs, language_spec)


def byte_bigrams(corpus: Corpus) -> set[tuple[int, int]]:
    out: set[tuple[int, int]] = set()
    for d in corpus.documents:
        out.update(zip(d, d[1:]))
    return out


def bigram_overlap(a: Corpus, b: Corpus) -> float:
    """Jaccard overlap of the byte-bigram type sets of two corpora."""
    sa, sb = byte_bigrams(a), byte_bigrams(b)
    return len(sa & sb) / len(sa | sb)


def synth_mc(
    language_spec: str,
    n_items: int,
    seed: int,
    n_choices: int = 4,
    max_tokens: int | None = None,
    n_answer_words: int = 2,
) -> list[MCItem]:
    """Next-phrase multiple choice: pick the grammatical continuation.

    The passage is grammar text with its sentence breaks. Distractors start
    with a word that never follows the passage's last two words. With ``max_tokens`` set, every item fits the templated
    (BOS, prompt, longest choice) sequence into that many tokens and every
    fourth item uses the budget exactly, cutting the passage mid-word.
    """
    g = grammar(language_spec)
    rng = random.Random(f"mc:{language_spec}:{seed}:{n_answer_words}")
    items = []
    rejected = 0
    while len(items) < n_items:
        exact = max_tokens is not None and len(items) % 4 == 0
        state = [rng.randrange(N_WORDS), rng.randrange(N_WORDS)]
        words = []
        for _ in range(120 if exact else rng.randint(6, 24)):
            nxt, probs = g.successors(state[0], state[1])
            w = rng.choices(nxt, probs)[0]
            words.append(w)
            state = [state[1], w]
        ctx, answer = words[:-n_answer_words], words[-n_answer_words:]
        follows = set(g.successors(ctx[-2], ctx[-1])[0])
        gold = " ".join(g.words[w] for w in answer)
        choices = {gold}
        while len(choices) < n_choices:
            x = rng.randrange(N_WORDS)
            if x in follows:
                continue
            tail = [g.words[rng.randrange(N_WORDS)] for _ in range(n_answer_words - 1)]
            choices.add(" ".join([g.words[x], *tail]))
        choices = sorted(choices)
        rng.shuffle(choices)
        # sentence breaks as in the corpus; the answer continues the last sentence
        ends, pos = set(), 0
        while True:
            pos += rng.randint(4, 12)
            if pos > len(ctx):
                break
            ends.add(pos - 1)
        question = " ".join(g.words[w] + ("." if i in ends else "") for i, w in enumerate(ctx))
        if max_tokens is not None:
            question = _fit_question(question, choices, max_tokens, exact)
            if question is None:
                rejected += 1
                if rejected > 1000:
                    raise ContractError(f"max_tokens={max_tokens} is too small for the MC template")
                continue
        items.append(MCItem(question, tuple(choices), choices.index(gold)))
    return items


def _fit_question(question: str, choices: list[str], max_tokens: int, exact: bool) -> str | None:
    from .continual import fisher_prompt  # continual imports this module

    def size(q: str) -> int:
        return 1 + len(fisher_prompt(q, choices).encode()) + max(len(c.encode()) for c in choices)

    excess = size(question) - max_tokens
    if exact:
        return question[excess:] if 0 <= excess < len(question) else None
    parts = question.split(" ")
    while size(" ".join(parts)) > max_tokens:
        if len(parts) <= 2:
            return None
        parts = parts[1:]
    return " ".join(parts)


def synth_qa(language_spec: str, n_pairs: int, seed: int) -> list[QAPair]:
    """Question sentence ending in ``?`` followed by its grammatical continuation."""
    g = grammar(language_spec)
    rng = random.Random(f"qa:{language_spec}:{seed}")
    pairs = []
    for _ in range(n_pairs):
        state = [rng.randrange(N_WORDS), rng.randrange(N_WORDS)]
        q = _sentence(g, rng, state, "?")
        a = _sentence(g, rng, state, ".")
        pairs.append(QAPair(q, a))
    return pairs


# --- batching --------------------------------------------------------------


def chunk_corpus(corpus: Corpus, context_length: int) -> list[list[int]]:
    """BOS-prefixed documents packed end to end and cut into context-length chunks.

    If the packed stream would end in a lone token (no prediction target), the
    last two chunks are split so the final one holds two tokens instead.
    """
    stream: list[int] = []
    for doc in corpus.documents:
        stream.extend(tokenize(doc, add_bos=True))
    chunks = [stream[i : i + context_length] for i in range(0, len(stream), context_length)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-1] = chunks[-2][-1:] + chunks[-1]
        chunks[-2] = chunks[-2][:-1]
    return chunks


def batch_stream(
    corpus: Corpus, context_length: int, batch_size: int, seed: int, epochs: int | None = None
) -> Iterator[torch.Tensor]:
    """Infinite (or ``epochs``-long) iterator of (batch, context_length) id tensors.

    Each epoch visits every chunk exactly once in an order shuffled by
    ``(seed, epoch)``; short chunks are right-padded with PAD.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    chunks = chunk_corpus(corpus, context_length)
    table = torch.full((len(chunks), context_length), PAD, dtype=torch.long)
    for i, c in enumerate(chunks):
        table[i, : len(c)] = torch.tensor(c)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([seed, epoch]).permutation(len(chunks))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield table[torch.as_tensor(idx)]
        epoch += 1


# --- benchmark records -----------------------------------------------------


def _read_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise RecordError(f"{path}:{lineno}: record is not an object")
            yield lineno, rec


def load_mc(path: str | os.PathLike) -> list[MCItem]:
    items = []
    for lineno, rec in _read_jsonl(path):
        try:
            q, choices, gold = rec["question"], rec["choices"], rec["gold"]
        except KeyError as exc:
            raise RecordError(f"{path}:{lineno}: missing key {exc.args[0]!r}") from None
        if not isinstance(q, str) or not isinstance(choices, list) or not isinstance(gold, int):
            raise RecordError(f"{path}:{lineno}: wrong field types")
        try:
            items.append(MCItem(q, tuple(choices), gold))
        except RecordError as exc:
            raise RecordError(f"{path}:{lineno}: {exc}") from None
    return items


def load_qa(path: str | os.PathLike) -> list[QAPair]:
    pairs = []
    for lineno, rec in _read_jsonl(path):
        try:
            q, a = rec["question"], rec["answer"]
        except KeyError as exc:
            raise RecordError(f"{path}:{lineno}: missing key {exc.args[0]!r}") from None
        if not isinstance(q, str) or not isinstance(a, str):
            raise RecordError(f"{path}:{lineno}: wrong field types")
        try:
            pairs.append(QAPair(q, a))
        except RecordError as exc:
            raise RecordError(f"{path}:{lineno}: {exc}") from None
    return pairs


def save_mc(items: Sequence[MCItem], path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            rec = {"question": it.question, "choices": list(it.choices), "gold": it.gold_index}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def save_qa(pairs: Sequence[QAPair], path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"question": p.question, "answer": p.answer}, ensure_ascii=False) + "\n")
