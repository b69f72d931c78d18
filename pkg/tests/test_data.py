import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from continual_lm.continual import fisher_prompt
from continual_lm.data import (
    Corpus,
    MCItem,
    QAPair,
    RecordError,
    batch_stream,
    bigram_overlap,
    chunk_corpus,
    detokenize,
    grammar,
    load_corpus,
    load_mc,
    load_qa,
    save_corpus,
    save_mc,
    save_qa,
    synth_corpus,
    synth_mc,
    synth_qa,
    tokenize,
)
from continual_lm.model import BOS, EOS, PAD
from continual_lm.numerics import ContractError


def test_tokenize_empty_with_specials():
    assert tokenize(b"", add_bos=True, add_eos=True) == [BOS, EOS]


def test_tokenize_bytes_identity():
    assert tokenize(b"ab") == [97, 98]
    assert tokenize("ą") == list("ą".encode())


def test_round_trip_seeded_random_bytes():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        raw = rng.integers(0, 256, size=rng.integers(0, 64)).astype(np.uint8).tobytes()
        ids = tokenize(raw, add_bos=True, add_eos=True)
        assert all(0 <= i <= 258 for i in ids)
        assert detokenize(ids) == raw


@given(st.binary(max_size=200))
def test_round_trip_property(raw):
    assert detokenize(tokenize(raw)) == raw


def test_synth_corpus_deterministic():
    a = synth_corpus("A", 20, seed=3)
    b = synth_corpus("A", 20, seed=3)
    assert a.documents == b.documents
    assert synth_corpus("A", 20, seed=4).documents != a.documents


def test_synth_corpus_needs_documents():
    with pytest.raises(ContractError):
        synth_corpus("A", 0, seed=0)
    with pytest.raises(ContractError):
        synth_corpus("C", 3, seed=0)


def _bigram_types(docs):
    s = set()
    for d in docs:
        for i in range(len(d) - 1):
            s.add(d[i : i + 2])
    return s


def test_bigram_overlap_below_five_percent():
    a = synth_corpus("A", 300, seed=0)
    b = synth_corpus("B", 300, seed=0)
    sa, sb = _bigram_types(a.documents), _bigram_types(b.documents)
    independent = len(sa & sb) / len(sa | sb)
    assert independent < 0.05
    assert bigram_overlap(a, b) == pytest.approx(independent)


def test_grammars_use_whole_alphabet_with_disjoint_words():
    ga, gb = grammar("A"), grammar("B")
    assert not set(ga.words) & set(gb.words)
    for g in (ga, gb):
        letters = set("".join(synth_corpus(g.gid, 200, 0).documents[i].decode() for i in range(200)))
        assert set("abcdefghijklmnopqrstuvwxyz") <= letters


def test_grammar_is_order_two():
    g = grammar("A")
    # successor set depends on the word two back (through its parity)
    differs = any(g.successors(0, w)[0] != g.successors(1, w)[0] for w in range(len(g.words)))
    assert differs
    assert g.successors(0, 5) == g.successors(2, 5)


def test_corpus_disk_round_trip(tmp_path):
    c = synth_corpus("B", 12, seed=1)
    save_corpus(c, tmp_path / "b")
    loaded = load_corpus(tmp_path / "b")
    assert loaded.documents == c.documents
    assert loaded.n_bytes == c.n_bytes
    assert load_corpus(tmp_path / "b").n_bytes == loaded.n_bytes


def test_empty_corpus_dir_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ContractError):
        load_corpus(tmp_path / "empty")


def test_one_context_length_document_is_one_batch():
    corpus = Corpus("c", [b"x" * 15])
    batches = list(batch_stream(corpus, 16, 1, seed=0, epochs=1))
    assert len(batches) == 1
    assert batches[0].tolist() == [[BOS] + [ord("x")] * 15]


def test_batch_order_is_seeded():
    corpus = synth_corpus("A", 30, seed=0)
    first = [b.tolist() for b in batch_stream(corpus, 32, 3, seed=5, epochs=2)]
    again = [b.tolist() for b in batch_stream(corpus, 32, 3, seed=5, epochs=2)]
    other = [b.tolist() for b in batch_stream(corpus, 32, 3, seed=6, epochs=2)]
    assert first == again
    assert first != other


def test_epoch_covers_every_byte_once():
    corpus = synth_corpus("B", 25, seed=2)
    ctx = 40
    batches = list(batch_stream(corpus, ctx, 4, seed=1, epochs=1))
    got = Counter()
    for b in batches:
        for row in b.tolist():
            got[detokenize(row)] += 1
    # oracle: pack and chunk the corpus by hand
    stream = []
    for d in corpus.documents:
        stream += [BOS] + list(d)
    expected = Counter(
        bytes(t for t in stream[i : i + ctx] if t != BOS) for i in range(0, len(stream), ctx)
    )
    if len(stream) % ctx == 1:
        pytest.skip("tail re-split case covered separately")
    assert got == expected
    total = sum(len(detokenize(r)) for b in batches for r in b.tolist())
    assert total == corpus.n_bytes


def test_lone_tail_token_is_merged():
    corpus = Corpus("c", [b"a" * 9])  # BOS + 9 bytes = 10 tokens
    chunks = chunk_corpus(corpus, 3)
    assert [len(c) for c in chunks] == [3, 3, 2, 2]
    assert sum(chunks, []) == [BOS] + [97] * 9


def test_short_chunks_are_padded():
    corpus = Corpus("c", [b"abc"])
    (batch,) = list(batch_stream(corpus, 8, 1, seed=0, epochs=1))
    assert batch.tolist() == [[BOS, 97, 98, 99] + [PAD] * 4]


def test_batch_size_must_be_positive():
    with pytest.raises(ContractError):
        next(batch_stream(Corpus("c", [b"ab"]), 8, 0, seed=0))


def _write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))


def test_load_mc_counts(tmp_path):
    p = tmp_path / "mc.jsonl"
    _write_lines(p, [{"question": f"q{i}", "choices": ["a", "b", "c"], "gold": i} for i in range(3)])
    items = load_mc(p)
    assert len(items) == 3
    assert items[2].gold_index == 2


def test_load_mc_gold_out_of_range_names_line(tmp_path):
    p = tmp_path / "mc.jsonl"
    _write_lines(p, [
        {"question": "q", "choices": ["a", "b"], "gold": 0},
        {"question": "q", "choices": ["a", "b"], "gold": 2},
    ])
    with pytest.raises(RecordError, match=":2:"):
        load_mc(p)


def test_load_mc_malformed_line(tmp_path):
    p = tmp_path / "mc.jsonl"
    p.write_text('{"question": "q", "choices": ["a", "b"], "gold": 0}\n{not json\n')
    with pytest.raises(RecordError, match=":2:"):
        load_mc(p)


def test_load_mc_duplicate_choices(tmp_path):
    p = tmp_path / "mc.jsonl"
    _write_lines(p, [{"question": "q", "choices": ["a", "a"], "gold": 0}])
    with pytest.raises(RecordError, match=":1:"):
        load_mc(p)


def test_load_qa_missing_key(tmp_path):
    p = tmp_path / "qa.jsonl"
    _write_lines(p, [{"question": "q", "answer": "a"}, {"question": "q"}])
    with pytest.raises(RecordError, match=":2:.*answer"):
        load_qa(p)


HAND_ITEMS = [
    MCItem("What is two plus two?", ("3", "4", "5"), 1),
    MCItem("Capital of Lithuania?", ("Vilnius", "Kaunas"), 0),
    MCItem("Kas yra Vilnius?", ("miestas", "upė", "kalnas", "ežeras"), 0),
    MCItem("Pick the odd one", ("1", "2", "3", "x"), 3),
    MCItem("quote \" and \\ backslash", ("a\nb", "c"), 1),
    MCItem("unicode ąčęėįšųūž", ("ą", "č"), 1),
    MCItem("emoji 😀", ("yes", "no"), 0),
    MCItem("tabs\tinside", ("x\ty", "z"), 0),
    MCItem("", ("empty question", "is allowed"), 1),
    MCItem("last", ("p", "q", "r"), 2),
]


def test_mc_fixture_round_trip(tmp_path):
    p = tmp_path / "hand.jsonl"
    save_mc(HAND_ITEMS, p)
    assert load_mc(p) == HAND_ITEMS


def test_qa_fixture_round_trip(tmp_path):
    pairs = [QAPair("Q?", "A."), QAPair("Kas?", "Taip.")]
    p = tmp_path / "qa.jsonl"
    save_qa(pairs, p)
    assert load_qa(p) == pairs


def test_qa_pair_must_be_nonempty():
    with pytest.raises(RecordError):
        QAPair("", "a")


def test_synth_mc_items_valid_and_deterministic():
    items = synth_mc("A", 30, seed=1)
    assert items == synth_mc("A", 30, seed=1)
    assert all(len(it.choices) == 4 for it in items)
    golds = Counter(it.gold_index for it in items)
    assert len(golds) > 1


def test_synth_mc_fits_token_budget():
    items = synth_mc("A", 16, seed=2, max_tokens=128)
    sizes = [
        1 + len(fisher_prompt(it.question, it.choices).encode()) + max(len(c) for c in it.choices)
        for it in items
    ]
    assert max(sizes) == 128
    assert sizes.count(128) >= 4
    assert all(s <= 128 for s in sizes)


def test_fisher_prompts_cover_every_corpus_byte():
    # a byte missing here would get zero importance and stay free under any penalty
    items = synth_mc("A", 64, seed=15, max_tokens=128)
    seen = set()
    for it in items:
        seen |= set(fisher_prompt(it.question, it.choices).encode())
    for lang in ("A", "B"):
        used = set(b"".join(synth_corpus(lang, 200, 0).documents))
        assert used <= seen, lang


def test_mc_passages_keep_sentence_breaks():
    items = synth_mc("B", 20, seed=0)
    assert any("." in it.question for it in items)
    assert all("." not in c for it in items for c in it.choices)


def test_synth_mc_impossible_budget_rejected():
    with pytest.raises(ContractError, match="too small"):
        synth_mc("A", 2, seed=0, max_tokens=40)


def test_synth_qa_shapes():
    pairs = synth_qa("B", 5, seed=0)
    assert all(p.question.endswith("?") and p.answer.endswith(".") for p in pairs)
