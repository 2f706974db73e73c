import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylevar.data import (BOS_ID, EOS_ID, MASK, PAD_ID, UNK_ID, Corpus, SynthSpec, Vocab,
                           batch_encode, build_vocab, load_split, load_style_corpus,
                           read_mask_jsonl, synth_generate, write_synth)
from stylevar.errors import ValidationError


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_single_line_parse(tmp_path):
    a = _write(tmp_path / "train.0", "x\n")
    b = _write(tmp_path / "train.1", "good food\n")
    c = load_style_corpus([a, b])
    assert c.sentences[1] == ["good", "food"] and c.labels[1] == 1


def test_blank_lines_skipped(tmp_path):
    a = _write(tmp_path / "train.0", "one\n\n  \ntwo three\n")
    c = load_style_corpus([a])
    assert len(c) == 2


def test_concatenation_order(tmp_path):
    a = _write(tmp_path / "train.0", "a\nb\nc\n")
    b = _write(tmp_path / "train.1", "d\ne\nf\n")
    c = load_style_corpus([a, b])
    assert c.labels == [0, 0, 0, 1, 1, 1]


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_style_corpus([tmp_path / "nope"])
    empty = _write(tmp_path / "train.0", "\n\n")
    with pytest.raises(ValidationError):
        load_style_corpus([empty])
    bad = _write(tmp_path / "train.1", f"hello {MASK}\n")
    with pytest.raises(ValidationError):
        load_style_corpus([bad])


def test_corpus_invariants():
    with pytest.raises(ValidationError):
        Corpus([["a"]], [0, 1])
    with pytest.raises(ValidationError):
        Corpus([[]], [0])


def test_vocab_frequency_order():
    c = Corpus([["a", "a", "b"]], [0])
    v = build_vocab(c, 1)
    assert v.stoi["a"] == 5 and v.stoi["b"] == 6
    v2 = build_vocab(c, 2)
    assert "b" not in v2.stoi and v2.encode(["b"]) == [UNK_ID]


def test_vocab_tie_break():
    v = build_vocab(Corpus([["b", "a"]], [0]), 1)
    assert v.itos[5:] == ["a", "b"]


def test_vocab_roundtrip(tmp_path):
    v = build_vocab(Corpus([["x", "y", "y"]], [0]), 1)
    v.save(tmp_path / "vocab.json")
    assert Vocab.load(tmp_path / "vocab.json").itos == v.itos


def test_batch_encode_layout():
    v = build_vocab(Corpus([["hi"]], [0]), 1)
    ids, lengths, _ = batch_encode([["hi"]], v, 4)
    assert ids[0].tolist() == [BOS_ID, v.stoi["hi"], EOS_ID, PAD_ID]
    assert lengths[0] == 3


def test_batch_encode_truncation_and_unk():
    toks = [f"t{i}" for i in range(10)]
    v = build_vocab(Corpus([toks], [0]), 1)
    ids, lengths, _ = batch_encode([toks], v, 5)
    assert ids[0, 1:4].tolist() == v.encode(toks[:3])
    assert lengths[0] == 5
    ids, _, _ = batch_encode([["zzz"]], v, 4)
    assert ids[0, 1] == UNK_ID


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=6), min_size=1, max_size=5))
def test_encode_decode_roundtrip(sents):
    v = build_vocab(Corpus(sents, [0] * len(sents)), 1)
    for s in sents:
        assert v.decode(v.encode(s)) == s


def test_vocab_ids_stable():
    c = Corpus([["q", "r", "q"], ["s", "r"]], [0, 1])
    assert build_vocab(c, 1).itos == build_vocab(c, 1).itos


SMALL = dict(train_size=60, valid_size=10, test_size=10)


def test_synth_zero_rate():
    data = synth_generate(SynthSpec(marker_rate=0.0, **SMALL))
    assert all(sum(m) == 0 for ms in data.masks.values() for m in ms)


def test_synth_marker_disjointness():
    spec = SynthSpec(**SMALL)
    data = synth_generate(spec)
    markers = spec.markers()
    content = set(spec.content_tokens())
    for y, ms in enumerate(markers):
        assert not (set(ms) & content)
        for other in markers[y + 1:]:
            assert not (set(ms) & set(other))
    for corpus, masks in ((data.splits[k], data.masks[k]) for k in data.splits):
        for s, y, m in zip(corpus.sentences, corpus.labels, masks):
            for tok, bit in zip(s, m):
                is_marker = any(tok in ms for ms in markers)
                assert bit == int(is_marker)
                if is_marker:
                    assert tok in markers[y]


def test_synth_deterministic():
    a = synth_generate(SynthSpec(seed=3, **SMALL))
    b = synth_generate(SynthSpec(seed=3, **SMALL))
    c = synth_generate(SynthSpec(seed=4, **SMALL))
    assert a.splits["train"].sentences == b.splits["train"].sentences
    assert a.splits["train"].sentences != c.splits["train"].sentences


def test_synth_marker_rate_fraction():
    data = synth_generate(SynthSpec(marker_rate=0.7, train_size=2000, valid_size=10, test_size=10))
    frac = np.mean([sum(m) == 0 for m in data.masks["train"]])
    assert abs(frac - 0.3) < 0.04


def test_synth_write_and_reload(tmp_path):
    data = synth_generate(SynthSpec(**SMALL))
    write_synth(tmp_path, data)
    test = load_split(tmp_path, "test")
    assert test.sentences == data.splits["test"].sentences
    rows = read_mask_jsonl(tmp_path / "train.masks.jsonl")
    assert [r["mask"] for r in rows] == data.masks["train"]
    refs = (tmp_path / "reference.0").read_text().splitlines()
    assert len(refs) == test.labels.count(0)
