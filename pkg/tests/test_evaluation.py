import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylevar.data import SynthSpec, build_vocab, synth_generate
from stylevar.errors import NumericDomainError, ValidationError
from stylevar.evaluation import (MetricsReport, bleu, evaluate_run, gm_score, kn_perplexity, kn_train,
                                 safe_gm, style_accuracy, train_eval_classifier, write_comparison_csv)
from stylevar.reported import INCONSISTENT_ROWS, ROWS


# -- independent BLEU oracle (exact rational arithmetic, per-order dictionaries) --

def oracle_bleu(cands, refs_list, max_n=4):
    hits = {n: 0 for n in range(1, max_n + 1)}
    tots = {n: 0 for n in range(1, max_n + 1)}
    c_len = r_len = 0
    for cand, refs in zip(cands, refs_list):
        c_len += len(cand)
        best = None
        for r in refs:
            key = (abs(len(r) - len(cand)), len(r))
            best = key if best is None or key < best else best
        r_len += best[1]
        for n in hits:
            grams = {}
            for i in range(len(cand) - n + 1):
                g = " ".join(cand[i:i + n])
                grams[g] = grams.get(g, 0) + 1
            for g, k in grams.items():
                cap = 0
                for r in refs:
                    cap = max(cap, sum(1 for i in range(len(r) - n + 1) if " ".join(r[i:i + n]) == g))
                hits[n] += min(k, cap)
            tots[n] += max(0, len(cand) - n + 1)
    if hits[1] == 0:
        return 0.0
    precisions = [Fraction(hits[1], tots[1])] + [Fraction(hits[n] + 1, tots[n] + 1) for n in range(2, max_n + 1)]
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return 100 * bp * geo


def test_bleu_hand_case():
    got = bleu([["the", "the", "the"]], [["the", "cat"]])
    assert got == pytest.approx(oracle_bleu([["the", "the", "the"]], [[["the", "cat"]]]), abs=1e-3)
    # p1 = 1/3, p2 = 1/3, p3 = 1/2, p4 = 1/1, no brevity penalty
    assert got == pytest.approx(100 * (1 / 3 * 1 / 3 * 1 / 2) ** 0.25, abs=1e-9)
    assert got == pytest.approx(48.55, abs=0.01)


def test_bleu_identity_and_disjoint():
    s = "a b c d e f".split()
    assert bleu([s], [s]) == pytest.approx(100.0)
    assert bleu([s], ["u v w x y z".split()]) < 0.5
    with pytest.raises(ValidationError):
        bleu([], [])


words = st.lists(st.sampled_from(list("abcde")), min_size=1, max_size=9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(words, st.lists(words, min_size=1, max_size=3)), min_size=1, max_size=5))
def test_bleu_matches_oracle(pairs):
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    got = bleu(cands, refs)
    assert got == pytest.approx(oracle_bleu(cands, refs), abs=1e-9)
    assert 0.0 <= got <= 100.0 + 1e-9


@settings(max_examples=60, deadline=None)
@given(words, words, words)
def test_bleu_extra_reference_never_hurts_when_same_length(cand, ref, extra):
    # the brevity penalty can move with a new closest length; hold it fixed
    extra = (extra * 10)[:len(ref)]
    assert bleu([cand], [[ref, extra]]) >= bleu([cand], [[ref]]) - 1e-9


# -- Kneser-Ney --

def test_kn_normalises_on_random_contexts():
    data = synth_generate(SynthSpec(train_size=300, valid_size=10, test_size=10))
    lm = kn_train(data.splits["train"].sentences)
    rng = random.Random(0)
    for _ in range(20):
        ctx = tuple(rng.choice(lm.vocab + ["<s>", "never-seen"]) for _ in range(2))
        total = sum(lm.prob(w, ctx) for w in lm.vocab)
        assert total == pytest.approx(1.0, abs=1e-6)


def test_kn_uniform_text_perplexity_near_vocab_size():
    rng = np.random.default_rng(3)
    V = 40
    make = lambda n: [[f"w{i}" for i in rng.integers(0, V, size=400)] for _ in range(n)]
    lm = kn_train(make(50), order=1)
    ppl = kn_perplexity(lm, make(10))
    assert abs(ppl - V) / V < 0.05


def test_kn_repeated_token_near_one():
    # long sentences, so the one uncertain EOS per sentence barely moves the average
    lm = kn_train([["a"] * 50 for _ in range(50)])
    assert kn_perplexity(lm, [["a"] * 50]) <= 1.2


def test_kn_train_below_heldout():
    data = synth_generate(SynthSpec(train_size=500, valid_size=10, test_size=200))
    lm = kn_train(data.splits["train"].sentences)
    assert kn_perplexity(lm, data.splits["train"].sentences) < kn_perplexity(lm, data.splits["test"].sentences)
    # unseen tokens map to UNK and still get mass
    assert np.isfinite(kn_perplexity(lm, [["zzz", "qqq"]]))


# -- GM --

def test_gm_examples():
    assert gm_score(72.70, 25.90, 11.47, 45.36) == pytest.approx(8.67, abs=0.01)
    assert gm_score(78.90, 54.84, 24.47, 46.72) == pytest.approx(12.88, abs=0.01)
    assert gm_score(1, 1, 1, math.e) == pytest.approx(1.0)


@pytest.mark.parametrize("row", ROWS, ids=lambda r: f"{r[0]}-{r[1]}")
def test_gm_reported_rows(row):
    _, _, acc, bs, br, ppl, gm = row
    assert gm_score(acc, bs, br, ppl) == pytest.approx(gm, abs=0.02)


def test_rs_rows_do_not_follow_the_formula():
    for _, _, acc, bs, br, ppl, gm in INCONSISTENT_ROWS:
        assert abs(gm_score(acc, bs, br, ppl) - gm) > 0.4


@pytest.mark.parametrize("bad", [(0, 1, 1, 10), (1, -1, 1, 10), (1, 1, 0, 10), (1, 1, 1, 1.0), (1, 1, 1, 0.5)])
def test_gm_domain(bad):
    with pytest.raises(NumericDomainError):
        gm_score(*bad)
    assert safe_gm(*bad) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0.1, 100), st.floats(1.01, 1e4), st.floats(1.01, 4))
def test_gm_monotone(acc, bs, br, ppl, k):
    g = gm_score(acc, bs, br, ppl)
    assert gm_score(acc, bs, br, ppl * k) < g
    assert gm_score(min(acc * k, 1e3), bs, br, ppl) > g


# -- classifier and full report --

@pytest.fixture(scope="module")
def small_task():
    data = synth_generate(SynthSpec(train_size=400, valid_size=100, test_size=60))
    tr, va, te = (data.splits[k] for k in ("train", "valid", "test"))
    vocab = build_vocab(tr)
    clf = train_eval_classifier(tr, va, vocab, epochs=5, seed=0)
    lm = kn_train(tr.sentences)
    return data, vocab, clf, lm


def test_style_accuracy_contracts(small_task):
    data, _, clf, _ = small_task
    tr = data.splits["train"]
    assert style_accuracy(clf, tr.sentences, tr.labels) == pytest.approx(clf.train_acc)
    te = data.splits["test"]
    acc = style_accuracy(clf, te.sentences, te.labels)
    assert style_accuracy(clf, te.sentences, [1 - y for y in te.labels]) == pytest.approx(100 - acc)
    with pytest.raises(ValidationError):
        style_accuracy(clf, [], [])
    assert clf.valid_acc > 90


def test_identity_system_report(small_task, tmp_path):
    data, _, clf, lm = small_task
    te = data.splits["test"]
    refs = data.references
    rep = evaluate_run("copy", te.sentences, te, te.labels, refs, clf, lm)
    assert rep.bleu_s == pytest.approx(100.0)
    assert rep.acc == pytest.approx(style_accuracy(clf, te.sentences, te.labels))
    assert rep.gm == pytest.approx(gm_score(rep.acc, rep.bleu_s, rep.bleu_r, rep.ppl), abs=1e-6)
    weights = [v["count"] for v in rep.per_style.values()]
    accs = [v["acc"] for v in rep.per_style.values()]
    assert np.average(accs, weights=weights) == pytest.approx(rep.acc)
    again = evaluate_run("copy", te.sentences, te, te.labels, refs, clf, lm)
    assert again.to_json() == rep.to_json()
    assert MetricsReport.from_json(rep.to_json()) == rep
    with pytest.raises(ValidationError):
        evaluate_run("copy", te.sentences[:-1], te, te.labels, refs, clf, lm)
    path = tmp_path / "cmp.csv"
    write_comparison_csv(path, [rep, again])
    lines = path.read_text().splitlines()
    assert lines[0] == "system,ACC,BLEU_s,BLEU_r,PPL,GM" and len(lines) == 3
