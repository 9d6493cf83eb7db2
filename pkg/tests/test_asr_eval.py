import itertools
import math

import numpy as np
import pytest

from ctxlm.asr_eval import (INS, MATCH, SUB, NBestList, NoiseModel, NoLM, OracleScorer, Scorer,
                            _lattice, align, alignment_cost, corrupt, eer, entity_errors,
                            error_counts, items_for, kbest, load_nbest_jsonl, noise_from_corpus,
                            rescore, run_eval, save_nbest_jsonl, simulate_corpus, simulate_nbest,
                            wer)
from ctxlm.mixture import FeatureError
from ctxlm.rng import substream

import oracles


def replay(ops, ref, hyp):
    """Rebuild the hypothesis from the reference and an alignment."""
    out = []
    for op, ri, hi in ops:
        if op == MATCH:
            assert ref[ri] == hyp[hi]
            out.append(ref[ri])
        elif op in (SUB, INS):
            out.append(hyp[hi])
    return tuple(out)


def test_alignment_cost_matches_edit_distance_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = tuple(rng.choice(list("abcd"), size=rng.integers(0, 8)))
        b = tuple(rng.choice(list("abcd"), size=rng.integers(0, 8)))
        ops = align(a, b)
        assert alignment_cost(ops) == oracles.edit_distance(a, b)
        assert replay(ops, a, b) == b
        assert [ri for _, ri, _ in ops if ri is not None] == list(range(len(a)))


def test_trie_oracle_agrees_with_recursive_oracle():
    strings = oracles.all_strings("ab", 4)
    for ref in strings[::3]:
        d = oracles.distances_to_all(ref, "ab", 4)
        for hyp in strings:
            assert d[hyp] == oracles.edit_distance(ref, hyp)


def test_wer_counts_all_error_types():
    ref = ("the", "cat", "sat", "down")
    hyp = ("a", "cat", "sat", "down", "now")
    ops = align(ref, hyp)
    assert error_counts(ops) == (1, 0, 1)
    assert wer(ops, len(ref)) == pytest.approx(0.5)
    assert wer(align(ref, ()), 4) == 1.0
    assert wer(align(("a",), ("b", "c", "d")), 1) == 3.0
    with pytest.raises(ValueError):
        wer([], 0)


def test_eer_ignores_insertions_and_untagged_errors():
    ref = ("play", "taylor", "swift", "now")
    tags = (None, "Music", "Music", None)
    # an inserted word next to the entity and an error on an untagged word
    ops = align(ref, ("please", "play", "taylor", "swift", "then"))
    assert eer(ops, tags) == 0.0
    ops = align(ref, ("play", "tailor", "now"))
    assert entity_errors(ops, tags) == (2, 2)
    assert eer(ops, tags, "Music") == 1.0
    assert eer(ops, tags, "Sports") is None
    assert eer(ops, None) is None
    mixed = ("a", "b")
    assert eer(align(mixed, ("a", "x")), ("Sports", "Music"), "Sports") == 0.0
    assert eer(align(mixed, ("a", "x")), ("Sports", "Music")) == 0.5


def test_noise_model_validation_and_reverse_index():
    with pytest.raises(ValueError):
        NoiseModel(p_sub=1.0)
    with pytest.raises(ValueError):
        NoiseModel(p_sub=0.6, p_del=0.5)
    nm = NoiseModel(0.2, 0.1, 0.1, {"a": [("b", 0.7), ("c", 0.3)], "c": [("b", 1.0)]}, ["a", "b", "c"])
    assert sorted(nm.reverse("b")) == [("a", 0.7), ("c", 1.0)]
    assert NoiseModel.from_json(nm.to_json()).to_json() == nm.to_json()


def test_corrupt_without_noise_is_identity():
    nm = NoiseModel(0.0, 0.0, 0.0, {}, ["x"])
    obs, ev = corrupt(("a", "b"), nm, np.random.default_rng(0))
    assert obs == ("a", "b") and ev["tokens"] == 2 and ev["gaps"] == 3


def test_corrupt_event_rates_follow_the_channel():
    nm = NoiseModel(0.3, 0.1, 0.1, {"a": [("b", 1.0)]}, ["z"])
    rng = np.random.default_rng(1)
    tot = {"delete": 0, "substitute": 0, "gaps_with_insert": 0, "tokens": 0, "gaps": 0}
    for _ in range(3000):
        _, ev = corrupt(("a", "a", "a"), nm, rng)
        for k in tot:
            tot[k] += ev.get(k, 0)
    assert tot["delete"] / tot["tokens"] == pytest.approx(0.1, abs=0.01)
    assert tot["substitute"] / tot["tokens"] == pytest.approx(0.3, abs=0.015)
    assert tot["gaps_with_insert"] / tot["gaps"] == pytest.approx(0.1, abs=0.01)


def brute_kbest(lattice, base, n):
    best = {}
    for choice in itertools.product(*[range(len(o)) for o in lattice]):
        seq = tuple(lattice[j][c][0] for j, c in enumerate(choice) if lattice[j][c][0] is not None)
        score = base + sum(lattice[j][c][1] for j, c in enumerate(choice))
        best[seq] = max(best.get(seq, -math.inf), score)
    return sorted(best.items(), key=lambda kv: -kv[1])[:n]


def test_kbest_matches_exhaustive_enumeration():
    conf = {"a": [("b", 0.5), ("c", 0.5)], "b": [("a", 0.6), ("c", 0.4)], "c": [("a", 1.0)]}
    nm = NoiseModel(0.3, 0.05, 0.05, conf, ["a", "b", "c"])
    rng = substream(3, "kbest-test")
    for _ in range(30):
        obs = tuple(rng.choice(["a", "b", "c"], size=int(rng.integers(1, 6))))
        lattice, base = _lattice(obs, nm)
        got = kbest(lattice, base, 10, max_pops=100000)
        want = brute_kbest(lattice, base, 10)
        assert [s for _, s in got] == pytest.approx([s for _, s in want], abs=1e-12)
        assert len({h for h, _ in got}) == len(got)


def test_simulated_nbest_is_deterministic_and_sorted(tiny_corpus, tmp_path):
    nm = noise_from_corpus(tiny_corpus, seed=0)
    a = simulate_corpus(tiny_corpus, nm, n=8, seed=4)
    b = simulate_corpus(tiny_corpus, nm, n=8, seed=4)
    assert [x.to_json() for x in a] == [x.to_json() for x in b]
    for nb in a:
        scores = [s for _, s in nb.hypotheses]
        assert scores == sorted(scores, reverse=True)
        assert nb.first_pass == 0
        assert 1 <= len(nb.hypotheses) <= 8
    save_nbest_jsonl(a, tmp_path / "n.jsonl")
    back = load_nbest_jsonl(tmp_path / "n.jsonl")
    assert [x.to_json() for x in back] == [x.to_json() for x in a]
    with pytest.raises(ValueError):
        simulate_nbest(("a",), nm, 0)


def test_confusions_stay_in_vocabulary_and_entities_confuse_entities(tiny_corpus):
    nm = noise_from_corpus(tiny_corpus, seed=1, same_topic=0.4, cross_topic=0.5)
    words = set(nm.insert_words)
    for w, outs in nm.confusion.items():
        assert all(x in words and x != w for x, _ in outs)
        assert sum(q for _, q in outs) == pytest.approx(1.0)
    # "football" is a Sports entity; the cross-topic share goes to movie entities
    outs = dict(nm.confusion["football"])
    assert sum(q for x, q in outs.items() if x in ("matrix", "keanu", "reeves")) == pytest.approx(0.5)


def make_nbest(ref, hyps, tags=None, key=("c", 0)):
    return NBestList(tuple(ref), tags, [(tuple(h), s) for h, s in hyps], (), {}, key)


class FixedScorer(Scorer):
    def __init__(self, table, name="fixed", pass_mode=1):
        self.table, self.name, self.pass_mode = table, name, pass_mode

    def hyp_logprobs(self, nbest, conv, t):
        return np.array([self.table.get(h, -10.0) for h, _ in nbest.hypotheses])


def test_rescore_combines_scores():
    nb = make_nbest(["a", "b"], [(["a", "c"], -1.0), (["a", "b"], -1.5)])
    lm = FixedScorer({("a", "b"): -1.0, ("a", "c"): -2.0})
    assert rescore(nb, lm, None, 0, 0.0) == 0
    assert rescore(nb, lm, None, 0, 1.0) == 1
    assert rescore(nb, OracleScorer(), None, 0, 1.0) == 1
    with pytest.raises(ValueError):
        rescore(nb, lm, None, 0, -0.1)
    with pytest.raises(FeatureError):
        rescore(nb, FixedScorer({}, pass_mode=2), None, 0, 1.0, pass_mode=1)


def test_run_eval_picks_scale_on_dev_and_reports_rates(tiny_corpus):
    conv = tiny_corpus[1]
    dev = [(conv, 0, make_nbest(["i", "watch", "football"],
                                [(["i", "watch", "the"], -1.0), (["i", "watch", "football"], -1.2)],
                                (None, None, "Sports"), ("c2", 0)))]
    test = [(conv, 1, make_nbest(["the", "lakers"],
                                 [(["the", "makers", "now"], -1.0), (["the", "lakers"], -1.1)],
                                 (None, "Sports"), ("c2", 1)))]
    lm = FixedScorer({("i", "watch", "football"): -1.0, ("the", "lakers"): -1.0}, "lm")
    reports = {r.name: r for r in run_eval(dev, test, [NoLM(), lm, OracleScorer()], grid=[0.0, 0.5, 1.0, 2.0])}
    none, fixed, oracle = reports["none"], reports["lm"], reports["oracle"]
    assert none.lm_scale == 0.0 and none.wer == pytest.approx(1.0) and none.eer == 1.0
    # scale 0.5 already flips the dev decision; larger scales tie and the smaller one wins
    assert fixed.lm_scale == 0.5
    assert fixed.wer == 0.0 and fixed.eer == 0.0 and fixed.eer_per_topic == {"Sports": 0.0}
    assert oracle.wer == 0.0
    assert fixed.relative["wer"] == pytest.approx(-100.0)
    with pytest.raises(ValueError):
        run_eval(dev, test, [NoLM()], grid=[])


def test_items_for_pairs_turns_with_lists(tiny_corpus):
    nm = noise_from_corpus(tiny_corpus)
    nbs = simulate_corpus(tiny_corpus, nm, n=3)
    items = items_for(tiny_corpus, list(reversed(nbs)))
    assert [(c.id, t) for c, t, _ in items] == [nb.key for nb in nbs]
    assert all(nb.reference == c.turns[t].user_utterance for c, t, nb in items)
