import itertools

import numpy as np
import pytest

from ctxlm import nn
from ctxlm.corpus import EOS, SOS, Vocabulary, build_vocab, user_sentences
from ctxlm.mixture import (FeatureError, Featurizer, MixtureLM, WeightAdapter, adapter_forward,
                           adapter_loss, build_turnset, canonical_descriptor, em_static_weights,
                           em_weights, featurize, load_mixture, mixture_prob, oracle_turn_weights,
                           save_adapter, save_mixture, train_adapter, turn_bucket, turn_perplexity,
                           turnset_perplexity)
from ctxlm.ngram import train_ngram, write_arpa

import oracles


@pytest.fixture(scope="module")
def topic_models(small_parts):
    train = small_parts[0]
    vocab = build_vocab(train)
    topics = sorted({t.topic for c in train for t in c.turns})
    comps = [train_ngram([t.user_utterance for c in train for t in c.turns if t.topic == z], vocab, 2)
             for z in topics]
    return vocab, topics, comps


def toy_components():
    v = Vocabulary(["a", "b", "c"])
    return [train_ngram(s, v, 2, "additive", alpha=0.5) for s in
            ([("a", "a", "b")], [("b", "c")], [("c", "c", "a"), ("a",)])]


def test_mixture_distribution_sums_to_one_for_any_weights():
    comps = toy_components()
    v = comps[0].vocab
    pred = [w for w in v.itos if w != SOS]
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = rng.dirichlet(np.ones(3))
        for h in [()] + [(x,) for x in v.itos if x != EOS] + list(itertools.product(["a", "b"], repeat=2)):
            assert sum(mixture_prob(comps, w, x, h) for x in pred) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        mixture_prob(comps, [0.5, 0.6, -0.1], "a")
    with pytest.raises(ValueError):
        mixture_prob(comps, [0.5, 0.5], "a")


def test_em_log_likelihood_never_decreases():
    rng = np.random.default_rng(1)
    for trial in range(20):
        P = rng.uniform(1e-4, 1.0, size=(50, 4)) ** 3
        _, trace = em_weights(P, rng.dirichlet(np.ones(4)), tol=1e-14, max_iters=300)
        assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:])), trial


def test_em_matches_grid_search_on_three_components():
    rng = np.random.default_rng(2)
    true = np.array([0.6, 0.3, 0.1])
    P = rng.uniform(0.01, 1.0, size=(400, 3))
    # make each row favour the component that "generated" it
    src = rng.choice(3, size=400, p=true)
    P[np.arange(400), src] *= 5
    lam, _ = em_weights(P, np.full(3, 1 / 3), tol=1e-12, max_iters=2000)
    grid, _ = oracles.grid_search_weights(P, 0.01)
    assert np.max(np.abs(lam - grid)) <= 0.02


def test_em_rejects_bad_inputs():
    P = np.ones((3, 2))
    with pytest.raises(ValueError):
        em_weights(P, [0.7, 0.7])
    with pytest.raises(ValueError):
        em_weights(P, [0.5, 0.5], tol=0)
    with pytest.raises(ValueError):
        em_weights(np.ones((0, 2)), [0.5, 0.5])


def test_static_em_prefers_the_matching_component(topic_models, small_parts):
    vocab, topics, comps = topic_models
    dev = small_parts[1]
    z = topics[0]
    sents = [t.user_utterance for c in dev for t in c.turns if t.topic == z]
    lam = em_static_weights(comps, sents)
    assert np.argmax(lam) == 0 and lam.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        em_static_weights(comps, [])


def test_oracle_turn_weights_pick_generating_component():
    comps = toy_components()
    lam = oracle_turn_weights(comps, ["b", "c"])
    assert np.argmax(lam) == 1
    with pytest.raises(ValueError):
        oracle_turn_weights(comps, [])


def test_turn_bucket_boundaries():
    assert [turn_bucket(t) for t in range(8)] == [0, 1, 1, 2, 2, 2, 3, 3]


def test_featurizer_blocks(tiny_corpus):
    conv = tiny_corpus[0]
    fz = Featurizer(["META", "PREV_SYS", "PREV_USER", "CURR"], 2, ["b1", "b2"])
    assert fz.descriptor == ("PREV_USER", "PREV_SYS", "CURR", "META")
    assert fz.texts(conv, 1, ["x"]) == [["i", "like", "the", "matrix"],
                                        ["who", "is", "your", "favorite", "actor"], ["x"]]
    assert fz.texts(conv, 0, [])[0] == []
    assert np.array_equal(fz.dense(conv, 1), [0, 1, 0, 1, 0, 0])
    assert fz.input_dim(4) == 3 * 4 + 6
    with pytest.raises(FeatureError):
        fz.texts(conv, 1)
    with pytest.raises(FeatureError):
        Featurizer(["CURR"], 1)
    with pytest.raises(FeatureError):
        canonical_descriptor(["PREV_SYS", "NEXT_USER"])


def test_featurize_uses_mean_embeddings(tiny_corpus):
    conv = tiny_corpus[0]
    vocab = build_vocab(tiny_corpus)
    fz = Featurizer(["PREV_SYS"], 1)
    E = np.random.default_rng(0).normal(size=(len(vocab), 3))
    x = featurize(conv, 0, fz, E, vocab)
    assert np.allclose(x, E[vocab.encode(["do", "you", "like", "movies"])].mean(axis=0))


def test_dynamic_mixture_normalizes_and_turnset_matches(tiny_corpus):
    vocab = build_vocab(tiny_corpus)
    sents = user_sentences(tiny_corpus)
    comps = [train_ngram(sents[:2], vocab, 2), train_ngram(sents[2:], vocab, 2)]
    fz = Featurizer(["PREV_SYS", "META"], 1, ["b1", "b2"])
    ad = WeightAdapter(vocab, fz, 2, d_e=4, d_h=5, seed=0)
    mix = MixtureLM(comps, ["m", "s"], adapter=ad)
    w = mix.turn_weights(tiny_corpus[0], 1)
    assert w.sum() == pytest.approx(1.0) and np.all(w > 0)
    pred = [x for x in vocab.itos if x != SOS]
    assert sum(mix.prob(x, ["like"], w) for x in pred) == pytest.approx(1.0, abs=1e-9)
    ts = build_turnset(comps, tiny_corpus, fz)
    assert turnset_perplexity(ad, ts) == pytest.approx(turn_perplexity(mix, tiny_corpus), rel=1e-10)
    with pytest.raises(nn.ShapeError):
        adapter_forward(ad, np.zeros(3))


@pytest.mark.parametrize("loss", ["PPL", "XENT"])
def test_adapter_gradients(tiny_corpus, loss):
    vocab = build_vocab(tiny_corpus)
    sents = user_sentences(tiny_corpus)
    comps = [train_ngram(sents[:2], vocab, 2), train_ngram(sents[2:], vocab, 2)]
    fz = Featurizer(["PREV_USER", "PREV_SYS", "META"], 1, ["b1", "b2"])
    ad = WeightAdapter(vocab, fz, 2, d_e=3, d_h=4, seed=1)
    ts = build_turnset(comps, tiny_corpus, fz, with_targets=(loss == "XENT"))

    def f():
        ad.store.zero_grad()
        return adapter_loss(ad, ts, loss)
    assert nn.grad_check(f, ad.store) < 1e-4


def test_mixture_requires_consistent_setup():
    comps = toy_components()
    with pytest.raises(ValueError):
        MixtureLM(comps[:1], weights=[1.0])
    with pytest.raises(ValueError):
        MixtureLM(comps)
    other = train_ngram([("a",)], Vocabulary(["a"]), 2)
    with pytest.raises(ValueError):
        MixtureLM([comps[0], other], weights=[0.5, 0.5])


def test_adapter_training_beats_initialization_and_round_trips(tmp_path, topic_models, small_parts):
    vocab, topics, comps = topic_models
    train, dev, _ = small_parts
    bots = sorted({t.bot_id for c in train for t in c.turns})
    fz = Featurizer(["PREV_SYS", "META"], 1, bots)
    ad = WeightAdapter(vocab, fz, len(comps), seed=0)
    ad, hist = train_adapter(ad, comps, train, dev, "PPL", epochs=5)
    assert hist["best_dev_perplexity"] < hist["initial_dev_perplexity"]
    mix = MixtureLM(comps, topics, adapter=ad)
    ppl = turn_perplexity(mix, dev)
    assert ppl == pytest.approx(hist["best_dev_perplexity"], rel=1e-10)

    paths = {}
    for name, m in zip(topics, comps):
        paths[name] = tmp_path / "c" / f"{name}.arpa"
        paths[name].parent.mkdir(exist_ok=True)
        write_arpa(m, paths[name])
    save_adapter(ad, tmp_path / "a.npz")
    save_mixture(tmp_path / "m" / "dyn.json", mix, paths, tmp_path / "a.npz")
    back = load_mixture(tmp_path / "m" / "dyn.json", vocab)
    assert back.names == topics
    assert abs(turn_perplexity(back, dev) - ppl) < 1e-9

    static = MixtureLM(comps, topics, weights=em_static_weights(comps, user_sentences(dev)))
    save_mixture(tmp_path / "static.json", static, paths)
    back = load_mixture(tmp_path / "static.json")
    assert abs(turn_perplexity(back, dev) - turn_perplexity(static, dev)) < 1e-9
