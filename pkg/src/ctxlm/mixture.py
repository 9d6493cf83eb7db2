"""Static and dynamic linear interpolation of n-gram component LMs.

A dynamic mixture recomputes its weights at every user turn from a context
feature vector via a small feed-forward adapter; the adapter is trained
either to match per-turn EM weights (XENT) or directly on the mixture's
likelihood of the user tokens (PPL).
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from . import nn
from .corpus import TOPIC_LABELS, Conversation, Vocabulary
from .ngram import LOG_FLOOR, PROB_FLOOR, NGramModel, read_arpa
from .rng import substream
from .topic import TopicClassifier, derived_feature

log = logging.getLogger(__name__)

FEATURES = ("PREV_USER", "PREV_SYS", "CURR", "META", "TOPIC_DERIVED")
TEXT_FEATURES = ("PREV_USER", "PREV_SYS", "CURR")
TURN_BUCKETS = 4

FirstPass = Dict[Tuple[str, int], Sequence[str]]


class FeatureError(ValueError):
    pass


def turn_bucket(t: int) -> int:
    if t == 0:
        return 0
    if t <= 2:
        return 1
    if t <= 5:
        return 2
    return 3


def _check_weights(components, weights):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(components),):
        raise ValueError(f"{len(weights)} weights for {len(components)} components")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("mixture weights must lie on the simplex")
    return weights


def mixture_prob(components: Sequence[NGramModel], weights, word: str, history=()) -> float:
    """sum_k w_k p_k(word | history)."""
    weights = _check_weights(components, weights)
    return float(sum(w * m.prob(word, history) for w, m in zip(weights, components)))


def component_logprobs(components: Sequence[NGramModel], ids: Sequence[int]) -> np.ndarray:
    """(len(ids) + 1, K) matrix of ln p_k for each token and the end marker."""
    return np.array([m.token_logprobs(ids) for m in components]).T


def mixture_loglik(P, weights) -> float:
    """Log-likelihood of rows of linear component probs under ``weights``."""
    return float(np.sum(np.log(np.maximum(P @ weights, PROB_FLOOR))))


# -- EM ------------------------------------------------------------------------------

def em_weights(P, init, tol=1e-6, max_iters=100):
    """EM on an (N, K) matrix of component probabilities.

    Stops when the relative log-likelihood gain drops below ``tol``.
    Returns (weights, log-likelihood trace starting at ``init``).
    """
    lam = np.asarray(init, dtype=np.float64).copy()
    if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
        raise ValueError("EM init must lie on the simplex")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] == 0:
        raise ValueError("EM needs at least one token")
    trace = [mixture_loglik(P, lam)]
    for _ in range(max_iters):
        s = np.maximum(P @ lam, PROB_FLOOR)
        resp = P * lam / s[:, None]
        lam = resp.mean(axis=0)
        lam /= lam.sum()
        trace.append(mixture_loglik(P, lam))
        gain = trace[-1] - trace[-2]
        if gain < tol * abs(trace[-2]):
            break
    return lam, trace


def em_static_weights(components, sentences: Sequence[Sequence[str]], init=None, tol=1e-6,
                      max_iters=100, return_trace=False):
    if not sentences:
        raise ValueError("EM tuning corpus is empty")
    vocab = components[0].vocab
    P = np.exp(np.concatenate([component_logprobs(components, vocab.encode(s)) for s in sentences]))
    if init is None:
        init = np.full(len(components), 1.0 / len(components))
    lam, trace = em_weights(P, init, tol, max_iters)
    return (lam, trace) if return_trace else lam


def oracle_turn_weights(components, utterance: Sequence[str]):
    """Per-turn EM weights on the reference user tokens (uniform init)."""
    if not utterance:
        raise ValueError("oracle weights need a non-empty utterance")
    k = len(components)
    P = np.exp(component_logprobs(components, components[0].vocab.encode(utterance)))
    lam, _ = em_weights(P, np.full(k, 1.0 / k), tol=1e-8, max_iters=200)
    return lam


# -- features ------------------------------------------------------------------------

def canonical_descriptor(descriptor) -> Tuple[str, ...]:
    bad = [f for f in descriptor if f not in FEATURES]
    if bad:
        raise FeatureError(f"unknown feature(s) {bad}; choose from {FEATURES}")
    return tuple(f for f in FEATURES if f in set(descriptor))


class Featurizer:
    """Turns (conversation, turn) into the adapter's input blocks.

    Order: PREV_USER (previous user utterance), PREV_SYS (the system prompt
    right before the user turn), CURR (first-pass hypothesis, 2-pass only),
    META (bot one-hot + turn bucket one-hot), TOPIC_DERIVED (topic posterior
    of the prompt).
    """

    def __init__(self, descriptor, pass_mode=1, bots=(), topic_classifier: Optional[TopicClassifier] = None):
        self.descriptor = canonical_descriptor(descriptor)
        if pass_mode not in (1, 2):
            raise FeatureError("pass mode must be 1 or 2")
        if "CURR" in self.descriptor and pass_mode == 1:
            raise FeatureError("CURR features need the first-pass hypothesis (2-pass mode only)")
        self.pass_mode = pass_mode
        self.bots = list(bots)
        self.topic_classifier = topic_classifier
        self.text_blocks = [f for f in self.descriptor if f in TEXT_FEATURES]

    @property
    def dense_dim(self):
        d = 0
        if "META" in self.descriptor:
            d += len(self.bots) + TURN_BUCKETS
        if "TOPIC_DERIVED" in self.descriptor:
            d += len(TOPIC_LABELS)
        return d

    def input_dim(self, d_e):
        return d_e * len(self.text_blocks) + self.dense_dim

    def texts(self, conv: Conversation, t: int, curr=None) -> List[List[str]]:
        out = []
        for f in self.text_blocks:
            if f == "PREV_USER":
                out.append(list(conv.turns[t - 1].user_utterance) if t > 0 else [])
            elif f == "PREV_SYS":
                out.append(list(conv.turns[t].system_prompt))
            else:
                if curr is None:
                    raise FeatureError(f"{conv.id} turn {t}: CURR requested but no first-pass hypothesis given")
                out.append(list(curr))
        return out

    def dense(self, conv: Conversation, t: int) -> np.ndarray:
        parts = []
        if "META" in self.descriptor:
            bot = np.zeros(len(self.bots))
            b = conv.turns[t].bot_id
            if b in self.bots:
                bot[self.bots.index(b)] = 1.0
            bucket = np.zeros(TURN_BUCKETS)
            bucket[turn_bucket(t)] = 1.0
            parts += [bot, bucket]
        if "TOPIC_DERIVED" in self.descriptor:
            parts.append(derived_feature(self.topic_classifier, conv, t))
        return np.concatenate(parts) if parts else np.zeros(0)

    def to_json(self):
        return {"descriptor": list(self.descriptor), "pass": self.pass_mode, "bots": self.bots}


def mean_embedding(tokens, vocab: Vocabulary, E):
    if not tokens:
        return np.zeros(E.shape[1])
    return E[vocab.encode(tokens)].mean(axis=0)


def featurize(conv: Conversation, t: int, featurizer: Featurizer, embeddings, vocab: Vocabulary,
              curr=None) -> np.ndarray:
    """Dense context feature vector; absent text context is a zero block."""
    blocks = [mean_embedding(toks, vocab, embeddings) for toks in featurizer.texts(conv, t, curr)]
    blocks.append(featurizer.dense(conv, t))
    return np.concatenate(blocks)


# -- adapter -------------------------------------------------------------------------

class WeightAdapter:
    """Embeddings -> [mean blocks | dense] -> affine -> tanh -> affine -> softmax."""

    def __init__(self, vocab: Vocabulary, featurizer: Featurizer, n_components: int,
                 d_e=16, d_h=32, seed=0):
        self.vocab = vocab
        self.featurizer = featurizer
        self.k = n_components
        self.d_e, self.d_h = d_e, d_h
        self.store = nn.ParamStore(seed)
        self.store.add("E", (len(vocab), d_e))
        self.store.add("W1", (d_h, featurizer.input_dim(d_e)))
        self.store.add("b1", (d_h,), "zeros")
        self.store.add("W2", (n_components, d_h))
        self.store.add("b2", (n_components,), "zeros")

    @property
    def input_dim(self):
        return self.featurizer.input_dim(self.d_e)

    def forward_features(self, x):
        """Logits from ready-made feature rows."""
        p = self.store
        a1, c1 = nn.affine_forward(p["W1"], p["b1"], x)
        h, ch = nn.nonlinear_forward("tanh", a1)
        logits, c2 = nn.affine_forward(p["W2"], p["b2"], h)
        return logits, (c1, ch, c2)

    def forward(self, bags, dense):
        E = self.store["E"]
        blocks = [np.asarray(A @ E) for A in bags] + [dense]
        x = np.concatenate(blocks, axis=1)
        logits, cache = self.forward_features(x)
        return logits, (bags, cache)

    def backward(self, cache, dlogits):
        bags, (c1, ch, c2) = cache
        g = self.store.grads
        dW2, db2, dh = nn.affine_backward(c2, dlogits)
        dW1, db1, dx = nn.affine_backward(c1, nn.nonlinear_backward(ch, dh))
        g["W2"] += dW2
        g["b2"] += db2
        g["W1"] += dW1
        g["b1"] += db1
        d_e = self.d_e
        for j, A in enumerate(bags):
            g["E"] += np.asarray(A.T @ dx[:, j * d_e:(j + 1) * d_e])

    def weights_for(self, conv: Conversation, t: int, curr=None) -> np.ndarray:
        x = featurize(conv, t, self.featurizer, self.store["E"], self.vocab, curr)
        return adapter_forward(self, x)


def adapter_forward(adapter: WeightAdapter, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (adapter.input_dim,):
        raise nn.ShapeError(f"adapter expects {adapter.input_dim} features, got {x.shape}")
    logits, _ = adapter.forward_features(x[None, :])
    return nn.softmax(logits)[0]


def save_adapter(adapter: WeightAdapter, path):
    adapter.store.save(path, meta={"featurizer": adapter.featurizer.to_json(), "k": adapter.k,
                                   "d_e": adapter.d_e, "d_h": adapter.d_h,
                                   "vocab": adapter.vocab.to_list()})


def load_adapter(path, topic_classifier=None) -> WeightAdapter:
    header, arrays = nn.load_checkpoint(path)
    m = header["meta"]
    fz = Featurizer(m["featurizer"]["descriptor"], m["featurizer"]["pass"], m["featurizer"]["bots"],
                    topic_classifier)
    ad = WeightAdapter(Vocabulary.from_list(m["vocab"]), fz, m["k"], m["d_e"], m["d_h"], header["seed"])
    ad.store.load_state(arrays)
    return ad


# -- mixture model -------------------------------------------------------------------

class MixtureLM:
    def __init__(self, components: Sequence[NGramModel], names=None, weights=None,
                 adapter: Optional[WeightAdapter] = None):
        if len(components) < 2:
            raise ValueError("a mixture needs at least two components")
        v0, n0 = components[0].vocab, components[0].order
        for m in components[1:]:
            if m.vocab != v0 or m.order != n0:
                raise ValueError("mixture components must share vocabulary and order")
        if (weights is None) == (adapter is None):
            raise ValueError("give exactly one of static weights or an adapter")
        self.components = list(components)
        self.names = list(names or [f"c{i}" for i in range(len(components))])
        self.weights = None if weights is None else _check_weights(components, weights)
        self.adapter = adapter
        if adapter is not None and adapter.k != len(components):
            raise ValueError("adapter output size differs from the component count")

    @property
    def vocab(self):
        return self.components[0].vocab

    @property
    def mode(self):
        return "static" if self.adapter is None else "dynamic"

    @property
    def pass_mode(self):
        return 1 if self.adapter is None else self.adapter.featurizer.pass_mode

    def turn_weights(self, conv: Conversation, t: int, curr=None) -> np.ndarray:
        if self.adapter is None:
            return self.weights
        return self.adapter.weights_for(conv, t, curr)

    def prob(self, word, history, weights) -> float:
        return mixture_prob(self.components, weights, word, history)

    def sentence_logprob(self, tokens, weights) -> float:
        P = np.exp(component_logprobs(self.components, self.vocab.encode(tokens)))
        return mixture_loglik(P, weights)


def _curr_for(first_pass, conv, t, featurizer):
    if featurizer is None or "CURR" not in featurizer.descriptor:
        return None
    if first_pass is None or (conv.id, t) not in first_pass:
        raise FeatureError(f"{conv.id} turn {t}: 2-pass evaluation needs a first-pass hypothesis")
    return first_pass[(conv.id, t)]


def turn_perplexity(mixture: MixtureLM, corpus: Sequence[Conversation],
                    first_pass: Optional[FirstPass] = None) -> float:
    """Perplexity over user tokens (plus end markers), weights per turn."""
    total, n = 0.0, 0
    fz = mixture.adapter.featurizer if mixture.adapter is not None else None
    for conv in corpus:
        for t, turn in enumerate(conv.turns):
            w = mixture.turn_weights(conv, t, _curr_for(first_pass, conv, t, fz))
            total += mixture.sentence_logprob(turn.user_utterance, w)
            n += len(turn.user_utterance) + 1
    if n == 0:
        raise ValueError("perplexity of an empty corpus is undefined")
    return math.exp(-total / n)


def save_mixture(path, mixture: MixtureLM, component_paths: Dict[str, str], adapter_path=None,
                 topic_path=None):
    """JSON manifest; paths are stored relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    rel = lambda p: os.path.relpath(os.path.abspath(p), base)
    # a list, since adapter outputs follow component order
    doc = {"components": [[n, rel(component_paths[n])] for n in mixture.names], "mode": mixture.mode}
    if mixture.mode == "static":
        doc["weights"] = [float(w) for w in mixture.weights]
    else:
        doc["adapter"] = rel(adapter_path)
        doc["descriptor"] = list(mixture.adapter.featurizer.descriptor)
        doc["pass"] = mixture.adapter.featurizer.pass_mode
        if topic_path:
            doc["topic_classifier"] = rel(topic_path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_mixture(path, vocab: Optional[Vocabulary] = None) -> MixtureLM:
    from .topic import load_classifier

    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    names = [n for n, _ in doc["components"]]
    comps = []
    for _, rel_path in doc["components"]:
        m = read_arpa(os.path.join(base, rel_path), vocab)
        vocab = vocab or m.vocab
        comps.append(m)
    if doc["mode"] == "static":
        return MixtureLM(comps, names, weights=doc["weights"])
    clf = load_classifier(os.path.join(base, doc["topic_classifier"])) if doc.get("topic_classifier") else None
    adapter = load_adapter(os.path.join(base, doc["adapter"]), clf)
    return MixtureLM(comps, names, adapter=adapter)


# -- adapter training ---------------------------------------------------------------

@dataclass
class TurnSet:
    """Per-turn tensors for adapter training and evaluation."""
    keys: List[Tuple[str, int]]
    P: np.ndarray          # (N, Lmax, K) linear component probabilities
    mask: np.ndarray       # (N, Lmax)
    bags: List[sp.csr_matrix]
    dense: np.ndarray
    targets: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.keys)

    def subset(self, idx):
        return TurnSet([self.keys[i] for i in idx], self.P[idx], self.mask[idx],
                       [A[idx] for A in self.bags], self.dense[idx],
                       None if self.targets is None else self.targets[idx])


def _bags_sparse(token_lists, vocab):
    rows, cols, vals = [], [], []
    for r, toks in enumerate(token_lists):
        if toks:
            ids = vocab.encode(toks)
            for i in ids:
                rows.append(r)
                cols.append(i)
                vals.append(1.0 / len(ids))
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(token_lists), len(vocab)))
    A.sum_duplicates()
    return A


def build_turnset(components, corpus: Sequence[Conversation], featurizer: Featurizer,
                  first_pass: Optional[FirstPass] = None, with_targets=False) -> TurnSet:
    vocab = components[0].vocab
    keys, mats, texts, dense, targets = [], [], [], [], []
    for conv in corpus:
        for t, turn in enumerate(conv.turns):
            keys.append((conv.id, t))
            mats.append(np.exp(component_logprobs(components, vocab.encode(turn.user_utterance))))
            texts.append(featurizer.texts(conv, t, _curr_for(first_pass, conv, t, featurizer)))
            dense.append(featurizer.dense(conv, t))
            if with_targets:
                # same EM settings as oracle_turn_weights, reusing the matrix
                if turn.user_utterance:
                    k = len(components)
                    targets.append(em_weights(mats[-1], np.full(k, 1.0 / k), 1e-8, 200)[0])
                else:
                    targets.append(None)
    n, k = len(keys), len(components)
    lmax = max((m.shape[0] for m in mats), default=1)
    P = np.ones((n, lmax, k))
    mask = np.zeros((n, lmax))
    for i, m in enumerate(mats):
        P[i, :len(m)] = m
        mask[i, :len(m)] = 1.0
    bags = [_bags_sparse([tx[j] for tx in texts], vocab) for j in range(len(featurizer.text_blocks))]
    dense_arr = np.array(dense) if dense and dense[0].size else np.zeros((n, 0))
    ts = TurnSet(keys, P, mask, bags, dense_arr)
    if with_targets:
        keep = [i for i, tg in enumerate(targets) if tg is not None]
        ts = ts.subset(keep)
        ts.targets = np.array([targets[i] for i in keep]).reshape(len(keep), k)
    return ts


def adapter_loss(adapter: WeightAdapter, batch: TurnSet, loss="PPL"):
    """Summed loss over the batch; accumulates gradients into the adapter.

    PPL: -sum over turns and tokens of log sum_k w_k(context) p_k, with the
    component probabilities held constant. XENT: cross-entropy between the
    adapter's weights and the per-turn oracle weights.
    """
    logits, cache = adapter.forward(batch.bags, batch.dense)
    if loss == "XENT":
        value, dlogits = nn.softmax_xent(logits, batch.targets)
    elif loss == "PPL":
        lam = nn.softmax(logits)
        s = np.maximum(np.einsum("nlk,nk->nl", batch.P, lam), PROB_FLOOR)
        value = -float(np.sum(batch.mask * np.log(s)))
        dlam = -np.einsum("nlk,nl->nk", batch.P, batch.mask / s)
        dlogits = lam * (dlam - np.sum(lam * dlam, axis=1, keepdims=True))
    else:
        raise ValueError(f"unknown adapter loss {loss!r}")
    adapter.backward(cache, dlogits)
    return value


def turnset_perplexity(adapter: WeightAdapter, ts: TurnSet) -> float:
    logits, _ = adapter.forward(ts.bags, ts.dense)
    lam = nn.softmax(logits)
    s = np.maximum(np.einsum("nlk,nk->nl", ts.P, lam), PROB_FLOOR)
    return math.exp(-float(np.sum(ts.mask * np.log(s))) / float(ts.mask.sum()))


def train_adapter(adapter: WeightAdapter, components, train: Sequence[Conversation],
                  dev: Sequence[Conversation], loss="PPL", lr=0.01, epochs=30, batch_size=32,
                  patience=3, seed=0, first_pass: Optional[FirstPass] = None, train_set=None,
                  dev_set=None):
    """Adam on minibatches of turns; early stopping on dev perplexity.

    Returns (adapter, history). The earliest epoch reaching the best dev
    perplexity is kept.
    """
    fz = adapter.featurizer
    tr = train_set or build_turnset(components, train, fz, first_pass, with_targets=(loss == "XENT"))
    dv = dev_set or build_turnset(components, dev, fz, first_pass)
    opt = nn.Adam(lr=lr)
    order = substream(seed, "adapter-order")
    history = {"train_loss": [], "dev_perplexity": []}
    best, best_state, since = turnset_perplexity(adapter, dv), adapter.store.state(), 0
    history["initial_dev_perplexity"] = best
    n = len(tr)
    for epoch in range(epochs):
        perm = order.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            batch = tr.subset(perm[s:s + batch_size])
            adapter.store.zero_grad()
            value = adapter_loss(adapter, batch, loss)
            if not math.isfinite(value):
                raise nn.TrainingError(
                    f"adapter ({loss}) loss became {value} at epoch {epoch}, batch {s // batch_size}; "
                    f"grad norm {adapter.store.grad_norm():.3g}")
            denom = float(batch.mask.sum()) if loss == "PPL" else len(batch)
            for g in adapter.store.grads.values():
                g /= denom
            opt.step(adapter.store)
            total += value
        ppl = turnset_perplexity(adapter, dv)
        history["train_loss"].append(total / max(n, 1))
        history["dev_perplexity"].append(ppl)
        log.debug("adapter %s epoch %d dev ppl %.4f", loss, epoch, ppl)
        if ppl < best:
            best, best_state, since = ppl, adapter.store.state(), 0
        else:
            since += 1
            if since >= patience:
                break
    adapter.store.load_state(best_state)
    history["best_dev_perplexity"] = best
    return adapter, history
