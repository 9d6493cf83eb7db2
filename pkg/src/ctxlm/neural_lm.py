"""LSTM language model over user utterances with optional prompt context.

Context modes:

* ``NONE``: plain recurrent LM, context is ignored.
* ``AVG_CONCAT``: the mean embedding of the system prompt is concatenated
  to the decoder input at every step.
* ``ENCODER_INIT``: a separate LSTM reads the prompt and its final hidden
  state initializes the decoder.

With ``derived=True`` a 12-dim topic posterior of the prompt is appended to
every decoder input as well.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import nn
from .corpus import EOS, SOS, TOPIC_LABELS, Conversation, Vocabulary
from .rng import substream
from .topic import TopicClassifier, derived_feature

log = logging.getLogger(__name__)

MODES = ("NONE", "AVG_CONCAT", "ENCODER_INIT")
N_TOPICS = len(TOPIC_LABELS)


@dataclass
class ContextBundle:
    prompt_ids: List[int]
    topic: Optional[np.ndarray] = None
    avg: Optional[np.ndarray] = None      # AVG_CONCAT vector (prompt mean, no topic block)
    h0: Optional[np.ndarray] = None       # ENCODER_INIT decoder initial state


@dataclass
class _Batch:
    inputs: np.ndarray       # (T, B) ids, start marker first
    targets: np.ndarray      # (T, B)
    mask: np.ndarray         # (T, B) 1.0 on real positions
    prompts: np.ndarray      # (Tp, B) ids
    pmask: np.ndarray        # (Tp, B)
    plen: np.ndarray         # (B,)
    topics: Optional[np.ndarray]  # (B, 12)


class NeuralLM:
    def __init__(self, vocab: Vocabulary, mode="NONE", derived=False, d_e=32, d_h=64, seed=0,
                 topic_classifier: Optional[TopicClassifier] = None):
        if mode not in MODES:
            raise ValueError(f"unknown context mode {mode!r}; expected one of {MODES}")
        if derived and mode == "NONE":
            raise ValueError("derived topic features need a context mode other than NONE")
        self.vocab, self.mode, self.derived = vocab, mode, derived
        self.d_e, self.d_h, self.seed = d_e, d_h, seed
        self.topic_classifier = topic_classifier
        V, H = len(vocab), d_h
        self.store = nn.ParamStore(seed)
        self.store.add("E", (V, d_e))
        self.store.add("Wx", (4 * H, self.input_dim))
        self.store.add("Wh", (4 * H, H))
        self.store.add("b", (4 * H,), "zeros")
        self.store.add("Wo", (V, H))
        self.store.add("bo", (V,), "zeros")
        if mode == "ENCODER_INIT":
            self.store.add("Ex", (4 * H, d_e))
            self.store.add("Eh", (4 * H, H))
            self.store.add("eb", (4 * H,), "zeros")

    @property
    def input_dim(self):
        return self.d_e + (self.d_e if self.mode == "AVG_CONCAT" else 0) + (N_TOPICS if self.derived else 0)

    @property
    def ctx_dim(self):
        return self.input_dim - self.d_e

    def topic_posterior(self, conv: Conversation, t: int):
        return derived_feature(self.topic_classifier, conv, t)

    # -- batching ---------------------------------------------------------------

    def make_batch(self, sentences, prompts, topics=None) -> _Batch:
        B = len(sentences)
        enc = [self.vocab.encode(s) for s in sentences]
        T = max(len(s) for s in enc) + 1
        inputs = np.full((T, B), self.vocab.id(EOS), dtype=np.int64)
        targets = np.full((T, B), self.vocab.id(EOS), dtype=np.int64)
        mask = np.zeros((T, B))
        for j, ids in enumerate(enc):
            seq = [self.vocab.id(SOS)] + ids
            inputs[:len(seq), j] = seq
            targets[:len(seq), j] = ids + [self.vocab.id(EOS)]
            mask[:len(seq), j] = 1.0
        penc = [self.vocab.encode(p) for p in prompts]
        Tp = max([len(p) for p in penc] + [1])
        pids = np.zeros((Tp, B), dtype=np.int64)
        pmask = np.zeros((Tp, B))
        for j, ids in enumerate(penc):
            pids[:len(ids), j] = ids
            pmask[:len(ids), j] = 1.0
        tp = None
        if self.derived:
            tp = np.asarray(topics, dtype=np.float64).reshape(B, N_TOPICS)
        return _Batch(inputs, targets, mask, pids, pmask, np.array([len(p) for p in penc]), tp)

    # -- forward / backward -----------------------------------------------------------

    def _context(self, batch: _Batch):
        """Per-example context vector appended to inputs, and encoder state."""
        p = self.store
        B = batch.inputs.shape[1]
        blocks, enc_cache, h0 = [], None, np.zeros((B, self.d_h))
        if self.mode == "AVG_CONCAT":
            emb = p["E"][batch.prompts] * batch.pmask[:, :, None]
            blocks.append(emb.sum(axis=0) / np.maximum(batch.plen, 1)[:, None])
        if self.mode == "ENCODER_INIT":
            Xe = p["E"][batch.prompts]
            zeros = np.zeros((B, self.d_h))
            _, (h0, _), enc_cache = nn.lstm_forward(p["Ex"], p["Eh"], p["eb"], Xe, zeros, zeros,
                                                   batch.pmask)
        if self.derived:
            blocks.append(batch.topics)
        ctx = np.concatenate(blocks, axis=1) if blocks else np.zeros((B, 0))
        return ctx, h0, enc_cache

    def forward(self, batch: _Batch):
        """Returns (log-probs (T, B, V), cache)."""
        p = self.store
        T, B = batch.inputs.shape
        ctx, h0, enc_cache = self._context(batch)
        X = p["E"][batch.inputs]
        if ctx.shape[1]:
            X = np.concatenate([X, np.broadcast_to(ctx, (T,) + ctx.shape)], axis=2)
        c0 = np.zeros((B, self.d_h))
        Hs, _, dec_cache = nn.lstm_forward(p["Wx"], p["Wh"], p["b"], X, h0, c0)
        logits = Hs @ p["Wo"].T + p["bo"]
        logits[:, :, self.vocab.id(SOS)] = -np.inf
        logp = nn.log_softmax(logits)
        return logp, (batch, Hs, dec_cache, enc_cache)

    def loss(self, batch: _Batch, backward=True):
        """Summed token NLL over real positions; accumulates gradients."""
        logp, cache = self.forward(batch)
        T, B = batch.targets.shape
        tt, bb = np.meshgrid(np.arange(T), np.arange(B), indexing="ij")
        nll = -float(np.sum(logp[tt, bb, batch.targets] * batch.mask))
        if backward:
            dlogits = np.exp(logp)
            dlogits[tt, bb, batch.targets] -= 1.0
            dlogits *= batch.mask[:, :, None]
            self.backward(cache, dlogits)
        return nll

    def backward(self, cache, dlogits):
        batch, Hs, dec_cache, enc_cache = cache
        p, g = self.store, self.store.grads
        V, H = dlogits.shape[2], self.d_h
        d2 = dlogits.reshape(-1, V)
        g["Wo"] += d2.T @ Hs.reshape(-1, H)
        g["bo"] += d2.sum(axis=0)
        dH = dlogits @ p["Wo"]
        dWx, dWh, db, dX, dh0, _ = nn.lstm_backward(dec_cache, dH)
        g["Wx"] += dWx
        g["Wh"] += dWh
        g["b"] += db
        d_e = self.d_e
        np.add.at(g["E"], batch.inputs, dX[:, :, :d_e])
        if self.mode == "AVG_CONCAT":
            davg = dX[:, :, d_e:2 * d_e].sum(axis=0) / np.maximum(batch.plen, 1)[:, None]
            np.add.at(g["E"], batch.prompts, batch.pmask[:, :, None] * davg[None, :, :])
        if self.mode == "ENCODER_INIT":
            Tp, B = batch.prompts.shape
            dWx_e, dWh_e, db_e, dXe, _, _ = nn.lstm_backward(enc_cache, np.zeros((Tp, B, H)), dh0, None)
            g["Ex"] += dWx_e
            g["Eh"] += dWh_e
            g["eb"] += db_e
            np.add.at(g["E"], batch.prompts, dXe)


def encode_context(nlm: NeuralLM, prompt: Sequence[str], topic_posterior=None) -> ContextBundle:
    """Context for one prompt. An empty prompt gives a zero vector / zero state."""
    if nlm.mode == "NONE":
        raise ValueError("mode NONE takes no context")
    b = nlm.make_batch([()], [list(prompt)], None if topic_posterior is None else [topic_posterior])
    if nlm.derived and topic_posterior is None:
        raise ValueError("derived model needs a topic posterior")
    ctx, h0, _ = nlm._context(b)
    bundle = ContextBundle(nlm.vocab.encode(prompt),
                           None if topic_posterior is None else np.asarray(topic_posterior, dtype=float))
    if nlm.mode == "AVG_CONCAT":
        bundle.avg = ctx[0, :nlm.d_e].copy()
    else:
        bundle.h0 = h0[0].copy()
    return bundle


def nlm_forward(nlm: NeuralLM, sentence: Sequence[str], bundle: Optional[ContextBundle] = None):
    """Per-token natural-log probabilities (end marker last)."""
    prompt = nlm.vocab.decode(bundle.prompt_ids) if (bundle is not None and nlm.mode != "NONE") else []
    topic = [bundle.topic] if (nlm.derived and bundle is not None) else None
    if nlm.derived and topic is None:
        raise ValueError("derived model needs a context bundle with a topic posterior")
    b = nlm.make_batch([list(sentence)], [prompt], topic)
    logp, _ = nlm.forward(b)
    return logp[np.arange(b.targets.shape[0]), 0, b.targets[:, 0]]


def _examples(nlm: NeuralLM, corpus: Sequence[Conversation]):
    sents, prompts, topics = [], [], []
    for conv in corpus:
        for t, turn in enumerate(conv.turns):
            sents.append(list(turn.user_utterance))
            prompts.append(list(turn.system_prompt) if nlm.mode != "NONE" else [])
            topics.append(nlm.topic_posterior(conv, t) if nlm.derived else None)
    return sents, prompts, topics


def _batches(nlm, ex, idx, batch_size):
    sents, prompts, topics = ex
    for s in range(0, len(idx), batch_size):
        j = idx[s:s + batch_size]
        yield nlm.make_batch([sents[i] for i in j], [prompts[i] for i in j],
                             [topics[i] for i in j] if nlm.derived else None)


def _perplexity_examples(nlm, ex, batch_size=128):
    n = len(ex[0])
    if n == 0:
        raise ValueError("perplexity of an empty corpus is undefined")
    total, count = 0.0, 0.0
    # sort by length so padding stays small; summation order is fixed
    order = sorted(range(n), key=lambda i: (len(ex[0][i]), i))
    for b in _batches(nlm, ex, order, batch_size):
        total += nlm.loss(b, backward=False)
        count += b.mask.sum()
    return math.exp(total / count)


def nlm_perplexity(nlm: NeuralLM, corpus: Sequence[Conversation]) -> float:
    """Perplexity over user tokens plus end markers."""
    return _perplexity_examples(nlm, _examples(nlm, corpus))


def sentence_logprobs(nlm: NeuralLM, sentences, conv: Conversation, t: int):
    """Log-probabilities of several candidate sentences sharing turn ``t``'s context."""
    prompt = list(conv.turns[t].system_prompt) if nlm.mode != "NONE" else []
    topic = nlm.topic_posterior(conv, t) if nlm.derived else None
    b = nlm.make_batch([list(s) for s in sentences], [prompt] * len(sentences),
                       [topic] * len(sentences) if nlm.derived else None)
    logp, _ = nlm.forward(b)
    T, B = b.targets.shape
    tt, bb = np.meshgrid(np.arange(T), np.arange(B), indexing="ij")
    return np.sum(logp[tt, bb, b.targets] * b.mask, axis=0)


def train_nlm(nlm: NeuralLM, train: Sequence[Conversation], dev: Sequence[Conversation], lr=0.01,
              epochs=20, batch_size=32, clip=5.0, patience=3, seed=0):
    """Adam with gradient-norm clipping and early stopping on dev perplexity.

    Returns (nlm, curve) where ``curve`` lists per-epoch train and dev
    perplexity; the earliest best epoch's parameters are kept.
    """
    tr = _examples(nlm, train)
    dv = _examples(nlm, dev)
    opt = nn.Adam(lr=lr)
    order = substream(seed, "nlm-order")
    curve = []
    best, best_state, since = math.inf, nlm.store.state(), 0
    n = len(tr[0])
    for epoch in range(epochs):
        perm = order.permutation(n)
        total, count = 0.0, 0.0
        for b in _batches(nlm, tr, perm, batch_size):
            nlm.store.zero_grad()
            value = nlm.loss(b)
            tokens = b.mask.sum()
            if not math.isfinite(value):
                raise nn.TrainingError(f"NLM ({nlm.mode}) loss became {value} at epoch {epoch}")
            for gr in nlm.store.grads.values():
                gr /= tokens
            nn.clip_grad_norm(nlm.store, clip)
            opt.step(nlm.store)
            total += value
            count += tokens
        dev_ppl = _perplexity_examples(nlm, dv)
        curve.append({"epoch": epoch, "train_perplexity": math.exp(total / count), "dev_perplexity": dev_ppl})
        log.debug("nlm %s epoch %d dev ppl %.4f", nlm.mode, epoch, dev_ppl)
        if dev_ppl < best:
            best, best_state, since = dev_ppl, nlm.store.state(), 0
        else:
            since += 1
            if since >= patience:
                break
    nlm.store.load_state(best_state)
    return nlm, curve


def save_curve(curve, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(curve, f, indent=2, sort_keys=True)
        f.write("\n")


def save_nlm(nlm: NeuralLM, path):
    nlm.store.save(path, meta={"mode": nlm.mode, "derived": nlm.derived, "d_e": nlm.d_e,
                               "d_h": nlm.d_h, "vocab": nlm.vocab.to_list()})


def load_nlm(path, topic_classifier=None) -> NeuralLM:
    header, arrays = nn.load_checkpoint(path)
    m = header["meta"]
    nlm = NeuralLM(Vocabulary.from_list(m["vocab"]), m["mode"], m["derived"], m["d_e"], m["d_h"],
                   header["seed"], topic_classifier)
    nlm.store.load_state(arrays)
    return nlm
