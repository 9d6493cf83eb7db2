"""Deep-averaging topic and dialog-act classifiers.

The network is mean word embedding -> affine -> tanh -> affine -> softmax.
A contextual classifier also averages the context tokens into a second
block concatenated to the utterance block.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import nn
from .corpus import ACT_LABELS, TOPIC_LABELS, Conversation, Vocabulary
from .rng import substream

log = logging.getLogger(__name__)

INVENTORY_KINDS = {"TOPIC": TOPIC_LABELS, "DIALOG_ACT": ACT_LABELS}
META_KEYS = {"TOPIC": "topic", "DIALOG_ACT": "act"}


@dataclass(frozen=True)
class LabelInventory:
    kind: str
    labels: tuple

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        expected = {"TOPIC": 12, "DIALOG_ACT": 14}.get(self.kind)
        if expected is not None and len(self.labels) != expected:
            raise ValueError(f"{self.kind} inventory must have {expected} labels")

    @classmethod
    def of(cls, kind):
        return cls(kind, INVENTORY_KINDS[kind])

    def index(self, label):
        return self.labels.index(label)

    def __len__(self):
        return len(self.labels)


def bag_matrix(token_lists, vocab: Vocabulary):
    """Row-normalized bag-of-words matrix; an empty list gives a zero row."""
    A = np.zeros((len(token_lists), len(vocab)))
    for r, toks in enumerate(token_lists):
        if toks:
            ids = vocab.encode(toks)
            np.add.at(A[r], ids, 1.0 / len(ids))
    return A


def classifier_inputs(conv: Conversation, t: int, text: str = "user"):
    """(utterance, context) token lists for turn ``t``.

    ``text='user'`` classifies the user utterance; its context is the
    previous user utterance plus the system response to it (this turn's
    prompt). ``text='prompt'`` classifies this turn's system prompt with the
    previous turn's user utterance and prompt as context.
    """
    turn = conv.turns[t]
    prev = conv.turns[t - 1] if t > 0 else None
    if text == "user":
        ctx = (list(prev.user_utterance) if prev else []) + list(turn.system_prompt)
        return list(turn.user_utterance), ctx
    if text == "prompt":
        ctx = (list(prev.user_utterance) + list(prev.system_prompt)) if prev else []
        return list(turn.system_prompt), ctx
    raise ValueError(f"unknown classifier text source {text!r}")


class TopicClassifier:
    def __init__(self, vocab: Vocabulary, inventory: LabelInventory, contextual=False,
                 d_e=32, d_h=32, seed=0, text="user"):
        self.vocab = vocab
        self.inventory = inventory
        self.contextual = contextual
        self.text = text
        self.d_e, self.d_h = d_e, d_h
        d_in = d_e * (2 if contextual else 1)
        self.store = nn.ParamStore(seed)
        self.store.add("E", (len(vocab), d_e))
        self.store.add("W1", (d_h, d_in))
        self.store.add("b1", (d_h,), "zeros")
        self.store.add("W2", (len(inventory), d_h))
        self.store.add("b2", (len(inventory),), "zeros")

    @property
    def labels(self):
        return self.inventory.labels

    def forward(self, A_utt, A_ctx=None):
        p = self.store
        E = p["E"]
        x = A_utt @ E
        if self.contextual:
            if A_ctx is None:
                A_ctx = np.zeros_like(A_utt)
            x = np.concatenate([x, A_ctx @ E], axis=1)
        a1, c1 = nn.affine_forward(p["W1"], p["b1"], x)
        h, ch = nn.nonlinear_forward("tanh", a1)
        logits, c2 = nn.affine_forward(p["W2"], p["b2"], h)
        return logits, (A_utt, A_ctx, c1, ch, c2)

    def backward(self, cache, dlogits):
        A_utt, A_ctx, c1, ch, c2 = cache
        g = self.store.grads
        dW2, db2, dh = nn.affine_backward(c2, dlogits)
        da1 = nn.nonlinear_backward(ch, dh)
        dW1, db1, dx = nn.affine_backward(c1, da1)
        g["W2"] += dW2
        g["b2"] += db2
        g["W1"] += dW1
        g["b1"] += db1
        d_e = self.d_e
        g["E"] += A_utt.T @ dx[:, :d_e]
        if self.contextual:
            g["E"] += A_ctx.T @ dx[:, d_e:]

    def posteriors(self, utterances, contexts=None):
        A = bag_matrix(utterances, self.vocab)
        C = bag_matrix(contexts, self.vocab) if (self.contextual and contexts is not None) else None
        logits, _ = self.forward(A, C)
        return nn.softmax(logits)

    def classify(self, utterance: Sequence[str], context: Optional[Sequence[str]] = None):
        """Posterior over the inventory. Non-contextual models ignore context."""
        return self.posteriors([list(utterance)], [list(context or [])])[0]

    def predict(self, utterance, context=None):
        # np.argmax returns the lowest index among ties
        return self.labels[int(np.argmax(self.classify(utterance, context)))]

    def loss(self, A, C, targets):
        """Summed cross-entropy over integer targets; fills gradients."""
        logits, cache = self.forward(A, C)
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(targets)), targets] = 1.0
        loss, dlogits = nn.softmax_xent(logits, onehot)
        self.backward(cache, dlogits)
        return loss


def derived_feature(clf: Optional[TopicClassifier], conv: Conversation, t: int):
    """Topic posterior (length 12) from the turn's system prompt."""
    if clf is None:
        return np.full(len(TOPIC_LABELS), 1.0 / len(TOPIC_LABELS))
    utt, ctx = classifier_inputs(conv, t, "prompt")
    return clf.classify(utt, ctx if clf.contextual else None)


@dataclass
class TopicData:
    utterances: List[list]
    contexts: List[list]
    targets: np.ndarray
    A: np.ndarray = field(repr=False, default=None)
    C: np.ndarray = field(repr=False, default=None)


def labelled_examples(corpus: Sequence[Conversation], kind="TOPIC", text="user",
                      vocab=None, inventory=None):
    key = META_KEYS[kind]
    inventory = inventory or LabelInventory.of(kind)
    missing = sorted({c.id for c in corpus for t in c.turns if key not in t.metadata})
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise ValueError(f"{len(missing)} conversations lack a gold {key!r} label: {shown}")
    utts, ctxs, ys = [], [], []
    for c in corpus:
        for t in range(len(c.turns)):
            u, x = classifier_inputs(c, t, text)
            utts.append(u)
            ctxs.append(x)
            ys.append(inventory.index(c.turns[t].metadata[key]))
    data = TopicData(utts, ctxs, np.array(ys, dtype=np.int64))
    if vocab is not None:
        data.A = bag_matrix(utts, vocab)
        data.C = bag_matrix(ctxs, vocab)
    return data


def accuracy(clf: TopicClassifier, data: TopicData):
    if len(data.targets) == 0:
        return float("nan")
    logits, _ = clf.forward(data.A, data.C if clf.contextual else None)
    return float(np.mean(np.argmax(logits, axis=1) == data.targets))


def majority_baseline(train: TopicData, dev: TopicData):
    """Dev accuracy of always predicting the most frequent training label."""
    counts = np.bincount(train.targets)
    return float(np.mean(dev.targets == int(np.argmax(counts))))


def train_topic(train: Sequence[Conversation], dev: Sequence[Conversation], vocab: Vocabulary,
                kind="TOPIC", contextual=False, text="user", d_e=32, d_h=32, lr=0.01,
                epochs=30, batch_size=64, patience=3, seed=0):
    """Train a DAN with Adam; early-stop on dev accuracy (earliest best kept).

    Returns (classifier, history) where history holds per-epoch train loss
    and dev accuracy.
    """
    inventory = LabelInventory.of(kind)
    tr = labelled_examples(train, kind, text, vocab, inventory)
    dv = labelled_examples(dev, kind, text, vocab, inventory)
    clf = TopicClassifier(vocab, inventory, contextual, d_e, d_h, seed, text)
    opt = nn.Adam(lr=lr)
    order_rng = substream(seed, "topic-order")
    history = {"train_loss": [], "dev_accuracy": []}
    best_acc, best_state, since = -1.0, clf.store.state(), 0
    n = len(tr.targets)
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            clf.store.zero_grad()
            loss = clf.loss(tr.A[idx], tr.C[idx] if contextual else None, tr.targets[idx])
            if not np.isfinite(loss):
                raise nn.TrainingError(f"topic classifier: non-finite loss at epoch {epoch}")
            for g in clf.store.grads.values():
                g /= len(idx)
            opt.step(clf.store)
            total += loss
        acc = accuracy(clf, dv) if len(dv.targets) else 1.0
        history["train_loss"].append(total / max(n, 1))
        history["dev_accuracy"].append(acc)
        log.debug("topic epoch %d loss %.4f dev acc %.4f", epoch, total / max(n, 1), acc)
        if acc > best_acc:
            best_acc, best_state, since = acc, clf.store.state(), 0
        else:
            since += 1
            if since >= patience:
                break
    clf.store.load_state(best_state)
    history["best_dev_accuracy"] = best_acc
    return clf, history


def save_classifier(clf: TopicClassifier, path):
    clf.store.save(path, meta={"kind": clf.inventory.kind, "labels": list(clf.labels),
                               "contextual": clf.contextual, "text": clf.text,
                               "d_e": clf.d_e, "d_h": clf.d_h, "vocab": clf.vocab.to_list()})


def load_classifier(path):
    header, arrays = nn.load_checkpoint(path)
    m = header["meta"]
    vocab = Vocabulary.from_list(m["vocab"])
    clf = TopicClassifier(vocab, LabelInventory(m["kind"], tuple(m["labels"])), m["contextual"],
                          m["d_e"], m["d_h"], header["seed"], m["text"])
    clf.store.load_state(arrays)
    return clf
