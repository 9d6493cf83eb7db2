"""Simulated n-best lists, Levenshtein alignment, WER / entity error rate,
and LM rescoring experiments.

Recognition is simulated as a noisy channel. The reference is corrupted
once into an "observation" (what the recognizer heard). Candidate
transcripts are then enumerated by undoing possible corruption events at
each observed position, and each candidate's acoustic score is the exact
log-probability of the corruption events that turn it into the
observation. The n-best list holds the n highest-scoring distinct
candidates, so the reference appears only when the channel left enough
evidence for it.
"""

import heapq
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import TOPIC_LABELS, Conversation
from .mixture import FeatureError, MixtureLM, turn_perplexity
from .neural_lm import NeuralLM, nlm_perplexity, sentence_logprobs
from .rng import substream

log = logging.getLogger(__name__)

MATCH, SUB, DEL, INS = "match", "substitute", "delete", "insert"
ORACLE_FLOOR = -1e9


# -- noise model ----------------------------------------------------------------------

@dataclass
class NoiseModel:
    p_sub: float = 0.3
    p_del: float = 0.03
    p_ins: float = 0.03
    confusion: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    insert_words: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("p_sub", "p_del", "p_ins"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name}={v} outside [0, 1)")
        if self.p_sub + self.p_del >= 1.0:
            raise ValueError("p_sub + p_del must be < 1")
        self._reverse = defaultdict(list)
        for r, outs in self.confusion.items():
            for x, q in outs:
                if q > 0 and x != r:
                    self._reverse[x].append((r, q))

    def confusions(self, word):
        return self.confusion.get(word, [])

    def reverse(self, observed):
        """Words r whose confusion list contains ``observed``, with q(observed | r)."""
        return self._reverse.get(observed, [])

    def to_json(self):
        return {"p_sub": self.p_sub, "p_del": self.p_del, "p_ins": self.p_ins,
                "confusion": {k: [[x, q] for x, q in v] for k, v in sorted(self.confusion.items())},
                "insert_words": list(self.insert_words)}

    @classmethod
    def from_json(cls, d):
        return cls(d["p_sub"], d["p_del"], d["p_ins"],
                   {k: [(x, float(q)) for x, q in v] for k, v in d["confusion"].items()},
                   list(d["insert_words"]))


def build_confusion(words: Sequence[str], entity_topic: Dict[str, str], seed=0,
                    same_topic=0.4, cross_topic=0.5, n_neighbors=3):
    """Acoustic neighbourhoods.

    An entity's substitutions go to one same-topic entity with weight
    ``same_topic``, one entity from each other topic sharing
    ``cross_topic``, and the remainder to a plain word. Plain words get
    ``n_neighbors`` plain-word neighbours with decreasing weights.
    """
    rng = substream(seed, "confusion")
    words = sorted(set(words))
    plain = [w for w in words if w not in entity_topic]
    by_topic = defaultdict(list)
    for w in words:
        if w in entity_topic:
            by_topic[entity_topic[w]].append(w)
    topics = sorted(by_topic)
    table = {}

    def pick(pool, exclude):
        cands = [w for w in pool if w != exclude]
        return cands[int(rng.integers(len(cands)))] if cands else None

    for w in words:
        outs = []
        if w in entity_topic:
            home = entity_topic[w]
            others = [t for t in topics if t != home]
            rest = 1.0 - same_topic - (cross_topic if others else 0.0)
            same = pick(by_topic[home], w)
            if same is not None:
                outs.append((same, same_topic))
            else:
                rest += same_topic
            for t in others:
                outs.append((pick(by_topic[t], w), cross_topic / len(others)))
            filler = pick(plain, w)
            if filler is not None and rest > 1e-12:
                outs.append((filler, rest))
        else:
            cands = [x for x in plain if x != w]
            if cands:
                k = min(n_neighbors, len(cands))
                idx = rng.choice(len(cands), size=k, replace=False)
                raw = np.arange(k, 0, -1, dtype=float)
                for j, q in zip(idx, raw / raw.sum()):
                    outs.append((cands[int(j)], float(q)))
        if outs:
            total = sum(q for _, q in outs)
            merged = defaultdict(float)
            for x, q in outs:
                merged[x] += q / total
            table[w] = sorted(merged.items())
    return table


def noise_from_corpus(corpus: Sequence[Conversation], p_sub=0.3, p_del=0.03, p_ins=0.03,
                      seed=0, same_topic=0.4, cross_topic=0.5):
    """Noise model whose vocabulary and entity classes come from ``corpus``."""
    words, ent = set(), {}
    for conv in corpus:
        for turn in conv.turns:
            words.update(turn.user_utterance)
            if turn.entity_tags:
                for w, tag in zip(turn.user_utterance, turn.entity_tags):
                    if tag is not None:
                        ent[w] = tag
    conf = build_confusion(sorted(words), ent, seed, same_topic, cross_topic)
    return NoiseModel(p_sub, p_del, p_ins, conf, sorted(words))


# -- n-best simulation --------------------------------------------------------------

@dataclass
class NBestList:
    reference: Tuple[str, ...]
    tags: Optional[Tuple[Optional[str], ...]]
    hypotheses: List[Tuple[Tuple[str, ...], float]]
    observation: Tuple[str, ...] = ()
    events: Dict[str, int] = field(default_factory=dict)
    key: Tuple[str, int] = ("", 0)

    @property
    def first_pass(self) -> int:
        return int(np.argmax([s for _, s in self.hypotheses]))

    @property
    def first_pass_tokens(self):
        return self.hypotheses[self.first_pass][0]

    def reference_rank(self):
        for i, (h, _) in enumerate(self.hypotheses):
            if h == self.reference:
                return i
        return None

    def to_json(self):
        d = {"id": self.key[0], "turn": self.key[1], "ref": list(self.reference),
             "hyps": [{"toks": list(h), "score": s} for h, s in self.hypotheses],
             "obs": list(self.observation)}
        if self.tags is not None:
            d["tags"] = list(self.tags)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["ref"]), tuple(d["tags"]) if d.get("tags") is not None else None,
                   [(tuple(h["toks"]), float(h["score"])) for h in d["hyps"]],
                   tuple(d.get("obs", ())), {}, (d.get("id", ""), int(d.get("turn", 0))))


def corrupt(reference, noise: NoiseModel, rng):
    """Sample the channel. Returns (observation, event counts)."""
    obs = []
    ev = Counter({"tokens": len(reference), "gaps": len(reference) + 1})

    def gap():
        k = 0
        while noise.insert_words and rng.random() < noise.p_ins:
            obs.append(noise.insert_words[int(rng.integers(len(noise.insert_words)))])
            k += 1
        ev["insert"] += k
        ev["gaps_with_insert"] += k > 0

    gap()
    for r in reference:
        u = rng.random()
        if u < noise.p_del:
            ev["delete"] += 1
        elif u < noise.p_del + noise.p_sub and noise.confusions(r):
            outs = noise.confusions(r)
            cum = np.cumsum([q for _, q in outs])
            j = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(outs) - 1)
            obs.append(outs[j][0])
            ev["substitute"] += 1
        else:
            obs.append(r)
        gap()
    return tuple(obs), dict(ev)


def _lattice(obs, noise: NoiseModel):
    """Per observed position: options (word or None, log-prob), best first."""
    def safe_log(x):
        return math.log(x) if x > 0 else -math.inf

    keep = safe_log(1.0 - noise.p_sub - noise.p_del)
    no_ins = safe_log(1.0 - noise.p_ins)
    ins = safe_log(noise.p_ins) - (math.log(len(noise.insert_words)) if noise.insert_words else 0.0)
    lattice = []
    for a in obs:
        opts = [(a, keep + no_ins)]
        for r, q in noise.reverse(a):
            opts.append((r, safe_log(noise.p_sub * q) + no_ins))
        if a in noise.insert_words or not noise.insert_words:
            opts.append((None, ins))
        opts = [o for o in opts if o[1] > -math.inf]
        opts.sort(key=lambda o: (-o[1], o[0] or ""))
        lattice.append(opts)
    return lattice, no_ins


def kbest(lattice, base, n, max_pops=None):
    """Distinct word sequences with the n highest summed option scores."""
    m = len(lattice)
    first = tuple([0] * m)
    score0 = base + sum(opts[0][1] for opts in lattice)
    heap = [(-score0, first, -1)]
    seen_seq, out = set(), []
    pops = 0
    max_pops = max_pops or 50 * n + 50
    while heap and len(out) < n and pops < max_pops:
        neg, vec, pivot = heapq.heappop(heap)
        pops += 1
        seq = tuple(lattice[j][vec[j]][0] for j in range(m) if lattice[j][vec[j]][0] is not None)
        if seq not in seen_seq:
            seen_seq.add(seq)
            out.append((seq, -neg))
        # each index vector has one parent: bump the pivot or open a later position
        children = []
        if pivot >= 0 and vec[pivot] + 1 < len(lattice[pivot]):
            children.append(pivot)
        for j in range(pivot + 1, m):
            if vec[j] == 0 and len(lattice[j]) > 1:
                children.append(j)
        for j in children:
            v = list(vec)
            old = lattice[j][v[j]][1]
            v[j] += 1
            new_score = -neg - old + lattice[j][v[j]][1]
            heapq.heappush(heap, (-new_score, tuple(v), j))
    return out


def simulate_nbest(reference, noise: NoiseModel, n: int, seed=0, tags=None, key=("", 0)) -> NBestList:
    """Corrupt ``reference`` and list the n best distinct candidate
    transcripts of the observation with their channel log-probabilities."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = substream(seed, "nbest", key[0], key[1])
    obs, events = corrupt(tuple(reference), noise, rng)
    lattice, base = _lattice(obs, noise)
    hyps = kbest(lattice, base, n)
    return NBestList(tuple(reference), None if tags is None else tuple(tags), hyps, obs, events, key)


def simulate_corpus(corpus: Sequence[Conversation], noise: NoiseModel, n=30, seed=0):
    """One n-best list per user turn, keyed by (conversation id, turn)."""
    out = []
    for conv in corpus:
        for t, turn in enumerate(conv.turns):
            out.append(simulate_nbest(turn.user_utterance, noise, n, seed, turn.entity_tags, (conv.id, t)))
    return out


def first_pass_map(nbests: Sequence[NBestList]):
    return {nb.key: nb.first_pass_tokens for nb in nbests}


def save_nbest_jsonl(nbests, path):
    with open(path, "w", encoding="utf-8") as f:
        for nb in nbests:
            f.write(json.dumps(nb.to_json(), sort_keys=True) + "\n")


def load_nbest_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [NBestList.from_json(json.loads(line)) for line in f if line.strip()]


# -- alignment and error rates ----------------------------------------------------------

def align(reference, hypothesis):
    """Minimal unit-cost Levenshtein alignment.

    Returns a list of (op, ref_index, hyp_index). Among equal-cost paths
    the backtrace prefers substitution/match, then deletion, then insertion.
    """
    R, H = len(reference), len(hypothesis)
    D = np.zeros((R + 1, H + 1), dtype=np.int64)
    D[:, 0] = np.arange(R + 1)
    D[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        ri = reference[i - 1]
        for j in range(1, H + 1):
            diag = D[i - 1, j - 1] + (0 if ri == hypothesis[j - 1] else 1)
            D[i, j] = min(diag, D[i - 1, j] + 1, D[i, j - 1] + 1)
    ops = []
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = reference[i - 1] == hypothesis[j - 1]
            if D[i, j] == D[i - 1, j - 1] + (0 if same else 1):
                ops.append((MATCH if same else SUB, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and D[i, j] == D[i - 1, j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def alignment_cost(ops):
    return sum(1 for op, _, _ in ops if op != MATCH)


def error_counts(ops):
    c = Counter(op for op, _, _ in ops)
    return c[SUB], c[DEL], c[INS]


def wer(ops, reference_length: int) -> float:
    if reference_length < 1:
        raise ValueError("WER needs a non-empty reference")
    s, d, i = error_counts(ops)
    return (s + d + i) / reference_length


def entity_errors(ops, tags, topic=None):
    """(substitutions + deletions on tagged reference tokens, tagged count).

    ``topic=None`` pools every tagged token.
    """
    if not tags:
        return 0, 0
    hit = (lambda tg: tg is not None) if topic is None else (lambda tg: tg == topic)
    total = sum(1 for tg in tags if hit(tg))
    errs = sum(1 for op, ri, _ in ops if op in (SUB, DEL) and hit(tags[ri]))
    return errs, total


def eer(ops, tags, topic=None) -> Optional[float]:
    """Entity error rate for ``topic``; None when no reference token carries it."""
    errs, total = entity_errors(ops, tags, topic)
    return errs / total if total else None


# -- scorers --------------------------------------------------------------------------

class Scorer:
    name = "scorer"
    pass_mode = 1
    fixed_scale: Optional[float] = None

    def hyp_logprobs(self, nbest: NBestList, conv: Conversation, t: int) -> np.ndarray:
        raise NotImplementedError

    def perplexity(self, corpus, first_pass) -> Optional[float]:
        return None


class NoLM(Scorer):
    name = "none"
    fixed_scale = 0.0

    def hyp_logprobs(self, nbest, conv, t):
        return np.zeros(len(nbest.hypotheses))


class MixtureScorer(Scorer):
    def __init__(self, mixture: MixtureLM, name=None):
        self.mixture = mixture
        self.name = name or mixture.mode
        self.pass_mode = mixture.pass_mode

    def hyp_logprobs(self, nbest, conv, t):
        w = self.mixture.turn_weights(conv, t, nbest.first_pass_tokens)
        return np.array([self.mixture.sentence_logprob(h, w) for h, _ in nbest.hypotheses])

    def perplexity(self, corpus, first_pass):
        return turn_perplexity(self.mixture, corpus, first_pass)


class NeuralScorer(Scorer):
    def __init__(self, nlm: NeuralLM, name=None):
        self.nlm = nlm
        self.name = name or nlm.mode.lower() + ("+derived" if nlm.derived else "")

    def hyp_logprobs(self, nbest, conv, t):
        return sentence_logprobs(self.nlm, [h for h, _ in nbest.hypotheses], conv, t)

    def perplexity(self, corpus, first_pass):
        return nlm_perplexity(self.nlm, corpus)


class OracleScorer(Scorer):
    """Log-prob 0 for the reference and a huge negative floor otherwise."""
    name = "oracle"

    def hyp_logprobs(self, nbest, conv, t):
        return np.array([0.0 if h == nbest.reference else ORACLE_FLOOR for h, _ in nbest.hypotheses])


def rescore(nbest: NBestList, scorer: Scorer, conv: Conversation, t: int, lm_scale: float,
            pass_mode: int = 2, lm_scores=None) -> int:
    """Index maximizing acoustic score + lm_scale * LM log-prob (lowest index on ties)."""
    if lm_scale < 0:
        raise ValueError("lm_scale must be >= 0")
    if scorer.pass_mode > pass_mode:
        raise FeatureError(f"scorer {scorer.name} needs {scorer.pass_mode}-pass features")
    am = np.array([s for _, s in nbest.hypotheses])
    if lm_scale == 0.0:
        return int(np.argmax(am))
    lm = scorer.hyp_logprobs(nbest, conv, t) if lm_scores is None else lm_scores
    return int(np.argmax(am + lm_scale * lm))


# -- experiments ------------------------------------------------------------------------

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(21))


@dataclass
class _Scored:
    am: List[np.ndarray]
    errs: List[np.ndarray]             # (S+D+I) per hypothesis
    ent: List[np.ndarray]              # (hyps, topics) tagged S+D per hypothesis
    ref_len: int
    ent_totals: np.ndarray             # tagged-token count per topic


def _score_items(nbests: Sequence[NBestList], topics: Sequence[str]):
    am, errs, ent = [], [], []
    ref_len = 0
    totals = np.zeros(len(topics), dtype=np.int64)
    for nb in nbests:
        ref_len += len(nb.reference)
        if nb.tags:
            for j, tp in enumerate(topics):
                totals[j] += sum(1 for tg in nb.tags if tg == tp)
        am.append(np.array([s for _, s in nb.hypotheses]))
        e, en = [], []
        for h, _ in nb.hypotheses:
            ops = align(nb.reference, h)
            e.append(alignment_cost(ops))
            en.append([entity_errors(ops, nb.tags, tp)[0] for tp in topics])
        errs.append(np.array(e))
        ent.append(np.array(en, dtype=np.int64).reshape(len(nb.hypotheses), len(topics)))
    return _Scored(am, errs, ent, ref_len, totals)


def _choose(scored: _Scored, lms, scale):
    if scale == 0.0:
        return [int(np.argmax(a)) for a in scored.am]
    return [int(np.argmax(a + scale * l)) for a, l in zip(scored.am, lms)]


@dataclass
class EvalReport:
    name: str
    lm_scale: float
    perplexity: Optional[float]
    wer: float
    eer: Optional[float]
    eer_per_topic: Dict[str, Optional[float]]
    selection: Dict[str, int]
    n_utterances: int
    n_ref_tokens: int
    errors: int
    entity_errors: int
    dev_wer: float
    relative: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _rel(x, base):
    if x is None or base is None or base == 0:
        return None
    return 100.0 * (x - base) / base


def run_eval(dev_items, test_items, scorers: Sequence[Scorer], grid=DEFAULT_GRID, baseline="none",
             topics=None, dev_corpus=None, test_corpus=None):
    """Pick each scorer's lm_scale on dev WER (smaller scale wins ties) and
    report test metrics.

    ``dev_items`` / ``test_items`` are lists of (conversation, turn index,
    NBestList).
    """
    if not grid:
        raise ValueError("lm_scale grid is empty")
    grid = sorted(float(g) for g in grid)
    if topics is None:
        found = {tg for _, _, nb in list(dev_items) + list(test_items) for tg in (nb.tags or ()) if tg}
        topics = [t for t in TOPIC_LABELS if t in found]
    dev_sc = _score_items([nb for _, _, nb in dev_items], topics)
    test_sc = _score_items([nb for _, _, nb in test_items], topics)
    reports = []
    for scorer in scorers:
        scales = [scorer.fixed_scale] if scorer.fixed_scale is not None else grid
        needs_lm = any(s != 0.0 for s in scales)
        dev_lm = [scorer.hyp_logprobs(nb, c, t) for c, t, nb in dev_items] if needs_lm else None
        best_scale, best_err = None, None
        for s in scales:
            ch = _choose(dev_sc, dev_lm, s)
            err = sum(int(e[i]) for e, i in zip(dev_sc.errs, ch))
            if best_err is None or err < best_err:
                best_scale, best_err = s, err
        test_lm = ([scorer.hyp_logprobs(nb, c, t) for c, t, nb in test_items]
                   if best_scale != 0.0 else None)
        ch = _choose(test_sc, test_lm, best_scale)
        errors = sum(int(e[i]) for e, i in zip(test_sc.errs, ch))
        ent = np.zeros(len(topics), dtype=np.int64)
        for en, i in zip(test_sc.ent, ch):
            ent += en[i]
        per_topic = {tp: (float(ent[j] / test_sc.ent_totals[j]) if test_sc.ent_totals[j] else None)
                     for j, tp in enumerate(topics)}
        total_tagged = int(test_sc.ent_totals.sum())
        ppl = None
        if test_corpus is not None:
            ppl = scorer.perplexity(test_corpus, first_pass_map([nb for _, _, nb in test_items]))
        sel = Counter(str(i) for i in ch)
        reports.append(EvalReport(
            name=scorer.name, lm_scale=best_scale, perplexity=ppl,
            wer=errors / test_sc.ref_len if test_sc.ref_len else 0.0,
            eer=(int(ent.sum()) / total_tagged) if total_tagged else None,
            eer_per_topic=per_topic, selection=dict(sorted(sel.items(), key=lambda kv: int(kv[0]))),
            n_utterances=len(test_items), n_ref_tokens=test_sc.ref_len, errors=errors,
            entity_errors=int(ent.sum()),
            dev_wer=best_err / dev_sc.ref_len if dev_sc.ref_len else 0.0))
    base = next((r for r in reports if r.name == baseline), None)
    for r in reports:
        if base is not None:
            r.relative = {"perplexity": _rel(r.perplexity, base.perplexity), "wer": _rel(r.wer, base.wer),
                          "eer": _rel(r.eer, base.eer)}
    return reports


def items_for(corpus: Sequence[Conversation], nbests: Sequence[NBestList]):
    by_key = {nb.key: nb for nb in nbests}
    return [(c, t, by_key[(c.id, t)]) for c in corpus for t in range(len(c.turns))]
