"""Backoff n-gram language models: counting, smoothing, queries, ARPA I/O.

Probabilities are held as natural logs in backoff form: ``probs[k]`` maps
(k+1)-gram id tuples to ln p(w | h) and ``bows[k]`` maps (k+1)-gram
contexts to ln bow(h). A context that only exists to carry a backoff weight
(all-``<s>`` histories) has a ``bows`` entry and no ``probs`` entry.
"""

import math
import re
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

from .corpus import EOS_ID, SOS_ID, Vocabulary

LN10 = math.log(10.0)
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
ARPA_PLACEHOLDER = -99.0

Ngram = Tuple[int, ...]


class ArpaError(ValueError):
    pass


class CountTable:
    def __init__(self, order: int, counts: Optional[Dict[Ngram, int]] = None):
        self.order = order
        self.counts: Dict[Ngram, int] = dict(counts or {})

    def __len__(self):
        return len(self.counts)

    def __getitem__(self, gram):
        return self.counts.get(tuple(gram), 0)

    def of_order(self, k):
        return {g: c for g, c in self.counts.items() if len(g) == k}


def pad(ids: Sequence[int], order: int) -> List[int]:
    return [SOS_ID] * (order - 1) + list(ids) + [EOS_ID]


def count_ngrams(sentences: Sequence[Sequence[int]], order: int) -> CountTable:
    """Count every k-gram (k <= order) of the padded id sentences."""
    if order < 1:
        raise ValueError("order must be >= 1")
    counts: Dict[Ngram, int] = defaultdict(int)
    for sent in sentences:
        seq = pad(sent, order)
        # with order-1 leading <s>, windows starting inside the padding are
        # all-<s> prefixes; counting them keeps every stored prefix present
        for i in range(len(seq)):
            for k in range(1, order + 1):
                if i + k > len(seq):
                    break
                counts[tuple(seq[i:i + k])] += 1
    return CountTable(order, counts)


class NGramModel:
    def __init__(self, vocab: Vocabulary, order: int, probs=None, bows=None, smoothing=None):
        self.vocab = vocab
        self.order = order
        self.probs: List[Dict[Ngram, float]] = probs or [dict() for _ in range(order)]
        self.bows: List[Dict[Ngram, float]] = bows or [dict() for _ in range(order)]
        self.smoothing = dict(smoothing or {})

    def __repr__(self):
        sizes = ", ".join(str(len(p)) for p in self.probs)
        return f"NGramModel(order={self.order}, entries=[{sizes}], {self.smoothing})"

    # -- queries on ids --------------------------------------------------------

    def logprob_id(self, w: int, hist: Sequence[int]) -> float:
        """ln p(w | hist) with standard backoff; hist is truncated to n-1."""
        n = self.order
        h = tuple(hist)[-(n - 1):] if n > 1 else ()
        acc = 0.0
        while True:
            p = self.probs[len(h)].get(h + (w,))
            if p is not None:
                return max(acc + p, LOG_FLOOR)
            if not h:
                return LOG_FLOOR
            b = self.bows[len(h) - 1].get(h)
            if b is not None:
                acc += b
            h = h[1:]

    def token_logprobs(self, ids: Sequence[int]) -> List[float]:
        """Per-position ln p for ``ids`` followed by ``</s>``."""
        seq = pad(ids, self.order)
        n1 = self.order - 1
        return [self.logprob_id(seq[i], seq[i - n1:i] if n1 else ())
                for i in range(n1, len(seq))]

    # -- token-level API -------------------------------------------------------

    def prob(self, word: str, history: Sequence[str] = ()) -> float:
        return math.exp(self.logprob_id(self.vocab.id(word), self.vocab.encode(history)))

    def sentence_logprob(self, sentence: Sequence[str]) -> float:
        return math.fsum(self.token_logprobs(self.vocab.encode(sentence)))


def prob(model: NGramModel, word: str, history: Sequence[str] = ()) -> float:
    return model.prob(word, history)


def sentence_logprob(model: NGramModel, sentence: Sequence[str]) -> float:
    return model.sentence_logprob(sentence)


def perplexity(model: NGramModel, sentences: Sequence[Sequence[str]]) -> float:
    """exp of the mean negative log-likelihood over tokens plus end markers."""
    if not sentences:
        raise ValueError("perplexity of an empty corpus is undefined")
    total, n = 0.0, 0
    for s in sentences:
        total += model.sentence_logprob(s)
        n += len(s) + 1
    return math.exp(-total / n)


# -- training ------------------------------------------------------------------

def _adjusted_counts(counts: CountTable, kneser_ney: bool):
    """Per-order counts used as numerators: raw counts at the top order
    (and for <s>-initial grams), continuation counts below it under KN."""
    n = counts.order
    by_order = [dict() for _ in range(n + 1)]
    for g, c in counts.counts.items():
        by_order[len(g)][g] = c
    if not kneser_ney:
        return by_order
    adj = [dict() for _ in range(n + 1)]
    adj[n] = by_order[n]
    for k in range(1, n):
        left = defaultdict(int)
        for g in by_order[k + 1]:
            left[g[1:]] += 1
        for g, c in by_order[k].items():
            adj[k][g] = c if g[0] == SOS_ID else left.get(g, 0)
    return adj


def train_smoothed(counts: CountTable, vocab: Vocabulary, method: str = "kneser-ney",
                   discount: float = 0.75, alpha: float = 1.0) -> NGramModel:
    """Build a normalized backoff model from ``counts``.

    ``kneser-ney``: interpolated KN with one absolute discount per order and
    a uniform floor below the unigrams. ``additive``: each order adds
    ``alpha * |V|`` pseudo-counts spread by the next-lower distribution, so
    the unigram level is plain Laplace smoothing.
    """
    if len(vocab) <= 1:
        raise ValueError("cannot train over an empty vocabulary")
    if method == "kneser-ney":
        if not 0.0 < discount < 1.0:
            raise ValueError("KN discount must lie in (0, 1)")
        smoothing = {"method": method, "discount": discount}
    elif method == "additive":
        if not alpha > 0.0:
            raise ValueError("additive alpha must be > 0")
        smoothing = {"method": method, "alpha": alpha}
    else:
        raise ValueError(f"unknown smoothing method {method!r}")

    n = counts.order
    model = NGramModel(vocab, n, smoothing=smoothing)
    adj = _adjusted_counts(counts, method == "kneser-ney")
    v_pred = vocab.n_pred
    pred_ids = [i for i in range(len(vocab)) if i != SOS_ID]

    for k in range(1, n + 1):
        groups = defaultdict(list)
        for g, a in adj[k].items():
            if g[-1] != SOS_ID and a > 0:
                groups[g[:-1]].append((g[-1], a))
        probs_k = model.probs[k - 1]
        if k == 1:
            entries = groups.get((), [])
            z = sum(a for _, a in entries)
            seen = dict(entries)
            if z == 0:
                for w in pred_ids:
                    probs_k[(w,)] = -math.log(v_pred)
                continue
            if method == "kneser-ney":
                gamma = discount * len(entries) / z
                for w in pred_ids:
                    p = (seen[w] - discount) / z if w in seen else 0.0
                    probs_k[(w,)] = math.log(p + gamma / v_pred)
            else:
                denom = z + alpha * v_pred
                for w in pred_ids:
                    probs_k[(w,)] = math.log((seen.get(w, 0) + alpha) / denom)
            continue

        lower = NGramModel(vocab, k - 1, model.probs[:k - 1], model.bows[:k - 1])
        for h in sorted(groups):
            entries = groups[h]
            z = sum(a for _, a in entries)
            if method == "kneser-ney":
                gamma = discount * len(entries) / z
                for w, a in entries:
                    p_low = math.exp(lower.logprob_id(w, h[1:]))
                    probs_k[h + (w,)] = math.log((a - discount) / z + gamma * p_low)
            else:
                gamma = alpha * v_pred / (z + alpha * v_pred)
                for w, a in entries:
                    p_low = math.exp(lower.logprob_id(w, h[1:]))
                    probs_k[h + (w,)] = math.log((a + alpha * v_pred * p_low) / (z + alpha * v_pred))
            model.bows[k - 2][h] = math.log(gamma)
    return model


def train_ngram(sentences: Sequence[Sequence[str]], vocab: Vocabulary, order: int = 3,
                method: str = "kneser-ney", discount: float = 0.75,
                alpha: float = 1.0) -> NGramModel:
    """Count and smooth in one step from token sentences."""
    ids = [vocab.encode(s) for s in sentences]
    return train_smoothed(count_ngrams(ids, order), vocab, method, discount, alpha)


# -- ARPA ------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_arpa(model: NGramModel, path):
    vocab = model.vocab
    with open(path, "w", encoding="utf-8") as f:
        desc = " ".join(f"{k}={v}" for k, v in sorted(model.smoothing.items()))
        f.write(f"# ctxlm {desc}\n\n\\data\\\n")
        tables = []
        for k in range(model.order):
            keys = set(model.probs[k]) | set(model.bows[k])
            tables.append(sorted(keys))
            f.write(f"ngram {k + 1}={len(keys)}\n")
        for k, keys in enumerate(tables):
            f.write(f"\n\\{k + 1}-grams:\n")
            probs, bows = model.probs[k], model.bows[k]
            for g in keys:
                p = probs.get(g)
                lp = _fmt(ARPA_PLACEHOLDER) if p is None else _fmt(p / LN10)
                words = " ".join(vocab.token(i) for i in g)
                b = bows.get(g)
                if b is None:
                    f.write(f"{lp}\t{words}\n")
                else:
                    f.write(f"{lp}\t{words}\t{_fmt(b / LN10)}\n")
        f.write("\n\\end\\\n")


_SECTION = re.compile(r"^\\(\d+)-grams:$")


def read_arpa(path, vocab: Optional[Vocabulary] = None) -> NGramModel:
    """Parse an ARPA file. Without ``vocab`` one is built from the unigram
    section in file order."""
    declared: Dict[int, int] = {}
    sections: Dict[int, List[Tuple[int, float, List[str], Optional[float]]]] = {}
    smoothing = {}
    state, current = "preamble", None
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if state == "preamble":
                if line.startswith("# ctxlm"):
                    for item in line.split()[2:]:
                        key, _, val = item.partition("=")
                        try:
                            smoothing[key] = float(val)
                        except ValueError:
                            smoothing[key] = val
                if line == "\\data\\":
                    state = "data"
                continue
            if not line:
                continue
            if line == "\\end\\":
                state = "end"
                break
            m = _SECTION.match(line)
            if m:
                current = int(m.group(1))
                if current not in declared:
                    raise ArpaError(f"{path}:{lineno}: section {current}-grams not declared")
                sections[current] = []
                state = "grams"
                continue
            if state == "data":
                if not line.startswith("ngram "):
                    raise ArpaError(f"{path}:{lineno}: expected 'ngram k=count', got {line!r}")
                try:
                    k, c = line[6:].split("=")
                    declared[int(k)] = int(c)
                except ValueError:
                    raise ArpaError(f"{path}:{lineno}: malformed count line {line!r}") from None
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            try:
                if "\t" in line:
                    lp = float(parts[0])
                    words = parts[1].split()
                    bow = float(parts[2]) if len(parts) > 2 else None
                else:
                    lp = float(parts[0])
                    words = parts[1:1 + current]
                    bow = float(parts[1 + current]) if len(parts) > 1 + current else None
            except (ValueError, IndexError):
                raise ArpaError(f"{path}:{lineno}: malformed n-gram line {line!r}") from None
            if len(words) != current:
                raise ArpaError(f"{path}:{lineno}: expected {current} tokens, got {len(words)}")
            sections[current].append((lineno, lp, words, bow))
    if state != "end":
        raise ArpaError(f"{path}: missing \\end\\ marker")
    order = max(declared) if declared else 0
    for k in range(1, order + 1):
        got = len(sections.get(k, []))
        if declared.get(k) != got:
            raise ArpaError(f"{path}: ngram {k}={declared.get(k)} declared but {got} entries found")

    if vocab is None:
        vocab = Vocabulary([w[0] for _, _, w, _ in sections.get(1, [])])
    model = NGramModel(vocab, order, smoothing=smoothing)
    for k in range(1, order + 1):
        for lineno, lp, words, bow in sections[k]:
            ids = []
            for w in words:
                if w not in vocab:
                    raise ArpaError(f"{path}:{lineno}: token {w!r} not in vocabulary")
                ids.append(vocab.id(w))
            g = tuple(ids)
            if lp > ARPA_PLACEHOLDER:
                model.probs[k - 1][g] = lp * LN10
            if bow is not None:
                model.bows[k - 1][g] = bow * LN10
    return model
