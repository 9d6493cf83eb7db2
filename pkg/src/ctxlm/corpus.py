"""Conversation data model, tokenization, vocabulary, JSONL I/O and a
synthetic topic-switching dialog generator."""

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (SOS, EOS, UNK)
SOS_ID, EOS_ID, UNK_ID = 0, 1, 2


def _load_inventories():
    raw = json.loads(resources.files("ctxlm").joinpath("data/labels.json").read_text())
    return {kind: tuple(e["label"] for e in entries) for kind, entries in raw.items()}


INVENTORIES = _load_inventories()
TOPIC_LABELS: Tuple[str, ...] = INVENTORIES["TOPIC"]
ACT_LABELS: Tuple[str, ...] = INVENTORIES["DIALOG_ACT"]


class CorpusError(ValueError):
    pass


class ConfigError(ValueError):
    pass


_STRIP = re.compile(r"[^\w\s']|_")


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation (keeping internal apostrophes), split."""
    text = _STRIP.sub("", text.lower())
    out = []
    for tok in text.split():
        tok = tok.strip("'")
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Bijection between tokens and dense integer ids.

    Ids 0, 1, 2 are always ``<s>``, ``</s>`` and ``<unk>``.
    """

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self):
        return f"Vocabulary({len(self)} entries)"

    @property
    def n_pred(self) -> int:
        """Size of the predictable set (everything except ``<s>``)."""
        return len(self.itos) - 1

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        get = self.stoi.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:3]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved markers")
        return cls(itos[3:])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.itos:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_list([line.rstrip("\n") for line in f if line.strip()])


@dataclass(frozen=True)
class Turn:
    index: int
    system_prompt: Tuple[str, ...]
    user_utterance: Tuple[str, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)
    entity_tags: Optional[Tuple[Optional[str], ...]] = None

    def __post_init__(self):
        if self.entity_tags is not None:
            if len(self.entity_tags) != len(self.user_utterance):
                raise CorpusError(
                    f"turn {self.index}: {len(self.entity_tags)} tags for "
                    f"{len(self.user_utterance)} tokens")
            for tag in self.entity_tags:
                if tag is not None and tag not in TOPIC_LABELS:
                    raise CorpusError(f"turn {self.index}: unknown tag {tag!r}")

    @property
    def bot_id(self) -> str:
        return self.metadata.get("bot_id", "")

    @property
    def topic(self) -> Optional[str]:
        return self.metadata.get("topic")


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: Tuple[Turn, ...]

    def __post_init__(self):
        for i, t in enumerate(self.turns):
            if t.index != i:
                raise CorpusError(f"conversation {self.id}: turn indices not consecutive")

    def __len__(self):
        return len(self.turns)


def user_sentences(corpus: Sequence[Conversation]) -> List[Tuple[str, ...]]:
    return [t.user_utterance for c in corpus for t in c.turns]


def build_vocab(corpus: Sequence[Conversation], min_count: int = 1,
                max_size: Optional[int] = None) -> Vocabulary:
    """Frequency-thresholded vocabulary over prompts and user utterances.

    ``max_size`` bounds the total size, reserved markers included.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for conv in corpus:
        for turn in conv.turns:
            counts.update(turn.system_prompt)
            counts.update(turn.user_utterance)
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max(0, max_size - len(RESERVED))]
    return Vocabulary(kept)


# -- JSONL ------------------------------------------------------------------

def _parse_conversation(obj, lineno):
    try:
        cid = str(obj["id"])
        raw_turns = obj["turns"]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"line {lineno}: missing field {exc}") from None
    turns = []
    for i, rt in enumerate(raw_turns):
        meta = {str(k): str(v) for k, v in (rt.get("meta") or {}).items() if v is not None}
        if "topic" in meta and meta["topic"] not in TOPIC_LABELS:
            raise CorpusError(f"line {lineno}: conversation {cid}: unknown topic {meta['topic']!r}")
        if "act" in meta and meta["act"] not in ACT_LABELS:
            raise CorpusError(f"line {lineno}: conversation {cid}: unknown act {meta['act']!r}")
        user = tuple(tokenize(rt.get("user", "")))
        tags = rt.get("tags")
        if tags is not None:
            if len(tags) != len(user):
                raise CorpusError(
                    f"conversation {cid}, turn {i}: {len(tags)} tags for {len(user)} user tokens")
            tags = tuple(tags)
        try:
            turns.append(Turn(i, tuple(tokenize(rt.get("sys", ""))), user, meta, tags))
        except CorpusError as exc:
            raise CorpusError(f"conversation {cid}: {exc}") from None
    return Conversation(cid, tuple(turns))


def load_jsonl(path) -> List[Conversation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(_parse_conversation(obj, lineno))
    return out


def conversation_to_json(conv: Conversation) -> dict:
    turns = []
    for t in conv.turns:
        rt = {"sys": " ".join(t.system_prompt), "user": " ".join(t.user_utterance),
              "meta": dict(t.metadata)}
        if t.entity_tags is not None:
            rt["tags"] = list(t.entity_tags)
        turns.append(rt)
    return {"id": conv.id, "turns": turns}


def save_jsonl(corpus: Sequence[Conversation], path):
    with open(path, "w", encoding="utf-8") as f:
        for conv in corpus:
            f.write(json.dumps(conversation_to_json(conv), sort_keys=True) + "\n")


# -- splitting ----------------------------------------------------------------

def split(corpus: Sequence[Conversation], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition conversations into (train, dev, test).

    Part sizes use largest-remainder rounding; each part keeps input order.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(corpus)
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in sizes:
        idx = sorted(perm[start:start + size].tolist())
        parts.append([corpus[i] for i in idx])
        start += size
    return tuple(parts)


# -- synthetic generator ------------------------------------------------------

ENTITY_SLOT = "@E"
WORD_SLOT = "@U"


class _Chain:
    """Compiled bigram chain with entity / topical-word slots."""

    def __init__(self, bigram, where):
        if SOS not in bigram:
            raise ConfigError(f"{where}: bigram has no '{SOS}' state")
        self.states = {}
        for prev, nexts in bigram.items():
            syms = list(nexts)
            w = np.array([float(nexts[s]) for s in syms])
            if len(syms) == 0 or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError(f"{where}: bigram row {prev!r} has no positive weight")
            self.states[prev] = (syms, np.cumsum(w / w.sum()))
        for prev, (syms, _) in self.states.items():
            for s in syms:
                if s != EOS and s not in self.states:
                    raise ConfigError(f"{where}: bigram state {s!r} has no outgoing row")

    def walk(self, rng, max_len):
        out, state = [], SOS
        while len(out) < max_len:
            syms, cum = self.states[state]
            state = syms[min(int(np.searchsorted(cum, rng.random(), side="right")), len(syms) - 1)]
            if state == EOS:
                break
            out.append(state)
        return out


def _compile_dist(weights, where):
    if not weights:
        return None
    items = list(weights)
    w = np.array([float(weights[k]) for k in items])
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigError(f"{where}: weights must be non-negative with positive sum")
    return items, np.cumsum(w / w.sum())


def _draw(rng, dist):
    items, cum = dist
    return items[min(int(np.searchsorted(cum, rng.random(), side="right")), len(items) - 1)]


def validate_synth_spec(spec) -> List[str]:
    """Return every problem found in a generator config (empty if valid)."""
    errs = []
    topics = spec.get("topics") or {}
    if len(topics) < 2:
        errs.append("generator config must declare at least 2 topics")
    for name, t in topics.items():
        if name not in TOPIC_LABELS:
            errs.append(f"topic {name!r} is not in the topic inventory")
        if not t.get("prompts"):
            errs.append(f"topic {name}: no prompt templates")
        if not t.get("bigram"):
            errs.append(f"topic {name}: no user-reply bigram distribution")
        kw = t.get("keyword")
        if kw:
            for p in t.get("prompts", []):
                if kw not in tokenize(p.replace("{entity}", "")):
                    errs.append(f"topic {name}: prompt {p!r} does not name keyword {kw!r}")
    k = len(topics)
    T = np.asarray(spec.get("transitions", []), dtype=float)
    if T.shape != (k, k):
        errs.append(f"transition matrix must be {k}x{k}, got shape {T.shape}")
    elif np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-9):
        errs.append("transition matrix rows must be non-negative and sum to 1 +- 1e-9")
    init = spec.get("initial")
    if init is not None:
        rows = init.values() if isinstance(init, dict) else [init]
        for row in rows:
            row = np.asarray(row, dtype=float)
            if row.shape != (k,) or np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
                errs.append("initial topic distribution must be a simplex point over topics")
    for key in ("neutral_prob", "drift_prob", "drift_mix"):
        v = float(spec.get(key, 0.0))
        if not 0.0 <= v <= 1.0:
            errs.append(f"{key} must lie in [0, 1]")
    lo, hi = spec.get("turns", (1, 1))
    if not 1 <= lo <= hi:
        errs.append("turns must be [min, max] with 1 <= min <= max")
    if int(spec.get("n_conversations", 0)) < 0:
        errs.append("n_conversations must be >= 0")
    return errs


def synth_generate(spec, seed: int) -> List[Conversation]:
    """Sample a deterministic synthetic corpus from a generator config.

    Each turn's topic follows a Markov chain over ``spec['topics']``; the
    system prompt is a template of the current topic, and the user reply is
    a walk over that topic's bigram chain where ``@E`` draws an entity and
    ``@U`` a topical word. With probability ``neutral_prob`` the reply comes
    from the topic-free ``neutral`` chain instead; with ``drift_prob`` a
    second topic is picked for the turn and each entity or topical-word slot
    draws from it with probability ``drift_mix``.
    """
    errs = validate_synth_spec(spec)
    if errs:
        raise ConfigError("; ".join(errs))
    rng = np.random.default_rng(seed)
    names = list(spec["topics"])
    k = len(names)
    T = np.asarray(spec["transitions"], dtype=float)
    T_cum = np.cumsum(T, axis=1)
    bots = list(spec.get("bots", ["bot0"]))
    init = spec.get("initial")
    if init is None:
        init_cum = {b: np.cumsum(np.full(k, 1.0 / k)) for b in bots}
    elif isinstance(init, dict):
        init_cum = {b: np.cumsum(np.asarray(init[b], dtype=float)) for b in bots}
    else:
        init_cum = {b: np.cumsum(np.asarray(init, dtype=float)) for b in bots}

    compiled = []
    for name in names:
        t = spec["topics"][name]
        compiled.append({
            "prompts": list(t["prompts"]),
            "chain": _Chain(t["bigram"], f"topic {name}"),
            "entities": _compile_dist(t.get("entities"), f"topic {name} entities"),
            "words": _compile_dist(t.get("unigram"), f"topic {name} unigram"),
        })
    neutral = spec.get("neutral")
    neutral_chain = _Chain(neutral["bigram"], "neutral") if neutral else None
    neutral_words = _compile_dist(neutral.get("unigram"), "neutral unigram") if neutral else None
    neutral_prob = float(spec.get("neutral_prob", 0.0)) if neutral else 0.0
    drift_prob = float(spec.get("drift_prob", 0.0))
    drift_mix = float(spec.get("drift_mix", 0.5))
    lo, hi = spec.get("turns", (1, 1))
    max_len = int(spec.get("max_reply_len", 20))

    def pick(cum):
        return min(int(np.searchsorted(cum, rng.random(), side="right")), k - 1)

    corpus = []
    for ci in range(int(spec.get("n_conversations", 0))):
        bot = bots[int(rng.integers(len(bots)))]
        n_turns = int(rng.integers(lo, hi + 1))
        turns, z = [], None
        for ti in range(n_turns):
            z = pick(init_cum[bot]) if z is None else pick(T_cum[z])
            top = compiled[z]
            template = top["prompts"][int(rng.integers(len(top["prompts"])))]
            if "{entity}" in template and top["entities"]:
                template = template.replace("{entity}", _draw(rng, top["entities"]))
            prompt = tuple(tokenize(template))

            if neutral_chain is not None and rng.random() < neutral_prob:
                chain, words, ent_sources = neutral_chain, neutral_words, None
            else:
                chain, words = top["chain"], top["words"]
                ent_sources = [z]
                if k > 1 and rng.random() < drift_prob:
                    other = int(rng.integers(k - 1))
                    ent_sources.append(other if other < z else other + 1)
            toks, tags = [], []
            for sym in chain.walk(rng, max_len):
                src = None
                if sym in (ENTITY_SLOT, WORD_SLOT) and ent_sources:
                    src = ent_sources[0]
                    if len(ent_sources) > 1 and rng.random() < drift_mix:
                        src = ent_sources[1]
                if sym == ENTITY_SLOT and src is not None:
                    if compiled[src]["entities"] is None:
                        continue
                    word, tag = _draw(rng, compiled[src]["entities"]), names[src]
                elif sym == WORD_SLOT and src is not None and compiled[src]["words"] is not None:
                    word, tag = _draw(rng, compiled[src]["words"]), None
                elif sym == WORD_SLOT and words is not None:
                    word, tag = _draw(rng, words), None
                elif sym in (ENTITY_SLOT, WORD_SLOT):
                    continue
                else:
                    word, tag = sym, None
                for piece in tokenize(word):
                    toks.append(piece)
                    tags.append(tag)
            meta = {"bot_id": bot, "topic": names[z]}
            turns.append(Turn(ti, prompt, tuple(toks), meta, tuple(tags)))
        corpus.append(Conversation(f"synth-{ci:05d}", tuple(turns)))
    return corpus
