"""Experiment configuration, validation, and the stages behind each CLI
subcommand. Every stage reads its inputs from and writes its artifacts to
one output directory, and leaves a manifest describing what it did."""

import copy
import hashlib
import json
import logging
import os
import platform
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import __version__, nn
from .asr_eval import (DEFAULT_GRID, MixtureScorer, NeuralScorer, NoLM, OracleScorer, first_pass_map,
                       items_for, load_nbest_jsonl, noise_from_corpus, run_eval, save_nbest_jsonl,
                       simulate_corpus)
from .corpus import (TOPIC_LABELS, Vocabulary, build_vocab, load_jsonl, save_jsonl, split,
                     synth_generate, user_sentences, validate_synth_spec)
from .mixture import (FEATURES, Featurizer, MixtureLM, WeightAdapter, adapter_loss, em_static_weights,
                      load_mixture, save_adapter, save_mixture, train_adapter, turn_perplexity)
from .neural_lm import MODES, NeuralLM, load_nlm, nlm_perplexity, save_curve, save_nlm, train_nlm
from .ngram import perplexity, read_arpa, train_ngram, write_arpa
from .presets import PRESETS
from .topic import load_classifier, save_classifier, train_topic

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "run",
    "data": {
        "corpus": None,
        "synth": {"preset": "default", "n_conversations": 2000},
        "split": [0.8, 0.1, 0.1],
    },
    "vocab": {"min_count": 1, "max_size": None},
    "ngram": {"order": 3, "method": "kneser-ney", "discount": 0.75, "alpha": 1.0},
    "mixture": {"em_tol": 1e-6, "em_max_iters": 100},
    "adapter": {
        "d_e": 16, "d_h": 32, "lr": 0.01, "epochs": 30, "batch_size": 32, "patience": 3,
        "variants": [
            {"name": "dynamic-1pass", "descriptor": ["PREV_SYS", "META"], "pass": 1, "loss": "PPL"},
            {"name": "dynamic-1pass-xent", "descriptor": ["PREV_SYS", "META"], "pass": 1, "loss": "XENT"},
            {"name": "dynamic-2pass", "descriptor": ["PREV_SYS", "META", "CURR"], "pass": 2, "loss": "PPL"},
        ],
    },
    "topic": {"kind": "TOPIC", "contextual": False, "text": "prompt", "d_e": 32, "d_h": 32,
              "lr": 0.01, "epochs": 30, "batch_size": 64, "patience": 3},
    "nlm": {
        "d_e": 32, "d_h": 64, "lr": 0.01, "epochs": 20, "batch_size": 32, "clip": 5.0, "patience": 3,
        "variants": [
            {"name": "nlm-none", "mode": "NONE", "derived": False},
            {"name": "nlm-avg", "mode": "AVG_CONCAT", "derived": False},
            {"name": "nlm-encoder", "mode": "ENCODER_INIT", "derived": False},
            {"name": "nlm-avg-derived", "mode": "AVG_CONCAT", "derived": True},
            {"name": "nlm-encoder-derived", "mode": "ENCODER_INIT", "derived": True},
        ],
    },
    "noise": {"p_sub": 0.3, "p_del": 0.03, "p_ins": 0.03, "same_topic": 0.4, "cross_topic": 0.5,
              "n": 30},
    "eval": {
        "lm_scale_grid": list(DEFAULT_GRID),
        "baseline": "static",
        "scorers": ["none", "static", "dynamic-1pass", "dynamic-1pass-xent", "dynamic-2pass",
                    "nlm-none", "nlm-avg", "nlm-encoder", "nlm-avg-derived", "nlm-encoder-derived"],
    },
}

SUBCOMMANDS = ("synth", "train-ngram", "train-mixture", "train-adapter", "train-nlm", "train-topic",
               "eval-ppl", "simulate-asr", "rescore", "report", "gradcheck")


class ValidationError(Exception):
    def __init__(self, errors):
        super().__init__("\n".join(errors))
        self.errors = list(errors)


# -- configuration ------------------------------------------------------------------

def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg, assignment: str):
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ValidationError([f"override {assignment!r} is not of the form key.path=value"])
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = path.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        if not os.path.isfile(path):
            raise ValidationError([f"config file not found: {path}"])
        try:
            with open(path, encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError([f"{path}: invalid JSON ({e})"])
        if not isinstance(user, dict):
            raise ValidationError([f"{path}: top level must be an object"])
        cfg = deep_merge(cfg, user)
    for o in overrides:
        apply_override(cfg, o)
    errors = validate_config(cfg)
    if errors:
        raise ValidationError(errors)
    return cfg


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _num(errs, d, key, where, lo=None, hi=None, integer=False, lo_open=False, hi_open=False):
    v = d.get(key)
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type:
        errs.append(f"{where}.{key} must be {'an integer' if integer else 'a number'}, got {v!r}")
        return
    if lo is not None and (v <= lo if lo_open else v < lo):
        errs.append(f"{where}.{key}={v} must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and (v >= hi if hi_open else v > hi):
        errs.append(f"{where}.{key}={v} must be {'<' if hi_open else '<='} {hi}")


def validate_config(cfg) -> List[str]:
    """Every problem with ``cfg``, so they can be reported at once."""
    errs = []
    if cfg.get("schema_version") != SCHEMA_VERSION:
        errs.append(f"schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    _num(errs, cfg, "seed", "config", lo=0, integer=True)
    if not isinstance(cfg.get("output_dir"), str) or not cfg.get("output_dir"):
        errs.append("output_dir must be a non-empty string")

    data = cfg.get("data", {})
    corpus = data.get("corpus")
    if corpus is not None and not (isinstance(corpus, str) and os.path.isfile(corpus)):
        errs.append(f"data.corpus: file not found: {corpus}")
    if corpus is None:
        synth = data.get("synth") or {}
        preset = synth.get("preset", "default")
        if preset not in PRESETS:
            errs.append(f"data.synth.preset must be one of {sorted(PRESETS)}, got {preset!r}")
        else:
            _num(errs, synth, "n_conversations", "data.synth", lo=1, integer=True)
            if not errs:
                errs += [f"data.synth: {e}" for e in validate_synth_spec(synth_spec(cfg))]
    ratios = data.get("split")
    if (not isinstance(ratios, list) or len(ratios) != 3
            or not all(isinstance(r, (int, float)) and r >= 0 for r in ratios)
            or abs(sum(ratios) - 1.0) > 1e-9):
        errs.append(f"data.split must be three non-negative fractions summing to 1, got {ratios!r}")

    voc = cfg.get("vocab", {})
    _num(errs, voc, "min_count", "vocab", lo=1, integer=True)
    if voc.get("max_size") is not None:
        _num(errs, voc, "max_size", "vocab", lo=3, integer=True)

    ng = cfg.get("ngram", {})
    _num(errs, ng, "order", "ngram", lo=1, integer=True)
    if ng.get("method") not in ("kneser-ney", "additive"):
        errs.append(f"ngram.method must be 'kneser-ney' or 'additive', got {ng.get('method')!r}")
    _num(errs, ng, "discount", "ngram", lo=0, hi=1, lo_open=True, hi_open=True)
    _num(errs, ng, "alpha", "ngram", lo=0, lo_open=True)

    mx = cfg.get("mixture", {})
    _num(errs, mx, "em_tol", "mixture", lo=0, lo_open=True)
    _num(errs, mx, "em_max_iters", "mixture", lo=1, integer=True)

    names = set()
    ad = cfg.get("adapter", {})
    for key in ("d_e", "d_h", "epochs", "batch_size", "patience"):
        _num(errs, ad, key, "adapter", lo=1, integer=True)
    _num(errs, ad, "lr", "adapter", lo=0, lo_open=True)
    for i, v in enumerate(ad.get("variants", [])):
        where = f"adapter.variants[{i}]"
        name = v.get("name")
        if not isinstance(name, str) or not name:
            errs.append(f"{where}.name must be a non-empty string")
        elif name in names or name in ("none", "static", "oracle"):
            errs.append(f"{where}.name {name!r} is reserved or duplicated")
        names.add(name)
        desc = v.get("descriptor")
        if not isinstance(desc, list) or not desc or any(f not in FEATURES for f in desc):
            errs.append(f"{where}.descriptor must be a non-empty subset of {list(FEATURES)}")
        if v.get("pass") not in (1, 2):
            errs.append(f"{where}.pass must be 1 or 2")
        elif isinstance(desc, list) and "CURR" in desc and v.get("pass") != 2:
            errs.append(f"{where}: CURR is only allowed with pass 2")
        if v.get("loss") not in ("PPL", "XENT"):
            errs.append(f"{where}.loss must be 'PPL' or 'XENT'")

    tp = cfg.get("topic", {})
    if tp.get("kind") not in ("TOPIC", "DIALOG_ACT"):
        errs.append("topic.kind must be 'TOPIC' or 'DIALOG_ACT'")
    if tp.get("text") not in ("user", "prompt"):
        errs.append("topic.text must be 'user' or 'prompt'")
    if not isinstance(tp.get("contextual"), bool):
        errs.append("topic.contextual must be true or false")
    for key in ("d_e", "d_h", "epochs", "batch_size", "patience"):
        _num(errs, tp, key, "topic", lo=1, integer=True)
    _num(errs, tp, "lr", "topic", lo=0, lo_open=True)

    nl = cfg.get("nlm", {})
    for key in ("d_e", "d_h", "epochs", "batch_size", "patience"):
        _num(errs, nl, key, "nlm", lo=1, integer=True)
    _num(errs, nl, "lr", "nlm", lo=0, lo_open=True)
    _num(errs, nl, "clip", "nlm", lo=0, lo_open=True)
    for i, v in enumerate(nl.get("variants", [])):
        where = f"nlm.variants[{i}]"
        name = v.get("name")
        if not isinstance(name, str) or not name:
            errs.append(f"{where}.name must be a non-empty string")
        elif name in names or name in ("none", "static", "oracle"):
            errs.append(f"{where}.name {name!r} is reserved or duplicated")
        names.add(name)
        if v.get("mode") not in MODES:
            errs.append(f"{where}.mode must be one of {list(MODES)}")
        if not isinstance(v.get("derived", False), bool):
            errs.append(f"{where}.derived must be true or false")
        elif v.get("derived") and v.get("mode") == "NONE":
            errs.append(f"{where}: derived features need a context mode other than NONE")

    uses_derived = any("TOPIC_DERIVED" in (v.get("descriptor") or []) for v in ad.get("variants", [])) \
        or any(v.get("derived") for v in nl.get("variants", []))
    if uses_derived and (tp.get("kind") != "TOPIC" or tp.get("text") != "prompt"):
        errs.append("derived topic features need topic.kind='TOPIC' and topic.text='prompt'")

    nz = cfg.get("noise", {})
    for key in ("p_sub", "p_del", "p_ins"):
        _num(errs, nz, key, "noise", lo=0, hi=1, hi_open=True)
    for key in ("same_topic", "cross_topic"):
        _num(errs, nz, key, "noise", lo=0, hi=1)
    if all(isinstance(nz.get(k), (int, float)) for k in ("p_sub", "p_del")) and nz["p_sub"] + nz["p_del"] >= 1:
        errs.append("noise.p_sub + noise.p_del must be < 1")
    if all(isinstance(nz.get(k), (int, float)) for k in ("same_topic", "cross_topic")) \
            and nz["same_topic"] + nz["cross_topic"] > 1:
        errs.append("noise.same_topic + noise.cross_topic must be <= 1")
    _num(errs, nz, "n", "noise", lo=1, integer=True)

    ev = cfg.get("eval", {})
    grid = ev.get("lm_scale_grid")
    if not isinstance(grid, list) or not grid or not all(
            isinstance(g, (int, float)) and not isinstance(g, bool) and g >= 0 for g in grid):
        errs.append("eval.lm_scale_grid must be a non-empty list of non-negative numbers")
    known = names | {"none", "static", "oracle"}
    scorers = ev.get("scorers")
    if not isinstance(scorers, list) or not scorers:
        errs.append("eval.scorers must be a non-empty list")
    else:
        for s in scorers:
            if s not in known:
                errs.append(f"eval.scorers: unknown scorer {s!r}")
    base = ev.get("baseline")
    if base is None:
        errs.append("eval.baseline must name a scorer")
    elif isinstance(scorers, list) and base not in scorers:
        errs.append(f"eval.baseline {base!r} is not among eval.scorers")
    return errs


def synth_spec(cfg):
    s = dict(cfg["data"]["synth"])
    preset = s.pop("preset", "default")
    n = s.pop("n_conversations", 2000)
    spec = PRESETS[preset](n)
    spec.update(s)
    return spec


# -- artifacts --------------------------------------------------------------------------

@dataclass
class Layout:
    root: str

    def p(self, *parts):
        return os.path.join(self.root, *parts)

    def data(self, part):
        return self.p("data", f"{part}.jsonl")

    @property
    def vocab(self):
        return self.p("data", "vocab.txt")

    def component(self, name):
        return self.p("components", f"{name}.arpa")

    @property
    def components_index(self):
        return self.p("components", "index.json")

    def mixture(self, name):
        return self.p("mixtures", f"{name}.json")

    def adapter(self, name):
        return self.p("adapters", f"{name}.npz")

    @property
    def topic(self):
        return self.p("topic", "classifier.npz")

    def nlm(self, name):
        return self.p("nlm", f"{name}.npz")

    def nbest(self, part):
        return self.p("nbest", f"{part}.jsonl")

    def result(self, name):
        return self.p("results", name)


class MissingArtifact(Exception):
    pass


def _require(*paths):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise MissingArtifact("missing required artifact(s): " + ", ".join(missing)
                              + " (run the producing subcommand first)")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg, subcommand, inputs, outputs, extra=None):
    lay = Layout(cfg["output_dir"])
    os.makedirs(lay.p("manifests"), exist_ok=True)
    rel = lambda q: os.path.relpath(q, lay.root)
    doc = {
        "subcommand": subcommand,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": {rel(q): _sha256(q) for q in sorted(inputs) if os.path.isfile(q)},
        "outputs": {rel(q): _sha256(q) for q in sorted(outputs) if os.path.isfile(q)},
        "versions": {"ctxlm": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        doc.update(extra)
    _dump(doc, lay.p("manifests", f"{subcommand}.json"))
    return doc


def _dump(obj, path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class Context:
    """Lazily loaded artifacts shared by the stages of one run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.lay = Layout(cfg["output_dir"])
        self._cache = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def part(self, name):
        _require(self.lay.data(name))
        return self._get(("data", name), lambda: load_jsonl(self.lay.data(name)))

    @property
    def vocab(self) -> Vocabulary:
        _require(self.lay.vocab)
        return self._get("vocab", lambda: Vocabulary.load(self.lay.vocab))

    @property
    def bots(self):
        return sorted({t.bot_id for c in self.part("train") for t in c.turns})

    def components(self):
        _require(self.lay.components_index)
        names = _load(self.lay.components_index)["components"]
        paths = [self.lay.component(n) for n in names]
        _require(*paths)
        return self._get("components", lambda: (names, [read_arpa(q, self.vocab) for q in paths]))

    def topic_classifier(self):
        _require(self.lay.topic)
        return self._get("topic", lambda: load_classifier(self.lay.topic))

    def uses_derived(self):
        ad = any("TOPIC_DERIVED" in v["descriptor"] for v in self.cfg["adapter"]["variants"])
        return ad or any(v.get("derived") for v in self.cfg["nlm"]["variants"])

    def nbests(self, part):
        _require(self.lay.nbest(part))
        return self._get(("nbest", part), lambda: load_nbest_jsonl(self.lay.nbest(part)))

    def first_pass(self):
        fp = {}
        for part in ("train", "dev", "test"):
            fp.update(first_pass_map(self.nbests(part)))
        return fp

    def mixture(self, name):
        _require(self.lay.mixture(name))
        return self._get(("mixture", name), lambda: load_mixture(self.lay.mixture(name), self.vocab))

    def nlm(self, name):
        _require(self.lay.nlm(name))
        variant = next(v for v in self.cfg["nlm"]["variants"] if v["name"] == name)
        clf = self.topic_classifier() if variant.get("derived") else None
        return self._get(("nlm", name), lambda: load_nlm(self.lay.nlm(name), clf))


# -- stages -----------------------------------------------------------------------------

def stage_synth(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    if cfg["data"]["corpus"] is not None:
        corpus = load_jsonl(cfg["data"]["corpus"])
        inputs = [cfg["data"]["corpus"]]
    else:
        corpus = synth_generate(synth_spec(cfg), cfg["seed"])
        inputs = []
    parts = split(corpus, cfg["data"]["split"], cfg["seed"])
    os.makedirs(lay.p("data"), exist_ok=True)
    outputs = []
    for name, part in zip(("train", "dev", "test"), parts):
        save_jsonl(part, lay.data(name))
        outputs.append(lay.data(name))
    vocab = build_vocab(parts[0], cfg["vocab"]["min_count"], cfg["vocab"]["max_size"])
    vocab.save(lay.vocab)
    outputs.append(lay.vocab)
    write_manifest(cfg, "synth", inputs, outputs,
                   {"sizes": {n: len(p) for n, p in zip(("train", "dev", "test"), parts)},
                    "vocab_size": len(vocab)})
    return {"train": len(parts[0]), "dev": len(parts[1]), "test": len(parts[2]), "vocab": len(vocab)}


def stage_train_ngram(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    train, vocab = ctx.part("train"), ctx.vocab
    ng = cfg["ngram"]
    present = {t.topic for c in train for t in c.turns if t.topic}
    names = [t for t in TOPIC_LABELS if t in present]
    if len(names) < 2:
        raise RuntimeError(f"need at least two gold topics in train to build components, found {names}")
    os.makedirs(lay.p("components"), exist_ok=True)
    outputs = []
    for name in names:
        sents = [t.user_utterance for c in train for t in c.turns if t.topic == name]
        model = train_ngram(sents, vocab, ng["order"], ng["method"], ng["discount"], ng["alpha"])
        write_arpa(model, lay.component(name))
        outputs.append(lay.component(name))
    _dump({"components": names}, lay.components_index)
    outputs.append(lay.components_index)
    write_manifest(cfg, "train-ngram", [lay.data("train"), lay.vocab], outputs)
    return {"components": names}


def stage_train_mixture(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    names, comps = ctx.components()
    lam, trace = em_static_weights(comps, user_sentences(ctx.part("dev")), tol=cfg["mixture"]["em_tol"],
                                   max_iters=cfg["mixture"]["em_max_iters"], return_trace=True)
    mix = MixtureLM(comps, names, weights=lam)
    save_mixture(lay.mixture("static"), mix, {n: lay.component(n) for n in names})
    write_manifest(cfg, "train-mixture", [lay.component(n) for n in names] + [lay.data("dev")],
                   [lay.mixture("static")], {"em_iterations": len(trace) - 1})
    return {"weights": dict(zip(names, map(float, lam)))}


def stage_train_topic(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    tp = cfg["topic"]
    clf, hist = train_topic(ctx.part("train"), ctx.part("dev"), ctx.vocab, tp["kind"], tp["contextual"],
                            tp["text"], tp["d_e"], tp["d_h"], tp["lr"], tp["epochs"], tp["batch_size"],
                            tp["patience"], cfg["seed"])
    os.makedirs(lay.p("topic"), exist_ok=True)
    save_classifier(clf, lay.topic)
    _dump(hist, lay.p("topic", "history.json"))
    write_manifest(cfg, "train-topic", [lay.data("train"), lay.data("dev")],
                   [lay.topic, lay.p("topic", "history.json")])
    return {"dev_accuracy": hist["best_dev_accuracy"]}


def stage_simulate_asr(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    nz = cfg["noise"]
    noise = noise_from_corpus(ctx.part("train"), nz["p_sub"], nz["p_del"], nz["p_ins"], cfg["seed"],
                              nz["same_topic"], nz["cross_topic"])
    os.makedirs(lay.p("nbest"), exist_ok=True)
    _dump(noise.to_json(), lay.p("nbest", "noise.json"))
    outputs = [lay.p("nbest", "noise.json")]
    stats = {}
    for part in ("train", "dev", "test"):
        nbs = simulate_corpus(ctx.part(part), noise, nz["n"], cfg["seed"])
        save_nbest_jsonl(nbs, lay.nbest(part))
        outputs.append(lay.nbest(part))
        present = [nb.reference_rank() is not None for nb in nbs]
        stats[part] = {"utterances": len(nbs), "reference_in_nbest": float(np.mean(present)) if nbs else 0.0}
    write_manifest(cfg, "simulate-asr", [lay.data(p) for p in ("train", "dev", "test")], outputs,
                   {"stats": stats})
    return stats


def _adapter_variant(ctx, variant, seed):
    cfg = ctx.cfg
    ad = cfg["adapter"]
    names, comps = ctx.components()
    clf = ctx.topic_classifier() if "TOPIC_DERIVED" in variant["descriptor"] else None
    fz = Featurizer(variant["descriptor"], variant["pass"], ctx.bots, clf)
    fp = ctx.first_pass() if variant["pass"] == 2 else None
    adapter = WeightAdapter(ctx.vocab, fz, len(comps), ad["d_e"], ad["d_h"], seed)
    adapter, hist = train_adapter(adapter, comps, ctx.part("train"), ctx.part("dev"), variant["loss"],
                                  ad["lr"], ad["epochs"], ad["batch_size"], ad["patience"], seed, fp)
    return MixtureLM(comps, names, adapter=adapter), hist


def stage_train_adapter(ctx: Context, only=None):
    cfg, lay = ctx.cfg, ctx.lay
    names, _ = ctx.components()
    summary, outputs = {}, []
    inputs = [lay.data("train"), lay.data("dev")] + [lay.component(n) for n in names]
    for v in cfg["adapter"]["variants"]:
        if only and v["name"] not in only:
            continue
        mix, hist = _adapter_variant(ctx, v, cfg["seed"])
        os.makedirs(lay.p("adapters"), exist_ok=True)
        save_adapter(mix.adapter, lay.adapter(v["name"]))
        hist_path = lay.p("adapters", f"{v['name']}.history.json")
        _dump(hist, hist_path)
        clf_path = lay.topic if "TOPIC_DERIVED" in v["descriptor"] else None
        save_mixture(lay.mixture(v["name"]), mix, {n: lay.component(n) for n in names},
                     lay.adapter(v["name"]), clf_path)
        outputs += [lay.adapter(v["name"]), hist_path, lay.mixture(v["name"])]
        summary[v["name"]] = hist["best_dev_perplexity"]
    write_manifest(cfg, "train-adapter", inputs, outputs)
    return {"best_dev_perplexity": summary}


def stage_train_nlm(ctx: Context, only=None):
    cfg, lay = ctx.cfg, ctx.lay
    nl = cfg["nlm"]
    summary, outputs = {}, []
    for v in nl["variants"]:
        if only and v["name"] not in only:
            continue
        clf = ctx.topic_classifier() if v.get("derived") else None
        nlm = NeuralLM(ctx.vocab, v["mode"], v.get("derived", False), nl["d_e"], nl["d_h"], cfg["seed"], clf)
        nlm, curve = train_nlm(nlm, ctx.part("train"), ctx.part("dev"), nl["lr"], nl["epochs"],
                               nl["batch_size"], nl["clip"], nl["patience"], cfg["seed"])
        os.makedirs(lay.p("nlm"), exist_ok=True)
        save_nlm(nlm, lay.nlm(v["name"]))
        curve_path = lay.p("nlm", f"{v['name']}.curve.json")
        save_curve(curve, curve_path)
        outputs += [lay.nlm(v["name"]), curve_path]
        summary[v["name"]] = min(e["dev_perplexity"] for e in curve)
    write_manifest(cfg, "train-nlm", [lay.data("train"), lay.data("dev")], outputs)
    return {"best_dev_perplexity": summary}


def _lm_for(ctx, name):
    """('mixture' | 'nlm', model) for a named LM."""
    if name == "static" or any(v["name"] == name for v in ctx.cfg["adapter"]["variants"]):
        return "mixture", ctx.mixture(name)
    return "nlm", ctx.nlm(name)


def stage_eval_ppl(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    names, comps = ctx.components()
    out = {"components": {}, "models": {}}
    needs_fp = any(v["pass"] == 2 for v in cfg["adapter"]["variants"])
    fp = ctx.first_pass() if needs_fp else None
    for part in ("dev", "test"):
        sents = user_sentences(ctx.part(part))
        for n, m in zip(names, comps):
            out["components"].setdefault(n, {})[part] = perplexity(m, sents)
    lms = ["static"] + [v["name"] for v in cfg["adapter"]["variants"]] + [v["name"] for v in cfg["nlm"]["variants"]]
    for name in lms:
        kind, model = _lm_for(ctx, name)
        for part in ("dev", "test"):
            corpus = ctx.part(part)
            ppl = turn_perplexity(model, corpus, fp) if kind == "mixture" else nlm_perplexity(model, corpus)
            out["models"].setdefault(name, {})[part] = ppl
    _dump(out, lay.result("perplexity.json"))
    write_manifest(cfg, "eval-ppl", [], [lay.result("perplexity.json")])
    return out


def _scorer(ctx, name):
    if name == "none":
        return NoLM()
    if name == "oracle":
        return OracleScorer()
    kind, model = _lm_for(ctx, name)
    return MixtureScorer(model, name) if kind == "mixture" else NeuralScorer(model, name)


def stage_rescore(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    ev = cfg["eval"]
    dev_items = items_for(ctx.part("dev"), ctx.nbests("dev"))
    test_items = items_for(ctx.part("test"), ctx.nbests("test"))
    scorers = [_scorer(ctx, s) for s in ev["scorers"]]
    reports = run_eval(dev_items, test_items, scorers, ev["lm_scale_grid"], ev["baseline"],
                       test_corpus=ctx.part("test"))
    doc = {"baseline": ev["baseline"], "reports": [r.to_json() for r in reports]}
    _dump(doc, lay.result("eval.json"))
    with open(lay.result("eval.txt"), "w", encoding="utf-8") as f:
        f.write(eval_table(doc))
    write_manifest(cfg, "rescore", [lay.nbest("dev"), lay.nbest("test")],
                   [lay.result("eval.json"), lay.result("eval.txt")])
    return doc


def _fmt(x, spec):
    return "-" if x is None else format(x, spec)


def eval_table(doc) -> str:
    """Aligned plain-text table of absolute metrics."""
    reports = doc["reports"]
    topics = sorted({t for r in reports for t in r["eer_per_topic"]})
    head = ["scorer", "lm_scale", "ppl", "WER", "EER"] + [f"EER[{t}]" for t in topics]
    rows = [[r["name"], _fmt(r["lm_scale"], ".1f"), _fmt(r["perplexity"], ".3f"), _fmt(r["wer"], ".4f"),
             _fmt(r["eer"], ".4f")] + [_fmt(r["eer_per_topic"].get(t), ".4f") for t in topics]
            for r in reports]
    return _table(head, rows)


def _table(head, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def _rel(x, base):
    if x is None or base is None or base == 0:
        return None
    return 100.0 * (x - base) / base


def build_report(doc, baseline=None):
    """Rows of perplexity plus WER/EER relative to the baseline (in %).

    The baseline row carries absolute values with dashes for relatives.
    """
    baseline = baseline or doc.get("baseline")
    if not baseline:
        raise ValueError("no baseline scorer designated")
    base = next((r for r in doc["reports"] if r["name"] == baseline), None)
    if base is None:
        raise ValueError(f"baseline {baseline!r} has no evaluation report")
    rows = []
    for r in doc["reports"]:
        is_base = r["name"] == baseline
        rows.append({
            "name": r["name"], "baseline": is_base, "perplexity": r["perplexity"],
            "wer": r["wer"], "eer": r["eer"],
            "relative_wer": None if is_base else _rel(r["wer"], base["wer"]),
            "relative_eer": None if is_base else _rel(r["eer"], base["eer"]),
        })
    return rows


def report_table(rows) -> str:
    head = ["scorer", "Perplexity", "WER", "EER", "Rel. WER (%)", "Rel. EER (%)"]
    body = [[r["name"] + (" (baseline)" if r["baseline"] else ""), _fmt(r["perplexity"], ".2f"),
             _fmt(r["wer"], ".4f"), _fmt(r["eer"], ".4f"), _fmt(r["relative_wer"], "+.2f"),
             _fmt(r["relative_eer"], "+.2f")] for r in rows]
    return _table(head, body)


def stage_report(ctx: Context):
    cfg, lay = ctx.cfg, ctx.lay
    _require(lay.result("eval.json"))
    doc = _load(lay.result("eval.json"))
    rows = build_report(doc, cfg["eval"]["baseline"])
    _dump({"baseline": cfg["eval"]["baseline"], "rows": rows}, lay.result("report.json"))
    text = report_table(rows)
    with open(lay.result("report.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    write_manifest(cfg, "report", [lay.result("eval.json")], [lay.result("report.json"), lay.result("report.txt")])
    return text


# -- gradient checks ----------------------------------------------------------------------

def gradient_checks(seeds=(0, 1, 2)) -> Dict[str, float]:
    """Worst central-difference relative error per layer/model over ``seeds``."""
    from .corpus import Conversation, Turn
    from .topic import LabelInventory, TopicClassifier, bag_matrix

    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    vocab = Vocabulary(["a", "b", "c", "d"])
    conv = Conversation("g", (Turn(0, ("a", "b"), ("c", "d", "a"), {"bot_id": "x"}),
                              Turn(1, ("d",), ("b",), {"bot_id": "y"}),
                              Turn(2, (), ("a", "c"), {"bot_id": "x"})))
    for seed in seeds:
        rng = np.random.default_rng(seed)

        st = nn.ParamStore(seed)
        st.add("W", (4, 3))
        st.add("b", (4,))
        x = rng.normal(size=(5, 3))
        r = rng.normal(size=(5, 4))

        def affine_loss():
            y, cache = nn.affine_forward(st["W"], st["b"], x)
            dW, db, _ = nn.affine_backward(cache, r)
            st.grads["W"][...] = dW
            st.grads["b"][...] = db
            return float(np.sum(y * r))
        note("affine", nn.grad_check(affine_loss, st))

        for kind in ("tanh", "sigmoid"):
            sx = nn.ParamStore(seed)
            sx.add("x", (6,), rng.normal(size=6))
            w = rng.normal(size=6)

            def nl_loss():
                y, cache = nn.nonlinear_forward(kind, sx["x"])
                sx.grads["x"][...] = nn.nonlinear_backward(cache, w)
                return float(np.sum(y * w))
            note(kind, nn.grad_check(nl_loss, sx))

        sl = nn.ParamStore(seed)
        sl.add("z", (3, 5), rng.normal(size=(3, 5)))
        tgt = nn.softmax(rng.normal(size=(3, 5)))

        def xent_loss():
            loss, d = nn.softmax_xent(sl["z"], tgt)
            sl.grads["z"][...] = d
            return loss
        note("softmax_xent", nn.grad_check(xent_loss, sl))

        k = 2
        fz = Featurizer(["PREV_USER", "PREV_SYS", "META"], 1, ["x", "y"])
        comps = [train_ngram([("a", "c"), ("c", "d", "a")], vocab, 2, "additive", alpha=0.5),
                 train_ngram([("b",), ("d", "b", "b")], vocab, 2, "additive", alpha=0.5)]
        from .mixture import build_turnset
        for loss in ("PPL", "XENT"):
            ad = WeightAdapter(vocab, fz, k, d_e=3, d_h=4, seed=seed)
            ts = build_turnset(comps, [conv], fz, with_targets=(loss == "XENT"))

            def ad_loss():
                ad.store.zero_grad()
                return adapter_loss(ad, ts, loss)
            note(f"adapter[{loss}]", nn.grad_check(ad_loss, ad.store))

        for mode, derived in (("NONE", False), ("AVG_CONCAT", False), ("ENCODER_INIT", False),
                              ("AVG_CONCAT", True), ("ENCODER_INIT", True)):
            m = NeuralLM(vocab, mode, derived, d_e=3, d_h=8, seed=seed)
            topics = [nn.softmax(rng.normal(size=len(TOPIC_LABELS))) for _ in range(3)] if derived else None
            batch = m.make_batch([["c", "d", "a"], ["b"], []], [["a", "b"], [], ["d", "c", "a"]], topics)

            def nlm_loss():
                m.store.zero_grad()
                return m.loss(batch)
            note(f"nlm[{mode}{'+derived' if derived else ''}]", nn.grad_check(nlm_loss, m.store))

        for contextual in (False, True):
            clf = TopicClassifier(vocab, LabelInventory.of("TOPIC"), contextual, d_e=3, d_h=4, seed=seed)
            A = bag_matrix([["a", "b"], ["c"], ["d", "d", "a"]], vocab)
            C = bag_matrix([["c"], [], ["a", "b"]], vocab)
            y = np.array([0, 3, 7])

            def clf_loss():
                clf.store.zero_grad()
                return clf.loss(A, C, y)
            note(f"dan[{'contextual' if contextual else 'plain'}]", nn.grad_check(clf_loss, clf.store))
    return worst


def stage_gradcheck(ctx: Context = None):
    return gradient_checks()


STAGES = {
    "synth": stage_synth,
    "train-ngram": stage_train_ngram,
    "train-mixture": stage_train_mixture,
    "train-topic": stage_train_topic,
    "simulate-asr": stage_simulate_asr,
    "train-adapter": stage_train_adapter,
    "train-nlm": stage_train_nlm,
    "eval-ppl": stage_eval_ppl,
    "rescore": stage_rescore,
    "report": stage_report,
    "gradcheck": stage_gradcheck,
}

# order in which a full run executes the stages
PIPELINE = ("synth", "train-ngram", "train-mixture", "train-topic", "simulate-asr", "train-adapter",
            "train-nlm", "eval-ppl", "rescore", "report")


def run_pipeline(cfg, stages=PIPELINE):
    ctx = Context(cfg)
    return {name: STAGES[name](ctx) for name in stages}
