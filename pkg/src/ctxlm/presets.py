"""Built-in generator configs for the synthetic dialog corpus."""

import copy
from collections import defaultdict

from .corpus import EOS, SOS

# Reply frames: "@E" is an entity slot, "@U" a topical word slot.
_TOPICAL_FRAMES = [
    ("i love @E", 3), ("i really like @E", 2), ("my favorite @U is @E", 3),
    ("i think @E is great", 2), ("have you heard about @E", 1),
    ("the @U with @E was amazing", 2), ("i like the @U", 2),
    ("what do you think about @E", 1), ("@E is the best @U", 2),
    ("yes i like @E and @E", 1), ("i saw @E last week", 1),
    ("tell me about @E", 1), ("the new @U is really good", 1),
    ("i do not like @E", 1), ("my friend loves @E", 1),
]

_NEUTRAL_FRAMES = [
    ("yeah", 2), ("yes", 2), ("no", 1), ("i don't know", 2), ("okay", 2),
    ("sure why not", 1), ("that's cool", 2), ("tell me more", 1),
    ("what about you", 1), ("i guess so", 1), ("not really", 1),
    ("maybe", 1), ("that sounds fun", 1), ("okay tell me more", 1),
]

_TOPICS = {
    "Entertainment_Music": {
        "keyword": "music",
        "prompts": [
            "let's talk about music", "do you like music",
            "what kind of music do you listen to",
            "have you heard the new music by {entity}",
            "i love music what about you", "who is your favorite music artist",
        ],
        "verbs": {"i listen to @E": 3, "i play @U music": 1, "i sing @E songs": 1},
        "unigram": {"song": 5, "album": 4, "band": 4, "concert": 3, "singer": 3,
                    "guitar": 2, "track": 2, "lyrics": 2, "playlist": 2, "tour": 1,
                    "drummer": 1, "melody": 1, "chorus": 1, "record": 1},
        "entities": ["beatles", "madonna", "beyonce", "drake", "adele", "coldplay",
                     "metallica", "rihanna", "eminem", "nirvana", "queen", "abba",
                     "shakira", "prince", "radiohead", "oasis", "bieber", "rush",
                     "u2", "sting", "bowie", "gaga", "kanye", "elvis", "mozart",
                     "beethoven", "nickelback", "blondie", "outkast", "weezer"],
    },
    "Entertainment_Movies": {
        "keyword": "movies",
        "prompts": [
            "let's talk about movies", "do you like movies",
            "what movies have you seen lately",
            "have you seen any movies with {entity}",
            "i love movies what about you", "what are your favorite movies",
        ],
        "verbs": {"i watched @E": 3, "i rented @E": 1, "i cried at @E": 1},
        "unigram": {"film": 5, "actor": 4, "scene": 4, "director": 3, "sequel": 3,
                    "trailer": 2, "cinema": 2, "plot": 2, "character": 2, "ending": 1,
                    "screenplay": 1, "premiere": 1, "remake": 1, "villain": 1},
        "entities": ["godfather", "titanic", "avatar", "inception", "jaws", "alien",
                     "matrix", "gladiator", "casablanca", "frozen", "shrek", "rocky",
                     "psycho", "vertigo", "amelie", "memento", "batman", "superman",
                     "spielberg", "tarantino", "scorsese", "hitchcock", "dicaprio",
                     "streep", "hanks", "pacino", "nolan", "kubrick", "bond", "jumanji"],
    },
    "Sports": {
        "keyword": "sports",
        "prompts": [
            "let's talk about sports", "do you like sports",
            "what sports do you follow",
            "did you see the sports news about {entity}",
            "i love sports what about you", "who is your favorite sports team",
        ],
        "verbs": {"i cheer for @E": 3, "i play @U": 1, "i bet on @E": 1},
        "unigram": {"game": 5, "team": 4, "match": 4, "coach": 3, "season": 3,
                    "player": 2, "goal": 2, "league": 2, "stadium": 2, "score": 1,
                    "playoffs": 1, "championship": 1, "referee": 1, "tournament": 1},
        "entities": ["lebron", "messi", "ronaldo", "federer", "nadal", "serena",
                     "bolt", "jordan", "brady", "yankees", "lakers", "patriots",
                     "arsenal", "chelsea", "barcelona", "madrid", "celtics", "warriors",
                     "cowboys", "packers", "dodgers", "woods", "phelps", "biles",
                     "curry", "kobe", "gretzky", "pele", "ali", "tyson"],
    },
}


def _frames_to_bigram(frames):
    """Count state transitions over weighted frames."""
    big = defaultdict(lambda: defaultdict(float))
    for text, w in frames:
        toks = [SOS] + text.split() + [EOS]
        for a, b in zip(toks, toks[1:]):
            big[a][b] += w
    return {a: dict(nexts) for a, nexts in big.items()}


def _zipf(words, s=1.0):
    return {w: round(1.0 / (r + 1) ** s, 6) for r, w in enumerate(words)}


def default_synth_spec(n_conversations=2000, turns=(3, 8), neutral_prob=0.15,
                       drift_prob=0.15, drift_mix=0.8, stay_prob=0.6,
                       topics=None, bots=("bot_a", "bot_b")):
    """Three-topic generator config: music, movies, sports.

    Topics persist with probability ``stay_prob`` and otherwise move
    uniformly to another topic. Each bot has its own initial-topic bias so
    the bot id is weakly informative.
    """
    names = list(topics or _TOPICS)
    k = len(names)
    trans = [[stay_prob if i == j else (1.0 - stay_prob) / (k - 1) for j in range(k)]
             for i in range(k)]
    # rows must sum to 1 to within 1e-9 after float rounding
    for row in trans:
        row[-1] = 1.0 - sum(row[:-1])
    spec_topics = {}
    for name in names:
        src = _TOPICS[name]
        frames = _TOPICAL_FRAMES + list(src["verbs"].items())
        spec_topics[name] = {
            "keyword": src["keyword"],
            "prompts": list(src["prompts"]),
            "bigram": _frames_to_bigram(frames),
            "unigram": dict(src["unigram"]),
            "entities": _zipf(src["entities"], 0.8),
        }
    initial = {}
    for bi, bot in enumerate(bots):
        row = [1.0] * k
        row[bi % k] = 2.0
        total = sum(row)
        row = [r / total for r in row]
        row[-1] = 1.0 - sum(row[:-1])
        initial[bot] = row
    return copy.deepcopy({
        "topics": spec_topics,
        "neutral": {"bigram": _frames_to_bigram(_NEUTRAL_FRAMES)},
        "transitions": trans,
        "initial": initial,
        "bots": list(bots),
        "n_conversations": n_conversations,
        "turns": list(turns),
        "max_reply_len": 20,
        "neutral_prob": neutral_prob,
        "drift_prob": drift_prob,
        "drift_mix": drift_mix,
    })


def context_carry_spec(n_conversations=2000, turns=(3, 8)):
    """Half of all user replies are topic-neutral, so only the surrounding
    turns reveal the topic."""
    return default_synth_spec(n_conversations, turns, neutral_prob=0.5, drift_prob=0.0)


PRESETS = {"default": default_synth_spec, "context_carry": context_carry_spec}
