"""Procedural text generators for the bundled demo corpora.

Three small "languages" share English function words and sentence grammars
but differ in register, vocabulary weights and structure:

* ``general``: a broad mixture (encyclopedic prose, some stories, some forum
  chatter) used to pretrain the base model.
* ``books``: story narration interleaved with dialog; compared to the stories
  inside ``general`` it has more dialog, a skewed cast of characters and
  puts the speaker after the quote.
* ``reddit``: lowercase forum chatter dominated by links, usernames and numbers.

Output is deterministic given the seed.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NAMES = ["Mara", "Tomas", "Elena", "Jonah", "Ivy", "Caleb", "Nora", "Felix", "Ruth", "Owen", "Lena", "Silas"]
SCHOLARS = ["Adams", "Bauer", "Chen", "Duval", "Evans", "Fischer", "Garcia", "Hale"]
PLACES = ["Northfield", "the coast", "the valley", "Eastport", "the capital", "the old quarter", "Riverton"]
ORGS = ["council", "university", "railway company", "museum", "city", "guild", "navy"]
GEN_NOUNS = ["bridge", "river", "harbor", "library", "market", "tower", "canal", "school", "factory",
             "church", "road", "garden", "station", "castle", "mill", "theater", "hospital", "farm"]
GEN_NOUNS_PL = ["farmers", "merchants", "scholars", "workers", "sailors", "students", "families", "traders"]
GEN_ADJ = ["large", "old", "northern", "famous", "modern", "public", "ancient", "small", "central", "new"]
GEN_VERBED = ["built", "opened", "restored", "expanded", "replaced", "founded", "closed", "designed"]
GEN_THINGS = ["wheat", "cotton", "timber", "salt", "wool", "grain", "iron", "coal", "fish", "silk"]
SEASONS = ["spring", "summer", "autumn", "winter"]

STORY_NOUNS = ["door", "window", "kitchen", "road", "table", "stairs", "car", "room", "hallway", "fire", "house", "gate"]
STORY_VERBED = ["walked to", "looked at", "ran toward", "stared at", "turned from", "stepped into", "leaned against"]
FILLERS = ["...", "--", "well,", "oh,"]
FEELINGS = ["tired", "afraid", "angry", "calm", "cold", "sick", "happy", "lost", "sorry", "ready"]
UTTERANCES = [
    "We have to go", "I don't know", "Are you sure", "No, it's not", "Come here", "Where is {name}",
    "It's over", "I can't do this", "Look at me", "You said you would come", "We're going to die",
    "Aren't we", "Did your dad leave", "Yes", "No", "Why", "Tell me the truth", "It's a {noun}, {name}",
    "I'm {feel}", "Are you {feel}", "Stay with me", "Don't go", "What happened", "Get in the car",
    "I told you", "Not now", "Open the {noun}", "Let me in", "Thank you", "Where were you",
]

WEB_USERS = ["u/throwaway", "u/catlover", "u/gamer", "u/bot", "u/mod", "u/anon"]
WEB_ADJ = ["worst", "best", "dumbest", "weirdest", "funniest", "saddest", "most cursed"]
WEB_THINGS = ["patch", "take", "meme", "thread", "build", "update", "post", "server", "game"]
WEB_OPINIONS = ["this is so true", "nah bro", "big if true", "same lmao", "hard disagree", "ok boomer",
                "underrated comment", "this aged well", "cant believe this", "based"]
WEB_SITES = ["imgur", "youtube", "reddit", "twitter", "github", "wiki"]
WEB_SUBS = ["gaming", "pics", "news", "memes", "askreddit", "funny", "tech"]
WEB_AWARDS = ["gold", "silver", "upvotes", "karma", "award"]


@dataclass(frozen=True)
class StoryStyle:
    dialog_rate: float = 0.3
    speaker_after: float = 0.5
    # word lists are drawn with weights 1 / (rank + 1) ** zipf; 0 means uniform
    zipf: float = 0.0
    # chance of a filler after each word (a position-free stylistic tic)
    filler_rate: float = 0.02


@dataclass(frozen=True)
class WebStyle:
    # relative weight of the seven line kinds in ``web_line``
    kind_weights: tuple[float, ...] = (1, 1, 1, 1, 1, 1, 1)


GENERAL_STORIES = StoryStyle()
BOOKS = StoryStyle(dialog_rate=0.6, speaker_after=0.9, filler_rate=0.15)
GENERAL_WEB = WebStyle()
REDDIT = WebStyle(kind_weights=(1, 3, 1, 1, 3, 3, 1))


def _pick(rng, items, weights=None):
    if weights is None:
        return items[int(rng.integers(len(items)))]
    w = np.asarray(weights, dtype=np.float64)
    return items[int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))]


def _zipf(items, style: StoryStyle):
    if style.zipf == 0.0:
        return None
    return 1.0 / (np.arange(1, len(items) + 1) ** style.zipf)


def _word(rng, items, style: StoryStyle):
    return _pick(rng, items, _zipf(items, style))


def _name(rng, style: StoryStyle) -> str:
    return _word(rng, NAMES, style)


def general_sentence(rng) -> str:
    k = int(rng.integers(6))
    if k == 0:
        return f"The {_pick(rng, GEN_ADJ)} {_pick(rng, GEN_NOUNS)} is near the {_pick(rng, GEN_NOUNS)}."
    if k == 1:
        year = 1700 + int(rng.integers(300))
        return f"In {year}, the {_pick(rng, ORGS)} {_pick(rng, GEN_VERBED)} a {_pick(rng, GEN_ADJ)} {_pick(rng, GEN_NOUNS)}."
    if k == 2:
        return f"Many {_pick(rng, GEN_NOUNS_PL)} in {_pick(rng, PLACES)} trade {_pick(rng, GEN_THINGS)} in {_pick(rng, SEASONS)}."
    if k == 3:
        return f"{_pick(rng, PLACES).capitalize()} is known for its {_pick(rng, GEN_ADJ)} {_pick(rng, GEN_NOUNS)}."
    if k == 4:
        return f"{_pick(rng, GEN_NOUNS_PL).capitalize()} and {_pick(rng, GEN_NOUNS_PL)} use the {_pick(rng, GEN_NOUNS)} every day."
    return f"Professor {_pick(rng, SCHOLARS)} wrote about the {_pick(rng, GEN_NOUNS)} of {_pick(rng, PLACES)}."


def narration_sentence(rng, style: StoryStyle = GENERAL_STORIES) -> str:
    k = int(rng.integers(4))
    name = _name(rng, style)
    if k == 0:
        return f"{name} {_word(rng, STORY_VERBED, style)} the {_word(rng, STORY_NOUNS, style)}."
    if k == 1:
        return f"{_pick(rng, ['She', 'He', name])} felt {_word(rng, FEELINGS, style)}."
    if k == 2:
        return f"The {_word(rng, STORY_NOUNS, style)} was {_pick(rng, GEN_ADJ)} and dark."
    return f"{name} and {_name(rng, style)} {_word(rng, STORY_VERBED, style)} the {_word(rng, STORY_NOUNS, style)}."


def dialog_line(rng, style: StoryStyle = GENERAL_STORIES) -> str:
    text = _word(rng, UTTERANCES, style).format(
        name=_name(rng, style), noun=_word(rng, STORY_NOUNS, style), feel=_word(rng, FEELINGS, style))
    speaker = _pick(rng, ["she", "he", _name(rng, style)])
    question = rng.random() < 0.3
    if rng.random() < style.speaker_after:
        return f'" {text}? " {speaker} asked.' if question else f'" {text}, " {speaker} said.'
    verb = "asked" if question else "said"
    return f'{speaker.capitalize()} {verb}, " {text}{"?" if question else "."} "'


def _with_fillers(rng, line: str, rate: float) -> str:
    out = []
    for w in line.split(" "):
        out.append(w)
        if rng.random() < rate:
            out.append(_pick(rng, FILLERS))
    return " ".join(out)


def story_block(rng, style: StoryStyle) -> str:
    """A paragraph of lines, each one dialog with probability ``dialog_rate``."""
    lines = []
    for _ in range(int(rng.integers(3, 8))):
        if rng.random() < style.dialog_rate:
            line = dialog_line(rng, style)
        else:
            line = narration_sentence(rng, style)
        lines.append(_with_fillers(rng, line, style.filler_rate))
    return "\n".join(lines) + "\n"


def web_line(rng, style: WebStyle = GENERAL_WEB) -> str:
    k = int(_pick(rng, range(7), style.kind_weights))
    if k == 0:
        return f"lol {_pick(rng, WEB_OPINIONS)} tbh"
    if k == 1:
        return f"{_pick(rng, WEB_USERS)}{int(rng.integers(10000))}: this is the {_pick(rng, WEB_ADJ)} {_pick(rng, WEB_THINGS)} ive ever seen"
    if k == 2:
        return f"edit: thanks for the {_pick(rng, WEB_AWARDS)} kind stranger"
    if k == 3:
        return f"> {_pick(rng, WEB_OPINIONS)}"
    if k == 4:
        tag = "".join(_pick(rng, "abcdefghijklmnopqrstuvwxyz0123456789") for _ in range(6))
        return f"source: https://{_pick(rng, WEB_SITES)}.com/{tag}"
    if k == 5:
        return f"{int(rng.integers(1, 5000))} upvotes on r/{_pick(rng, WEB_SUBS)} and still {_pick(rng, WEB_ADJ)}"
    return f"{_pick(rng, WEB_OPINIONS)}, the {_pick(rng, WEB_THINGS)} is {_pick(rng, WEB_ADJ)}"


def _collect(n_bytes: int, block) -> str:
    parts, size = [], 0
    while size < n_bytes:
        text = block()
        parts.append(text)
        size += len(text)
    return "".join(parts)


def generate_general(n_bytes: int, seed: int = 0, story_rate: float = 0.15, web_rate: float = 0.15) -> str:
    rng = np.random.default_rng(seed)

    def block():
        r = rng.random()
        if r < story_rate:
            return story_block(rng, GENERAL_STORIES)
        if r < story_rate + web_rate:
            return "\n".join(web_line(rng, GENERAL_WEB) for _ in range(int(rng.integers(1, 4)))) + "\n"
        return " ".join(general_sentence(rng) for _ in range(int(rng.integers(2, 6)))) + "\n"

    return _collect(n_bytes, block)


def generate_books(n_bytes: int, seed: int = 1) -> str:
    rng = np.random.default_rng(seed)
    return _collect(n_bytes, lambda: story_block(rng, BOOKS))


def generate_reddit(n_bytes: int, seed: int = 2) -> str:
    rng = np.random.default_rng(seed)
    return _collect(n_bytes, lambda: web_line(rng, REDDIT) + "\n")


GENERATORS = {"general": generate_general, "books": generate_books, "reddit": generate_reddit}
DEMO_SIZES = {"general": 400_000, "books": 250_000, "reddit": 120_000}


def generate(grammar: str, n_bytes: int, seed: int) -> str:
    return GENERATORS[grammar](n_bytes, seed)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="Write the demo corpora as plain-text files.")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--scale", type=float, default=1.0)
    args = parser.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for seed, (grammar, n) in enumerate(DEMO_SIZES.items()):
        (args.out_dir / f"{grammar}.txt").write_text(generate(grammar, int(n * args.scale), seed))


if __name__ == "__main__":
    main()
