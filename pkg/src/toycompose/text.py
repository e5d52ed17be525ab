"""Word-level tokenizer, closed vocabulary and template sentence corpora.

Every word maps to exactly one token id, so a subject word always occupies a
single embedding slot.  Sentence corpora are produced from a template bank
(see ``data/templates.txt``) instead of free text.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"
BOS_ID, EOS_ID, PAD_ID = 0, 1, 2
CONTEXT_LENGTH = 16

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
TEXTURES = ("solid", "striped", "dotted")
BACKGROUNDS = ("night", "grass", "beach", "road")

# Caption words used by the toy scene generator.
_CAPTION_WORDS = ("a", "photo", "of", "and", "on", "the")

_SLOT = re.compile(r"\{(\w*)\}")


class OutOfVocabularyError(KeyError):
    """Raised when a word is not in the vocabulary."""

    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"out-of-vocabulary word: {self.word!r}"


class CorpusCapacityError(ValueError):
    pass


class Vocabulary:
    """Ordered word list with the three special tokens at ids 0-2."""

    def __init__(self, words: Iterable[str]):
        extra = sorted({w for w in words} - {BOS, EOS, PAD})
        self.tokens: list[str] = [BOS, EOS, PAD] + extra
        self._ids = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise OutOfVocabularyError(word) from None

    def word(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass(frozen=True)
class TokenizedPrompt:
    text: str
    ids: tuple[int, ...]
    length: int

    @property
    def context_length(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary, context_length: int = CONTEXT_LENGTH) -> TokenizedPrompt:
    words = text.split()
    ids = [BOS_ID] + [vocab.id(w) for w in words] + [EOS_ID]
    if len(ids) > context_length:
        raise ValueError(
            f"prompt has {len(ids)} tokens, context length is {context_length}: {text!r}"
        )
    length = len(ids)
    ids += [PAD_ID] * (context_length - length)
    return TokenizedPrompt(text=text, ids=tuple(ids), length=length)


def detokenize(prompt: TokenizedPrompt, vocab: Vocabulary) -> str:
    return " ".join(vocab.word(i) for i in prompt.ids[1 : prompt.length - 1])


def subject_positions(prompt: TokenizedPrompt, subject_word: str, vocab: Vocabulary) -> list[int]:
    """Indices of every occurrence of ``subject_word`` in the prompt."""
    target = vocab.id(subject_word)
    return [i for i in range(1, prompt.length - 1) if prompt.ids[i] == target]


# --------------------------------------------------------------------------
# template bank


@dataclass
class TemplateBank:
    templates: list[str]
    fillers: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for t in self.templates:
            slots = _SLOT.findall(t)
            if slots.count("") != 1:
                raise ValueError(f"template needs exactly one category slot: {t!r}")
            for name in slots:
                if name and name not in self.fillers:
                    raise ValueError(f"template {t!r} uses unknown filler set {name!r}")

    def words(self) -> set[str]:
        out = set()
        for t in self.templates:
            out.update(w for w in _SLOT.sub(" ", t).split())
        for values in self.fillers.values():
            out.update(values)
        return out

    def expand(self, category: str) -> list[str]:
        """Every distinct sentence the bank can produce for ``category``, in a fixed order."""
        sentences = []
        for t in self.templates:
            names = [n for n in _SLOT.findall(t) if n]
            for combo in itertools.product(*(self.fillers[n] for n in names)):
                values = iter(combo)

                def fill(m, values=values):
                    return category if m.group(1) == "" else next(values)

                sentences.append(_SLOT.sub(fill, t))
        # two templates can yield the same sentence when a filler equals the category
        return list(dict.fromkeys(sentences))


def parse_template_bank(text: str) -> TemplateBank:
    section = None
    templates: list[str] = []
    fillers: dict[str, tuple[str, ...]] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if section == "fillers":
            name, _, values = line.partition("=")
            if not _:
                raise ValueError(f"bad filler line: {raw!r}")
            fillers[name.strip()] = tuple(values.split())
        elif section == "templates":
            templates.append(" ".join(line.split()))
        else:
            raise ValueError(f"line outside a section: {raw!r}")
    return TemplateBank(templates=templates, fillers=fillers)


def load_template_bank(path=None) -> TemplateBank:
    if path is None:
        text = resources.files("toycompose").joinpath("data/templates.txt").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return parse_template_bank(text)


def default_vocabulary(bank: TemplateBank | None = None) -> Vocabulary:
    bank = bank or load_template_bank()
    words = set(bank.words())
    words.update(SHAPES, COLORS, TEXTURES, BACKGROUNDS, _CAPTION_WORDS)
    return Vocabulary(words)


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class PromptCorpus:
    base_category: str
    sentences: tuple[TokenizedPrompt, ...]
    subject_positions: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.sentences)

    def texts(self) -> list[str]:
        return [s.text for s in self.sentences]

    def subset(self, indices: Sequence[int]) -> "PromptCorpus":
        return PromptCorpus(
            self.base_category,
            tuple(self.sentences[i] for i in indices),
            tuple(self.subject_positions[i] for i in indices),
        )


def generate_corpus(
    base_category: str,
    count: int,
    templates: TemplateBank,
    seed: int,
    vocab: Vocabulary,
    allow_replacement: bool = True,
    context_length: int = CONTEXT_LENGTH,
) -> PromptCorpus:
    """Sample ``count`` template sentences mentioning ``base_category``.

    Distinct sentences are drawn without replacement while the template
    product allows it.  Past that, every product sentence is used once and
    the remainder is drawn with replacement (or ``CorpusCapacityError`` is
    raised when ``allow_replacement`` is off).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    pool = templates.expand(base_category)
    rng = np.random.default_rng(seed)
    if count <= len(pool):
        picked = [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]
    elif allow_replacement:
        extra = rng.choice(len(pool), size=count - len(pool), replace=True)
        picked = pool + [pool[i] for i in extra]
        picked = [picked[i] for i in rng.permutation(len(picked))]
    else:
        raise CorpusCapacityError(
            f"template product has {len(pool)} sentences, {count} requested"
        )
    sentences = tuple(tokenize(s, vocab, context_length) for s in picked)
    positions = tuple(tuple(subject_positions(p, base_category, vocab)) for p in sentences)
    return PromptCorpus(base_category, sentences, positions)
