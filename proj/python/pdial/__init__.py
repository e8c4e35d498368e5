"""Python access to the pdial persona dialogue model."""

import json

from . import _pdial
from ._pdial import FormatError, bleu, char_f1, derive_seed, distinct, spearman

__all__ = [
    "Model",
    "FormatError",
    "bleu",
    "char_f1",
    "derive_seed",
    "distinct",
    "spearman",
    "persona_accuracy",
    "generate_corpus",
    "render_persona",
]


def persona_accuracy(responses, personas):
    return _pdial.persona_accuracy(list(responses), json.dumps(list(personas)))


def generate_corpus(n, density=0.162, seed=7):
    """Synthetic training examples as dicts."""
    return json.loads(_pdial.corpus_json(n, density, seed))


def render_persona(persona):
    return _pdial.render_persona(json.dumps(persona))


class Model:
    def __init__(self, impl):
        self._impl = impl

    @classmethod
    def load(cls, path):
        return cls(_pdial.Model.load(str(path)))

    @classmethod
    def create(cls, chars, seed=0, **config):
        """Randomly initialised model over the given characters."""
        return cls(_pdial.Model.create(json.dumps(config), chars, seed))

    def save(self, path):
        self._impl.save(str(path))

    @property
    def vocab_size(self):
        return self._impl.vocab_size

    @property
    def config(self):
        return json.loads(self._impl.config_json)

    def generate(self, turns, persona, alpha=None, max_tokens=48, strategy="greedy", seed=0):
        """Reply to `turns` (oldest first). alpha None or "auto" uses the predictor."""
        if alpha == "auto":
            alpha = None
        return json.loads(
            self._impl.generate_json(list(turns), json.dumps(persona), alpha, max_tokens, strategy, seed)
        )

    def predict_alpha(self, turns):
        return self._impl.predict_alpha(list(turns))
