"""Python access to the cmmcot core: geometry, the interleaved grammar,
synthetic corpora, models, generation and evaluation."""

import json

from ._cmmcot import (
    BoundingBox,
    GrammarError,
    canonical,
    decode,
    encode,
    fuse_boxes,
    iou,
    read_png,
    scaled_task_mix,
    write_png,
)
from ._cmmcot import Model as _Model
from ._cmmcot import _corpus

__all__ = [
    "BoundingBox",
    "GrammarError",
    "Model",
    "canonical",
    "corpus",
    "decode",
    "encode",
    "fuse_boxes",
    "iou",
    "read_png",
    "scaled_task_mix",
    "write_png",
]


def corpus(scale=0.1, seed=0, mock=None):
    """Builds a grounded corpus with the mock annotator.

    Returns a dict with "records" (JSONL record dicts), "outcomes" and the
    "stats" CSV text.
    """
    return json.loads(_corpus(scale, seed, json.dumps(mock or {})))


class Model:
    """A decoder with its RIFREM layer set."""

    def __init__(self, impl):
        self._impl = impl

    @classmethod
    def create(cls, config=None, seed=0):
        return cls(_Model._init(json.dumps(config or {}), seed))

    @classmethod
    def load(cls, path):
        return cls(_Model.load(str(path)))

    def save(self, path):
        self._impl.save(str(path))

    @property
    def config(self):
        return json.loads(self._impl._config)

    @property
    def parameter_count(self):
        return self._impl.parameter_count

    def generate(self, images, question, rifrem=True, budget=512):
        """Greedy generation. `images` holds HxWx3 float arrays or PNG paths."""
        return json.loads(self._impl._generate(list(images), question, rifrem, budget))

    def evaluate(self, family="cross-image-match", count=20, seed=0, rifrem=True):
        return json.loads(self._impl._evaluate(family, count, seed, rifrem))
