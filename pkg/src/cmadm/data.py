"""Deterministic synthetic scene-captioning corpus.

A scene holds 2-5 objects, each a (category, attribute, grid cell) triple,
ordered by salience.  Its "image" is one feature vector per object plus two
pure-noise distractor regions.  Object features are the sum of fixed random
embeddings (category, attribute, position, salience rank) and small noise;
``cat`` and ``dog`` share most of their category embedding so they are easy
to confuse.  Five paraphrase templates describe the two most salient
objects.

Every scene is generated from ``(seed, index)`` alone, so any item can be
regenerated in isolation.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptArtifactError
from .vocab import Vocabulary

CATEGORIES = ("cat", "dog", "horse", "sheep", "bird", "car", "bus", "truck", "chair", "table", "cup", "bottle")
ATTRIBUTES = ("red", "blue", "green", "yellow", "black", "white")
RELATIONS = {"left": "to the left of", "right": "to the right of", "above": "above", "below": "below"}
COUNT_WORDS = {2: "two", 3: "three", 4: "four", 5: "five"}
CONFUSABLE = ("cat", "dog")
CONFUSABLE_OVERLAP = 0.8
GRID = 3
FEATURE_DIM = 32
NOISE_SCALE = 0.05
DISTRACTORS = 2
SALIENCE = (1.0, 0.5)  # salience-direction weight of the two described objects
REFS_PER_SCENE = 5

TEMPLATES = (
    "a {a0} {c0} {rel} a {a1} {c1}",
    "there is a {a0} {c0} {rel} a {a1} {c1}",
    "the {a0} {c0} is {rel} the {a1} {c1}",
    "{count} objects with a {a0} {c0} {rel} a {a1} {c1}",
    "a {a0} {c0} and a {a1} {c1} among {count} objects",
)


@dataclass(frozen=True)
class SceneObject:
    category: int
    attribute: int
    position: tuple[int, int]  # (column, row) on a GRID x GRID board, row 0 on top


@dataclass(frozen=True)
class Scene:
    id: str
    objects: tuple[SceneObject, ...]

    def relation(self) -> str:
        """Spatial relation of the most salient object to the second one."""
        (x0, y0), (x1, y1) = self.objects[0].position, self.objects[1].position
        dx, dy = x0 - x1, y0 - y1
        if abs(dx) >= abs(dy):
            return "left" if dx < 0 else "right"
        return "above" if dy < 0 else "below"


@dataclass
class CorpusItem:
    id: str
    features: np.ndarray
    refs: list[str]
    scene: Scene | None = None


def scene_id(index: int) -> str:
    return f"scene{index:05d}"


def _scene_rng(seed: int, index: int, stream: int = 1) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), stream])


@lru_cache(maxsize=16)
def _embedding_tables(seed: int, dim: int):
    rng = np.random.default_rng([int(seed), 0])

    def unit(n):
        v = rng.standard_normal((n, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    cats = unit(len(CATEGORIES))
    i, j = (CATEGORIES.index(c) for c in CONFUSABLE)
    other = cats[j] - (cats[j] @ cats[i]) * cats[i]
    other /= np.linalg.norm(other)
    cats[j] = CONFUSABLE_OVERLAP * cats[i] + np.sqrt(1 - CONFUSABLE_OVERLAP**2) * other
    attrs = 0.5 * unit(len(ATTRIBUTES))
    axes = 0.5 * unit(2)
    salience = unit(1)[0]
    return cats, attrs, axes, salience


def make_scene(index: int, seed: int) -> Scene:
    rng = _scene_rng(seed, index)
    k = int(rng.integers(2, 6))
    cells = rng.choice(GRID * GRID, size=k, replace=False)
    objects = tuple(
        SceneObject(int(rng.integers(len(CATEGORIES))), int(rng.integers(len(ATTRIBUTES))),
                    (int(c) % GRID, int(c) // GRID))
        for c in cells
    )
    return Scene(scene_id(index), objects)


def scene_regions(scene: Scene, index: int, seed: int, dim: int = FEATURE_DIM) -> tuple[np.ndarray, np.ndarray]:
    """Region features ``(objects + 2, dim)`` in a scene-specific shuffled order.

    Also returns each region's salience rank (``-1`` for distractors).
    """
    cats, attrs, axes, salience = _embedding_tables(seed, dim)
    rng = _scene_rng(seed, index, stream=2)
    rows = []
    for rank, obj in enumerate(scene.objects):
        x, y = obj.position
        weight = SALIENCE[rank] if rank < len(SALIENCE) else 0.0
        vec = cats[obj.category] + attrs[obj.attribute] + (x - 1) * axes[0] + (y - 1) * axes[1] + weight * salience
        rows.append(vec + NOISE_SCALE * rng.standard_normal(dim))
    for _ in range(DISTRACTORS):
        rows.append(rng.standard_normal(dim) / np.sqrt(dim))
    ranks = np.array(list(range(len(scene.objects))) + [-1] * DISTRACTORS)
    perm = rng.permutation(len(rows))
    return np.stack(rows)[perm], ranks[perm]


def scene_features(scene: Scene, index: int, seed: int, dim: int = FEATURE_DIM) -> np.ndarray:
    return scene_regions(scene, index, seed, dim)[0]


def scene_references(scene: Scene) -> list[str]:
    o0, o1 = scene.objects[0], scene.objects[1]
    slots = dict(
        a0=ATTRIBUTES[o0.attribute], c0=CATEGORIES[o0.category],
        a1=ATTRIBUTES[o1.attribute], c1=CATEGORIES[o1.category],
        rel=RELATIONS[scene.relation()], count=COUNT_WORDS[len(scene.objects)],
    )
    return [t.format(**slots) for t in TEMPLATES]


def _template_regex(template: str) -> re.Pattern:
    alts = {
        "a0": ATTRIBUTES, "a1": ATTRIBUTES, "c0": CATEGORIES, "c1": CATEGORIES,
        "rel": tuple(RELATIONS.values()), "count": tuple(COUNT_WORDS.values()),
    }
    pattern = re.escape(template)
    for slot, options in alts.items():
        group = f"(?P<{slot}>" + "|".join(re.escape(o) for o in options) + ")"
        pattern = pattern.replace(re.escape("{" + slot + "}"), group)
    return re.compile(f"^{pattern}$")


_PARSERS = tuple(_template_regex(t) for t in TEMPLATES)


def parse_reference(text: str) -> dict | None:
    """Invert the templates: the described (category, attribute) pairs and extras."""
    for rx in _PARSERS:
        m = rx.match(text)
        if m:
            g = m.groupdict()
            out = {
                "objects": [(CATEGORIES.index(g["c0"]), ATTRIBUTES.index(g["a0"])),
                            (CATEGORIES.index(g["c1"]), ATTRIBUTES.index(g["a1"]))],
            }
            if "rel" in g:
                out["relation"] = next(k for k, v in RELATIONS.items() if v == g["rel"])
            if "count" in g:
                out["count"] = next(k for k, v in COUNT_WORDS.items() if v == g["count"])
            return out
    return None


def make_item(index: int, seed: int, dim: int = FEATURE_DIM) -> CorpusItem:
    scene = make_scene(index, seed)
    return CorpusItem(scene.id, scene_features(scene, index, seed, dim), scene_references(scene), scene)


def generate_corpus(num_scenes: int, seed: int, start: int = 0, dim: int = FEATURE_DIM) -> list[CorpusItem]:
    if num_scenes < 1:
        raise ValueError("num_scenes must be >= 1")
    return [make_item(i, seed, dim) for i in range(start, start + num_scenes)]


def build_vocabulary(references: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    return Vocabulary.build((r for refs in references for r in refs), min_count=min_count)


# ------------------------------------------------------------------------ io


def corpus_lines(items: Sequence[CorpusItem]) -> list[str]:
    return [json.dumps({"id": it.id, "features": it.features.tolist(), "refs": list(it.refs)}) for it in items]


def write_corpus(path: str | os.PathLike, items: Sequence[CorpusItem]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in corpus_lines(items)), encoding="utf-8")
    os.replace(tmp, path)


def read_corpus(path: str | os.PathLike, dim: int | None = None) -> list[CorpusItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.asarray(rec["features"], dtype=np.float64)
                refs = rec["refs"]
                ident = str(rec["id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptArtifactError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if feats.ndim != 2 or feats.shape[0] < 1:
                raise CorruptArtifactError(f"{path}:{lineno}: features must be a non-empty matrix")
            if dim is None:
                dim = feats.shape[1]
            if feats.shape[1] != dim:
                raise CorruptArtifactError(f"{path}:{lineno}: feature width {feats.shape[1]} != {dim}")
            if not isinstance(refs, list) or len(refs) != REFS_PER_SCENE or not all(isinstance(r, str) for r in refs):
                raise CorruptArtifactError(f"{path}:{lineno}: expected {REFS_PER_SCENE} reference strings")
            items.append(CorpusItem(ident, feats, refs))
    return items


def fingerprint(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
