"""Dataset items, the JSON-lines file format, and the synthetic caption task.

One item per line::

    {"id": "img-1", "features": [[0.1, ...], ...], "captions": ["a dog runs"]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .vocab import tokenize

SPLITS = ("train", "val", "test")


@dataclass
class DatasetItem:
    id: str
    features: np.ndarray  # [N, D_raw]
    captions: list[str] = field(default_factory=list)

    def tokens(self) -> list[list[str]]:
        return [tokenize(c) for c in self.captions]


def _parse_item(obj, lineno: int, dim: int | None) -> DatasetItem:
    if not isinstance(obj, dict) or "id" not in obj or "features" not in obj:
        raise FormatError(f"line {lineno}: expected an object with 'id' and 'features'")
    try:
        feats = np.asarray(obj["features"], dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"line {lineno}: features are not a numeric matrix") from None
    if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
        raise FormatError(f"line {lineno}: features must be N x D with N >= 1, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"line {lineno}: non-finite feature value")
    if dim is not None and feats.shape[1] != dim:
        raise FormatError(f"line {lineno}: feature dimension {feats.shape[1]} differs from {dim}")
    caps = obj.get("captions", [])
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise FormatError(f"line {lineno}: captions must be a list of strings")
    return DatasetItem(str(obj["id"]), feats, list(caps))


def load_dataset(path: str | Path) -> list[DatasetItem]:
    items, dim = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: {e.msg}") from None
            item = _parse_item(obj, lineno, dim)
            dim = item.features.shape[1]
            items.append(item)
    return items


def save_dataset(items: Sequence[DatasetItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            rec = {"id": it.id, "features": it.features.tolist(), "captions": list(it.captions)}
            fh.write(json.dumps(rec) + "\n")


def load_splits(path: str | Path) -> dict[str, list[DatasetItem]]:
    """A directory with train/val[/test].jsonl, or a single file used as train."""
    path = Path(path)
    if path.is_file():
        return {"train": load_dataset(path)}
    splits = {}
    for name in SPLITS:
        f = path / f"{name}.jsonl"
        if f.exists():
            splits[name] = load_dataset(f)
    if "train" not in splits:
        raise ConfigError(f"{path}: no train.jsonl found")
    return splits


# ---------------------------------------------------------------- synthetic task


@dataclass
class SyntheticGrammar:
    """Captions whose verb is fixed by the object named after it.

    ``a [subject-attr] <subject> is <verb> a [object-attr] <object>``, where
    drinks also take a container (``a cup of cola``).  Region 0 of the
    pseudo-image encodes the subject, region 1 the object; the rest is clutter.
    """

    subjects: tuple[str, ...] = ("girl", "boy", "man", "woman", "dog", "cat")
    subject_attrs: tuple[str, ...] = ("little", "young", "old", "happy")
    objects: dict[str, tuple[str, ...]] = field(default_factory=lambda: {
        "food": ("cake", "apple", "pizza", "sandwich"),
        "drink": ("cola", "juice", "coffee", "milk"),
        "toy": ("ball", "kite", "frisbee"),
    })
    verbs: dict[str, str] = field(default_factory=lambda: {
        "food": "eating", "drink": "drinking", "toy": "throwing",
    })
    object_attrs: tuple[str, ...] = ("red", "green", "blue", "white")
    containers: tuple[str, ...] = ("cup", "glass")
    n_regions: int = 4
    raw_dim: int = 48
    noise: float = 0.3
    refs_per_item: int = 3
    projection_seed: int = 1234

    def __post_init__(self):
        self.category_of = {o: c for c, objs in self.objects.items() for o in objs}
        self.all_objects = tuple(self.category_of)
        rng = np.random.default_rng(self.projection_seed)
        n_subj = len(self.subjects) + len(self.subject_attrs)
        n_obj = len(self.all_objects) + len(self.object_attrs) + len(self.containers)
        self._subj_proj = rng.standard_normal((n_subj, self.raw_dim)) / np.sqrt(2)
        self._obj_proj = rng.standard_normal((n_obj, self.raw_dim)) / np.sqrt(3)

    def verb_for(self, obj: str) -> str:
        return self.verbs[self.category_of[obj]]

    def sample_scene(self, rng: np.random.Generator) -> dict:
        obj = self.all_objects[rng.integers(len(self.all_objects))]
        return {
            "subject": self.subjects[rng.integers(len(self.subjects))],
            "subject_attr": self.subject_attrs[rng.integers(len(self.subject_attrs))],
            "object": obj,
            "object_attr": self.object_attrs[rng.integers(len(self.object_attrs))],
            "container": self.containers[rng.integers(len(self.containers))],
        }

    def caption(self, scene: dict, rng: np.random.Generator) -> str:
        """One reference; adjectives are mentioned at random."""
        words = ["a"]
        if rng.random() < 0.5:
            words.append(scene["subject_attr"])
        words += [scene["subject"], "is", self.verb_for(scene["object"]), "a"]
        obj = scene["object"]
        if self.category_of[obj] == "drink":
            words += [scene["container"], "of", obj]
        else:
            if rng.random() < 0.5:
                words.append(scene["object_attr"])
            words.append(obj)
        return " ".join(words)

    def features(self, scene: dict, rng: np.random.Generator) -> np.ndarray:
        subj = np.zeros(self._subj_proj.shape[0])
        subj[self.subjects.index(scene["subject"])] = 1.0
        subj[len(self.subjects) + self.subject_attrs.index(scene["subject_attr"])] = 1.0
        obj = np.zeros(self._obj_proj.shape[0])
        obj[self.all_objects.index(scene["object"])] = 1.0
        k = len(self.all_objects)
        obj[k + self.object_attrs.index(scene["object_attr"])] = 1.0
        obj[k + len(self.object_attrs) + self.containers.index(scene["container"])] = 1.0
        feats = self.noise * rng.standard_normal((self.n_regions, self.raw_dim))
        feats[0] += subj @ self._subj_proj
        feats[1] += obj @ self._obj_proj
        return feats

    def is_valid(self, tokens: Sequence[str]) -> bool:
        """Parse ``tokens`` against the grammar, including verb/object agreement."""
        toks = list(tokens)
        pos = 0

        def take(options) -> str | None:
            nonlocal pos
            if pos < len(toks) and toks[pos] in options:
                pos += 1
                return toks[pos - 1]
            return None

        if take(("a",)) is None:
            return False
        take(self.subject_attrs)
        if take(self.subjects) is None or take(("is",)) is None:
            return False
        verb = take(tuple(self.verbs.values()))
        if verb is None or take(("a",)) is None:
            return False
        if take(self.containers) is not None:
            if take(("of",)) is None:
                return False
            obj = take(self.objects["drink"])
        else:
            take(self.object_attrs)
            obj = take(self.all_objects)
            if obj is not None and self.category_of[obj] == "drink":
                return False
        return obj is not None and pos == len(toks) and self.verb_for(obj) == verb


def gen_synthetic(count: int, seed: int, grammar: SyntheticGrammar | None = None
                  ) -> dict[str, list[DatasetItem]]:
    """Deterministic synthetic dataset split 80/10/10 into train/val/test."""
    if count < 10:
        raise ConfigError(f"need at least 10 items, got {count}")
    grammar = grammar or SyntheticGrammar()
    rng = np.random.default_rng(seed)
    items = []
    for i in range(count):
        scene = grammar.sample_scene(rng)
        caps = [grammar.caption(scene, rng) for _ in range(grammar.refs_per_item)]
        items.append(DatasetItem(f"syn-{seed}-{i:05d}", grammar.features(scene, rng), caps))
    order = rng.permutation(count)
    n_train, n_val = int(round(count * 0.8)), int(round(count * 0.1))
    cut = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
           "test": order[n_train + n_val:]}
    return {name: [items[j] for j in sorted(idx)] for name, idx in cut.items()}
