"""Deterministic synthetic relational scenes.

Each scene places colored objects on a blank canvas without overlap and
enumerates the referring expressions that are unambiguous in that scene:
attribute phrases ("red ball") when exactly one object matches, and
relational phrases ("ball left of the red box") when exactly one
(target, landmark) assignment satisfies the relation. Scene i of a dataset
depends only on (seed, i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import ExpressionRecord, ImageMeta, Region, Scene, write_scenes

COLORS = ("red", "green", "blue", "yellow")
CATEGORIES = ("ball", "box", "plant")

RELATION_WORDS = {
    "left_of": ("left", "of"),
    "right_of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_scenes: int = 100
    min_objects: int = 3
    max_objects: int = 5
    image_width: float = 128.0
    image_height: float = 128.0
    min_size: float = 16.0
    max_size: float = 40.0
    appearance_noise: float = 0.05
    relations: tuple[str, ...] = tuple(RELATION_WORDS)
    # Cap on expressions kept per scene; the enumeration itself is complete.
    expressions_per_scene: int = 4

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.min_size > self.max_size or self.min_size <= 0:
            raise ValueError("bad object size range")
        if self.max_size > min(self.image_width, self.image_height):
            raise ValueError("objects cannot exceed the image")
        unknown = set(self.relations) - set(RELATION_WORDS)
        if unknown:
            raise ValueError(f"unknown relations {sorted(unknown)}")
        if self.expressions_per_scene < 1:
            raise ValueError("expressions_per_scene must be >= 1")


APPEARANCE_DIM = len(COLORS) + len(CATEGORIES)


def appearance_vector(color: str, category: str, noise: np.ndarray) -> np.ndarray:
    """Two one-hot blocks (color, category) plus additive noise."""
    v = np.zeros(APPEARANCE_DIM)
    v[COLORS.index(color)] = 1.0
    v[len(COLORS) + CATEGORIES.index(category)] = 1.0
    return v + noise


def region_color(region: Region) -> str:
    """Dominant color read back from the appearance vector."""
    return COLORS[int(np.argmax(region.appearance[: len(COLORS)]))]


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _place_objects(rng: np.random.Generator, cfg: SynthConfig, n: int) -> list[tuple]:
    """Sample n non-overlapping boxes; retries resample the colliding box."""
    boxes: list[tuple] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise RuntimeError("could not place objects without overlap; loosen the config")
        w = rng.uniform(cfg.min_size, cfg.max_size)
        h = rng.uniform(cfg.min_size, cfg.max_size)
        x0 = rng.uniform(0.0, cfg.image_width - w)
        y0 = rng.uniform(0.0, cfg.image_height - h)
        box = (x0, y0, x0 + w, y0 + h)
        if not any(_boxes_overlap(box, other) for other in boxes):
            boxes.append(box)
    return boxes


# Relation predicates on region centroids. The margin keeps borderline pairs
# out so the language stays truthful under small jitter.
_REL_MARGIN = 0.05


def relation_holds(relation: str, target: Region, landmark: Region, image: ImageMeta) -> bool:
    tx, ty = target.center()
    lx, ly = landmark.center()
    mx = _REL_MARGIN * image.width
    my = _REL_MARGIN * image.height
    if relation == "left_of":
        return tx < lx - mx
    if relation == "right_of":
        return tx > lx + mx
    if relation == "above":
        return ty < ly - my
    if relation == "below":
        return ty > ly + my
    raise ValueError(f"unknown relation {relation!r}")


def gen_scene(cfg: SynthConfig, index: int) -> Scene:
    """Build scene `index`; deterministic in (cfg.seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    image = ImageMeta(cfg.image_width, cfg.image_height)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes = _place_objects(rng, cfg, n)
    regions = []
    for i, box in enumerate(boxes):
        color = COLORS[int(rng.integers(len(COLORS)))]
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        noise = rng.normal(0.0, cfg.appearance_noise, size=APPEARANCE_DIM)
        regions.append(
            Region(id=i, bbox=box, category=category, appearance=appearance_vector(color, category, noise))
        )
    expressions = gen_expressions(regions, image, cfg.relations)
    if len(expressions) > cfg.expressions_per_scene:
        keep = rng.choice(len(expressions), size=cfg.expressions_per_scene, replace=False)
        expressions = [expressions[i] for i in sorted(keep)]
    return Scene(image=image, regions=tuple(regions), expressions=tuple(expressions))


def gen_expressions(
    regions: list[Region], image: ImageMeta, relations: tuple[str, ...]
) -> list[ExpressionRecord]:
    """Enumerate every expression with a unique referent in this scene."""
    out: list[ExpressionRecord] = []

    # attribute expressions: "<color> <category>" naming exactly one object
    for r in regions:
        color = region_color(r)
        same = [
            o for o in regions if o.category == r.category and region_color(o) == color
        ]
        if len(same) == 1:
            out.append(ExpressionRecord(tokens=(color, r.category), target=r.id))

    # relational expressions: "<cat> <rel> <color> <cat>" with a unique
    # (target, landmark) pair among all satisfying assignments
    for relation in relations:
        rel_words = RELATION_WORDS[relation]
        for t in regions:
            for l in regions:
                if t.id == l.id or not relation_holds(relation, t, l, image):
                    continue
                l_color = region_color(l)
                matches = [
                    (t2, l2)
                    for t2 in regions
                    for l2 in regions
                    if t2.id != l2.id
                    and t2.category == t.category
                    and l2.category == l.category
                    and region_color(l2) == l_color
                    and relation_holds(relation, t2, l2, image)
                ]
                if len(matches) == 1:
                    tokens = (t.category,) + rel_words + (l_color, l.category)
                    out.append(ExpressionRecord(tokens=tokens, target=t.id, landmark=l.id))
    return out


def gen_dataset(cfg: SynthConfig) -> list[Scene]:
    """All scenes of a dataset, dropping any that came out without expressions."""
    scenes = []
    for i in range(cfg.n_scenes):
        scene = gen_scene(cfg, i)
        if scene.expressions:
            scenes.append(scene)
    return scenes


def write_dataset(cfg: SynthConfig, train_path, val_path, val_fraction: float = 0.2) -> tuple[int, int]:
    """Generate and split by scene index; returns (train count, val count)."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError("val_fraction must be in (0, 1)")
    scenes = gen_dataset(cfg)
    n_val = max(1, int(round(val_fraction * len(scenes))))
    if n_val >= len(scenes):
        raise ValueError("dataset too small for the requested split")
    train, val = scenes[:-n_val], scenes[-n_val:]
    write_scenes(train, train_path)
    write_scenes(val, val_path)
    return len(train), len(val)
