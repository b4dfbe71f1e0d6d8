"""Scenes, regions, referring expressions, and the candidate-set construction.

A candidate set is the full-image sentinel region plus the object proposals;
every scoring pair draws its context from that set. All types are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Reserved id for the synthesized full-image region. Kept below all proposal
# ids so lowest-id tie breaking favors the image context deterministically.
IMAGE_REGION_ID = -1

IMAGE_CATEGORY = "__image__"

BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class ImageMeta:
    """Pixel dimensions of one image."""

    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class Region:
    """An axis-aligned region with its appearance vector.

    bbox is (xmin, ymin, xmax, ymax) in pixels. The appearance vector is
    excluded from equality/hash; identity is carried by the id.
    """

    id: int
    bbox: tuple[float, float, float, float]
    category: str
    appearance: np.ndarray = field(compare=False, repr=False)

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.bbox} for region {self.id}")
        object.__setattr__(self, "appearance", np.asarray(self.appearance, dtype=np.float64))

    def inside(self, image: ImageMeta) -> bool:
        x0, y0, x1, y1 = self.bbox
        return 0 <= x0 and 0 <= y0 and x1 <= image.width and y1 <= image.height

    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))


@dataclass(frozen=True)
class CandidateSet:
    """The image sentinel plus all proposals for one scene."""

    image_region: Region
    proposals: tuple[Region, ...]

    def __post_init__(self):
        ids = [r.id for r in self.proposals]
        if len(set(ids)) != len(ids) or IMAGE_REGION_ID in ids:
            raise ValueError("proposal ids must be unique and distinct from the image sentinel id")
        if not self.proposals:
            raise ValueError("empty proposals")

    @property
    def all_regions(self) -> tuple[Region, ...]:
        return (self.image_region,) + self.proposals

    def get(self, region_id: int) -> Region:
        if region_id == IMAGE_REGION_ID:
            return self.image_region
        for r in self.proposals:
            if r.id == region_id:
                return r
        raise KeyError(f"no region with id {region_id}")

    def context_ids_for(self, region_id: int) -> list[int]:
        """Ids of every candidate context for a region: the whole set minus itself."""
        return [r.id for r in self.all_regions if r.id != region_id]


def build_candidate_set(image: ImageMeta, proposals: Sequence[Region]) -> CandidateSet:
    """Attach the full-image sentinel region to the given proposals.

    The sentinel's appearance is the elementwise mean of the proposal
    appearance vectors, standing in for whole-image features.
    """
    if not proposals:
        raise ValueError("empty proposals")
    for r in proposals:
        if not r.inside(image):
            raise ValueError(f"region {r.id} bbox {r.bbox} outside image bounds")
    appearance = np.mean([r.appearance for r in proposals], axis=0)
    sentinel = Region(
        id=IMAGE_REGION_ID,
        bbox=(0.0, 0.0, float(image.width), float(image.height)),
        category=IMAGE_CATEGORY,
        appearance=appearance,
    )
    return CandidateSet(image_region=sentinel, proposals=tuple(proposals))


@dataclass(frozen=True)
class RefExpression:
    """A tokenized expression as vocabulary indices, bracketed by bos/eos."""

    tokens: tuple[int, ...]
    target_region_id: int | None = None

    def __post_init__(self):
        if len(self.tokens) < 3:
            raise ValueError("expression must contain bos, at least one word, and eos")

    @property
    def scored_length(self) -> int:
        """Number of predicted positions: every token after bos, eos included."""
        return len(self.tokens) - 1


class Vocabulary:
    """Token-to-index map with reserved begin/end/unknown entries.

    Indices are dense from 0; the three reserved tokens occupy 0..2 and never
    collide with corpus words.
    """

    def __init__(self, words: Sequence[str]):
        reserved = (BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
        for w in words:
            if w in reserved:
                raise ValueError(f"corpus word collides with reserved token {w!r}")
        self._index_to_token = list(reserved) + list(words)
        self._token_to_index = {t: i for i, t in enumerate(self._index_to_token)}
        if len(self._token_to_index) != len(self._index_to_token):
            raise ValueError("duplicate words in vocabulary")

    @property
    def bos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return 1

    @property
    def unk(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self._index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_index

    def index(self, token: str) -> int:
        return self._token_to_index.get(token, self.unk)

    def token(self, index: int) -> str:
        return self._index_to_token[index]

    @property
    def words(self) -> list[str]:
        """Corpus words in index order, reserved tokens excluded."""
        return self._index_to_token[3:]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self._index_to_token[i] for i in indices]


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return text.lower().split()


def _is_length1_special(token: str) -> bool:
    return len(token) == 1 and not token.isalnum()


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Collect corpus words by frequency threshold.

    Keeps exactly the words occurring at least min_count times, ordered by
    first occurrence. Single-character non-alphanumeric tokens are dropped.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    pos = 0
    n_expr = 0
    for expr in corpus:
        n_expr += 1
        for token in expr:
            if _is_length1_special(token):
                continue
            counts[token] += 1
            if token not in first_seen:
                first_seen[token] = pos
                pos += 1
    if n_expr == 0:
        raise ValueError("empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=first_seen.__getitem__)
    return Vocabulary(kept)


def encode_expression(
    tokens: Sequence[str], vocab: Vocabulary, target_region_id: int | None = None
) -> RefExpression:
    """Map tokens to indices, bracket with bos/eos; unseen words become unk."""
    if not tokens:
        raise ValueError("empty token list")
    indices = (vocab.bos,) + tuple(vocab.index(t) for t in tokens) + (vocab.eos,)
    return RefExpression(tokens=indices, target_region_id=target_region_id)


@dataclass(frozen=True)
class ExpressionRecord:
    """A raw (untokenized-to-indices) expression attached to a scene.

    landmark is diagnostic metadata from the synthetic generator; evaluation
    may read it, training never does.
    """

    tokens: tuple[str, ...]
    target: int
    landmark: int | None = None


@dataclass(frozen=True)
class Scene:
    """One image with its regions and annotated expressions."""

    image: ImageMeta
    regions: tuple[Region, ...]
    expressions: tuple[ExpressionRecord, ...]


def scene_to_json(scene: Scene) -> str:
    regions = [
        {
            "id": r.id,
            "bbox": list(r.bbox),
            "category": r.category,
            "appearance": [float(v) for v in r.appearance],
        }
        for r in scene.regions
    ]
    expressions = []
    for e in scene.expressions:
        rec: dict = {"tokens": list(e.tokens), "target": e.target}
        if e.landmark is not None:
            rec["landmark"] = e.landmark
        expressions.append(rec)
    doc = {
        "image": {"w": scene.image.width, "h": scene.image.height},
        "regions": regions,
        "expressions": expressions,
    }
    return json.dumps(doc, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    doc = json.loads(line)
    image = ImageMeta(width=doc["image"]["w"], height=doc["image"]["h"])
    regions = tuple(
        Region(
            id=r["id"],
            bbox=tuple(float(v) for v in r["bbox"]),
            category=r["category"],
            appearance=np.asarray(r["appearance"], dtype=np.float64),
        )
        for r in doc["regions"]
    )
    expressions = tuple(
        ExpressionRecord(
            tokens=tuple(e["tokens"]), target=e["target"], landmark=e.get("landmark")
        )
        for e in doc["expressions"]
    )
    return Scene(image=image, regions=regions, expressions=expressions)


def write_scenes(scenes: Iterable[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(scene_to_json(scene))
            fh.write("\n")


def read_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                scenes.append(scene_from_json(line))
    return scenes
