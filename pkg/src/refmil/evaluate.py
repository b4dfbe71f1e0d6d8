"""IoU, Precision@1, and context-grounding accuracy over scene files."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .comprehend import comprehend
from .net import ModelParams
from .scene import Scene, encode_expression
from .train import prepare_scene


def iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two (xmin, ymin, xmax, ymax) boxes."""
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {box}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


IOU_THRESHOLD = 0.5


def precision_at_1(predictions: list[tuple[tuple, tuple]]) -> float:
    """Fraction of (predicted, ground-truth) box pairs with IoU strictly above 0.5."""
    if not predictions:
        raise ValueError("empty prediction list")
    hits = sum(1 for pred, gt in predictions if iou(pred, gt) > IOU_THRESHOLD)
    return hits / len(predictions)


@dataclass(frozen=True)
class EvalReport:
    precision_at_1: float
    n_expressions: int
    mode: str
    context_accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "precision_at_1": self.precision_at_1,
                "n": self.n_expressions,
                "context_accuracy": self.context_accuracy,
                "mode": self.mode,
            }
        )


def _eval_scene(params: ModelParams, scene: Scene, mode: str, max_contexts: int):
    """Per-expression (hit, context_hit) rows for one scene; context_hit is
    None for non-relational expressions."""
    ps = prepare_scene(scene, params.scaler)
    boxes = {r.id: r.bbox for r in scene.regions}
    rows = []
    for expr in scene.expressions:
        enc = encode_expression(expr.tokens, params.vocab, target_region_id=expr.target)
        result = comprehend(params, enc.tokens, ps, mode=mode, max_contexts=max_contexts)
        hit = iou(boxes[result.referred_region_id], boxes[expr.target]) > IOU_THRESHOLD
        ctx_hit = None
        if expr.landmark is not None:
            ctx_hit = result.supporting_context_id == expr.landmark
        rows.append((hit, ctx_hit))
    return rows


def evaluate_model(
    params: ModelParams,
    scenes: list[Scene],
    mode: str = "noisy_or",
    max_contexts: int = 10,
    threads: int = 1,
) -> EvalReport:
    """Precision@1 over every expression; context accuracy over relational ones.

    Scenes are scored independently and the tallies assembled in scene order,
    so the report does not depend on the thread count.
    """
    if params.vocab is None or params.scaler is None:
        raise ValueError("model checkpoint lacks vocabulary or scaler")
    if not scenes:
        raise ValueError("no scenes to evaluate")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        per_scene = list(
            pool.map(lambda s: _eval_scene(params, s, mode, max_contexts), scenes)
        )
    hits = 0
    n = 0
    ctx_hits = 0
    ctx_n = 0
    for rows in per_scene:
        for hit, ctx_hit in rows:
            n += 1
            hits += int(hit)
            if ctx_hit is not None:
                ctx_n += 1
                ctx_hits += int(ctx_hit)
    if n == 0:
        raise ValueError("no expressions to evaluate")
    return EvalReport(
        precision_at_1=hits / n,
        n_expressions=n,
        mode=mode,
        context_accuracy=(ctx_hits / ctx_n) if ctx_n else None,
    )
