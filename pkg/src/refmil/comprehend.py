"""Test-time selection: score pairs, pool per region, pick the referred region.

Pooling modes: max over contexts, noisy-or over contexts, or image-only
(the single (region, image) pair). Also provides the spatial-likelihood
heatmap that slides a query box across the image against a fixed context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import raw_pair_vector
from .net import ModelParams, forward_pairs
from .objectives import PairScoreTable
from .scene import IMAGE_REGION_ID, ImageMeta, Region
from .train import PreparedScene

MODES = ("max", "noisy_or", "image_only")


def score_all_pairs(
    params: ModelParams,
    tokens: tuple[int, ...],
    ps: PreparedScene,
    max_contexts: int = 10,
) -> PairScoreTable:
    """Score every (proposal, context) pair with dropout off.

    Contexts per proposal are the image plus up to max_contexts - 1 other
    proposals, lowest ids first, so repeated calls enumerate identically.
    """
    if max_contexts < 1:
        raise ValueError("max_contexts must be >= 1")
    proposal_ids = sorted(r.id for r in ps.cands.proposals)
    pairs: list[tuple[int, int]] = []
    for rid in proposal_ids:
        pairs.append((rid, IMAGE_REGION_ID))
        others = [p for p in proposal_ids if p != rid][: max_contexts - 1]
        pairs.extend((rid, c) for c in others)
    feats = np.stack([ps.pair_vector(r, c) for r, c in pairs])
    trace = forward_pairs(params, tokens, feats, train_mode=False)
    table = PairScoreTable()
    for k, (r, c) in enumerate(pairs):
        table.add(r, c, trace.word_logprobs[:, k])
    return table


def _region_pair_logps(table: PairScoreTable, region_id: int) -> list[tuple[int, float]]:
    found = [
        (c, table.total(r, c)) for r, c in table.pairs() if r == region_id
    ]
    if not found:
        raise ValueError(f"region {region_id} has no scored pairs")
    return sorted(found)


def pool_max(table: PairScoreTable, region_id: int) -> float:
    """Best single-context probability for the region."""
    logps = [lp for _, lp in _region_pair_logps(table, region_id)]
    return float(np.exp(max(logps)))


def pool_noisy_or(table: PairScoreTable, region_id: int) -> float:
    """1 - prod(1 - p_i) over the region's contexts, accumulated in log space."""
    logps = [lp for _, lp in _region_pair_logps(table, region_id)]
    if len(logps) == 1:
        # single factor reduces to p itself; skip the log1p round trip so the
        # value matches pool_max to the bit
        return float(np.exp(logps[0]))
    # log(1 - p) = log1p(-exp(logp)); exp(logp) == 1 gives -inf, and the
    # pool correctly saturates at 1
    with np.errstate(divide="ignore"):
        log_none = sum(np.log1p(-np.exp(lp)) for lp in logps)
    return float(-np.expm1(log_none))


@dataclass(frozen=True)
class ComprehensionResult:
    referred_region_id: int
    supporting_context_id: int
    pooled: dict[int, float]
    table: PairScoreTable

    def __post_init__(self):
        if self.referred_region_id == IMAGE_REGION_ID:
            raise ValueError("referred region cannot be the image sentinel")
        if self.supporting_context_id == self.referred_region_id:
            raise ValueError("supporting context must differ from the referred region")


def comprehend(
    params: ModelParams,
    tokens: tuple[int, ...],
    ps: PreparedScene,
    mode: str = "noisy_or",
    max_contexts: int = 10,
) -> ComprehensionResult:
    """Pick the proposal whose pooled sentence probability is highest."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    effective_contexts = 1 if mode == "image_only" else max_contexts
    table = score_all_pairs(params, tokens, ps, max_contexts=effective_contexts)
    pool = pool_max if mode != "noisy_or" else pool_noisy_or
    pooled = {}
    best_id = None
    best = -np.inf
    for rid in sorted(r.id for r in ps.cands.proposals):
        p = pool(table, rid)
        pooled[rid] = p
        if p > best:
            best, best_id = p, rid
    if mode == "image_only":
        support = IMAGE_REGION_ID
    else:
        by_logp = _region_pair_logps(table, best_id)
        support = max(by_logp, key=lambda cl: (cl[1], -cl[0]))[0]
        # max with key (logp, -id) returns highest logp, ties to lowest id
    return ComprehensionResult(
        referred_region_id=best_id, supporting_context_id=support, pooled=pooled, table=table
    )


def heatmap(
    params: ModelParams,
    tokens: tuple[int, ...],
    context_region: Region,
    image: ImageMeta,
    box_size: tuple[float, float],
    stride: float,
    query_appearance: np.ndarray | None = None,
) -> np.ndarray:
    """Likelihood of the sentence for a query box slid across the image.

    Cell (row, col) holds p(S | box at (col*stride, row*stride), context).
    The query box carries the given appearance vector, or zeros.
    """
    bw, bh = box_size
    if stride <= 0:
        raise ValueError("stride must be > 0")
    if bw <= 0 or bh <= 0 or bw > image.width or bh > image.height:
        raise ValueError("query box must be positive and fit inside the image")
    if params.scaler is None:
        raise ValueError("model has no feature scaler")
    appearance_dim = params.scaler.dim // 2 - 5
    if query_appearance is None:
        query_appearance = np.zeros(appearance_dim)
    query_appearance = np.asarray(query_appearance, dtype=np.float64)
    if query_appearance.shape != (appearance_dim,):
        raise ValueError(f"query appearance must have dim {appearance_dim}")

    cols = int((image.width - bw) // stride) + 1
    rows = int((image.height - bh) // stride) + 1
    feats = []
    for r in range(rows):
        for c in range(cols):
            x0, y0 = c * stride, r * stride
            box = Region(
                id=10**9,
                bbox=(x0, y0, x0 + bw, y0 + bh),
                category="query",
                appearance=query_appearance,
            )
            feats.append(params.scaler.apply(raw_pair_vector(box, context_region, image)))
    trace = forward_pairs(params, tokens, np.stack(feats), train_mode=False)
    return np.exp(trace.total_logprob).reshape(rows, cols)


def write_heatmap(grid: np.ndarray, image: ImageMeta, box_size, stride: float, path) -> None:
    """Plain-text grid: header '# w h stride bw bh', then one row per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {image.width:g} {image.height:g} {stride:g} {box_size[0]:g} {box_size[1]:g}\n")
        for row in grid:
            fh.write(" ".join("%.10g" % v for v in row))
            fh.write("\n")
