"""Bags, negative sampling, and the four training losses.

Every loss returns the per-word weights dL/dlogp keyed by (region, context)
pair, so the caller can route them through one batched backward pass. The
negative-bag loss shares its inner accumulation with the fixed-context
max-margin loss: restricted to the image context they produce identical
floating-point values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .scene import IMAGE_REGION_ID, CandidateSet

log = logging.getLogger(__name__)

OBJECTIVES = ("max_likelihood", "max_margin", "mil_neg", "mil_posneg")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mil_neg"
    margin: float = 0.1
    lam: float = 1.0
    lam_n: float = 1.0
    lam_p: float = 1.0
    hard_negatives_per_expr: int = 5
    context_samples_train: int = 5
    context_samples_test_max: int = 10
    epochs: int = 30
    rng_seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if min(self.lam, self.lam_n, self.lam_p) < 0:
            raise ValueError("margin weights must be >= 0")
        if min(self.hard_negatives_per_expr, self.context_samples_train, self.context_samples_test_max) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class Bag:
    """Positive pairs (target, context) and negative pairs (other, context).

    The image sentinel may appear as any pair's context but never as a
    negative pair's first element.
    """

    target: int
    positive_pairs: tuple[tuple[int, int], ...]
    negative_pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for r, c in self.positive_pairs:
            if r != self.target:
                raise ValueError("positive pair must have the target as first element")
            if r == c:
                raise ValueError("pair with identical elements")
        for r, c in self.negative_pairs:
            if r == self.target or r == IMAGE_REGION_ID:
                raise ValueError("negative pair's first element must be a non-target proposal")
            if r == c:
                raise ValueError("pair with identical elements")


def build_bags(cands: CandidateSet, target: int) -> Bag:
    """Full enumeration per the bag rule, ordered by region id."""
    proposal_ids = sorted(r.id for r in cands.proposals)
    if target not in proposal_ids:
        raise ValueError(f"target {target} is not a proposal in the candidate set")
    all_ids = [IMAGE_REGION_ID] + proposal_ids
    positives = tuple((target, c) for c in all_ids if c != target)
    negatives = tuple(
        (p, c) for p in proposal_ids if p != target for c in all_ids if c != p
    )
    return Bag(target=target, positive_pairs=positives, negative_pairs=negatives)


def sample_hard_negatives(
    cands: CandidateSet, target: int, k: int, rng: np.random.Generator
) -> list[int]:
    """Up to k non-target proposals, same-category ones first, random fill after."""
    if k < 1:
        raise ValueError("k must be >= 1")
    target_region = cands.get(target)
    others = sorted((r for r in cands.proposals if r.id != target), key=lambda r: r.id)
    if not others:
        return []
    same = [r.id for r in others if r.category == target_region.category]
    rest = [r.id for r in others if r.category != target_region.category]
    if len(same) >= k:
        picked = rng.choice(len(same), size=k, replace=False)
        return [same[i] for i in sorted(picked)]
    fill = min(k - len(same), len(rest))
    if fill:
        picked = rng.choice(len(rest), size=fill, replace=False)
        return same + [rest[i] for i in sorted(picked)]
    return same


class PairScoreTable:
    """Per-word log-probabilities of one sentence under each scored pair."""

    def __init__(self):
        self._words: dict[tuple[int, int], np.ndarray] = {}

    def add(self, region_id: int, context_id: int, word_logps: np.ndarray) -> None:
        if region_id == context_id:
            raise ValueError("pair with identical elements")
        w = np.asarray(word_logps, dtype=np.float64)
        if not np.all(np.isfinite(w)) or np.any(w > 0):
            raise ValueError("word log-probabilities must be finite and <= 0")
        self._words[(region_id, context_id)] = w

    def __contains__(self, pair: tuple[int, int]) -> bool:
        return pair in self._words

    def __len__(self) -> int:
        return len(self._words)

    def words(self, region_id: int, context_id: int) -> np.ndarray:
        try:
            return self._words[(region_id, context_id)]
        except KeyError:
            raise KeyError(f"pair ({region_id}, {context_id}) not scored") from None

    def total(self, region_id: int, context_id: int) -> float:
        return float(self.words(region_id, context_id).sum())

    def pairs(self) -> list[tuple[int, int]]:
        return list(self._words)


@dataclass
class LossResult:
    loss: float
    # dL/dlogp per scored word, keyed by pair; route through backward as-is
    word_grads: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    active_hinges: int = 0
    hinge_terms: int = 0


def hinge_word_margin(
    pos_word_logps: np.ndarray, neg_word_logps: np.ndarray, margin: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Position-wise hinge over the common prefix.

    Returns (value, d/dpos, d/dneg); sub-gradients are -1/+1 on strictly
    active positions and 0 elsewhere, including exact ties.
    """
    pos = np.asarray(pos_word_logps, dtype=np.float64)
    neg = np.asarray(neg_word_logps, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("empty sequences")
    n = min(pos.shape[0], neg.shape[0])
    diff = margin - pos[:n] + neg[:n]
    active = diff > 0.0
    value = float(diff[active].sum())
    gpos = np.zeros_like(pos)
    gneg = np.zeros_like(neg)
    gpos[:n][active] = -1.0
    gneg[:n][active] = 1.0
    return value, gpos, gneg


def _grad_slot(grads: dict, pair: tuple[int, int], length: int) -> np.ndarray:
    if pair not in grads:
        grads[pair] = np.zeros(length)
    return grads[pair]


def loss_max_likelihood(table: PairScoreTable, target: int) -> LossResult:
    """Plain negative log-likelihood of the sentence given (target, image)."""
    words = table.words(target, IMAGE_REGION_ID)
    loss = float(-words.sum())
    return LossResult(loss=loss, word_grads={(target, IMAGE_REGION_ID): -np.ones_like(words)})


def loss_max_margin(
    table: PairScoreTable, target: int, negatives: list[int], cfg: TrainConfig
) -> LossResult:
    """Likelihood plus hinge against each negative, all pairs fixed to the image context."""
    pos_words = table.words(target, IMAGE_REGION_ID)
    pos_total = float(pos_words.sum())
    grads: dict[tuple[int, int], np.ndarray] = {}
    loss = 0.0
    active = 0
    terms = 0
    pos_w = _grad_slot(grads, (target, IMAGE_REGION_ID), pos_words.shape[0])
    for neg_id in negatives:
        neg_words = table.words(neg_id, IMAGE_REGION_ID)
        h, gpos, gneg = hinge_word_margin(pos_words, neg_words, cfg.margin)
        loss += -pos_total + cfg.lam * h
        active += int(np.count_nonzero(gneg))
        terms += min(pos_words.shape[0], neg_words.shape[0])
        pos_w -= 1.0
        pos_w += cfg.lam * gpos
        _grad_slot(grads, (neg_id, IMAGE_REGION_ID), neg_words.shape[0])
        grads[(neg_id, IMAGE_REGION_ID)] += cfg.lam * gneg
    if not negatives:
        grads = {}
    return LossResult(loss=loss, word_grads=grads, active_hinges=active, hinge_terms=terms)


def pool_positive_logprob(
    table: PairScoreTable, target: int, contexts: list[int]
) -> tuple[float, int]:
    """Best sentence log-probability over the candidate contexts; ties → lowest id."""
    if not contexts:
        raise ValueError("empty context set")
    best_id = None
    best = -np.inf
    for cid in sorted(contexts):
        total = table.total(target, cid)
        if total > best:
            best, best_id = total, cid
    return best, best_id


def select_latent_positive(table: PairScoreTable, target: int, contexts: list[int]) -> int:
    """The context the current model finds most plausible for the target."""
    return pool_positive_logprob(table, target, contexts)[1]


def loss_mil_neg(table: PairScoreTable, bag: Bag, cfg: TrainConfig) -> LossResult:
    """Margin of the pooled positive over every negative pair.

    Gradients touch only the maximizing positive pair and the negatives. An
    empty negative bag degrades to the pooled likelihood term alone.
    """
    contexts = [c for _, c in bag.positive_pairs]
    pos_total, best_ctx = pool_positive_logprob(table, bag.target, contexts)
    pos_pair = (bag.target, best_ctx)
    pos_words = table.words(*pos_pair)
    grads: dict[tuple[int, int], np.ndarray] = {}
    pos_w = _grad_slot(grads, pos_pair, pos_words.shape[0])
    if not bag.negative_pairs:
        log.warning("expression with target %d has no negative pairs; using likelihood only", bag.target)
        pos_w -= 1.0
        return LossResult(loss=-pos_total, word_grads=grads)
    loss = 0.0
    active = 0
    terms = 0
    for ri, rj in bag.negative_pairs:
        neg_words = table.words(ri, rj)
        h, gpos, gneg = hinge_word_margin(pos_words, neg_words, cfg.margin)
        loss += -pos_total + cfg.lam_n * h
        active += int(np.count_nonzero(gneg))
        terms += min(pos_words.shape[0], neg_words.shape[0])
        pos_w -= 1.0
        pos_w += cfg.lam_n * gpos
        _grad_slot(grads, (ri, rj), neg_words.shape[0])
        grads[(ri, rj)] += cfg.lam_n * gneg
    return LossResult(loss=loss, word_grads=grads, active_hinges=active, hinge_terms=terms)


def loss_mil_posneg(table: PairScoreTable, bag: Bag, r_c: int, cfg: TrainConfig) -> LossResult:
    """Margins on both bags around the chosen positive instance (target, r_c)."""
    contexts = [c for _, c in bag.positive_pairs]
    if r_c not in contexts:
        raise ValueError(f"chosen context {r_c} is not among the scored contexts")
    pos_pair = (bag.target, r_c)
    pos_words = table.words(*pos_pair)
    pos_total = float(pos_words.sum())
    grads: dict[tuple[int, int], np.ndarray] = {}
    pos_w = _grad_slot(grads, pos_pair, pos_words.shape[0])
    loss = 0.0
    active = 0
    terms = 0
    for ri, rj in bag.negative_pairs:
        neg_words = table.words(ri, rj)
        h, gpos, gneg = hinge_word_margin(pos_words, neg_words, cfg.margin)
        loss += -pos_total + cfg.lam_n * h
        active += int(np.count_nonzero(gneg))
        terms += min(pos_words.shape[0], neg_words.shape[0])
        pos_w -= 1.0
        pos_w += cfg.lam_n * gpos
        _grad_slot(grads, (ri, rj), neg_words.shape[0])
        grads[(ri, rj)] += cfg.lam_n * gneg
    for rk in contexts:
        if rk == r_c:
            continue
        other_words = table.words(bag.target, rk)
        h, gpos, gneg = hinge_word_margin(pos_words, other_words, cfg.margin)
        loss += -pos_total + cfg.lam_p * h
        active += int(np.count_nonzero(gneg))
        terms += min(pos_words.shape[0], other_words.shape[0])
        pos_w -= 1.0
        pos_w += cfg.lam_p * gpos
        _grad_slot(grads, (bag.target, rk), other_words.shape[0])
        grads[(bag.target, rk)] += cfg.lam_p * gneg
    return LossResult(loss=loss, word_grads=grads, active_hinges=active, hinge_terms=terms)
