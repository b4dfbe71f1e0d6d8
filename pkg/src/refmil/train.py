"""Epoch-level training over prepared scenes.

Each expression visit scores all of its (region, context) pairs in one
batched forward pass, routes the loss's per-word weights through one
backward pass, and accumulates gradients over a mini-batch before the SGD
step. A single seeded generator drives shuffling, sampling, and dropout, so
a run is reproducible end to end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import BBOX_DIM, Scaler, fit_scaler_from_candidates, region_block
from .net import (
    ModelParams,
    NetConfig,
    NumericError,
    OptState,
    backward_pairs,
    current_lr,
    forward_pairs,
    init_params,
    sgd_step,
    zero_grads,
)
from .objectives import (
    Bag,
    PairScoreTable,
    TrainConfig,
    loss_max_likelihood,
    loss_max_margin,
    loss_mil_neg,
    loss_mil_posneg,
    sample_hard_negatives,
    select_latent_positive,
)
from .scene import (
    IMAGE_REGION_ID,
    CandidateSet,
    Scene,
    Vocabulary,
    build_candidate_set,
    build_vocabulary,
    encode_expression,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreparedScene:
    """Candidate set with pre-scaled per-role feature blocks."""

    cands: CandidateSet
    region_slot: dict[int, np.ndarray]
    context_slot: dict[int, np.ndarray]

    def pair_vector(self, region_id: int, context_id: int) -> np.ndarray:
        return np.concatenate([self.region_slot[region_id], self.context_slot[context_id]])


@dataclass(frozen=True)
class PreparedExpression:
    scene_index: int
    tokens: tuple[int, ...]
    target: int


@dataclass
class TrainingSet:
    scenes: list[PreparedScene]
    expressions: list[PreparedExpression]
    vocab: Vocabulary
    scaler: Scaler
    appearance_dim: int


def prepare_scene(scene: Scene, scaler: Scaler) -> PreparedScene:
    cands = build_candidate_set(scene.image, scene.regions)
    d = scaler.dim // 2
    region_half = Scaler(low=scaler.low[:d], high=scaler.high[:d])
    context_half = Scaler(low=scaler.low[d:], high=scaler.high[d:])
    region_slot = {}
    context_slot = {}
    for r in cands.all_regions:
        block = region_block(r, scene.image)
        region_slot[r.id] = region_half.apply(block)
        context_slot[r.id] = context_half.apply(block)
    return PreparedScene(cands=cands, region_slot=region_slot, context_slot=context_slot)


def build_training_set(
    scenes: list[Scene],
    min_count: int = 1,
    vocab: Vocabulary | None = None,
    scaler: Scaler | None = None,
) -> TrainingSet:
    if not scenes:
        raise ValueError("no scenes")
    dims = {r.appearance.shape[0] for s in scenes for r in s.regions}
    if len(dims) != 1:
        raise ValueError(f"inconsistent appearance dims {sorted(dims)}")
    appearance_dim = dims.pop()
    if vocab is None:
        corpus = [e.tokens for s in scenes for e in s.expressions]
        vocab = build_vocabulary(corpus, min_count=min_count)
    if scaler is None:
        pairs = [(s.image, build_candidate_set(s.image, s.regions)) for s in scenes]
        scaler = fit_scaler_from_candidates(pairs)
    if scaler.dim != 2 * (appearance_dim + BBOX_DIM):
        raise ValueError("scaler dimension disagrees with the appearance vectors")
    prepared = [prepare_scene(s, scaler) for s in scenes]
    expressions = []
    for i, scene in enumerate(scenes):
        ids = {r.id for r in scene.regions}
        for e in scene.expressions:
            if e.target not in ids:
                raise ValueError(f"expression target {e.target} missing from scene {i}")
            enc = encode_expression(e.tokens, vocab, target_region_id=e.target)
            expressions.append(
                PreparedExpression(scene_index=i, tokens=enc.tokens, target=e.target)
            )
    if not expressions:
        raise ValueError("no expressions")
    return TrainingSet(
        scenes=prepared,
        expressions=expressions,
        vocab=vocab,
        scaler=scaler,
        appearance_dim=appearance_dim,
    )


def score_pairs(
    params: ModelParams,
    ps: PreparedScene,
    tokens: tuple[int, ...],
    pairs: list[tuple[int, int]],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """One batched forward over the listed pairs; returns (trace, score table)."""
    feats = np.stack([ps.pair_vector(r, c) for r, c in pairs])
    trace = forward_pairs(params, tokens, feats, train_mode=train_mode, rng=rng)
    table = PairScoreTable()
    for k, (r, c) in enumerate(pairs):
        table.add(r, c, trace.word_logprobs[:, k])
    return trace, table


@dataclass
class ExprPlan:
    """Sampled contexts and negatives for one expression, one epoch."""

    contexts: list[int] = field(default_factory=list)     # image first, then sampled proposals
    hard_negatives: list[int] = field(default_factory=list)
    negative_pairs: list[tuple[int, int]] = field(default_factory=list)
    r_c: int | None = None


def _sample_plan(
    ps: PreparedScene, target: int, cfg: TrainConfig, rng: np.random.Generator
) -> ExprPlan:
    others = sorted(r.id for r in ps.cands.proposals if r.id != target)
    k = min(cfg.context_samples_train, len(others))
    sampled = sorted(rng.choice(others, size=k, replace=False).tolist()) if k else []
    contexts = [IMAGE_REGION_ID] + sampled
    hard = sample_hard_negatives(ps.cands, target, cfg.hard_negatives_per_expr, rng)
    neg_pairs: list[tuple[int, int]] = []
    for h in hard:
        neg_pairs.append((h, IMAGE_REGION_ID))
        choices = [c for c in sampled if c != h]
        if not choices:
            choices = [r.id for r in ps.cands.proposals if r.id != h]
        neg_pairs.append((h, int(rng.choice(choices))))
    return ExprPlan(contexts=contexts, hard_negatives=hard, negative_pairs=neg_pairs)


def _expression_pairs(plan: ExprPlan, target: int, objective: str) -> list[tuple[int, int]]:
    if objective == "max_likelihood":
        return [(target, IMAGE_REGION_ID)]
    if objective == "max_margin":
        return [(target, IMAGE_REGION_ID)] + [(h, IMAGE_REGION_ID) for h in plan.hard_negatives]
    pairs = [(target, c) for c in plan.contexts]
    seen = set(pairs)
    for np_pair in plan.negative_pairs:
        if np_pair not in seen:
            pairs.append(np_pair)
            seen.add(np_pair)
    return pairs


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    active_hinge_fraction: float
    lr: float


def train_epoch(
    params: ModelParams,
    ts: TrainingSet,
    cfg: TrainConfig,
    opt: OptState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    n = len(ts.expressions)
    needs_sampling = cfg.objective != "max_likelihood"
    plans: list[ExprPlan] = []
    if needs_sampling:
        for pe in ts.expressions:
            plans.append(_sample_plan(ts.scenes[pe.scene_index], pe.target, cfg, rng))
    else:
        plans = [ExprPlan() for _ in range(n)]

    if cfg.objective == "mil_posneg":
        # choose each expression's positive instance with dropout off
        for pe, plan in zip(ts.expressions, plans):
            ps = ts.scenes[pe.scene_index]
            pairs = [(pe.target, c) for c in plan.contexts]
            _, table = score_pairs(params, ps, pe.tokens, pairs, train_mode=False)
            plan.r_c = select_latent_positive(table, pe.target, plan.contexts)

    perm = rng.permutation(n)
    total_loss = 0.0
    active = 0
    terms = 0
    for start in range(0, n, opt.batch_size):
        batch = perm[start : start + opt.batch_size]
        grads = zero_grads(params)
        for idx in batch:
            pe = ts.expressions[idx]
            plan = plans[idx]
            ps = ts.scenes[pe.scene_index]
            pairs = _expression_pairs(plan, pe.target, cfg.objective)
            trace, table = score_pairs(params, ps, pe.tokens, pairs, train_mode=True, rng=rng)
            if cfg.objective == "max_likelihood":
                res = loss_max_likelihood(table, pe.target)
            elif cfg.objective == "max_margin":
                if plan.hard_negatives:
                    res = loss_max_margin(table, pe.target, plan.hard_negatives, cfg)
                else:
                    res = loss_max_likelihood(table, pe.target)
            elif cfg.objective == "mil_neg":
                bag = Bag(
                    target=pe.target,
                    positive_pairs=tuple((pe.target, c) for c in plan.contexts),
                    negative_pairs=tuple(plan.negative_pairs),
                )
                res = loss_mil_neg(table, bag, cfg)
            else:
                bag = Bag(
                    target=pe.target,
                    positive_pairs=tuple((pe.target, c) for c in plan.contexts),
                    negative_pairs=tuple(plan.negative_pairs),
                )
                res = loss_mil_posneg(table, bag, plan.r_c, cfg)
            if not np.isfinite(res.loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, expression {idx}")
            total_loss += res.loss
            active += res.active_hinges
            terms += res.hinge_terms
            weights = np.zeros((trace.scored_length, len(pairs)))
            for k, pair in enumerate(pairs):
                if pair in res.word_grads:
                    weights[:, k] = res.word_grads[pair]
            batch_grads = backward_pairs(params, trace, weights)
            for name, g in batch_grads.items():
                grads[name] += g
        scale = 1.0 / len(batch)
        for name in grads:
            grads[name] *= scale
        sgd_step(params, grads, opt)

    stats = EpochStats(
        epoch=epoch,
        mean_loss=total_loss / n,
        active_hinge_fraction=(active / terms) if terms else 0.0,
        lr=current_lr(opt),
    )
    log.info("%d\t%.6f\t%.4f\t%g", stats.epoch, stats.mean_loss, stats.active_hinge_fraction, stats.lr)
    return stats


def train_model(
    scenes: list[Scene],
    cfg: TrainConfig,
    *,
    hidden_dim: int = 64,
    embed_dim: int = 64,
    dropout_ratio: float = 0.5,
    init_scale: float = 0.1,
    learning_rate: float = 0.01,
    halving_period_iters: int = 50_000,
    batch_size: int = 16,
    min_count: int = 1,
) -> tuple[ModelParams, OptState, list[EpochStats]]:
    """Fit a model end to end on scenes; fully determined by cfg.rng_seed."""
    ts = build_training_set(scenes, min_count=min_count)
    net_cfg = NetConfig(
        vocab_size=len(ts.vocab),
        pair_feature_dim=2 * (ts.appearance_dim + BBOX_DIM),
        hidden_dim=hidden_dim,
        embed_dim=embed_dim,
        dropout_ratio=dropout_ratio,
        init_scale=init_scale,
        rng_seed=cfg.rng_seed,
    )
    params = init_params(net_cfg, vocab=ts.vocab, scaler=ts.scaler)
    opt = OptState(
        learning_rate=learning_rate,
        halving_period_iters=halving_period_iters,
        batch_size=batch_size,
    )
    log.info(
        "objective=%s scenes=%d expressions=%d vocab=%d hidden=%d embed=%d seed=%d",
        cfg.objective, len(scenes), len(ts.expressions), len(ts.vocab),
        hidden_dim, embed_dim, cfg.rng_seed,
    )
    rng = np.random.default_rng(cfg.rng_seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        history.append(train_epoch(params, ts, cfg, opt, rng, epoch=epoch))
    return params, opt, history
