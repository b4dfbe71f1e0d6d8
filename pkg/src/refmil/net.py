"""Single-layer LSTM sentence scorer with manual forward/backward.

The network reads [word embedding ++ pair features] at every timestep and
predicts the next token through a softmax over the vocabulary. All pairs of
one expression share the token sequence, so the forward/backward run batched
over pairs. Double precision throughout; gradients are hand-derived and
verified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .features import Scaler
from .scene import RefExpression, Vocabulary

TENSOR_ORDER = ("embed", "w_x", "w_h", "b", "w_out", "b_out")

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced a non-finite value."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, corrupt, or incompatible."""


@dataclass(frozen=True)
class NetConfig:
    vocab_size: int
    pair_feature_dim: int
    hidden_dim: int = 64
    embed_dim: int = 64
    dropout_ratio: float = 0.5
    init_scale: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.pair_feature_dim, self.hidden_dim, self.embed_dim) < 1:
            raise ValueError("all dims must be >= 1")
        if not (0.0 <= self.dropout_ratio < 1.0):
            raise ValueError("dropout_ratio must be in [0, 1)")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")


@dataclass
class OptState:
    learning_rate: float = 0.01
    halving_period_iters: int = 50_000
    iteration: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.halving_period_iters < 1 or self.batch_size < 1:
            raise ValueError("halving_period_iters and batch_size must be >= 1")


def current_lr(opt: OptState) -> float:
    """Step-halving schedule: halves after every halving_period_iters steps."""
    return opt.learning_rate * 0.5 ** (opt.iteration // opt.halving_period_iters)


@dataclass
class ModelParams:
    cfg: NetConfig
    tensors: dict[str, np.ndarray]
    vocab: Vocabulary | None = None
    scaler: Scaler | None = None

    def copy(self) -> ModelParams:
        return ModelParams(
            cfg=self.cfg,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            vocab=self.vocab,
            scaler=self.scaler,
        )


def init_params(
    cfg: NetConfig, vocab: Vocabulary | None = None, scaler: Scaler | None = None
) -> ModelParams:
    """Uniform [-init_scale, init_scale] weights, zero biases; seeded draw order."""
    rng = np.random.default_rng(cfg.rng_seed)
    v, e, h, f = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.pair_feature_dim
    s = cfg.init_scale
    tensors = {
        "embed": rng.uniform(-s, s, size=(v, e)),
        "w_x": rng.uniform(-s, s, size=(4 * h, e + f)),
        "w_h": rng.uniform(-s, s, size=(4 * h, h)),
        "b": np.zeros(4 * h),
        "w_out": rng.uniform(-s, s, size=(v, h)),
        "b_out": np.zeros(v),
    }
    return ModelParams(cfg=cfg, tensors=tensors, vocab=vocab, scaler=scaler)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, cached per (timestep, pair).

    T is the scored length (tokens minus the leading bos), K the pair count.
    Arrays are laid out (T, K, ...).
    """

    tokens: tuple[int, ...]
    features: np.ndarray           # (K, F)
    train_mode: bool
    x_e: np.ndarray                # (T, K, E) embedding after dropout
    mask_e: np.ndarray | None      # (T, K, E) inverted-dropout masks, None when off
    mask_h: np.ndarray | None      # (T, K, H)
    gates: np.ndarray              # (T, K, 4H) post-activation [i, f, o, g]
    c: np.ndarray                  # (T, K, H)
    tanh_c: np.ndarray             # (T, K, H)
    h: np.ndarray                  # (T, K, H)
    h_drop: np.ndarray             # (T, K, H) hidden state after dropout
    probs: np.ndarray              # (T, K, V) softmax rows
    word_logprobs: np.ndarray      # (T, K) log p of the observed next token
    total_logprob: np.ndarray = field(init=False)  # (K,)

    def __post_init__(self):
        self.total_logprob = self.word_logprobs.sum(axis=0)

    @property
    def n_pairs(self) -> int:
        return self.features.shape[0]

    @property
    def scored_length(self) -> int:
        return self.word_logprobs.shape[0]


def forward_pairs(
    params: ModelParams,
    tokens: tuple[int, ...] | list[int],
    features: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Score one token sequence against K feature rows in a single pass.

    Input at step t is [embed(token_t) ++ features]; the prediction target is
    token_{t+1}. Every token after bos is scored, eos included.
    """
    cfg = params.cfg
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) < 2:
        raise ValueError("need at least two tokens (bos plus one scored position)")
    if min(tokens) < 0 or max(tokens) >= cfg.vocab_size:
        raise ValueError("token index out of vocabulary range")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != cfg.pair_feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} != configured {cfg.pair_feature_dim}"
        )
    T = len(tokens) - 1
    K = features.shape[0]
    E, H = cfg.embed_dim, cfg.hidden_dim
    embed, w_x, w_h, b = (params.tensors[k] for k in ("embed", "w_x", "w_h", "b"))
    w_out, b_out = params.tensors["w_out"], params.tensors["b_out"]

    drop = train_mode and cfg.dropout_ratio > 0.0
    if drop and rng is None:
        rng = np.random.default_rng()
    keep = 1.0 - cfg.dropout_ratio

    # embeddings for all steps, then dropout
    e_raw = embed[np.array(tokens[:-1])]                      # (T, E)
    x_e = np.broadcast_to(e_raw[:, None, :], (T, K, E)).copy()
    mask_e = mask_h = None
    if drop:
        mask_e = (rng.random((T, K, E)) >= cfg.dropout_ratio) / keep
        x_e *= mask_e

    # the feature half of the input projection is step-independent
    wx_e, wx_f = w_x[:, :E], w_x[:, E:]
    feat_proj = features @ wx_f.T                              # (K, 4H)
    x_proj = x_e.reshape(T * K, E) @ wx_e.T
    x_proj = x_proj.reshape(T, K, 4 * H) + feat_proj + b

    gates = np.empty((T, K, 4 * H))
    c_all = np.empty((T, K, H))
    tanh_c = np.empty((T, K, H))
    h_all = np.empty((T, K, H))
    h_prev = np.zeros((K, H))
    c_prev = np.zeros((K, H))
    for t in range(T):
        z = x_proj[t] + h_prev @ w_h.T
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        o = _sigmoid(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c_prev = f * c_prev + i * g
        tc = np.tanh(c_prev)
        h_prev = o * tc
        gates[t, :, :H], gates[t, :, H : 2 * H] = i, f
        gates[t, :, 2 * H : 3 * H], gates[t, :, 3 * H :] = o, g
        c_all[t], tanh_c[t], h_all[t] = c_prev, tc, h_prev

    h_drop = h_all
    if drop:
        mask_h = (rng.random((T, K, H)) >= cfg.dropout_ratio) / keep
        h_drop = h_all * mask_h

    logits = h_drop.reshape(T * K, H) @ w_out.T + b_out
    logp = _log_softmax(logits).reshape(T, K, cfg.vocab_size)
    probs = np.exp(logp)
    targets = np.array(tokens[1:])
    word_logprobs = logp[np.arange(T)[:, None], np.arange(K)[None, :], targets[:, None]]

    return ForwardTrace(
        tokens=tokens,
        features=features,
        train_mode=train_mode,
        x_e=x_e,
        mask_e=mask_e,
        mask_h=mask_h,
        gates=gates,
        c=c_all,
        tanh_c=tanh_c,
        h=h_all,
        h_drop=h_drop,
        probs=probs,
        word_logprobs=word_logprobs,
    )


def forward_logprob(
    params: ModelParams,
    expr: RefExpression,
    feat: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Single-pair wrapper: score one expression against one feature vector."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 1:
        raise ValueError("feat must be a single vector; use forward_pairs for batches")
    return forward_pairs(params, expr.tokens, feat[None, :], train_mode, rng)


def backward_pairs(
    params: ModelParams, trace: ForwardTrace, weights: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient of sum_{t,k} weights[t,k] * word_logprobs[t,k] w.r.t. every tensor."""
    cfg = params.cfg
    T, K = trace.scored_length, trace.n_pairs
    E, H, V = cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (T, K):
        raise ValueError(f"weights shape {weights.shape} != {(T, K)}")
    w_x, w_h, w_out = params.tensors["w_x"], params.tensors["w_h"], params.tensors["w_out"]
    wx_e, wx_f = w_x[:, :E], w_x[:, E:]
    targets = np.array(trace.tokens[1:])

    # d/dlogits of w * logp[target] = w * (onehot(target) - softmax)
    dlogits = -trace.probs * weights[:, :, None]
    dlogits[np.arange(T)[:, None], np.arange(K)[None, :], targets[:, None]] += weights

    grads = {name: np.zeros_like(params.tensors[name]) for name in TENSOR_ORDER}
    flat_dlogits = dlogits.reshape(T * K, V)
    grads["w_out"] = flat_dlogits.T @ trace.h_drop.reshape(T * K, H)
    grads["b_out"] = flat_dlogits.sum(axis=0)

    dh_out = dlogits @ w_out                                   # (T, K, H)
    if trace.mask_h is not None:
        dh_out = dh_out * trace.mask_h

    dz_all = np.empty((T, K, 4 * H))
    dh_next = np.zeros((K, H))
    dc_next = np.zeros((K, H))
    for t in range(T - 1, -1, -1):
        dh = dh_out[t] + dh_next
        i, f = trace.gates[t, :, :H], trace.gates[t, :, H : 2 * H]
        o, g = trace.gates[t, :, 2 * H : 3 * H], trace.gates[t, :, 3 * H :]
        tc = trace.tanh_c[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = trace.c[t - 1] if t > 0 else np.zeros((K, H))
        di = dc * g
        df = dc * c_prev
        do = dh * tc
        dg = dc * i
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ],
            axis=1,
        )
        dz_all[t] = dz
        h_prev = trace.h[t - 1] if t > 0 else np.zeros((K, H))
        grads["w_h"] += dz.T @ h_prev
        dh_next = dz @ w_h
        dc_next = dc * f

    flat_dz = dz_all.reshape(T * K, 4 * H)
    grads["w_x"][:, :E] = flat_dz.T @ trace.x_e.reshape(T * K, E)
    grads["w_x"][:, E:] = dz_all.sum(axis=0).reshape(K, 4 * H).T @ trace.features
    grads["b"] = flat_dz.sum(axis=0)

    dx_e = dz_all @ wx_e                                        # (T, K, E)
    if trace.mask_e is not None:
        dx_e = dx_e * trace.mask_e
    np.add.at(grads["embed"], np.array(trace.tokens[:-1]), dx_e.sum(axis=1))
    return grads


def backward(
    params: ModelParams, trace: ForwardTrace, per_word_loss_grads: np.ndarray
) -> dict[str, np.ndarray]:
    """Single-pair wrapper around backward_pairs."""
    g = np.asarray(per_word_loss_grads, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] != trace.scored_length:
        raise ValueError("per-word grads length must equal the scored word count")
    if trace.n_pairs != 1:
        raise ValueError("trace holds multiple pairs; use backward_pairs")
    return backward_pairs(params, trace, g[:, None])


def accumulate(total: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        total[name] += g


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], opt: OptState) -> None:
    """In-place p -= lr * g with the step-halving schedule; rejects non-finite grads."""
    lr = current_lr(opt)
    for name in TENSOR_ORDER:
        g = grads[name]
        if g.shape != params.tensors[name].shape:
            raise ValueError(f"gradient shape mismatch on {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at iteration {opt.iteration}")
        params.tensors[name] -= lr * g
    opt.iteration += 1


def grad_check(cfg: NetConfig, trials: int = 20, eps: float = 1e-5, seed: int = 0) -> float:
    """Worst per-tensor relative error of backward vs central finite differences.

    Runs with dropout off on random params, tokens, features, and loss weights.
    Error per tensor is ||analytic - numeric||2 / max(||analytic||2 + ||numeric||2,
    1e-12), which is 0 when both sides vanish.
    """
    rng = np.random.default_rng(seed)
    cfg = replace(cfg, dropout_ratio=0.0)
    worst = 0.0
    for _ in range(trials):
        params = init_params(replace(cfg, rng_seed=int(rng.integers(2**31))))
        T = int(rng.integers(2, 6))
        K = int(rng.integers(1, 4))
        tokens = tuple(int(t) for t in rng.integers(0, cfg.vocab_size, size=T + 1))
        features = rng.normal(size=(K, cfg.pair_feature_dim))
        weights = rng.normal(size=(T, K))

        trace = forward_pairs(params, tokens, features, train_mode=False)
        analytic = backward_pairs(params, trace, weights)

        def loss() -> float:
            tr = forward_pairs(params, tokens, features, train_mode=False)
            return float((weights * tr.word_logprobs).sum())

        for name in TENSOR_ORDER:
            tensor = params.tensors[name]
            numeric = np.zeros_like(tensor)
            flat = tensor.reshape(-1)
            nflat = numeric.reshape(-1)
            for j in range(flat.shape[0]):
                orig = flat[j]
                flat[j] = orig + eps
                up = loss()
                flat[j] = orig - eps
                down = loss()
                flat[j] = orig
                nflat[j] = (up - down) / (2.0 * eps)
            a, n = analytic[name], numeric
            denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
            worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


# ---------------------------------------------------------------------------
# checkpointing

def _emit_json(obj) -> str:
    """JSON with floats at 17 significant digits for bit-exact round trips."""
    import json as _json

    if isinstance(obj, dict):
        items = ",".join(f"{_json.dumps(str(k))}:{_emit_json(v)}" for k, v in obj.items())
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_emit_json(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not np.isfinite(f):
            raise NumericError("cannot serialize non-finite float")
        return "%.17g" % f
    if isinstance(obj, str):
        return _json.dumps(obj)
    if obj is None:
        return "null"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def save_checkpoint(params: ModelParams, opt: OptState, path) -> None:
    cfg = params.cfg
    for name in TENSOR_ORDER:
        if not np.all(np.isfinite(params.tensors[name])):
            raise NumericError(f"non-finite values in tensor {name}")
    doc = {
        "version": CHECKPOINT_VERSION,
        "net_config": {
            "vocab_size": cfg.vocab_size,
            "pair_feature_dim": cfg.pair_feature_dim,
            "hidden_dim": cfg.hidden_dim,
            "embed_dim": cfg.embed_dim,
            "dropout_ratio": cfg.dropout_ratio,
            "init_scale": cfg.init_scale,
            "rng_seed": cfg.rng_seed,
        },
        "opt_state": {
            "learning_rate": opt.learning_rate,
            "halving_period_iters": opt.halving_period_iters,
            "iteration": opt.iteration,
            "batch_size": opt.batch_size,
        },
        "vocab": None if params.vocab is None else {"words": params.vocab.words},
        "scaler": None
        if params.scaler is None
        else {
            "low": [float(v) for v in params.scaler.low],
            "high": [float(v) for v in params.scaler.high],
        },
        "tensors": {
            name: [list(t.shape), [float(v) for v in t.reshape(-1)]]
            for name, t in ((n, params.tensors[n]) for n in TENSOR_ORDER)
        },
    }
    text = _emit_json(doc)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, OptState]:
    import json as _json

    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = _json.load(fh)
    except (OSError, _json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {doc.get('version')!r}"
            if isinstance(doc, dict)
            else "checkpoint is not a JSON object"
        )
    try:
        cfg = NetConfig(**doc["net_config"])
        opt = OptState(**doc["opt_state"])
        vocab = None if doc["vocab"] is None else Vocabulary(doc["vocab"]["words"])
        scaler = (
            None
            if doc["scaler"] is None
            else Scaler(
                low=np.asarray(doc["scaler"]["low"], dtype=np.float64),
                high=np.asarray(doc["scaler"]["high"], dtype=np.float64),
            )
        )
        tensors = {}
        for name in TENSOR_ORDER:
            dims, values = doc["tensors"][name]
            tensors[name] = np.asarray(values, dtype=np.float64).reshape(dims)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    expected = {
        "embed": (cfg.vocab_size, cfg.embed_dim),
        "w_x": (4 * cfg.hidden_dim, cfg.embed_dim + cfg.pair_feature_dim),
        "w_h": (4 * cfg.hidden_dim, cfg.hidden_dim),
        "b": (4 * cfg.hidden_dim,),
        "w_out": (cfg.vocab_size, cfg.hidden_dim),
        "b_out": (cfg.vocab_size,),
    }
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, want {shape}")
        if not np.all(np.isfinite(tensors[name])):
            raise CheckpointError(f"non-finite values in tensor {name}")
    if vocab is not None and len(vocab) != cfg.vocab_size:
        raise CheckpointError("vocabulary size disagrees with net config")
    return ModelParams(cfg=cfg, tensors=tensors, vocab=vocab, scaler=scaler), opt
