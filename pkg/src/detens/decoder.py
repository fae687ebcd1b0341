"""A small set-prediction transformer decoder with grouped object queries.

Weights are drawn from a seed, never trained. The decoder exists to exercise
the structural properties of grouped decoding: the inter-group self-attention
mask, the equivalent batch-axis layout, per-group dropout for MC sampling,
and the latency of single-pass versus sequential decoding.

Three layouts compute the same function in deterministic mode:

``masked_joint``
    All ``G * N`` queries in one sequence; self-attention gets an additive
    ``-inf`` bias wherever two queries belong to different groups.
``batched_groups``
    Groups stacked along a leading batch axis, no mask.
``sequential_groups``
    One decoder call per group.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from detens.clustering import Detection
from detens.errors import ConfigurationError, DimensionError
from detens.geometry import Box

LAYOUTS = ("masked_joint", "batched_groups", "sequential_groups")
MODES = ("deterministic", "group_ensemble", "mc_dropout", "mc_group_ensemble")

LN_EPS = 1e-5

# dropout sites inside one decoder layer; part of the dropout RNG key
_SELF_ATTN, _CROSS_ATTN, _FFN_HIDDEN, _FFN_OUT = range(4)

# RNG stream tags, kept apart from each other
_TAG_WEIGHTS, _TAG_QUERIES, _TAG_FEATURES = 11, 12, 13


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 3
    queries_per_group: int = 100
    num_groups: int = 5
    num_classes: int = 8
    feature_tokens: int = 100
    dropout_prob: float = 0.1
    weight_seed: int = 0
    dropout_seed: int = 0
    ffn_dim: Optional[int] = None

    def __post_init__(self):
        for name in ("embed_dim", "num_heads", "num_layers", "queries_per_group", "num_groups", "num_classes", "feature_tokens"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigurationError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        if self.weight_seed < 0 or self.dropout_seed < 0:
            raise ConfigurationError("seeds must be non-negative")

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 4 * self.embed_dim

    @property
    def total_queries(self) -> int:
        return self.num_groups * self.queries_per_group


def build_group_mask(num_groups: int, queries_per_group: int) -> np.ndarray:
    """Binary ``W x W`` mask, 1 where query ``i`` may not attend to query ``j``."""
    if num_groups < 1 or queries_per_group < 1:
        raise ConfigurationError("num_groups and queries_per_group must be >= 1")
    group_of = np.arange(num_groups * queries_per_group) // queries_per_group
    return (group_of[:, None] != group_of[None, :]).astype(np.int8)


def _weight_shapes(cfg: DecoderConfig) -> Dict[str, tuple]:
    d, f, k = cfg.embed_dim, cfg.hidden_dim, cfg.num_classes
    shapes = {}
    for layer in range(cfg.num_layers):
        for att in ("self", "cross"):
            for proj in "qkvo":
                shapes[f"l{layer}.{att}.w{proj}"] = (d, d)
                shapes[f"l{layer}.{att}.b{proj}"] = (d,)
        shapes[f"l{layer}.ffn.w1"] = (d, f)
        shapes[f"l{layer}.ffn.b1"] = (f,)
        shapes[f"l{layer}.ffn.w2"] = (f, d)
        shapes[f"l{layer}.ffn.b2"] = (d,)
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"l{layer}.{ln}.gamma"] = (d,)
            shapes[f"l{layer}.{ln}.beta"] = (d,)
    shapes.update(
        {
            "cls.w": (d, k),
            "cls.b": (k,),
            "box.w1": (d, d),
            "box.b1": (d,),
            "box.w2": (d, d),
            "box.b2": (d,),
            "box.w3": (d, 4),
            "box.b3": (4,),
        }
    )
    return shapes


def init_weights(cfg: DecoderConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.weight_seed, _TAG_WEIGHTS])
    bound = 1.0 / np.sqrt(cfg.embed_dim)
    weights = {}
    for name, shape in _weight_shapes(cfg).items():
        if name.endswith(".gamma"):
            weights[name] = np.ones(shape)
        elif name.endswith(".beta"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


def make_query_groups(cfg: DecoderConfig, num_groups: Optional[int] = None) -> np.ndarray:
    """Seeded query embeddings, shape ``(G, N, d)``.

    Group ``g`` depends only on ``(weight_seed, g)``, so group 1 is the same
    whatever the total group count.
    """
    g_total = cfg.num_groups if num_groups is None else num_groups
    groups = [
        np.random.default_rng([cfg.weight_seed, _TAG_QUERIES, g]).standard_normal((cfg.queries_per_group, cfg.embed_dim))
        for g in range(1, g_total + 1)
    ]
    return np.stack(groups)


def make_features(cfg: DecoderConfig, seed: int) -> np.ndarray:
    """Stand-in for encoder output: ``(F, d)`` standard normal features."""
    rng = np.random.default_rng([seed, _TAG_FEATURES])
    return rng.standard_normal((cfg.feature_tokens, cfg.embed_dim))


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def _softmax(scores):
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def _linear(x, w, b):
    # one 2D GEMM over all leading axes
    return (x.reshape(-1, x.shape[-1]) @ w + b).reshape(*x.shape[:-1], w.shape[1])


def _split_heads(x, num_heads):
    # contiguous copies keep the batched matmuls on the BLAS path
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, num_heads, d // num_heads)
    return np.ascontiguousarray(np.swapaxes(x, -2, -3))


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return np.ascontiguousarray(x).reshape(*lead, n, h * dh)


class GroupDecoder:
    """Decoder layers plus classification and box heads."""

    def __init__(self, config: DecoderConfig, weights: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.weights = init_weights(config) if weights is None else weights
        expected = _weight_shapes(config)
        if set(self.weights) != set(expected):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise DimensionError(f"weight names do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            arr = np.asarray(self.weights[name], dtype=float)
            if arr.shape != shape:
                raise DimensionError(f"weight {name} has shape {arr.shape}, expected {shape}")
            self.weights[name] = arr

    # -- attention blocks ------------------------------------------------

    def _attention(self, prefix, x, memory, bias=None):
        w = self.weights
        h = self.config.num_heads
        q = _split_heads(_linear(x, w[prefix + ".wq"], w[prefix + ".bq"]), h)
        k = _split_heads(_linear(memory, w[prefix + ".wk"], w[prefix + ".bk"]), h)
        v = _split_heads(_linear(memory, w[prefix + ".wv"], w[prefix + ".bv"]), h)
        scores = q @ np.ascontiguousarray(np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])
        if bias is not None:
            scores = scores + bias
        out = _merge_heads(_softmax(scores) @ v)
        return _linear(out, w[prefix + ".wo"], w[prefix + ".bo"])

    def _dropout(self, x, layer, site, group_ids, seed):
        """Inverted dropout with one mask per (layer, site, group).

        ``group_ids`` has shape ``(B, n_blocks)``: row block ``j`` of batch
        item ``b`` holds the N queries of group ``group_ids[b, j]``.
        """
        p = self.config.dropout_prob
        if p == 0.0:
            return x
        n = self.config.queries_per_group
        width = x.shape[-1]
        masks = np.empty(x.shape, dtype=bool)
        for b, row in enumerate(group_ids):
            for j, g in enumerate(row):
                rng = np.random.default_rng([seed, layer, site, int(g)])
                masks[b, j * n:(j + 1) * n] = rng.random((n, width)) >= p
        return np.where(masks, x / (1.0 - p), 0.0)

    def _layers(self, x, features, bias, group_ids, dropout_seed):
        w = self.weights
        drop = dropout_seed is not None

        def maybe_drop(t, layer, site):
            return self._dropout(t, layer, site, group_ids, dropout_seed) if drop else t

        for layer in range(self.config.num_layers):
            p = f"l{layer}"
            t = self._attention(p + ".self", x, x, bias)
            x = _layer_norm(x + maybe_drop(t, layer, _SELF_ATTN), w[p + ".ln1.gamma"], w[p + ".ln1.beta"])
            t = self._attention(p + ".cross", x, features)
            x = _layer_norm(x + maybe_drop(t, layer, _CROSS_ATTN), w[p + ".ln2.gamma"], w[p + ".ln2.beta"])
            hidden = np.maximum(_linear(x, w[p + ".ffn.w1"], w[p + ".ffn.b1"]), 0.0)
            hidden = maybe_drop(hidden, layer, _FFN_HIDDEN)
            t = _linear(hidden, w[p + ".ffn.w2"], w[p + ".ffn.b2"])
            x = _layer_norm(x + maybe_drop(t, layer, _FFN_OUT), w[p + ".ln3.gamma"], w[p + ".ln3.beta"])
        return x

    # -- public API ------------------------------------------------------

    def forward(self, features, queries, mask=None, dropout_seed=None, layout="masked_joint", group_ids=None):
        """Transform query groups; returns an array of shape ``(G, N, d)``.

        ``dropout_seed=None`` runs deterministically. ``group_ids`` are the
        1-based group indices used to key dropout masks (default ``1..G``).
        """
        cfg = self.config
        features = np.asarray(features, dtype=float)
        queries = np.asarray(queries, dtype=float)
        if features.ndim != 2 or features.shape[1] != cfg.embed_dim:
            raise DimensionError(f"features must be (F, {cfg.embed_dim}), got {features.shape}")
        if not np.isfinite(features).all():
            raise DimensionError("features contain non-finite values")
        if queries.ndim != 3 or queries.shape[1:] != (cfg.queries_per_group, cfg.embed_dim):
            raise DimensionError(
                f"queries must be (G, {cfg.queries_per_group}, {cfg.embed_dim}), got {queries.shape}"
            )
        n_groups, n = queries.shape[:2]
        ids = np.arange(1, n_groups + 1) if group_ids is None else np.asarray(group_ids)
        if ids.shape != (n_groups,):
            raise ConfigurationError(f"expected {n_groups} group ids, got {ids.shape}")
        if layout not in LAYOUTS:
            raise ConfigurationError(f"unknown layout {layout!r}")
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != (n_groups * n, n_groups * n) or not np.array_equal(mask, build_group_mask(n_groups, n)):
                raise ConfigurationError(f"mask does not match G={n_groups}, N={n}")
        elif layout == "masked_joint" and n_groups > 1:
            raise ConfigurationError("masked_joint layout needs the group mask")

        if layout == "masked_joint":
            bias = None
            if n_groups > 1:
                bias = np.where(mask.astype(bool), -np.inf, 0.0)
            x = queries.reshape(1, n_groups * n, cfg.embed_dim)
            out = self._layers(x, features, bias, ids[None, :], dropout_seed)
            return out.reshape(n_groups, n, cfg.embed_dim)
        if layout == "batched_groups":
            return self._layers(queries, features, None, ids[:, None], dropout_seed)
        outs = [
            self._layers(queries[g:g + 1], features, None, ids[g:g + 1, None], dropout_seed)[0]
            for g in range(n_groups)
        ]
        return np.stack(outs)

    def heads(self, transformed, group_index: int = 1) -> List[Detection]:
        """Class and box heads on one group's ``(N, d)`` output."""
        w = self.weights
        transformed = np.asarray(transformed, dtype=float)
        if not np.isfinite(transformed).all():
            raise DimensionError("transformed queries contain non-finite values")
        probs = 1.0 / (1.0 + np.exp(-(transformed @ w["cls.w"] + w["cls.b"])))
        labels = probs.argmax(axis=-1)  # first maximum = lowest class index
        confs = probs[np.arange(len(probs)), labels]
        h = np.maximum(transformed @ w["box.w1"] + w["box.b1"], 0.0)
        h = np.maximum(h @ w["box.w2"] + w["box.b2"], 0.0)
        boxes = 1.0 / (1.0 + np.exp(-(h @ w["box.w3"] + w["box.b3"])))
        return [
            Detection(Box.cxcywh(*boxes[i]), int(labels[i]) + 1, float(confs[i]), group_index, i)
            for i in range(len(transformed))
        ]

    # -- persistence -----------------------------------------------------

    def dump(self, path) -> None:
        from detens.io import atomic_write_text

        payload = {
            "config": asdict(self.config),
            "weights": {name: arr.tolist() for name, arr in self.weights.items()},
        }
        atomic_write_text(path, json.dumps(payload))

    @classmethod
    def load(cls, path) -> "GroupDecoder":
        payload = json.loads(Path(path).read_text())
        cfg = DecoderConfig(**payload["config"])
        return cls(cfg, {k: np.asarray(v, dtype=float) for k, v in payload["weights"].items()})


def decoder_forward(model: GroupDecoder, features, queries, mask=None, mode="deterministic", layout="masked_joint", dropout_seed=None, group_ids=None):
    """Functional entry point; ``mode`` is ``"deterministic"`` or ``"dropout"``."""
    if mode == "deterministic":
        seed = None
    elif mode == "dropout":
        seed = model.config.dropout_seed if dropout_seed is None else dropout_seed
    else:
        raise ConfigurationError(f"unknown forward mode {mode!r}")
    return model.forward(features, queries, mask=mask, dropout_seed=seed, layout=layout, group_ids=group_ids)


def task_heads(model: GroupDecoder, transformed, group_index: int = 1) -> List[Detection]:
    return model.heads(transformed, group_index)


def run_ensemble_pass(model: GroupDecoder, features, mode: str = "group_ensemble", layout: str = "batched_groups", dropout_seed=None) -> List[List[Detection]]:
    """One forward pass producing G detection sets (1 for ``deterministic``).

    ``group_ensemble``: G distinct query groups, no dropout.
    ``mc_dropout``: query group 1 repeated G times, dropout active with an
    independent mask per copy.
    ``mc_group_ensemble``: G distinct groups with dropout active.
    ``deterministic``: group 1 only, no dropout.
    """
    cfg = model.config
    if mode not in MODES:
        raise ConfigurationError(f"unknown ensemble mode {mode!r}")
    if layout not in LAYOUTS:
        raise ConfigurationError(f"unknown layout {layout!r}")
    if mode == "deterministic":
        queries = make_query_groups(cfg, 1)
    elif mode == "mc_dropout":
        queries = np.repeat(make_query_groups(cfg, 1), cfg.num_groups, axis=0)
    else:
        queries = make_query_groups(cfg)
    n_groups = len(queries)
    mask = build_group_mask(n_groups, cfg.queries_per_group)
    fwd_mode = "dropout" if mode in ("mc_dropout", "mc_group_ensemble") else "deterministic"
    out = decoder_forward(model, features, queries, mask, fwd_mode, layout, dropout_seed)
    return [model.heads(out[g], g + 1) for g in range(n_groups)]


def ensemble_members(cfg: DecoderConfig, size: int) -> List[GroupDecoder]:
    """``size`` decoders that differ only in their weight seed."""
    return [GroupDecoder(replace(cfg, weight_seed=cfg.weight_seed + i, num_groups=1)) for i in range(size)]


def sequential_ensemble_pass(models: Sequence[GroupDecoder], features) -> List[List[Detection]]:
    """Run independently weighted decoders one after another, one detection set each."""
    sets = []
    for i, model in enumerate(models):
        out = model.forward(features, make_query_groups(model.config, 1), layout="sequential_groups")
        sets.append(model.heads(out[0], i + 1))
    return sets
