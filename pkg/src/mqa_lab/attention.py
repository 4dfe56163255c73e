"""Attention kernels over the validated contraction engine.

Six kernels cover the single-query, batched, and incremental settings for
multi-head attention and for multi-query attention (one shared key/value set
serving all query heads).  Every tensor product is a contract() call whose
spec string is the definition; no kernel reshapes its way around the stated
index structure.  The incremental kernels accumulate over cached positions in
index order, which makes growing and padded cache layouts bit-identical.

An optional TrafficTally records, per operation, the flops performed and the
words of every tensor read and written, so closed-form cost predictions can
be checked against executed kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import KVCache, append, validity_bias
from .exceptions import CacheError, ConfigError, ShapeError
from .tensor import as_array, contract, contraction_flops, masked_softmax

MASK_KINDS = ("none", "causal", "local")


@dataclass(frozen=True)
class AttentionWeights:
    """Projection weights for one attention site.

    p_q and p_o always carry a heads axis: [h, d, k] and [h, d, v].  For
    multi_head, p_k / p_v are per head ([h, d, k] / [h, d, v]); for
    multi_query a single shared pair is used ([d, k] / [d, v]).
    """

    kind: str
    p_q: np.ndarray
    p_k: np.ndarray
    p_v: np.ndarray
    p_o: np.ndarray

    def __post_init__(self):
        if self.kind not in ("multi_head", "multi_query"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.p_q.ndim != 3:
            raise ShapeError(f"p_q must be [h, d, k], got {self.p_q.shape}")
        h, d, k = self.p_q.shape
        if self.p_o.ndim != 3 or self.p_o.shape[:2] != (h, d):
            raise ShapeError(
                f"p_o must be [h={h}, d={d}, v], got {self.p_o.shape}"
            )
        v = self.p_o.shape[2]
        kv_lead = (h, d) if self.kind == "multi_head" else (d,)
        if self.p_k.shape != kv_lead + (k,):
            raise ShapeError(
                f"{self.kind} p_k must have shape {kv_lead + (k,)}, got {self.p_k.shape}"
            )
        if self.p_v.shape != kv_lead + (v,):
            raise ShapeError(
                f"{self.kind} p_v must have shape {kv_lead + (v,)}, got {self.p_v.shape}"
            )

    @property
    def heads(self) -> int:
        return self.p_q.shape[0]

    @property
    def model_width(self) -> int:
        return self.p_q.shape[1]

    @property
    def key_width(self) -> int:
        return self.p_q.shape[2]

    @property
    def value_width(self) -> int:
        return self.p_o.shape[2]


def random_attention_weights(rng, kind, *, d, h, k, v, query_scaled=True) -> AttentionWeights:
    """Draw projection weights with scaled-uniform entries, std 1/sqrt(fan_in).

    With query_scaled, p_q gets an extra 1/sqrt(k) so query-key logits start
    at unit scale; the usual explicit logit scaling is folded into the
    projection instead of appearing in the kernels.
    """
    def draw(shape, fan):
        bound = np.sqrt(3.0 / fan)
        return rng.uniform(-bound, bound, size=shape)

    p_q = draw((h, d, k), d * k if query_scaled else d)
    p_o = draw((h, d, v), h * v)
    if kind == "multi_head":
        p_k = draw((h, d, k), d)
        p_v = draw((h, d, v), d)
    else:
        p_k = draw((d, k), d)
        p_v = draw((d, v), d)
    return AttentionWeights(kind, p_q, p_k, p_v, p_o)


def share_heads(w: AttentionWeights) -> AttentionWeights:
    """Collapse multi-head weights whose heads already agree on p_k / p_v
    into the equivalent multi-query weights."""
    if w.kind != "multi_head":
        raise ConfigError("share_heads expects multi_head weights")
    for name, t in (("p_k", w.p_k), ("p_v", w.p_v)):
        for head in range(1, w.heads):
            if not np.array_equal(t[head], t[0]):
                raise ShapeError(f"{name} differs between heads 0 and {head}")
    return AttentionWeights("multi_query", w.p_q, w.p_k[0].copy(),
                            w.p_v[0].copy(), w.p_o)


def replicate_heads(w: AttentionWeights) -> AttentionWeights:
    """Expand multi-query weights into multi-head weights by giving every
    head its own copy of the shared p_k / p_v."""
    if w.kind != "multi_query":
        raise ConfigError("replicate_heads expects multi_query weights")
    h = w.heads
    p_k = np.ascontiguousarray(np.broadcast_to(w.p_k, (h,) + w.p_k.shape))
    p_v = np.ascontiguousarray(np.broadcast_to(w.p_v, (h,) + w.p_v.shape))
    return AttentionWeights("multi_head", w.p_q, p_k, p_v, w.p_o)


@dataclass(frozen=True)
class MaskSpec:
    """Declarative attention mask for the batched kernels.

    kind 'none' allows everything, 'causal' lets query i see memory
    positions up to its own absolute position, 'local' additionally limits
    it to the trailing `window` positions (the position itself plus
    window - 1 before it).  When n < m the n queries are aligned to the
    last n memory positions.
    """

    kind: str
    b: int
    h: int
    n: int
    m: int
    window: int | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if min(self.b, self.h, self.n, self.m) < 1:
            raise ConfigError("mask dims must be positive")
        if self.kind == "local":
            if self.window is None or self.window < 1:
                raise ConfigError("local masks need window >= 1")
        elif self.window is not None:
            raise ConfigError(f"mask kind {self.kind!r} takes no window")
        if self.kind in ("causal", "local") and self.n > self.m:
            raise ConfigError(
                f"causal/local masks need n <= m, got n={self.n} m={self.m}"
            )


def build_mask(spec: MaskSpec) -> np.ndarray:
    """Materialize the additive mask as a full [b, h, n, m] tensor of 0 and
    -inf.  The full shape is materialized on purpose, so its word count is
    explicit rather than hidden by broadcasting."""
    rows = np.zeros((spec.n, spec.m))
    if spec.kind != "none":
        pos = spec.m - spec.n + np.arange(spec.n)[:, np.newaxis]
        j = np.arange(spec.m)[np.newaxis, :]
        illegal = j > pos
        if spec.kind == "local":
            illegal |= j < pos - (spec.window - 1)
        rows[illegal] = -np.inf
    out = np.empty((spec.b, spec.h, spec.n, spec.m))
    out[...] = rows
    return out


class TrafficTally:
    """Per-operation counters: flops and words read/written.

    Tensor names are stable across one kernel call; tensor_words() counts
    each named tensor once (the declared-size convention), traffic_words()
    counts a tensor again for every operation touching it.
    """

    def __init__(self):
        self.records: list[tuple[str, int, tuple, tuple]] = []

    def add(self, op, flops, reads, writes):
        self.records.append((op, int(flops), tuple(reads), tuple(writes)))

    @property
    def flops(self) -> int:
        return sum(r[1] for r in self.records)

    def flops_by_op(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for op, fl, _, _ in self.records:
            out[op] = out.get(op, 0) + fl
        return out

    def tensor_words(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, _, reads, writes in self.records:
            for name, words in reads + writes:
                if name in out and out[name] != words:
                    raise ShapeError(
                        f"tensor {name!r} recorded with sizes {out[name]} and {words}"
                    )
                out[name] = words
        return out

    def traffic_words(self) -> int:
        return sum(words for _, _, reads, writes in self.records
                   for _, words in reads + writes)


def _words(shape) -> int:
    total = 1
    for d in shape:
        total *= d
    return total


def dot_product_attention(q, keys, values) -> np.ndarray:
    """Single query against an unprojected memory: softmax(q . K) mixing V."""
    q = as_array(q)
    keys = as_array(keys)
    values = as_array(values)
    if keys.shape[-2] == 0:
        raise ShapeError("attention over an empty memory")
    logits = contract(q, keys, "k,mk->m")
    weights = masked_softmax(logits)
    return contract(weights, values, "m,mv->v")


def multihead_attention_single(x, memory, w: AttentionWeights) -> np.ndarray:
    """One query vector, h heads, memory of m positions."""
    if w.kind != "multi_head":
        raise ConfigError(f"kernel needs multi_head weights, got {w.kind}")
    x = as_array(x)
    memory = as_array(memory)
    if memory.shape[-2] == 0:
        raise ShapeError("attention over an empty memory")
    q = contract(x, w.p_q, "d,hdk->hk")
    k = contract(memory, w.p_k, "md,hdk->hmk")
    v = contract(memory, w.p_v, "md,hdv->hmv")
    logits = contract(q, k, "hk,hmk->hm")
    weights = masked_softmax(logits)
    o = contract(weights, v, "hm,hmv->hv")
    return contract(o, w.p_o, "hv,hdv->d")


def _resolve_mask(mask, b, h, n, m) -> np.ndarray:
    if mask is None:
        mask = MaskSpec("none", b, h, n, m)
    if (mask.b, mask.h, mask.n, mask.m) != (b, h, n, m):
        raise ShapeError(
            f"mask dims ({mask.b},{mask.h},{mask.n},{mask.m}) do not match "
            f"attention dims ({b},{h},{n},{m})"
        )
    return build_mask(mask)


def multihead_attention_batched(x, memory, w: AttentionWeights,
                                mask: MaskSpec | None = None,
                                tally: TrafficTally | None = None) -> np.ndarray:
    """Batched multi-head attention: x [b, n, d] against memory [b, m, d]."""
    if w.kind != "multi_head":
        raise ConfigError(f"kernel needs multi_head weights, got {w.kind}")
    x = as_array(x)
    memory = as_array(memory)
    if x.ndim != 3 or memory.ndim != 3:
        raise ShapeError("batched attention takes [b, n, d] and [b, m, d]")
    b, n, d = x.shape
    bm, m, dm = memory.shape
    if (bm, dm) != (b, d):
        raise ShapeError(f"memory {memory.shape} does not match x {x.shape}")
    if m == 0:
        raise ShapeError("attention over an empty memory")
    h, k, v = w.heads, w.key_width, w.value_width
    if w.model_width != d:
        raise ShapeError(f"weights expect d={w.model_width}, inputs have d={d}")
    mask_arr = _resolve_mask(mask, b, h, n, m)

    q = contract(x, w.p_q, "bnd,hdk->bhnk")
    key = contract(memory, w.p_k, "bmd,hdk->bhmk")
    val = contract(memory, w.p_v, "bmd,hdv->bhmv")
    logits = contract(q, key, "bhnk,bhmk->bhnm")
    weights = masked_softmax(logits, mask_arr)
    o = contract(weights, val, "bhnm,bhmv->bhnv")
    y = contract(o, w.p_o, "bhnv,hdv->bnd")

    if tally is not None:
        tally.add("q_proj", contraction_flops("bnd,hdk->bhnk", x.shape, w.p_q.shape),
                  [("x", b * n * d), ("p_q", h * d * k)], [("q", b * h * n * k)])
        tally.add("k_proj", contraction_flops("bmd,hdk->bhmk", memory.shape, w.p_k.shape),
                  [("memory", b * m * d), ("p_k", h * d * k)], [("k", b * h * m * k)])
        tally.add("v_proj", contraction_flops("bmd,hdv->bhmv", memory.shape, w.p_v.shape),
                  [("memory", b * m * d), ("p_v", h * d * v)], [("v", b * h * m * v)])
        tally.add("logits", contraction_flops("bhnk,bhmk->bhnm", q.shape, key.shape),
                  [("q", b * h * n * k), ("k", b * h * m * k)],
                  [("logits", b * h * n * m)])
        tally.add("softmax", 0,
                  [("logits", b * h * n * m), ("mask", b * h * n * m)],
                  [("weights", b * h * n * m)])
        tally.add("mix", contraction_flops("bhnm,bhmv->bhnv", weights.shape, val.shape),
                  [("weights", b * h * n * m), ("v", b * h * m * v)],
                  [("o", b * h * n * v)])
        tally.add("out_proj", contraction_flops("bhnv,hdv->bnd", o.shape, w.p_o.shape),
                  [("o", b * h * n * v), ("p_o", h * d * v)], [("y", b * n * d)])
    return y


def multiquery_attention_batched(x, memory, w: AttentionWeights,
                                 mask: MaskSpec | None = None,
                                 tally: TrafficTally | None = None) -> np.ndarray:
    """Batched multi-query attention: per-head queries, one shared K/V."""
    if w.kind != "multi_query":
        raise ConfigError(f"kernel needs multi_query weights, got {w.kind}")
    x = as_array(x)
    memory = as_array(memory)
    if x.ndim != 3 or memory.ndim != 3:
        raise ShapeError("batched attention takes [b, n, d] and [b, m, d]")
    b, n, d = x.shape
    bm, m, dm = memory.shape
    if (bm, dm) != (b, d):
        raise ShapeError(f"memory {memory.shape} does not match x {x.shape}")
    if m == 0:
        raise ShapeError("attention over an empty memory")
    h, k, v = w.heads, w.key_width, w.value_width
    if w.model_width != d:
        raise ShapeError(f"weights expect d={w.model_width}, inputs have d={d}")
    mask_arr = _resolve_mask(mask, b, h, n, m)

    q = contract(x, w.p_q, "bnd,hdk->bhnk")
    key = contract(memory, w.p_k, "bmd,dk->bmk")
    val = contract(memory, w.p_v, "bmd,dv->bmv")
    logits = contract(q, key, "bhnk,bmk->bhnm")
    weights = masked_softmax(logits, mask_arr)
    o = contract(weights, val, "bhnm,bmv->bhnv")
    y = contract(o, w.p_o, "bhnv,hdv->bnd")

    if tally is not None:
        tally.add("q_proj", contraction_flops("bnd,hdk->bhnk", x.shape, w.p_q.shape),
                  [("x", b * n * d), ("p_q", h * d * k)], [("q", b * h * n * k)])
        tally.add("k_proj", contraction_flops("bmd,dk->bmk", memory.shape, w.p_k.shape),
                  [("memory", b * m * d), ("p_k", d * k)], [("k", b * m * k)])
        tally.add("v_proj", contraction_flops("bmd,dv->bmv", memory.shape, w.p_v.shape),
                  [("memory", b * m * d), ("p_v", d * v)], [("v", b * m * v)])
        tally.add("logits", contraction_flops("bhnk,bmk->bhnm", q.shape, key.shape),
                  [("q", b * h * n * k), ("k", b * m * k)],
                  [("logits", b * h * n * m)])
        tally.add("softmax", 0,
                  [("logits", b * h * n * m), ("mask", b * h * n * m)],
                  [("weights", b * h * n * m)])
        tally.add("mix", contraction_flops("bhnm,bmv->bhnv", weights.shape, val.shape),
                  [("weights", b * h * n * m), ("v", b * m * v)],
                  [("o", b * h * n * v)])
        tally.add("out_proj", contraction_flops("bhnv,hdv->bnd", o.shape, w.p_o.shape),
                  [("o", b * h * n * v), ("p_o", h * d * v)], [("y", b * n * d)])
    return y


def _ordered_mix(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    # weights [..., m] and values [..., m, v] with aligned leading axes.
    # Accumulates over positions in index order so that zero-weighted padded
    # slots cannot perturb any bit of the result.
    m = weights.shape[-1]
    lead = np.broadcast_shapes(weights.shape[:-1], values.shape[:-2])
    out = np.zeros(lead + (values.shape[-1],))
    for i in range(m):
        out += weights[..., i, np.newaxis] * values[..., i, :]
    return out


def _step_bias(cache: KVCache, window: int | None) -> np.ndarray:
    bias = validity_bias(cache)
    if window is not None:
        if window < 1:
            raise ConfigError("window must be >= 1")
        bias[: max(0, cache.valid_len - window)] = -np.inf
    return bias


def _check_step_inputs(x, cache: KVCache, w: AttentionWeights, kernel_kind: str):
    if w.kind != kernel_kind:
        raise ConfigError(f"kernel needs {kernel_kind} weights, got {w.kind}")
    if cache.kind != kernel_kind:
        raise CacheError(f"kernel needs a {kernel_kind} cache, got {cache.kind}")
    if x.ndim != 2:
        raise ShapeError(f"incremental step takes x [b, d], got {x.shape}")
    if x.shape[1] != w.model_width:
        raise ShapeError(f"x width {x.shape[1]} != weights d {w.model_width}")
    if cache.batch != x.shape[0]:
        raise CacheError(f"cache batch {cache.batch} != x batch {x.shape[0]}")
    if cache.key_width != w.key_width or cache.value_width != w.value_width:
        raise CacheError(
            f"cache widths ({cache.key_width},{cache.value_width}) do not match "
            f"weights ({w.key_width},{w.value_width})"
        )
    if kernel_kind == "multi_head" and cache.heads != w.heads:
        raise CacheError(f"cache heads {cache.heads} != weights heads {w.heads}")


def multihead_self_attention_incremental(
    x, cache: KVCache, w: AttentionWeights,
    window: int | None = None,
    tally: TrafficTally | None = None,
) -> tuple[np.ndarray, KVCache]:
    """One decode step: project x [b, d], extend the cache, attend over it.

    Returns (y [b, d], grown cache).  With a window only the trailing
    `window` cached positions are legal.
    """
    x = as_array(x)
    _check_step_inputs(x, cache, w, "multi_head")
    b, d = x.shape
    h, k, v = w.heads, w.key_width, w.value_width

    q = contract(x, w.p_q, "bd,hdk->bhk")
    k_new = contract(x, w.p_k, "bd,hdk->bhk")
    v_new = contract(x, w.p_v, "bd,hdv->bhv")
    grown = append(cache, k_new, v_new)
    bias = _step_bias(grown, window)
    logits = contract(q, grown.keys, "bhk,bhmk->bhm")
    weights = masked_softmax(logits, bias)
    o = _ordered_mix(weights, grown.values)
    y = contract(o, w.p_o, "bhv,hdv->bd")

    if tally is not None:
        m_valid = grown.valid_len
        m_storage = grown.storage_len
        tally.add("q_proj", 2 * b * d * h * k,
                  [("x", b * d), ("p_q", h * d * k)], [("q", b * h * k)])
        tally.add("k_proj", 2 * b * d * h * k,
                  [("x", b * d), ("p_k", h * d * k)], [("k_new", b * h * k)])
        tally.add("v_proj", 2 * b * d * h * v,
                  [("x", b * d), ("p_v", h * d * v)], [("v_new", b * h * v)])
        tally.add("logits", 2 * b * h * m_storage * k,
                  [("q", b * h * k), ("k_cache", b * h * m_valid * k)],
                  [("logits", b * h * m_valid)])
        tally.add("softmax", 0,
                  [("logits", b * h * m_valid)], [("weights", b * h * m_valid)])
        tally.add("mix", 2 * b * h * m_storage * v,
                  [("weights", b * h * m_valid), ("v_cache", b * h * m_valid * v)],
                  [("o", b * h * v)])
        tally.add("out_proj", 2 * b * h * v * d,
                  [("o", b * h * v), ("p_o", h * d * v)], [("y", b * d)])
    return y, grown


def multiquery_self_attention_incremental(
    x, cache: KVCache, w: AttentionWeights,
    window: int | None = None,
    tally: TrafficTally | None = None,
) -> tuple[np.ndarray, KVCache]:
    """One decode step with a shared key/value cache (no heads axis)."""
    x = as_array(x)
    _check_step_inputs(x, cache, w, "multi_query")
    b, d = x.shape
    h, k, v = w.heads, w.key_width, w.value_width

    q = contract(x, w.p_q, "bd,hdk->bhk")
    k_new = contract(x, w.p_k, "bd,dk->bk")
    v_new = contract(x, w.p_v, "bd,dv->bv")
    grown = append(cache, k_new, v_new)
    bias = _step_bias(grown, window)
    logits = contract(q, grown.keys, "bhk,bmk->bhm")
    weights = masked_softmax(logits, bias)
    o = _ordered_mix(weights, grown.values[:, np.newaxis, :, :])
    y = contract(o, w.p_o, "bhv,hdv->bd")

    if tally is not None:
        m_valid = grown.valid_len
        m_storage = grown.storage_len
        tally.add("q_proj", 2 * b * d * h * k,
                  [("x", b * d), ("p_q", h * d * k)], [("q", b * h * k)])
        tally.add("k_proj", 2 * b * d * k,
                  [("x", b * d), ("p_k", d * k)], [("k_new", b * k)])
        tally.add("v_proj", 2 * b * d * v,
                  [("x", b * d), ("p_v", d * v)], [("v_new", b * v)])
        tally.add("logits", 2 * b * h * m_storage * k,
                  [("q", b * h * k), ("k_cache", b * m_valid * k)],
                  [("logits", b * h * m_valid)])
        tally.add("softmax", 0,
                  [("logits", b * h * m_valid)], [("weights", b * h * m_valid)])
        tally.add("mix", 2 * b * h * m_storage * v,
                  [("weights", b * h * m_valid), ("v_cache", b * m_valid * v)],
                  [("o", b * h * v)])
        tally.add("out_proj", 2 * b * h * v * d,
                  [("o", b * h * v), ("p_o", h * d * v)], [("y", b * d)])
    return y, grown


def attend_cache(x, cache: KVCache, w: AttentionWeights,
                 window: int | None = None) -> np.ndarray:
    """Attend one query position [b, d] over a fixed cache without appending;
    used for cross-attention during incremental decoding."""
    x = as_array(x)
    _check_step_inputs(x, cache, w, w.kind)
    if cache.valid_len == 0:
        raise CacheError("attention over an empty cache")
    q = contract(x, w.p_q, "bd,hdk->bhk")
    bias = _step_bias(cache, window)
    if cache.kind == "multi_head":
        logits = contract(q, cache.keys, "bhk,bhmk->bhm")
        weights = masked_softmax(logits, bias)
        o = _ordered_mix(weights, cache.values)
    else:
        logits = contract(q, cache.keys, "bhk,bmk->bhm")
        weights = masked_softmax(logits, bias)
        o = _ordered_mix(weights, cache.values[:, np.newaxis, :, :])
    return contract(o, w.p_o, "bhv,hdv->bd")
