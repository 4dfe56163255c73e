"""Key/value caches for incremental attention.

A cache is immutable: append returns a new cache value.  Two storage policies
cover the usual layouts: 'growing' reallocates to the exact length each step,
'padded' writes into fixed storage of max_len slots and tracks the valid
prefix.  Both policies must produce bit-identical attention outputs; the
kernels guarantee that by accumulating over positions in index order and by
masking invalid slots with -inf before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import CacheCapacityError, CacheError, ConfigError
from .tensor import as_array, concat_last_but_one

KINDS = ("multi_head", "multi_query")
POLICIES = ("growing", "padded")


@dataclass(frozen=True)
class KVCache:
    """Cached keys and values for one attention site.

    multi_head storage is [b, h, m, k] / [b, h, m, v]; multi_query storage
    drops the heads axis: [b, m, k] / [b, m, v].  For the growing policy the
    storage length equals valid_len; for padded it equals max_len.
    """

    kind: str
    keys: np.ndarray
    values: np.ndarray
    policy: str
    valid_len: int
    max_len: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown cache kind {self.kind!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown cache policy {self.policy!r}")
        rank = 4 if self.kind == "multi_head" else 3
        if self.keys.ndim != rank or self.values.ndim != rank:
            raise CacheError(
                f"{self.kind} cache needs rank-{rank} storage, got "
                f"{self.keys.shape} / {self.values.shape}"
            )
        if self.keys.shape[:-1] != self.values.shape[:-1]:
            raise CacheError(
                f"key/value storage disagree: {self.keys.shape} vs {self.values.shape}"
            )
        storage = self.keys.shape[-2]
        if self.policy == "growing":
            if self.max_len is not None:
                raise ConfigError("growing caches take no max_len")
            if storage != self.valid_len:
                raise CacheError(
                    f"growing cache storage length {storage} != valid_len {self.valid_len}"
                )
        else:
            if self.max_len is None or self.max_len < 1:
                raise ConfigError("padded caches need max_len >= 1")
            if storage != self.max_len:
                raise CacheError(
                    f"padded cache storage length {storage} != max_len {self.max_len}"
                )
            if not 0 <= self.valid_len <= self.max_len:
                raise CacheError(
                    f"valid_len {self.valid_len} outside [0, {self.max_len}]"
                )

    @property
    def batch(self) -> int:
        return self.keys.shape[0]

    @property
    def heads(self) -> int | None:
        return self.keys.shape[1] if self.kind == "multi_head" else None

    @property
    def key_width(self) -> int:
        return self.keys.shape[-1]

    @property
    def value_width(self) -> int:
        return self.values.shape[-1]

    @property
    def storage_len(self) -> int:
        return self.keys.shape[-2]

    @property
    def length(self) -> int:
        return self.valid_len


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def new_cache(
    kind: str,
    *,
    batch: int,
    key_width: int,
    value_width: int,
    heads: int | None = None,
    policy: str = "growing",
    max_len: int | None = None,
) -> KVCache:
    """Create an empty cache for one attention site."""
    if kind not in KINDS:
        raise ConfigError(f"unknown cache kind {kind!r}")
    if policy not in POLICIES:
        raise ConfigError(f"unknown cache policy {policy!r}")
    if min(batch, key_width, value_width) < 1:
        raise ConfigError("cache dims must be positive")
    if kind == "multi_head":
        if heads is None or heads < 1:
            raise ConfigError("multi_head caches need heads >= 1")
        lead = (batch, heads)
    else:
        if heads is not None:
            raise ConfigError("multi_query caches take no heads axis")
        lead = (batch,)
    if policy == "padded" and (max_len is None or max_len < 1):
        raise ConfigError("padded caches need max_len >= 1")
    if policy == "growing" and max_len is not None:
        raise ConfigError("growing caches take no max_len")
    storage = 0 if policy == "growing" else max_len
    keys = _frozen(np.zeros(lead + (storage, key_width)))
    values = _frozen(np.zeros(lead + (storage, value_width)))
    return KVCache(kind, keys, values, policy, 0, max_len)


def append(cache: KVCache, k_new, v_new) -> KVCache:
    """Append one position of keys and values; returns the grown cache.

    Slices are [b, h, k] / [b, h, v] for multi_head and [b, k] / [b, v] for
    multi_query.
    """
    k_new = as_array(k_new)
    v_new = as_array(v_new)
    lead = cache.keys.shape[:-2]
    if k_new.shape != lead + (cache.key_width,):
        raise CacheError(
            f"key slice shape {k_new.shape} does not fit cache storage "
            f"{cache.keys.shape}"
        )
    if v_new.shape != lead + (cache.value_width,):
        raise CacheError(
            f"value slice shape {v_new.shape} does not fit cache storage "
            f"{cache.values.shape}"
        )
    if cache.policy == "growing":
        keys = concat_last_but_one(cache.keys, k_new[..., np.newaxis, :])
        values = concat_last_but_one(cache.values, v_new[..., np.newaxis, :])
    else:
        if cache.valid_len == cache.max_len:
            raise CacheCapacityError(
                f"padded cache is full at max_len={cache.max_len}"
            )
        keys = cache.keys.copy()
        values = cache.values.copy()
        keys[..., cache.valid_len, :] = k_new
        values[..., cache.valid_len, :] = v_new
    return replace(cache, keys=_frozen(keys), values=_frozen(values),
                   valid_len=cache.valid_len + 1)


def cache_from_memory(kind: str, keys, values) -> KVCache:
    """Wrap precomputed keys/values (e.g. projected encoder output) as a
    fully valid cache that is read but never appended to."""
    keys = as_array(keys)
    values = as_array(values)
    rank = 4 if kind == "multi_head" else 3
    if keys.ndim != rank:
        raise CacheError(f"{kind} memory needs rank-{rank} keys, got {keys.shape}")
    return KVCache(kind, _frozen(keys), _frozen(values), "growing",
                   keys.shape[-2], None)


def validity_bias(cache: KVCache) -> np.ndarray:
    """Additive bias over storage slots: 0 on the valid prefix, -inf beyond.

    Broadcasts against [..., storage_len] logits.
    """
    bias = np.zeros(cache.storage_len)
    bias[cache.valid_len:] = -np.inf
    return bias


def cache_words(cache: KVCache) -> int:
    """Float64 words of valid cached state (keys plus values)."""
    lead = 1
    for d in cache.keys.shape[:-2]:
        lead *= d
    return lead * cache.valid_len * (cache.key_width + cache.value_width)


def select_rows(cache: KVCache, indices) -> KVCache:
    """Reorder/duplicate batch rows (beam-search hypothesis gather)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise CacheError("row selection takes a 1-d index list")
    if idx.size and (idx.min() < 0 or idx.max() >= cache.batch):
        raise CacheError(f"row index out of range for batch {cache.batch}")
    return replace(cache,
                   keys=_frozen(cache.keys[idx].copy()),
                   values=_frozen(cache.values[idx].copy()))
