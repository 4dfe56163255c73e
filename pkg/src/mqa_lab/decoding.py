"""Incremental decoding with per-layer key/value caches.

The step path runs the same contraction-kernel attention as the correctness
suite: self-attention sites use the incremental kernels and grow a cache by
one position per step, cross-attention sites read a cache projected once
from the encoder output.  Greedy emission is the beam_size=1,
length_alpha=0 special case of beam search, and the tests hold the two
routes to exact agreement.

Beam scores are sums of token log-probabilities divided by the length
penalty ((5 + length) / 6) ** alpha, with length counting every emitted
token including the end marker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    attend_cache,
    multihead_self_attention_incremental,
    multiquery_self_attention_incremental,
)
from .cache import KVCache, cache_from_memory, new_cache, select_rows
from .config import DecodeConfig, ModelConfig
from .exceptions import ConfigError, InputError
from .model import (
    Batch,
    ModelParams,
    _block_forward,
    _embed,
    feed_forward,
    forward,
    layer_norm,
)
from .training import BOS

_STEP_KERNELS = {
    "multi_head": multihead_self_attention_incremental,
    "multi_query": multiquery_self_attention_incremental,
}


def encode_source(params: ModelParams, config: ModelConfig,
                  source: np.ndarray) -> np.ndarray:
    """Run the encoder stack once; returns memory [b, m, d]."""
    if not config.has_encoder:
        raise ConfigError("decoder_only models have no encoder")
    x = _embed(params, config, source, "source")
    for block in params.encoder:
        x, _ = _block_forward(x, block, None, None)
    out, _ = layer_norm(x, params.enc_out_ln)
    return out


def _project_memory(memory: np.ndarray, w) -> tuple[np.ndarray, np.ndarray]:
    if w.kind == "multi_head":
        keys = np.einsum("bmd,hdk->bhmk", memory, w.p_k)
        values = np.einsum("bmd,hdv->bhmv", memory, w.p_v)
    else:
        keys = np.einsum("bmd,dk->bmk", memory, w.p_k)
        values = np.einsum("bmd,dv->bmv", memory, w.p_v)
    return keys, values


@dataclass
class DecoderState:
    """Mutable position counter plus immutable caches for one decode run."""

    self_caches: list[KVCache]
    cross_caches: list[KVCache] | None
    position: int


def start_state(params: ModelParams, config: ModelConfig, *,
                batch_size: int, memory: np.ndarray | None = None,
                cache_policy: str = "growing",
                max_positions: int | None = None) -> DecoderState:
    """Fresh decode state.  memory is the encoder output for
    encoder_decoder configs; max_positions bounds padded caches."""
    if config.has_encoder and memory is None:
        raise ConfigError("encoder_decoder decode needs encoder memory")
    if not config.has_encoder and memory is not None:
        raise ConfigError("decoder_only decode takes no memory")
    max_len = None
    if cache_policy == "padded":
        max_len = config.max_len if max_positions is None else max_positions
    heads = config.heads if config.dec_self_kind == "multi_head" else None
    self_caches = [
        new_cache(config.dec_self_kind, batch=batch_size, key_width=config.d_k,
                  value_width=config.d_v, heads=heads,
                  policy=cache_policy, max_len=max_len)
        for _ in params.decoder
    ]
    cross_caches = None
    if config.has_encoder:
        cross_caches = []
        for block in params.decoder:
            keys, values = _project_memory(memory, block.cross)
            cross_caches.append(cache_from_memory(config.cross_kind, keys, values))
    return DecoderState(self_caches, cross_caches, 0)


def decoder_step(params: ModelParams, config: ModelConfig,
                 state: DecoderState, tokens: np.ndarray):
    """Advance one position.  tokens [b] feeds position state.position;
    returns (logits [b, vocab], new state)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise InputError(f"step tokens must be [batch], got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InputError("step tokens outside the vocabulary")
    if state.position >= config.max_len:
        raise InputError(
            f"position {state.position} exceeds max_len {config.max_len}")
    x = params.embedding[tokens] + params.positions[state.position]
    step = _STEP_KERNELS[config.dec_self_kind]
    new_self = []
    for i, block in enumerate(params.decoder):
        normed, _ = layer_norm(x, block.ln_attn)
        attn_out, grown = step(normed, state.self_caches[i], block.attn,
                               window=config.dec_self_window)
        new_self.append(grown)
        x = x + attn_out
        if block.cross is not None:
            normed, _ = layer_norm(x, block.ln_cross)
            x = x + attend_cache(normed, state.cross_caches[i], block.cross)
        normed, _ = layer_norm(x, block.ln_ff)
        ff_out, _ = feed_forward(normed, block.ff)
        x = x + ff_out
    final, _ = layer_norm(x, params.dec_out_ln)
    logits = final @ params.embedding.T
    return logits, DecoderState(new_self, state.cross_caches,
                                state.position + 1)


def _gather_rows(state: DecoderState, rows: np.ndarray) -> DecoderState:
    return DecoderState([select_rows(c, rows) for c in state.self_caches],
                        None if state.cross_caches is None
                        else [select_rows(c, rows) for c in state.cross_caches],
                        state.position)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class DecodeResult:
    """tokens is [b, steps]; rows that finish early are padded with the end
    marker.  lengths counts emitted tokens including the end marker.
    raw_scores hold summed log-probabilities; scores divide by the length
    penalty."""

    tokens: np.ndarray
    lengths: np.ndarray
    raw_scores: np.ndarray
    scores: np.ndarray


def _prefill(params, config, state, prompt):
    """Feed prompt tokens; returns (logits after the last one, state)."""
    logits = None
    for j in range(prompt.shape[1]):
        logits, state = decoder_step(params, config, state, prompt[:, j])
    return logits, state


def _start_tokens(config: ModelConfig, source, prompt, batch_size):
    """The decoder stream opener: BOS for encoder_decoder; the caller's
    prompt (usually source + BOS) for decoder_only."""
    if config.has_encoder:
        if prompt is not None:
            raise ConfigError("encoder_decoder decode derives its own prompt")
        return np.full((batch_size, 1), BOS, dtype=np.int64)
    if prompt is None:
        raise ConfigError("decoder_only decode needs a prompt")
    if source is not None:
        raise ConfigError("decoder_only decode takes no source")
    return np.asarray(prompt)


def greedy_decode(params: ModelParams, config: ModelConfig,
                  decode: DecodeConfig, *, source: np.ndarray | None = None,
                  prompt: np.ndarray | None = None) -> DecodeResult:
    """Argmax emission, first maximum winning ties."""
    memory = None
    if config.has_encoder:
        memory = encode_source(params, config, source)
        batch = source.shape[0]
    else:
        batch = np.asarray(prompt).shape[0]
    opener = _start_tokens(config, source, prompt, batch)
    state = start_state(params, config, batch_size=batch, memory=memory,
                        cache_policy=decode.cache_policy,
                        max_positions=opener.shape[1] + decode.max_steps)
    logits, state = _prefill(params, config, state, opener)
    tokens = np.zeros((batch, decode.max_steps), dtype=np.int64)
    raw = np.zeros(batch)
    lengths = np.zeros(batch, dtype=np.int64)
    live = np.ones(batch, dtype=bool)
    for t in range(decode.max_steps):
        logp = _log_softmax(logits)
        pick = np.argmax(logits, axis=-1)
        if decode.eos_id is not None:
            pick = np.where(live, pick, decode.eos_id)
        tokens[:, t] = pick
        raw += np.where(live, logp[np.arange(batch), pick], 0.0)
        lengths += live.astype(np.int64)
        if decode.eos_id is not None:
            live &= pick != decode.eos_id
            if not live.any():
                break
        if t + 1 < decode.max_steps:
            logits, state = decoder_step(params, config, state, pick)
    scores = raw / np.array([length_penalty(int(n), decode.length_alpha)
                             for n in lengths])
    return DecodeResult(tokens, lengths, raw, scores)


def _beam_decode_row(params, config, decode: DecodeConfig, *,
                     source_row=None, prompt_row=None):
    """Beam search for a single source row.  Beams ride the batch axis."""
    beam = decode.beam_size
    memory = None
    if config.has_encoder:
        memory = np.repeat(encode_source(params, config, source_row[None, :]),
                           beam, axis=0)
        opener = _start_tokens(config, None, None, beam)
    else:
        opener = np.repeat(_start_tokens(config, None, prompt_row[None, :], 1),
                           beam, axis=0)
    state = start_state(params, config, batch_size=beam, memory=memory,
                        cache_policy=decode.cache_policy,
                        max_positions=opener.shape[1] + decode.max_steps)
    logits, state = _prefill(params, config, state, opener)

    vocab = config.vocab_size
    sequences = np.zeros((beam, 0), dtype=np.int64)
    live_raw = np.full(beam, -np.inf)
    live_raw[0] = 0.0  # identical beams; expand only the first at step one
    finished: list[tuple[np.ndarray, float, float]] = []

    for t in range(decode.max_steps):
        logp = _log_softmax(logits)
        totals = (live_raw[:, None] + logp).ravel()
        order = np.argsort(-totals, kind="stable")
        next_rows, next_tokens, next_raw = [], [], []
        for flat in order[: 2 * beam]:
            parent, token = divmod(int(flat), vocab)
            raw = float(totals[flat])
            if raw == -np.inf:
                break
            if decode.eos_id is not None and token == decode.eos_id:
                seq = np.concatenate([sequences[parent], [token]])
                finished.append((seq, raw,
                                 raw / length_penalty(t + 1,
                                                      decode.length_alpha)))
                continue
            if len(next_rows) < beam:
                next_rows.append(parent)
                next_tokens.append(token)
                next_raw.append(raw)
        if not next_rows:
            break
        rows = np.array(next_rows)
        pick = np.array(next_tokens)
        while len(pick) < beam:  # fewer survivors than beams: repeat row 0
            rows = np.append(rows, rows[0])
            pick = np.append(pick, pick[0])
            next_raw.append(-np.inf)
        sequences = np.concatenate([sequences[rows], pick[:, None]], axis=1)
        live_raw = np.array(next_raw)
        if finished and len(finished) >= beam:
            best_possible = max(live_raw) / length_penalty(
                decode.max_steps, decode.length_alpha)
            if best_possible <= max(f[2] for f in finished):
                break
        if t + 1 < decode.max_steps:
            state = _gather_rows(state, rows)
            logits, state = decoder_step(params, config, state, pick)

    for i in range(beam):
        if live_raw[i] > -np.inf:
            finished.append((sequences[i], float(live_raw[i]),
                             float(live_raw[i]) / length_penalty(
                                 sequences.shape[1], decode.length_alpha)))
    finished.sort(key=lambda f: -f[2])
    return finished[0]


def beam_decode(params: ModelParams, config: ModelConfig,
                decode: DecodeConfig, *, source: np.ndarray | None = None,
                prompt: np.ndarray | None = None) -> DecodeResult:
    """Best hypothesis per row under the length-penalized score."""
    rows = source if config.has_encoder else np.asarray(prompt)
    batch = rows.shape[0]
    pad = decode.eos_id if decode.eos_id is not None else 0
    tokens = np.full((batch, decode.max_steps), pad, dtype=np.int64)
    lengths = np.zeros(batch, dtype=np.int64)
    raw = np.zeros(batch)
    scores = np.zeros(batch)
    for i in range(batch):
        kwargs = ({"source_row": source[i]} if config.has_encoder
                  else {"prompt_row": rows[i]})
        seq, seq_raw, seq_score = _beam_decode_row(params, config, decode,
                                                   **kwargs)
        tokens[i, : len(seq)] = seq
        lengths[i] = len(seq)
        raw[i] = seq_raw
        scores[i] = seq_score
    return DecodeResult(tokens, lengths, raw, scores)


def decode(params: ModelParams, config: ModelConfig, decode_config: DecodeConfig,
           *, source: np.ndarray | None = None,
           prompt: np.ndarray | None = None) -> DecodeResult:
    if decode_config.strategy == "greedy":
        return greedy_decode(params, config, decode_config, source=source,
                             prompt=prompt)
    return beam_decode(params, config, decode_config, source=source,
                       prompt=prompt)


def score_sequence(params: ModelParams, config: ModelConfig, tokens, *,
                   source: np.ndarray | None = None,
                   prompt: np.ndarray | None = None) -> float:
    """Teacher-forced sum of token log-probabilities for one sequence.

    Independent of the incremental path: runs the batched forward pass, so
    it serves as the re-scoring oracle for decode tests.
    """
    tokens = np.asarray(tokens)[None, :]
    if config.has_encoder:
        opener = np.full((1, 1), BOS, dtype=np.int64)
        stream_in = np.concatenate([opener, tokens[:, :-1]], axis=1)
        batch = Batch(source[None, :] if source.ndim == 1 else source,
                      stream_in, tokens, np.ones_like(tokens, dtype=float))
        logits = forward(params, config, batch).logits
        logp = _log_softmax(logits)
        return float(logp[0, np.arange(tokens.shape[1]), tokens[0]].sum())
    prompt = np.asarray(prompt)[None, :] if np.asarray(prompt).ndim == 1 \
        else np.asarray(prompt)
    stream = np.concatenate([prompt, tokens], axis=1)
    inputs, labels = stream[:, :-1], stream[:, 1:]
    mask = np.zeros_like(labels, dtype=float)
    mask[:, prompt.shape[1] - 1:] = 1.0
    batch = Batch(None, inputs, labels, mask)
    logits = forward(params, config, batch).logits
    logp = _log_softmax(logits)
    span = np.arange(prompt.shape[1] - 1, stream.shape[1] - 1)
    return float(logp[0, span, labels[0, span]].sum())
