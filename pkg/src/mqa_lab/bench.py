"""Wall-clock benchmarking of batched passes and incremental decoding.

Reports four model variants: the multi-head baseline, the multi-query
variant widened to parameter parity, and local versions of both where only
decoder self-attention is windowed.  Timed decode steps run on
fixed-shape preallocated buffers (full variants padded to the target
length, local variants to the window), so every step costs the same.
Counted columns come from the cost model and are machine-independent:
kv_words_per_step counts decoder self-attention cache words averaged over
the run, flops_per_step counts the self-attention step ops.  Cross
attention reads constant-size memory per step and its one-off projection
happens at setup, outside the timed region.

Amortization follows the per-token convention: a phase's wall time divided
by the tokens it processes (training: b * (source_len + target_len);
encoder: b * source_len; decoder: median step time * steps / (b *
target_len)).  Wall-clock numbers are reported, never asserted here;
directional claims live in the acceptance tests.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import os
import platform
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .costs import ShapeConfig, dff_for_parity, incremental_step_flops, kv_cache_words_step
from .decoding import encode_source
from .exceptions import ConfigError, InputError
from .model import (
    Batch,
    ModelParams,
    feed_forward,
    init_params,
    layer_norm,
    loss_and_grads,
    param_count,
)
from .training import BOS

LOCAL_WINDOW = 32

VARIANTS = ("multi-head", "multi-query", "multi-head local", "multi-query local")

BENCH_SEED = 0x5EED


@dataclass
class Workload:
    """Shapes and repetition policy for one benchmark run."""

    b: int
    source_len: int
    target_len: int
    model: ModelConfig
    repetitions: int = 5
    warmup_reps: int = 1
    timer_note: str = "monotonic clock, median of repetitions"

    def __post_init__(self):
        if self.repetitions < 3:
            raise ConfigError("need repetitions >= 3 for a median")
        if self.warmup_reps < 1:
            raise ConfigError("need warmup_reps >= 1")
        if min(self.b, self.source_len, self.target_len) < 1:
            raise ConfigError("workload dims must be positive")
        if self.model.mode != "encoder_decoder":
            raise ConfigError("the bench harness compares encoder_decoder models")
        if max(self.source_len, self.target_len) > self.model.max_len:
            raise ConfigError("workload sequence length over model max_len")


@dataclass
class BenchRow:
    variant: str
    kind: str
    window: int | None
    d_ff: int
    param_total: int
    training_us: float = float("nan")
    encoder_us: float = float("nan")
    decoder_us: float = float("nan")
    beam_encoder_us: float = float("nan")
    beam_decoder_us: float = float("nan")
    kv_words_per_step: float = float("nan")
    flops_per_step: int = 0


@dataclass
class BenchReport:
    b: int
    source_len: int
    target_len: int
    repetitions: int
    rows: list[BenchRow] = field(default_factory=list)
    cpu: str = ""
    threads: str = ""
    timer_resolution_ns: float = float("nan")
    timer_note: str = ""


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Baseline config -> variant config.  Multi-query variants swap every
    attention site and widen d_ff to parameter parity; local variants
    window decoder self-attention only."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    config = base
    if variant.startswith("multi-query"):
        swapped = base.with_attention_kind("multi_query")
        adjusted = dff_for_parity(base, swapped)
        config = dataclasses.replace(swapped, d_ff=adjusted.d_ff)
    if variant.endswith("local"):
        config = dataclasses.replace(config, dec_self_window=LOCAL_WINDOW)
    return config


# ---------------------------------------------------------------------------
# fixed-shape decoder used only for timing runs

class FastDecoder:
    """Incremental decoder on preallocated buffers.

    Key/value buffers hold `slots` positions; full attention uses one slot
    per step while a window smaller than the step count turns the buffer
    into a ring.  Softmax is slot-order invariant, so ring occupancy needs
    no rotation, only a validity cutoff before the buffer first fills.
    Outputs are pinned to the correctness-path decoder by tests (1e-10).
    """

    def __init__(self, params: ModelParams, config: ModelConfig, *,
                 batch_size: int, steps: int,
                 memory: np.ndarray | None = None):
        if config.has_encoder and memory is None:
            raise ConfigError("encoder_decoder timing needs encoder memory")
        self.params = params
        self.config = config
        self.batch = batch_size
        window = config.dec_self_window
        self.slots = steps if window is None else min(window, steps)
        self.t = 0
        d, h = config.d_model, config.heads
        k, v = config.d_k, config.d_v
        self.blocks = []
        for block in params.decoder:
            folded = {
                "ln_attn": block.ln_attn,
                "ln_cross": block.ln_cross,
                "ln_ff": block.ln_ff,
                "ff": block.ff,
                "w_q": _fold_in(block.attn.p_q),
                "w_o": _fold_to_model(block.attn.p_o),
                "self_kind": block.attn.kind,
            }
            if block.attn.kind == "multi_head":
                folded["w_k"] = _fold_in(block.attn.p_k)
                folded["w_v"] = _fold_in(block.attn.p_v)
                folded["k_buf"] = np.zeros((batch_size, h, self.slots, k))
                folded["v_buf"] = np.zeros((batch_size, h, self.slots, v))
            else:
                folded["w_k"] = block.attn.p_k
                folded["w_v"] = block.attn.p_v
                folded["k_buf"] = np.zeros((batch_size, self.slots, k))
                folded["v_buf"] = np.zeros((batch_size, self.slots, v))
            if block.cross is not None:
                folded["cross_kind"] = block.cross.kind
                folded["cw_q"] = _fold_in(block.cross.p_q)
                folded["cw_o"] = _fold_to_model(block.cross.p_o)
                if block.cross.kind == "multi_head":
                    folded["k_cross"] = np.einsum("bmd,hdk->bhmk", memory,
                                                  block.cross.p_k)
                    folded["v_cross"] = np.einsum("bmd,hdv->bhmv", memory,
                                                  block.cross.p_v)
                else:
                    folded["k_cross"] = memory @ block.cross.p_k
                    folded["v_cross"] = memory @ block.cross.p_v
            self.blocks.append(folded)

    def gather_rows(self, rows: np.ndarray) -> None:
        """Reorder the batch axis in place (beam bookkeeping)."""
        for blk in self.blocks:
            blk["k_buf"][:] = blk["k_buf"][rows]
            blk["v_buf"][:] = blk["v_buf"][rows]

    def _self_attend(self, blk, a):
        b = self.batch
        h = self.config.heads
        k, v = self.config.d_k, self.config.d_v
        q = (a @ blk["w_q"]).reshape(b, h, k)
        slot = self.t % self.slots
        if blk["self_kind"] == "multi_head":
            blk["k_buf"][:, :, slot, :] = (a @ blk["w_k"]).reshape(b, h, k)
            blk["v_buf"][:, :, slot, :] = (a @ blk["w_v"]).reshape(b, h, v)
            logits = np.matmul(blk["k_buf"], q[..., None])[..., 0]
        else:
            blk["k_buf"][:, slot, :] = a @ blk["w_k"]
            blk["v_buf"][:, slot, :] = a @ blk["w_v"]
            logits = np.matmul(q, blk["k_buf"].swapaxes(-1, -2))
        valid = min(self.t + 1, self.slots)
        if valid < self.slots:
            logits[..., valid:] = -np.inf
        weights = _softmax_last(logits)
        if blk["self_kind"] == "multi_head":
            mixed = np.matmul(weights[:, :, None, :], blk["v_buf"])[:, :, 0, :]
        else:
            mixed = np.matmul(weights, blk["v_buf"])
        return mixed.reshape(b, h * v) @ blk["w_o"]

    def _cross_attend(self, blk, a):
        b = self.batch
        h = self.config.heads
        k, v = self.config.d_k, self.config.d_v
        q = (a @ blk["cw_q"]).reshape(b, h, k)
        if blk["cross_kind"] == "multi_head":
            logits = np.matmul(blk["k_cross"], q[..., None])[..., 0]
            weights = _softmax_last(logits)
            mixed = np.matmul(weights[:, :, None, :], blk["v_cross"])[:, :, 0, :]
        else:
            logits = np.matmul(q, blk["k_cross"].swapaxes(-1, -2))
            weights = _softmax_last(logits)
            mixed = np.matmul(weights, blk["v_cross"])
        return mixed.reshape(b, h * v) @ blk["cw_o"]

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per row; returns next-token logits [b, vocab]."""
        params = self.params
        x = params.embedding[tokens] + params.positions[self.t]
        for blk in self.blocks:
            a, _ = layer_norm(x, blk["ln_attn"])
            x = x + self._self_attend(blk, a)
            if "cw_q" in blk:
                a, _ = layer_norm(x, blk["ln_cross"])
                x = x + self._cross_attend(blk, a)
            a, _ = layer_norm(x, blk["ln_ff"])
            x = x + feed_forward(a, blk["ff"])[0]
        self.t += 1
        final, _ = layer_norm(x, params.dec_out_ln)
        return final @ params.embedding.T


def _fold_in(p):  # [h, d, w] -> [d, h*w]
    h, d, w = p.shape
    return np.ascontiguousarray(p.transpose(1, 0, 2)).reshape(d, h * w)


def _fold_to_model(p):  # [h, d, v] -> [h*v, d]
    h, d, v = p.shape
    return np.ascontiguousarray(p.transpose(0, 2, 1)).reshape(h * v, d)


def _softmax_last(z):
    top = z.max(axis=-1, keepdims=True)
    e = np.exp(z - top)
    return e / e.sum(axis=-1, keepdims=True)


def fast_greedy(params, config, source, steps, memory=None):
    """Timed greedy loop: exactly `steps` decoder step calls."""
    if memory is None:
        memory = encode_source(params, config, source)
    b = source.shape[0]
    dec = FastDecoder(params, config, batch_size=b, steps=steps,
                      memory=memory)
    tokens = np.full(b, BOS, dtype=np.int64)
    out = np.zeros((b, steps), dtype=np.int64)
    for t in range(steps):
        logits = dec.step(tokens)
        tokens = np.argmax(logits, axis=-1)
        out[:, t] = tokens
    return out


def fast_beam(params, config, source, steps, beam, memory=None):
    """Timed beam loop without an end token: fixed steps, top-k bookkeeping
    and cache gathers each step.  Returns the best row per source."""
    if memory is None:
        memory = encode_source(params, config, source)
    b = source.shape[0]
    wide = np.repeat(memory, beam, axis=0)
    dec = FastDecoder(params, config, batch_size=b * beam, steps=steps,
                      memory=wide)
    tokens = np.full(b * beam, BOS, dtype=np.int64)
    scores = np.full((b, beam), -np.inf)
    scores[:, 0] = 0.0
    seqs = np.zeros((b * beam, steps), dtype=np.int64)
    vocab = config.vocab_size
    for t in range(steps):
        logits = dec.step(tokens)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        totals = (scores[..., None] + logp.reshape(b, beam, vocab)) \
            .reshape(b, beam * vocab)
        top = np.argsort(-totals, axis=-1, kind="stable")[:, :beam]
        parents, picks = np.divmod(top, vocab)
        rows = (np.arange(b)[:, None] * beam + parents).ravel()
        dec.gather_rows(rows)
        seqs = seqs[rows]
        seqs[:, t] = picks.ravel()
        scores = np.take_along_axis(totals, top, axis=-1)
        tokens = picks.ravel()
    return seqs.reshape(b, beam, steps)[:, 0], scores[:, 0]


# ---------------------------------------------------------------------------
# timing machinery

def timer_resolution() -> float:
    """Smallest positive perf_counter delta seen in a short probe, seconds."""
    best = float("inf")
    for _ in range(200):
        a = time.perf_counter()
        b = time.perf_counter()
        while b == a:
            b = time.perf_counter()
        best = min(best, b - a)
    return best


def _median_seconds(fn, repetitions: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def _guard_repetitions(workload: Workload, probe_seconds: float,
                       steps: int) -> int:
    """Raise the repetition count when the timer cannot resolve 1% of a
    step."""
    reps = workload.repetitions
    step_time = max(probe_seconds / steps, 1e-12)
    res = timer_resolution()
    if res > 0.01 * step_time:
        boosted = min(8 * reps, max(reps * 2, 9))
        warnings.warn(
            f"timer resolution {res:.2e}s is coarser than 1% of a decode "
            f"step ({step_time:.2e}s); raising repetitions "
            f"{reps} -> {boosted}")
        reps = boosted
    return reps


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo", encoding="ascii", errors="replace") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine() or "unknown"


def _fingerprint(report: BenchReport, workload: Workload) -> None:
    report.cpu = _cpu_model()
    report.threads = os.environ.get("MQA_THREADS", "default")
    report.timer_resolution_ns = timer_resolution() * 1e9
    report.timer_note = workload.timer_note


def _counted_columns(workload: Workload, config: ModelConfig) -> tuple[float, int]:
    """(kv words per step averaged over the run, flops per step), decoder
    self-attention only, summed over layers."""
    kind = config.dec_self_kind
    n = workload.target_len
    slots = n if config.dec_self_window is None \
        else min(config.dec_self_window, n)
    cfg = ShapeConfig(b=workload.b, n=slots, m=slots, d=config.d_model,
                      h=config.heads, k=config.d_k, v=config.d_v)
    words = sum(kv_cache_words_step(cfg, kind, min(t, slots))
                for t in range(1, n + 1))
    kv_per_step = config.layers * words / n
    flops = config.layers * incremental_step_flops(cfg, kind)
    return kv_per_step, flops


def _bench_rows(workload: Workload, variants) -> list[BenchRow]:
    rows = []
    for variant in variants:
        config = variant_config(workload.model, variant)
        kv, fl = _counted_columns(workload, config)
        rows.append(BenchRow(
            variant=variant, kind=config.dec_self_kind,
            window=config.dec_self_window, d_ff=config.d_ff,
            param_total=param_count(init_params(config)),
            kv_words_per_step=kv, flops_per_step=fl))
    return rows


def _bench_batch(workload: Workload, config: ModelConfig) -> Batch:
    rng = np.random.default_rng(BENCH_SEED)
    b = workload.b
    source = rng.integers(1, config.vocab_size, size=(b, workload.source_len))
    target = rng.integers(1, config.vocab_size, size=(b, workload.target_len))
    opener = np.full((b, 1), BOS, dtype=np.int64)
    target_in = np.concatenate([opener, target[:, :-1]], axis=1)
    return Batch(source, target_in, target, np.ones_like(target, dtype=float))


def bench_decode(workload: Workload, variants=VARIANTS, *,
                 include_beam: bool = True, beam_size: int = 4) -> BenchReport:
    """Time the encoder pass and the incremental decode loop per variant."""
    report = BenchReport(workload.b, workload.source_len, workload.target_len,
                         workload.repetitions)
    _fingerprint(report, workload)
    for row in _bench_rows(workload, variants):
        config = variant_config(workload.model, row.variant)
        params = init_params(config)
        batch = _bench_batch(workload, config)
        source, steps = batch.source, workload.target_len

        memory_holder = {}

        def encode():
            memory_holder["m"] = encode_source(params, config, source)

        encode()
        probe = time.perf_counter()
        fast_greedy(params, config, source, steps,
                    memory=memory_holder["m"])
        probe = time.perf_counter() - probe
        reps = _guard_repetitions(workload, probe, steps)

        enc_seconds = _median_seconds(encode, reps, workload.warmup_reps)
        row.encoder_us = enc_seconds * 1e6 / (workload.b * workload.source_len)

        dec_seconds = _median_seconds(
            lambda: fast_greedy(params, config, source, steps,
                                memory=memory_holder["m"]),
            reps, workload.warmup_reps)
        # median run / steps is the median step time (fixed-shape steps),
        # reported as step time * steps / (b * target_len)
        row.decoder_us = dec_seconds * 1e6 / (workload.b * workload.target_len)

        if include_beam:
            def beam_encode():
                memory_holder["m"] = encode_source(params, config, source)
                np.repeat(memory_holder["m"], beam_size, axis=0)

            beam_enc_seconds = _median_seconds(beam_encode, reps,
                                               workload.warmup_reps)
            row.beam_encoder_us = beam_enc_seconds * 1e6 / (
                workload.b * workload.source_len)
            beam_seconds = _median_seconds(
                lambda: fast_beam(params, config, source, steps, beam_size,
                                  memory=memory_holder["m"]),
                reps, workload.warmup_reps)
            row.beam_decoder_us = beam_seconds * 1e6 / (
                workload.b * workload.target_len)
        report.rows.append(row)
    return report


def bench_training_pass(workload: Workload, variants=VARIANTS) -> BenchReport:
    """Time one batched forward+backward per variant, amortized per
    (input + target) token."""
    report = BenchReport(workload.b, workload.source_len, workload.target_len,
                         workload.repetitions)
    _fingerprint(report, workload)
    tokens = workload.b * (workload.source_len + workload.target_len)
    for row in _bench_rows(workload, variants):
        config = variant_config(workload.model, row.variant)
        params = init_params(config)
        batch = _bench_batch(workload, config)
        seconds = _median_seconds(
            lambda: loss_and_grads(params, config, batch),
            workload.repetitions, workload.warmup_reps)
        row.training_us = seconds * 1e6 / tokens
        report.rows.append(row)
    return report


def run_bench(workload: Workload, variants=VARIANTS, *,
              include_beam: bool = True) -> BenchReport:
    """Full table: training plus decode columns for every variant."""
    decode_report = bench_decode(workload, variants,
                                 include_beam=include_beam)
    training_report = bench_training_pass(workload, variants)
    for row, trained in zip(decode_report.rows, training_report.rows):
        row.training_us = trained.training_us
    return decode_report


# ---------------------------------------------------------------------------
# report rendering

CSV_COLUMNS = (
    "variant", "kind", "window", "d_ff", "param_total", "training_us",
    "encoder_us", "decoder_us", "beam_encoder_us", "beam_decoder_us",
    "kv_words_per_step", "flops_per_step", "b", "source_len", "target_len",
    "repetitions", "cpu", "threads", "timer_resolution_ns",
)


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _us(value: float) -> str:
    return "-" if value != value else f"{value:.2f}"


def emit_report(report: BenchReport, fmt: str) -> str:
    """Render a report as csv or markdown."""
    if fmt == "csv":
        lines = [",".join(CSV_COLUMNS)]
        for row in report.rows:
            record = {
                **{name: getattr(row, name) for name in CSV_COLUMNS
                   if hasattr(row, name)},
                "b": report.b,
                "source_len": report.source_len,
                "target_len": report.target_len,
                "repetitions": report.repetitions,
                "cpu": report.cpu.replace(",", ";"),
                "threads": report.threads,
                "timer_resolution_ns": report.timer_resolution_ns,
            }
            lines.append(",".join(_csv_value(record[name])
                                  for name in CSV_COLUMNS))
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        head = (f"batch {report.b}, source length {report.source_len}, "
                f"target length {report.target_len}, "
                f"median of {report.repetitions} repetitions")
        env = (f"environment: {report.cpu}; threads {report.threads}; "
               f"timer resolution {report.timer_resolution_ns:.0f} ns")
        lines = [
            "# Per-token cost by attention type",
            "",
            head,
            "",
            env,
            "",
            "| Attention type | Training | Inference enc. + dec. "
            "| Beam-4 enc. + dec. | KV words/step | Flops/step |",
            "|---|---:|---:|---:|---:|---:|",
        ]
        for row in report.rows:
            lines.append(
                f"| {row.variant} | {_us(row.training_us)} "
                f"| {_us(row.encoder_us)} + {_us(row.decoder_us)} "
                f"| {_us(row.beam_encoder_us)} + {_us(row.beam_decoder_us)} "
                f"| {row.kv_words_per_step:.1f} | {row.flops_per_step} |")
        lines.append("")
        lines.append("All times are microseconds per token.")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> BenchReport:
    """Rebuild a report from its csv rendering.

    Inverse of emit_report(..., "csv") up to the comma substitution in the
    cpu field.  Timings survive exactly: floats are written with 17
    significant digits.
    """
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
        raise InputError("csv header does not match the report schema")
    records = list(reader)
    if not records:
        return BenchReport(b=0, source_len=0, target_len=0, repetitions=0)
    first = records[0]
    report = BenchReport(
        b=int(first["b"]),
        source_len=int(first["source_len"]),
        target_len=int(first["target_len"]),
        repetitions=int(first["repetitions"]),
        cpu=first["cpu"],
        threads=first["threads"],
        timer_resolution_ns=float(first["timer_resolution_ns"]),
    )
    for record in records:
        report.rows.append(BenchRow(
            variant=record["variant"],
            kind=record["kind"],
            window=int(record["window"]) if record["window"] else None,
            d_ff=int(record["d_ff"]),
            param_total=int(record["param_total"]),
            training_us=float(record["training_us"]),
            encoder_us=float(record["encoder_us"]),
            decoder_us=float(record["decoder_us"]),
            beam_encoder_us=float(record["beam_encoder_us"]),
            beam_decoder_us=float(record["beam_decoder_us"]),
            kv_words_per_step=float(record["kv_words_per_step"]),
            flops_per_step=int(record["flops_per_step"]),
        ))
    return report
