"""Desk-scale analysis experiments: per-channel quantization sensitivity,
boost-rate sweeps, and end-to-end memory accounting.

All error metrics are computed on attention probabilities (post-softmax),
not raw logits.  Experiments are deterministic given their seeds and report
across-seed means together with the maximum observed deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._version import __version__
from .cache import KittyCacheState
from .config import KittyConfig
from .errors import KittyError
from .pages import page_byte_size
from .quant import (
    PASSTHROUGH_BITS,
    boost_count,
    channel_scores,
    fake_quantize_matrix,
    select_boost,
)
from .tensor_io import PRNG_ID, SyntheticSpec, generate_synthetic

FP_BYTES = 2  # 16-bit accounting for every full-precision element


def _softmax_rows64(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _stack_heads(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise KittyError(f"{what} must be (heads, tokens, channels) or 2-D")
    return x


# -- channel sensitivity ----------------------------------------------------


@dataclass(frozen=True)
class SensitivityReport:
    """Attention-probability MSE of quantizing each key channel alone."""

    mse: np.ndarray  # (h_q, D) float64
    ranking: np.ndarray  # (h_q, D) channels by descending MSE per head
    mean_mse: np.ndarray  # (D,) mean across query heads

    def top_channels(self, k: int) -> np.ndarray:
        """The k channels with the largest head-averaged MSE."""
        return np.argsort(-self.mean_mse, kind="stable")[:k]


def channel_sensitivity(queries, keys, bits: int = 2) -> SensitivityReport:
    """Perturb one key channel at a time and measure the attention-score MSE.

    ``queries`` is (h_q, Lq, D), ``keys`` is (h_kv, L, D) (2-D inputs are
    treated as a single head).  For each channel the key matrix is
    fake-quantized in that channel only, per channel over all L tokens, and
    the MSE between baseline and perturbed probability matrices is recorded
    per query head.  ``bits=16`` is the identity and yields all zeros.
    """
    queries = _stack_heads(queries, "queries")
    keys = _stack_heads(keys, "keys")
    h_q, _, d = queries.shape
    h_kv, length, dk = keys.shape
    if d != dk:
        raise KittyError("queries and keys disagree on the channel count")
    if h_q % h_kv != 0:
        raise KittyError("query head count must be a multiple of KV head count")

    mse = np.zeros((h_q, d), dtype=np.float64)
    if bits == PASSTHROUGH_BITS:
        ranking = np.tile(np.arange(d), (h_q, 1))
        return SensitivityReport(mse=mse, ranking=ranking, mean_mse=mse.mean(axis=0))

    inv_sqrt_d = 1.0 / np.sqrt(d)
    group = h_q // h_kv
    for kv_h in range(h_kv):
        k64 = keys[kv_h].astype(np.float64)
        quantized = fake_quantize_matrix(keys[kv_h], "per_channel", np.full(d, bits))
        delta = quantized.astype(np.float64) - k64  # (L, D)
        for j in range(group):
            qh = kv_h * group + j
            q64 = queries[qh].astype(np.float64)
            base_logits = (q64 @ k64.T) * inv_sqrt_d
            base_p = _softmax_rows64(base_logits)
            for ch in range(d):
                # single-channel perturbation is a rank-1 logit update
                logits = base_logits + np.outer(q64[:, ch], delta[:, ch]) * inv_sqrt_d
                p = _softmax_rows64(logits)
                mse[qh, ch] = np.mean((p - base_p) ** 2)

    ranking = np.argsort(-mse, axis=1, kind="stable")
    return SensitivityReport(mse=mse, ranking=ranking, mean_mse=mse.mean(axis=0))


# -- boost-rate sweep --------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    heuristic: str
    mean_mse: float
    max_deviation: float
    runs: int


def attention_mse(keys, queries, selection) -> float:
    """Mean attention-probability MSE of boosting ``selection`` to 4 bits.

    Selected key channels are fake-quantized at 4 bits, the rest at 2 bits;
    the result is compared against full-precision attention, averaged over
    query heads.
    """
    keys = np.asarray(keys, dtype=np.float32)
    queries = _stack_heads(queries, "queries")
    d = keys.shape[1]
    widths = np.full(d, 2)
    widths[np.asarray(selection, dtype=np.int64)] = 4
    quantized = fake_quantize_matrix(keys, "per_channel", widths).astype(np.float64)
    k64 = keys.astype(np.float64)
    inv_sqrt_d = 1.0 / np.sqrt(d)
    total = 0.0
    for q in queries:
        q64 = q.astype(np.float64)
        base = _softmax_rows64((q64 @ k64.T) * inv_sqrt_d)
        pert = _softmax_rows64((q64 @ quantized.T) * inv_sqrt_d)
        total += np.mean((pert - base) ** 2)
    return total / len(queries)


def boost_sweep(
    keys,
    queries,
    fractions,
    heuristics=("magnitude", "random"),
    random_draws: int = 5,
    seed: int = 0,
) -> list[SweepRow]:
    """Attention MSE per (boost fraction, selection heuristic) on one dataset.

    The magnitude heuristic is deterministic; the random baseline is repeated
    ``random_draws`` times from the seeded generator and averaged.
    """
    keys = np.asarray(keys, dtype=np.float32)
    d = keys.shape[1]
    scores = channel_scores(keys)
    rng = np.random.default_rng(seed)
    rows = []
    for fraction in fractions:
        for heuristic in heuristics:
            if heuristic == "magnitude":
                sel = select_boost(scores, fraction, "magnitude")
                runs = [attention_mse(keys, queries, sel.boosted)]
            elif heuristic == "random":
                runs = []
                for _ in range(random_draws):
                    sel = select_boost(scores, fraction, "random", rng)
                    runs.append(attention_mse(keys, queries, sel.boosted))
            else:
                raise KittyError(f"unknown heuristic {heuristic!r}")
            mean = float(np.mean(runs))
            rows.append(
                SweepRow(
                    fraction=float(fraction),
                    heuristic=heuristic,
                    mean_mse=mean,
                    max_deviation=float(np.max(np.abs(np.asarray(runs) - mean))),
                    runs=len(runs),
                )
            )
    return rows


def boost_sweep_experiment(
    fractions,
    n_seeds: int = 20,
    tokens: int = 1024,
    channels: int = 128,
    outlier_channels=(3, 17),
    outlier_gain: float = 8.0,
    base_std: float = 1.0,
    query_tokens: int = 64,
    heuristics=("magnitude", "random"),
    seed: int = 0,
) -> list[SweepRow]:
    """Boost sweep aggregated over freshly generated synthetic datasets.

    Each seed draws an outlier-channel key tensor and a plain Gaussian query
    block; per-seed MSEs are averaged and reported with the maximum observed
    deviation, one row per (fraction, heuristic).
    """
    per_cell: dict[tuple[float, str], list[float]] = {
        (float(f), h): [] for f in fractions for h in heuristics
    }
    for s in range(n_seeds):
        spec = SyntheticSpec(
            tokens=tokens,
            channels=channels,
            outlier_channels=tuple(outlier_channels),
            outlier_gain=outlier_gain,
            base_std=base_std,
            seed=seed + s,
        )
        keys = generate_synthetic(spec)
        q_rng = np.random.default_rng((seed + s, 113))
        queries = q_rng.normal(0.0, 1.0, size=(query_tokens, channels)).astype(np.float32)
        for row in boost_sweep(
            keys, queries, fractions, heuristics, random_draws=1, seed=seed + s
        ):
            per_cell[(row.fraction, row.heuristic)].append(row.mean_mse)

    rows = []
    for (fraction, heuristic), runs in per_cell.items():
        mean = float(np.mean(runs))
        rows.append(
            SweepRow(
                fraction=fraction,
                heuristic=heuristic,
                mean_mse=mean,
                max_deviation=float(np.max(np.abs(np.asarray(runs) - mean))),
                runs=len(runs),
            )
        )
    return rows


# -- memory accounting -------------------------------------------------------


@dataclass(frozen=True)
class MemoryReport:
    """Byte accounting of one cache at the 16-bit convention.

    ``compression_ratio`` relates the full footprint (including page
    metadata and boost indices) to the 16-bit baseline; ``kv_data_ratio``
    ignores metadata and compares KV data bytes only, which is the number
    that tends to the nominal 16/2 = 8x as the sequence grows and the boost
    fraction goes to zero.
    """

    length: int
    key_sink_bytes: int
    key_qbuffer_bytes: int
    key_page_count: int
    key_pages_payload: int
    key_pages_metadata: int
    key_pages_index: int
    value_sink_bytes: int
    value_local_bytes: int
    value_qbuffer_bytes: int
    value_page_count: int
    value_pages_payload: int
    value_pages_metadata: int
    baseline_bytes: int

    @property
    def total_bytes(self) -> int:
        return (
            self.key_sink_bytes
            + self.key_qbuffer_bytes
            + self.key_pages_payload
            + self.key_pages_metadata
            + self.key_pages_index
            + self.value_sink_bytes
            + self.value_local_bytes
            + self.value_qbuffer_bytes
            + self.value_pages_payload
            + self.value_pages_metadata
        )

    @property
    def kv_data_bytes(self) -> int:
        return (
            self.total_bytes
            - self.key_pages_metadata
            - self.key_pages_index
            - self.value_pages_metadata
        )

    @property
    def compression_ratio(self) -> float:
        return self.baseline_bytes / self.total_bytes if self.total_bytes else 1.0

    @property
    def kv_data_ratio(self) -> float:
        return self.baseline_bytes / self.kv_data_bytes if self.kv_data_bytes else 1.0


def _component_counts(cfg: KittyConfig, length: int) -> dict:
    """Steady-state token occupancy of every component at ``length`` tokens."""
    sink = min(length, cfg.s)
    past = max(0, length - cfg.s)
    key_pages, key_qbuf = divmod(past, cfg.g)
    local = min(cfg.r, past)
    value_pages, value_qbuf = divmod(past - local, cfg.g)
    return {
        "sink": sink,
        "key_pages": key_pages,
        "key_qbuf": key_qbuf,
        "local": local,
        "value_pages": value_pages,
        "value_qbuf": value_qbuf,
    }


def _assemble_report(cfg: KittyConfig, length: int, c: dict) -> MemoryReport:
    fp_row = cfg.d * FP_BYTES * cfg.h_kv
    if cfg.key_bits == PASSTHROUGH_BITS:
        key_payload = c["key_pages"] * cfg.g * fp_row
        key_meta = key_index = 0
    else:
        per = page_byte_size("key", cfg)
        key_payload = c["key_pages"] * per.payload * cfg.h_kv
        key_meta = c["key_pages"] * per.metadata * cfg.h_kv
        key_index = c["key_pages"] * per.index * cfg.h_kv
    if cfg.value_bits == PASSTHROUGH_BITS:
        value_payload = c["value_pages"] * cfg.g * fp_row
        value_meta = 0
    else:
        per = page_byte_size("value", cfg)
        value_payload = c["value_pages"] * per.payload * cfg.h_kv
        value_meta = c["value_pages"] * per.metadata * cfg.h_kv
    return MemoryReport(
        length=length,
        key_sink_bytes=c["sink"] * fp_row,
        key_qbuffer_bytes=c["key_qbuf"] * fp_row,
        key_page_count=c["key_pages"],
        key_pages_payload=key_payload,
        key_pages_metadata=key_meta,
        key_pages_index=key_index,
        value_sink_bytes=c["sink"] * fp_row,
        value_local_bytes=c["local"] * fp_row,
        value_qbuffer_bytes=c["value_qbuf"] * fp_row,
        value_page_count=c["value_pages"],
        value_pages_payload=value_payload,
        value_pages_metadata=value_meta,
        baseline_bytes=2 * FP_BYTES * length * cfg.d * cfg.h_kv,
    )


def memory_report(cfg: KittyConfig, length: int) -> MemoryReport:
    """Closed-form footprint of a cache after ``length`` inserted tokens."""
    if length < 0:
        raise KittyError("length must be >= 0")
    return _assemble_report(cfg, length, _component_counts(cfg, length))


def measure_cache_bytes(state: KittyCacheState) -> MemoryReport:
    """The same accounting, measured from an actually constructed state."""
    head = state.heads[0]
    counts = {
        "sink": len(head.key_sink),
        "key_pages": len(head.key_pages),
        "key_qbuf": len(head.key_qbuffer),
        "local": len(head.value_local),
        "value_pages": len(head.value_pages),
        "value_qbuf": len(head.value_qbuffer),
    }
    return _assemble_report(state.cfg, state.total_tokens, counts)


# -- report serialization ----------------------------------------------------


def report_header(command: str, seed, config_mapping: dict | None = None) -> list[str]:
    """Self-describing comment block: tool version, generator, seed, config."""
    lines = [
        f"# kittykv {__version__}",
        f"# command: {command}",
        f"# prng: {PRNG_ID}",
        f"# seed: {seed}",
    ]
    for key in sorted(config_mapping or {}):
        lines.append(f"# {key} = {config_mapping[key]}")
    return lines


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_csv(path, header_lines, columns, rows) -> None:
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def sensitivity_csv_rows(report: SensitivityReport):
    h_q, d = report.mse.shape
    columns = ["channel"] + [f"mse_qhead_{h}" for h in range(h_q)] + ["mean_mse"]
    rows = [
        [ch, *(float(report.mse[h, ch]) for h in range(h_q)), float(report.mean_mse[ch])]
        for ch in range(d)
    ]
    return columns, rows


def sweep_csv_rows(rows: list[SweepRow]):
    columns = ["fraction", "heuristic", "mean_mse", "max_deviation", "runs"]
    return columns, [
        [r.fraction, r.heuristic, r.mean_mse, r.max_deviation, r.runs] for r in rows
    ]


def memory_summary(report: MemoryReport) -> list[str]:
    """Structured-text summary, one ``key: value`` line per entry."""
    pairs = [
        ("length", report.length),
        ("key_sink_bytes", report.key_sink_bytes),
        ("key_qbuffer_bytes", report.key_qbuffer_bytes),
        ("key_page_count", report.key_page_count),
        ("key_pages_payload", report.key_pages_payload),
        ("key_pages_metadata", report.key_pages_metadata),
        ("key_pages_index", report.key_pages_index),
        ("value_sink_bytes", report.value_sink_bytes),
        ("value_local_bytes", report.value_local_bytes),
        ("value_qbuffer_bytes", report.value_qbuffer_bytes),
        ("value_page_count", report.value_page_count),
        ("value_pages_payload", report.value_pages_payload),
        ("value_pages_metadata", report.value_pages_metadata),
        ("total_bytes", report.total_bytes),
        ("kv_data_bytes", report.kv_data_bytes),
        ("baseline_bytes", report.baseline_bytes),
        ("compression_ratio", report.compression_ratio),
        ("kv_data_ratio", report.kv_data_ratio),
    ]
    return [f"{k}: {_fmt(v)}" for k, v in pairs]
