"""Per-head cache state machine and the decode loop.

Each decode step runs three stages:

1. insert the new KV vectors in full precision -- into the sink while it has
   room, otherwise keys go to the key q-buffer and values to the local ring
   (whose oldest entry spills into the value q-buffer once the ring is full);
2. attend over the heterogeneous store -- full-precision buffers verbatim,
   quantized pages through the page codec;
3. quantize-and-pack any q-buffer that reached one full group of G tokens.

Global token order is reconstructible on both sides:

    keys   = sink | pages | q-buffer              (oldest -> newest)
    values = sink | pages | q-buffer | local      (oldest -> newest)

A state has a single exclusive writer at a time; ``attend`` does not mutate
and may run concurrently with other readers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import KittyConfig
from .errors import KittyError
from .pages import dequantize_key_page, dequantize_value_page, pack_key_page, pack_value_page
from .quant import PASSTHROUGH_BITS, channel_scores, select_boost


@dataclass(frozen=True)
class AttentionOutput:
    """Per-query-head outputs, plus the attention probabilities when asked."""

    outputs: np.ndarray  # (h_q, d) float32
    probs: np.ndarray | None = None  # (h_q, tokens) float32


class _RowStore:
    """Append-only float32 row buffer with amortized growth."""

    def __init__(self, d: int, capacity: int = 8):
        self._buf = np.empty((capacity, d), dtype=np.float32)
        self._n = 0

    def __len__(self):
        return self._n

    def append(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        need = self._n + rows.shape[0]
        if need > self._buf.shape[0]:
            grown = np.empty((max(need, 2 * self._buf.shape[0]), self._buf.shape[1]), dtype=np.float32)
            grown[: self._n] = self._buf[: self._n]
            self._buf = grown
        self._buf[self._n : need] = rows
        self._n = need

    def view(self) -> np.ndarray:
        return self._buf[: self._n]


class _HeadState:
    """Storage for one KV head."""

    def __init__(self, cfg: KittyConfig):
        d = cfg.d
        self.key_sink = _RowStore(d, max(cfg.s, 1))
        self.value_sink = _RowStore(d, max(cfg.s, 1))
        self.key_qbuffer: list[np.ndarray] = []
        self.value_qbuffer: list[np.ndarray] = []
        self.value_local: list[np.ndarray] = []
        self.key_pages: list = []
        self.value_pages: list = []
        # reconstructed page rows, appended once per pack so attend never
        # re-dequantizes immutable pages
        self.key_paged = _RowStore(d, cfg.g)
        self.value_paged = _RowStore(d, cfg.g)


class KittyCacheState:
    """Heterogeneous KV store for one sequence across all KV heads."""

    def __init__(self, cfg: KittyConfig):
        self.cfg = cfg
        self.heads = [_HeadState(cfg) for _ in range(cfg.h_kv)]
        self.total_tokens = 0
        self.key_pack_events = 0
        self.value_pack_events = 0
        self._sel_rng = np.random.default_rng(cfg.heuristic_seed)
        self._sqrt_d = np.float32(np.sqrt(cfg.d))

    # -- insertion ---------------------------------------------------------

    def _coerce_rows(self, new: np.ndarray, what: str) -> np.ndarray:
        new = np.asarray(new, dtype=np.float32)
        if new.ndim == 1:
            new = new[None, :]
        if new.shape != (self.cfg.h_kv, self.cfg.d):
            raise KittyError(
                f"{what} must have shape ({self.cfg.h_kv}, {self.cfg.d}), got {new.shape}"
            )
        return new

    def insert_token(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        """Insert one token's KV vectors (one row per KV head)."""
        k_new = self._coerce_rows(k_new, "k_new")
        v_new = self._coerce_rows(v_new, "v_new")
        in_sink = self.total_tokens < self.cfg.s
        for head, k_row, v_row in zip(self.heads, k_new, v_new):
            if in_sink:
                head.key_sink.append(k_row)
                head.value_sink.append(v_row)
            else:
                head.key_qbuffer.append(k_row.copy())
                if len(head.value_local) == self.cfg.r:
                    head.value_qbuffer.append(head.value_local.pop(0))
                head.value_local.append(v_row.copy())
        self.maybe_pack()
        self.total_tokens += 1
        self._check_counts()

    def prefill(self, keys: np.ndarray, values: np.ndarray) -> None:
        """Bulk-insert a prompt into an empty state.

        Defined as the fold of single-token insertion, so the resulting state
        is field-for-field identical to stepping token by token.
        """
        if self.total_tokens != 0:
            raise KittyError("prefill requires an empty state")
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.ndim == 2:
            keys = keys[None]
        if values.ndim == 2:
            values = values[None]
        if keys.shape != values.shape or keys.shape[0] != self.cfg.h_kv:
            raise KittyError("prefill keys/values must be (h_kv, P, d) with equal shapes")
        for t in range(keys.shape[1]):
            self.insert_token(keys[:, t], values[:, t])

    def maybe_pack(self) -> int:
        """Pack any q-buffer that holds a full group; returns events fired."""
        cfg = self.cfg
        events = 0
        if len(self.heads[0].key_qbuffer) == cfg.g:
            for head in self.heads:
                block = np.stack(head.key_qbuffer)
                if cfg.key_bits == PASSTHROUGH_BITS:
                    head.key_pages.append(block)
                    head.key_paged.append(block)
                else:
                    scores = channel_scores(block)
                    sel = select_boost(
                        scores, cfg.boost_fraction, cfg.heuristic, self._sel_rng
                    )
                    page = pack_key_page(block, sel)
                    head.key_pages.append(page)
                    head.key_paged.append(np.ascontiguousarray(dequantize_key_page(page).T))
                head.key_qbuffer.clear()
            self.key_pack_events += 1
            events += 1
        if len(self.heads[0].value_qbuffer) == cfg.g:
            for head in self.heads:
                block = np.stack(head.value_qbuffer)
                if cfg.value_bits == PASSTHROUGH_BITS:
                    head.value_pages.append(block)
                    head.value_paged.append(block)
                else:
                    page = pack_value_page(block)
                    head.value_pages.append(page)
                    head.value_paged.append(dequantize_value_page(page))
                head.value_qbuffer.clear()
            self.value_pack_events += 1
            events += 1
        return events

    def _check_counts(self) -> None:
        cfg, n = self.cfg, self.total_tokens
        for head in self.heads:
            keys = len(head.key_sink) + cfg.g * len(head.key_pages) + len(head.key_qbuffer)
            values = (
                len(head.value_sink)
                + cfg.g * len(head.value_pages)
                + len(head.value_qbuffer)
                + len(head.value_local)
            )
            assert keys == values == n, f"token conservation violated: {keys}/{values}/{n}"
            assert len(head.key_qbuffer) < cfg.g and len(head.value_qbuffer) < cfg.g
            assert len(head.value_local) == min(cfg.r, max(0, n - cfg.s))

    # -- readout -----------------------------------------------------------

    def _key_segments(self, head: _HeadState) -> list[np.ndarray]:
        segs = [head.key_sink.view(), head.key_paged.view()]
        if head.key_qbuffer:
            segs.append(np.stack(head.key_qbuffer))
        return segs

    def _value_segments(self, head: _HeadState) -> list[np.ndarray]:
        segs = [head.value_sink.view(), head.value_paged.view()]
        if head.value_qbuffer:
            segs.append(np.stack(head.value_qbuffer))
        if head.value_local:
            segs.append(np.stack(head.value_local))
        return segs

    def flatten_keys(self, kv_head: int = 0) -> np.ndarray:
        """All key rows of one head in global token order, pages dequantized."""
        return np.concatenate(self._key_segments(self.heads[kv_head]), axis=0)

    def flatten_values(self, kv_head: int = 0) -> np.ndarray:
        return np.concatenate(self._value_segments(self.heads[kv_head]), axis=0)

    def attend(self, q: np.ndarray, return_probs: bool = False) -> AttentionOutput:
        """Scaled-dot-product attention of ``q`` over the whole store.

        ``q`` is (h_q, d), one row per query head; query heads are mapped to
        KV heads by the grouped-query rule.  Logits are accumulated in
        float32 with a numerically stable (max-subtracted) softmax, and keys
        and values for the same global token index are always paired.
        """
        if self.total_tokens == 0:
            raise KittyError("attend on an empty cache")
        cfg = self.cfg
        q = np.asarray(q, dtype=np.float32)
        if q.ndim == 1:
            q = q[None, :]
        if q.shape != (cfg.h_q, cfg.d):
            raise KittyError(f"q must have shape ({cfg.h_q}, {cfg.d}), got {q.shape}")

        outputs = np.empty((cfg.h_q, cfg.d), dtype=np.float32)
        probs = np.empty((cfg.h_q, self.total_tokens), dtype=np.float32) if return_probs else None
        group = cfg.group_size
        for kv_h, head in enumerate(self.heads):
            k_segs = self._key_segments(head)
            v_segs = self._value_segments(head)
            q_grp = q[kv_h * group : (kv_h + 1) * group]  # (group, d)
            logits = np.concatenate([seg @ q_grp.T for seg in k_segs], axis=0) / self._sqrt_d
            p = _softmax_columns(logits)  # (tokens, group)
            out = np.zeros((group, cfg.d), dtype=np.float32)
            start = 0
            for seg in v_segs:
                stop = start + seg.shape[0]
                out += p[start:stop].T @ seg
                start = stop
            outputs[kv_h * group : (kv_h + 1) * group] = out
            if return_probs:
                probs[kv_h * group : (kv_h + 1) * group] = p.T
        return AttentionOutput(outputs=outputs, probs=probs)


def _softmax_columns(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=0, keepdims=True)


def oracle_attend(
    keys: np.ndarray,
    values: np.ndarray,
    queries: np.ndarray,
    kv_head_map=None,
) -> AttentionOutput:
    """Dense full-precision attention reference.

    ``keys``/``values`` are (L, d) for a single KV head or (h_kv, L, d) for
    several; ``queries`` is (d,) or (n_q, d).  With stacked heads, query head
    ``i`` reads KV head ``kv_head_map[i]`` (grouped-query floor rule when the
    map is omitted).  This is the ground truth every equivalence test in the
    package compares against.
    """
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim == 1:
        queries = queries[None, :]
    if keys.ndim == 2:
        keys = keys[None]
        values = values[None]
    if keys.shape != values.shape:
        raise KittyError("keys and values must have matching shapes")
    h_kv, length, d = keys.shape
    if length == 0:
        raise KittyError("attention over zero tokens")
    n_q = queries.shape[0]
    if kv_head_map is None:
        kv_head_map = [i * h_kv // n_q for i in range(n_q)]

    outputs = np.empty((n_q, d), dtype=np.float32)
    probs = np.empty((n_q, length), dtype=np.float32)
    sqrt_d = np.float32(np.sqrt(d))
    for i, qv in enumerate(queries):
        k = keys[kv_head_map[i]]
        logits = (k @ qv) / sqrt_d
        p = _softmax_columns(logits[:, None])[:, 0]
        probs[i] = p
        outputs[i] = p @ values[kv_head_map[i]]
    return AttentionOutput(outputs=outputs, probs=probs)
