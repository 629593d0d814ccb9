"""Variable-length batching with padding and masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .preprocess import ProcessedStay


@dataclass
class Batch:
    values: np.ndarray     # [B, F, T]
    decay: np.ndarray      # [B, F, T]
    flat: np.ndarray       # [B, f]
    diag: np.ndarray       # [B, n_diag]
    labels: np.ndarray     # [B, T]
    mask: np.ndarray       # [B, T] true at labelled (valid) hours
    pad_mask: np.ndarray   # [B, T] true at real (non-padding) hours
    stay_ids: np.ndarray   # [S]
    segment: np.ndarray | None = None   # [B, T] stay index per position (-1 in gaps) when packed

    @property
    def size(self) -> int:
        """Number of stays (rows may hold several when packed)."""
        return int(self.stay_ids.shape[0])

    @property
    def T(self) -> int:
        return self.values.shape[2]

    def inputs(self) -> np.ndarray:
        """[B, 2F, T] values followed by decay indicators (the recurrent/attention input)."""
        return np.concatenate([self.values, self.decay], axis=1)


def collate(stays: Sequence[ProcessedStay]) -> Batch:
    """Right-pad to the longest stay in the batch."""
    B = len(stays)
    T = max(s.length for s in stays)
    F = stays[0].values.shape[0]
    values = np.zeros((B, F, T))
    decay = np.zeros((B, F, T))
    labels = np.zeros((B, T))
    mask = np.zeros((B, T), dtype=bool)
    pad = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(stays):
        L = s.length
        values[i, :, :L] = s.values
        decay[i, :, :L] = s.decay
        labels[i, :L] = s.labels
        mask[i, :L] = s.valid
        pad[i, :L] = True
    return Batch(values, decay, np.stack([s.flat for s in stays]), np.stack([s.diag for s in stays]),
                 labels, mask, pad, np.array([s.stay_id for s in stays]))


def batch_order(n: int, batch_size: int, seed: int | None = None, epoch: int = 0) -> list[list[int]]:
    """Index lists per batch: sequential without a seed, else a fresh shuffle per (seed, epoch).

    Batches are deliberately not grouped by stay length. With batch normalisation in
    training mode, length-homogeneous batches leak the remaining-LoS target through the
    batch statistics and the learned shortcut vanishes at evaluation time.
    """
    idx = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    return [idx[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def pack(stays: Sequence[ProcessedStay], gap: int) -> Batch:
    """Place several stays per row, separated by at least ``gap`` zero hours.

    Row width is the longest stay. Rows are filled first-fit in decreasing length order.
    A causal model whose layers re-zero gap positions and whose receptive field per layer
    is at most ``gap`` computes exactly what it would on the padded batch.
    """
    if gap < 0:
        raise ValueError("gap must be non-negative")
    lengths = [s.length for s in stays]
    W = max(lengths)
    rows: list[list[tuple[int, int]]] = []   # (stay index, offset)
    used: list[int] = []
    for i in sorted(range(len(stays)), key=lambda i: -lengths[i]):
        L = lengths[i]
        for r, u in enumerate(used):
            if u + gap + L <= W:
                rows[r].append((i, u + gap))
                used[r] = u + gap + L
                break
        else:
            rows.append([(i, 0)])
            used.append(L)
    R, F = len(rows), stays[0].values.shape[0]
    values = np.zeros((R, F, W))
    decay = np.zeros((R, F, W))
    labels = np.zeros((R, W))
    mask = np.zeros((R, W), dtype=bool)
    pad = np.zeros((R, W), dtype=bool)
    segment = np.full((R, W), -1, dtype=np.int64)
    for r, row in enumerate(rows):
        for i, off in row:
            s = stays[i]
            sl = slice(off, off + s.length)
            values[r, :, sl] = s.values
            decay[r, :, sl] = s.decay
            labels[r, sl] = s.labels
            mask[r, sl] = s.valid
            pad[r, sl] = True
            segment[r, sl] = i
    return Batch(values, decay, np.stack([s.flat for s in stays]), np.stack([s.diag for s in stays]),
                 labels, mask, pad, np.array([s.stay_id for s in stays]), segment)


def batch_stays(stays: Sequence[ProcessedStay], batch_size: int, seed: int | None = None,
                epoch: int = 0, drop_unlabelled: bool = True, pack_gap: int | None = None) -> Iterator[Batch]:
    """Yield padded (or, with ``pack_gap``, packed) batches.

    Stays with no labelled hour are skipped unless ``drop_unlabelled`` is false.
    """
    if drop_unlabelled:
        stays = [s for s in stays if s.n_valid > 0]
    for ids in batch_order(len(stays), batch_size, seed, epoch):
        chunk = [stays[i] for i in ids]
        yield collate(chunk) if pack_gap is None else pack(chunk, pack_gap)
