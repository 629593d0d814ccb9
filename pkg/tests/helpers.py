"""Small builders shared by the test modules."""

import numpy as np

from tpckit.data.batching import Batch


def random_batch(rng, B=2, F=3, T=8, n_flat=2, n_diag=4, lengths=None):
    lengths = [T] * B if lengths is None else lengths
    pad = np.zeros((B, T), bool)
    for i, L in enumerate(lengths):
        pad[i, :L] = True
    values = rng.normal(size=(B, F, T)) * pad[:, None, :]
    decay = rng.uniform(0.2, 1.0, size=(B, F, T)) * pad[:, None, :]
    labels = rng.uniform(0.1, 5.0, size=(B, T)) * pad
    return Batch(values, decay, rng.normal(size=(B, n_flat)), (rng.random((B, n_diag)) < 0.5).astype(float),
                 labels, pad.copy(), pad, np.arange(B))


def no_dropout(spec):
    """Spec with every dropout rate at zero so forward passes are deterministic."""
    out = dict(spec)
    if out["kind"] == "tpc":
        out.update(temp_dropout=0.0, main_dropout=0.0)
    else:
        out.update(dropout=0.0, main_dropout=0.0)
    return out
