"""Input validation helpers for the array-facing estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, StgcnError
from .graph import Topology, load_topology
from .model import LABEL_NAMES, STABLE, UNSTABLE


def check_panel(X) -> np.ndarray:
    """Validate a (samples, 3, window, buses) channel panel."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeMismatch(
            f"expected X with shape (samples, 3, window, buses), got {X.shape}"
        )
    if X.shape[2] < 2:
        raise StgcnError("window axis needs at least 2 snapshots")
    if not np.isfinite(X).all():
        raise StgcnError("X contains NaN or Inf")
    return X


def check_labels(y, n_samples) -> np.ndarray:
    """Accept 0/1 ints or 'stable'/'unstable' strings; return int64 array."""
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ShapeMismatch(f"y shape {y.shape} does not match {n_samples} samples")
    if y.dtype.kind in "US":
        lut = {LABEL_NAMES[STABLE]: STABLE, LABEL_NAMES[UNSTABLE]: UNSTABLE}
        try:
            return np.array([lut[str(v)] for v in y], dtype=np.int64)
        except KeyError as e:
            raise StgcnError(f"unknown label {e.args[0]!r}") from None
    out = y.astype(np.int64)
    if not np.isin(out, (STABLE, UNSTABLE)).all():
        raise StgcnError("labels must be 0 (stable) or 1 (unstable)")
    return out


def check_topology(obj) -> Topology:
    """Accept a Topology or a path to an edge-list file."""
    if isinstance(obj, Topology):
        return obj
    if obj is None:
        raise StgcnError("a topology is required (object or edge-list file path)")
    return load_topology(obj)
