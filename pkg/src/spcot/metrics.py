"""Dice similarity coefficient and Hausdorff distance on binary masks."""

import math

import numpy as np

from . import _kernels


def _binary(m):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    return m.astype(bool)


def dsc(s, g):
    """2|S & G| / (|S| + |G|); 1.0 when both masks are empty."""
    s, g = _binary(s), _binary(g)
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {g.shape}")
    denom = int(s.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(s, g).sum()) / denom


def hausdorff(s, g, spacing=1.0):
    """Symmetric Hausdorff distance in pixels (times ``spacing``).

    Returns NaN when either mask is empty (undefined).
    """
    s, g = _binary(s), _binary(g)
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {g.shape}")
    a = np.argwhere(s)
    b = np.argwhere(g)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    d2 = max(_kernels.directed_sq_hausdorff(a, b), _kernels.directed_sq_hausdorff(b, a))
    return math.sqrt(d2) * spacing


def mean_metrics(preds, truths):
    """Mean DSC over all pairs, mean HD over pairs where it is defined.

    Returns (mean_dsc, mean_hd, n_undefined_hd).
    """
    dscs, hds = [], []
    for p, t in zip(preds, truths):
        dscs.append(dsc(p, t))
        hds.append(hausdorff(p, t))
    hds = np.array(hds)
    ok = ~np.isnan(hds)
    mean_hd = float(hds[ok].mean()) if ok.any() else math.nan
    return float(np.mean(dscs)), mean_hd, int((~ok).sum())
