"""Decimation of small couplings, BIC scoring, and support-size selection.

The loop alternates refits and prunes: fit the model, record its total
log-pseudolikelihood and BIC, zero out the globally smallest surviving
couplings, refit the affected rows warm-started, and repeat until nothing is
left.  The record with the minimum BIC names the selected support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Dataset
from .optimize import (
    CouplingEstimate,
    OptimOptions,
    fit_all_rows,
    refit_rows,
)
from .pseudolikelihood import RowMask

__all__ = [
    "DecimationOptions",
    "DecimationRecord",
    "DecimationPath",
    "bic_score",
    "decimate_step",
    "run_decimation",
    "select_best",
]


@dataclass(frozen=True)
class DecimationOptions:
    """Schedule and scoring conventions for the decimation loop.

    ``batch_fraction`` of the remaining active couplings is removed per step,
    never fewer than ``min_batch``; a fraction of 0 decimates one coupling at
    a time.  ``count_curvatures`` includes the per-row curvature parameters in
    the BIC parameter count; ``pl_in_bic`` selects the sample-sum (default) or
    per-sample-mean total PL inside the score.
    """

    batch_fraction: float = 0.10
    min_batch: int = 1
    count_curvatures: bool = True
    pl_in_bic: str = "sum"

    def __post_init__(self) -> None:
        if not 0.0 <= self.batch_fraction < 1.0:
            raise ValueError("batch_fraction must lie in [0, 1)")
        if self.min_batch < 1:
            raise ValueError("min_batch must be >= 1")
        if self.pl_in_bic not in ("sum", "mean"):
            raise ValueError("pl_in_bic must be 'sum' or 'mean'")


@dataclass(frozen=True)
class DecimationRecord:
    """One point on the decimation path.

    ``n_couplings`` counts active couplings; ``k_free`` is the BIC parameter
    count (couplings plus curvatures under the default convention).
    """

    n_couplings: int
    k_free: int
    total_pl: float
    bic: float
    masks: tuple[RowMask, ...]
    estimate: CouplingEstimate
    all_converged: bool


@dataclass(frozen=True)
class DecimationPath:
    """Ordered decimation records plus the index of the BIC minimum."""

    records: tuple[DecimationRecord, ...]
    selected: int

    def __post_init__(self) -> None:
        counts = [r.k_free for r in self.records]
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError("parameter count must strictly decrease along the path")
        if not 0 <= self.selected < len(self.records):
            raise ValueError("selected index out of range")

    @property
    def selected_record(self) -> DecimationRecord:
        return self.records[self.selected]


def select_best(records) -> int:
    """Index of the minimum-BIC record, ties resolved toward fewer parameters."""
    if not records:
        raise ValueError("no records to select from")
    best = 0
    for i, rec in enumerate(records):
        if rec.bic < records[best].bic or (
                rec.bic == records[best].bic and rec.k_free < records[best].k_free):
            best = i
    return best


def bic_score(k_free: int, m_samples: int, total_pl: float) -> float:
    """Bayesian information criterion: k_free * ln(m_samples) - 2 * total_pl."""
    if k_free < 0:
        raise ValueError("k_free must be >= 0")
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    return k_free * math.log(m_samples) - 2.0 * total_pl


def decimate_step(estimate: CouplingEstimate, batch: int) -> tuple[RowMask, ...]:
    """Deactivate the ``batch`` globally smallest-magnitude active couplings.

    Ranking is by |k| ascending across all fitted rows (ties broken by row
    then position, so the result is order-independent).  Curvature parameters
    are never decimated.
    """
    active = estimate.active_matrix()
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("no active couplings left to decimate")
    if not 1 <= batch <= n_active:
        raise ValueError(f"batch must lie in [1, {n_active}], got {batch}")
    flat_idx = np.flatnonzero(active.ravel())
    magnitudes = np.abs(estimate.coupling_matrix().ravel()[flat_idx])
    order = np.argsort(magnitudes, kind="stable")
    drop = flat_idx[order[:batch]]
    new_active = active.copy()
    new_active.ravel()[drop] = False
    return tuple(
        RowMask(site=mk.site, active=new_active[r])
        for r, mk in enumerate(estimate.masks)
    )


def _record(
    estimate: CouplingEstimate, m_samples: int, opts: DecimationOptions
) -> DecimationRecord:
    n_coup = estimate.n_active_couplings
    k_free = n_coup + (len(estimate.rows) if opts.count_curvatures else 0)
    pl = estimate.total_pl
    pl_for_bic = pl / m_samples if opts.pl_in_bic == "mean" else pl
    return DecimationRecord(
        n_couplings=n_coup,
        k_free=k_free,
        total_pl=pl,
        bic=bic_score(k_free, m_samples, pl_for_bic),
        masks=estimate.masks,
        estimate=estimate,
        all_converged=all(estimate.converged),
    )


def run_decimation(
    dataset: Dataset,
    scope: str = "output",
    fit_opts: OptimOptions = OptimOptions(),
    decim_opts: DecimationOptions = DecimationOptions(),
    initial: CouplingEstimate | None = None,
    threads: int = 1,
) -> tuple[DecimationPath, CouplingEstimate]:
    """Full decimation run: fit, prune, refit until no couplings remain.

    Returns the path and the estimate at the BIC-optimal record.  ``initial``
    may supply an existing full-mask fit to avoid repeating it.
    """
    if initial is None:
        estimate = fit_all_rows(dataset, scope=scope, opts=fit_opts, threads=threads)
    else:
        if initial.scope != scope:
            raise ValueError("initial estimate scope differs from requested scope")
        estimate = initial

    m = dataset.m_samples
    records = [_record(estimate, m, decim_opts)]
    while estimate.n_active_couplings > 0:
        remaining = estimate.n_active_couplings
        batch = min(remaining,
                    max(decim_opts.min_batch, int(decim_opts.batch_fraction * remaining)))
        new_masks = decimate_step(estimate, batch)
        changed = [
            r for r in range(len(new_masks))
            if not np.array_equal(new_masks[r].active, estimate.masks[r].active)
        ]
        estimate = refit_rows(estimate, dataset, new_masks, changed,
                              opts=fit_opts, threads=threads)
        records.append(_record(estimate, m, decim_opts))

    path = DecimationPath(records=tuple(records), selected=select_best(records))
    return path, path.selected_record.estimate
