"""Group and AE-level signal statistics with permutation p-values.

The null is generated by relinking whole AE sets to reports at random while
each report keeps its vaccine set. Column margins and the total are
unchanged, but a vaccine's row margin depends on the sizes of the AE sets
it receives, so expected counts are recomputed for every permuted table.
Significance uses the maximum statistic over all cells, which controls the
family-wise error.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .contingency import ContingencyTable, ReportMatrix, encode_reports, expected_counts
from .ingest import FilterPolicy, Ontology, Report, apply_filters, restrict_to_ontology
from .shrink import posterior_lambda_mean
from .zinb import FitConfig, GroupDesign, GroupFit, ZinbParams, fit_group

STATISTICS = ("group_maxS", "ae_maxLambda")


class EmptyDataError(ValueError):
    """Nothing left to analyze after filtering."""


@dataclass(frozen=True)
class PermutationPlan:
    n_permutations: int = 1000
    seed: int = 0
    statistic: str = "group_maxS"

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class NullDistribution:
    values: np.ndarray
    observed: float
    statistic: str = "group_maxS"
    n_nonconverged: int = 0

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float))
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class GroupRow:
    vaccine: str
    group: str
    s: float
    p_value: float
    flagged: bool = False


@dataclass(frozen=True)
class AeRow:
    vaccine: str
    ae: str
    group: str
    y: float
    M: float
    lambda_hat: float
    p_value: float
    flagged: bool = False


@dataclass(frozen=True)
class SignalTable:
    group_rows: tuple[GroupRow, ...]
    ae_rows: tuple[AeRow, ...]
    alpha: float = 0.01
    s_min: float = 3.0

    @property
    def flagged_groups(self) -> list[GroupRow]:
        return [row for row in self.group_rows if row.flagged]

    @property
    def flagged_aes(self) -> list[AeRow]:
        return [row for row in self.ae_rows if row.flagged]


# ----------------------------------------------------------------------------
# permutation scheme


def _rng(seed: int, index: int) -> np.random.Generator:
    # one independent stream per permutation index, regardless of execution order
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def reshuffle_ae_sets(reports: Sequence[Report], rng: np.random.Generator) -> list[Report]:
    """Relink AE sets to reports uniformly at random; vaccine sets stay put."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to reshuffle")
    order = rng.permutation(len(reports))
    return [
        Report(rep.report_id, rep.vaccines, reports[k].aes) for rep, k in zip(reports, order)
    ]


# ----------------------------------------------------------------------------
# analysis data


@dataclass(frozen=True)
class PreparedData:
    """Filtered reports encoded against fixed vaccine and AE orderings."""

    reports: tuple[Report, ...]
    ontology: Ontology
    matrix: ReportMatrix
    table: ContingencyTable
    M: np.ndarray
    groups: tuple[str, ...]
    group_columns: tuple[np.ndarray, ...]
    ae_groups: tuple[str, ...]
    unmapped: Counter = field(default_factory=Counter)

    @property
    def vaccines(self) -> tuple[str, ...]:
        return self.matrix.vaccines

    @property
    def aes(self) -> tuple[str, ...]:
        return self.matrix.aes


def prepare(
    reports: Sequence[Report], ontology: Ontology, policy: FilterPolicy = FilterPolicy(0, 0)
) -> PreparedData:
    """Restrict to mapped terms, filter, and build the observed table.

    AE columns are ordered by group and then by term; only terms that occur
    on at least one surviving report get a column.
    """
    reports, unmapped = restrict_to_ontology(reports, ontology)
    reports, ontology = apply_filters(reports, ontology, policy)
    reports, _ = restrict_to_ontology(reports, ontology)
    if not reports:
        raise EmptyDataError("no reports left after filtering")
    present = set().union(*(rep.aes for rep in reports))
    aes: list[str] = []
    groups: list[str] = []
    cols: list[np.ndarray] = []
    ae_groups: list[str] = []
    for group, terms in ontology.groups.items():
        kept = [t for t in terms if t in present]
        if not kept:
            continue
        groups.append(group)
        cols.append(np.arange(len(aes), len(aes) + len(kept)))
        aes.extend(kept)
        ae_groups.extend([group] * len(kept))
    vaccines = sorted(set().union(*(rep.vaccines for rep in reports)))
    matrix = encode_reports(reports, aes, vaccines)
    table = matrix.table()
    M = expected_counts(table).M
    return PreparedData(
        tuple(reports), ontology, matrix, table, M, tuple(groups), tuple(cols), tuple(ae_groups), unmapped
    )


def group_design(counts: np.ndarray, M: np.ndarray, columns: np.ndarray):
    """Stack one group's cells vaccine-major, dropping cells with zero expectation.

    Returns the design (or None when no cell survives), the flat (row, col)
    positions of the kept cells, and the vaccines present in the design.
    """
    sub_y = counts[:, columns]
    sub_M = M[:, columns]
    keep = sub_M > 0
    rows, cc = np.nonzero(keep)
    if rows.size == 0:
        return None, (rows, columns[cc]), np.array([], dtype=int)
    present = np.unique(rows)
    remap = np.full(counts.shape[0], -1)
    remap[present] = np.arange(len(present))
    design = GroupDesign(sub_y[keep], sub_M[keep], remap[rows], len(present))
    return design, (rows, columns[cc]), present


@dataclass
class PanelFit:
    """Fits of every group for one (observed or permuted) table."""

    s: np.ndarray  # I x G, NaN where a vaccine has no cells in the group
    lam: np.ndarray  # I x J, NaN where M == 0
    fits: list[GroupFit | None]
    n_nonconverged: int

    @property
    def max_s(self) -> float:
        return float(np.nanmax(self.s)) if np.isfinite(self.s).any() else -math.inf

    @property
    def max_lambda(self) -> float:
        return float(np.nanmax(self.lam)) if np.isfinite(self.lam).any() else -math.inf


def fit_panel(counts: np.ndarray, data: PreparedData, config: FitConfig, M: np.ndarray | None = None) -> PanelFit:
    """Fit every group of a table; ``M`` defaults to the observed expectations."""
    M = data.M if M is None else M
    I, J = counts.shape
    G = len(data.groups)
    s = np.full((I, G), np.nan)
    lam = np.full((I, J), np.nan)
    fits: list[GroupFit | None] = []
    bad = 0
    for g, columns in enumerate(data.group_columns):
        design, (rows, cols), present = group_design(counts, M, columns)
        if design is None:
            fits.append(None)
            continue
        fit = fit_group(design, config)
        fits.append(fit)
        bad += not fit.converged
        s[present, g] = fit.s
        vi = design.vaccine_index
        p = np.asarray(fit.params.p)[vi]
        mu = np.asarray(fit.params.mu)[vi]
        lam[rows, cols] = posterior_lambda_mean(design.y, ZinbParams(p, mu, fit.params.r), design.M)
    return PanelFit(s, lam, fits, bad)


# ----------------------------------------------------------------------------
# null distributions

_WORKER: dict = {}


def _init_worker(data, config, seed):
    _WORKER.update(data=data, config=config, seed=seed)


def _permutation_stats(data: PreparedData, config: FitConfig, seed: int, index: int):
    order = _rng(seed, index).permutation(data.matrix.n_reports)
    table = data.matrix.table(order)
    # row margins move with AE-set sizes, so expectations are recomputed
    panel = fit_panel(table.counts, data, config, expected_counts(table).M)
    return panel.max_s, panel.max_lambda, panel.n_nonconverged


def _worker_chunk(indices):
    d = _WORKER
    return [_permutation_stats(d["data"], d["config"], d["seed"], k) for k in indices]


def permutation_maxima(
    data: PreparedData, plan: PermutationPlan, config: FitConfig = FitConfig(), n_jobs: int | None = 1
):
    """Max group RR and max AE posterior mean for each permuted dataset.

    Returns ``(max_s, max_lambda, n_nonconverged)`` arrays indexed by
    permutation number.
    """
    if data.matrix.n_reports < 2:
        raise ValueError("need at least two reports to permute")
    N = plan.n_permutations
    n_jobs = (os.cpu_count() or 1) if n_jobs is None else max(1, int(n_jobs))
    if n_jobs == 1 or N < 2:
        results = [_permutation_stats(data, config, plan.seed, k) for k in range(N)]
    else:
        chunks = [list(range(k, N, n_jobs * 4)) for k in range(min(N, n_jobs * 4))]
        results = [None] * N
        with ProcessPoolExecutor(n_jobs, initializer=_init_worker, initargs=(data, config, plan.seed)) as ex:
            for chunk, out in zip(chunks, ex.map(_worker_chunk, chunks)):
                for k, res in zip(chunk, out):
                    results[k] = res
    arr = np.array(results, dtype=float).reshape(N, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2].astype(int)


def null_distribution(
    reports: Sequence[Report],
    ontology: Ontology,
    plan: PermutationPlan,
    fit_config: FitConfig = FitConfig(),
    policy: FilterPolicy = FilterPolicy(0, 0),
    n_jobs: int | None = 1,
) -> NullDistribution:
    data = prepare(reports, ontology, policy)
    observed = fit_panel(data.table.counts, data, fit_config)
    max_s, max_lam, bad = permutation_maxima(data, plan, fit_config, n_jobs)
    if plan.statistic == "group_maxS":
        return NullDistribution(max_s, observed.max_s, plan.statistic, int(bad.sum()))
    return NullDistribution(max_lam, observed.max_lambda, plan.statistic, int(bad.sum()))


def assign_pvalues(observed_stats, null: NullDistribution) -> np.ndarray:
    """``(1 + #{null >= t}) / (N + 1)`` for every observed statistic ``t``.

    Ties count against the observation. NaN statistics give NaN.
    """
    values = null.values
    N = len(values)
    if N == 0:
        raise ValueError("empty null distribution")
    t = np.asarray(observed_stats, dtype=float)
    ge = N - np.searchsorted(values, t, side="left")
    p = (1.0 + ge) / (N + 1.0)
    p = np.where(np.isnan(t), np.nan, p)
    return p[()] if p.ndim == 0 else p


def is_group_signal(s: float, p_value: float, alpha: float = 0.01, s_min: float = 3.0) -> bool:
    return bool(p_value <= alpha and s >= s_min)


def flag_signals(table: SignalTable, alpha: float = 0.01, s_min: float = 3.0) -> SignalTable:
    """Mark group rows with ``p <= alpha`` and ``s >= s_min``, AE rows with ``p <= alpha``."""
    groups = tuple(replace(r, flagged=is_group_signal(r.s, r.p_value, alpha, s_min)) for r in table.group_rows)
    aes = tuple(replace(r, flagged=bool(r.p_value <= alpha)) for r in table.ae_rows)
    return SignalTable(groups, aes, alpha, s_min)


# ----------------------------------------------------------------------------
# full analysis


@dataclass
class MiningResult:
    data: PreparedData
    observed: PanelFit
    null_group: NullDistribution
    null_ae: NullDistribution
    table: SignalTable

    @property
    def heatmap(self) -> np.ndarray:
        """Vaccines x groups matrix of group RRs."""
        return self.observed.s


def mine(
    data: PreparedData,
    plan: PermutationPlan,
    fit_config: FitConfig = FitConfig(),
    alpha: float = 0.01,
    s_min: float = 3.0,
    n_jobs: int | None = 1,
) -> MiningResult:
    """Observed fits, one shared set of permutation fits, p-values and flags."""
    observed = fit_panel(data.table.counts, data, fit_config)
    max_s, max_lam, bad = permutation_maxima(data, plan, fit_config, n_jobs)
    n_bad = int(bad.sum())
    null_group = NullDistribution(max_s, observed.max_s, "group_maxS", n_bad)
    null_ae = NullDistribution(max_lam, observed.max_lambda, "ae_maxLambda", n_bad)

    p_group = assign_pvalues(observed.s, null_group)
    group_rows = []
    for i, v in enumerate(data.vaccines):
        for g, name in enumerate(data.groups):
            if np.isfinite(observed.s[i, g]):
                group_rows.append(GroupRow(v, name, float(observed.s[i, g]), float(p_group[i, g])))

    p_ae = assign_pvalues(observed.lam, null_ae)
    counts = data.table.counts
    ae_rows = []
    for i, v in enumerate(data.vaccines):
        for j, ae in enumerate(data.aes):
            if np.isfinite(observed.lam[i, j]):
                ae_rows.append(
                    AeRow(
                        v, ae, data.ae_groups[j], float(counts[i, j]), float(data.M[i, j]),
                        float(observed.lam[i, j]), float(p_ae[i, j]),
                    )
                )
    table = flag_signals(SignalTable(tuple(group_rows), tuple(ae_rows), alpha, s_min), alpha, s_min)
    return MiningResult(data, observed, null_group, null_ae, table)


# ----------------------------------------------------------------------------
# output files


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _write(text: str, dest):
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)
    return None


def write_group_csv(table: SignalTable, dest=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vaccine", "group", "s", "p_value", "flagged"])
    for r in table.group_rows:
        w.writerow([r.vaccine, r.group, _fmt(r.s), _fmt(r.p_value), str(r.flagged).lower()])
    return _write(buf.getvalue(), dest)


def write_ae_csv(table: SignalTable, dest=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vaccine", "ae", "group", "y", "M", "lambda_hat", "p_value", "flagged"])
    for r in table.ae_rows:
        w.writerow(
            [r.vaccine, r.ae, r.group, _fmt(r.y), _fmt(r.M), _fmt(r.lambda_hat), _fmt(r.p_value),
             str(r.flagged).lower()]
        )
    return _write(buf.getvalue(), dest)


def write_heatmap_csv(result: MiningResult, dest=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vaccine", *result.data.groups])
    for i, v in enumerate(result.data.vaccines):
        w.writerow([v] + ["" if not np.isfinite(x) else _fmt(x) for x in result.heatmap[i]])
    return _write(buf.getvalue(), dest)


def write_null(null: NullDistribution, dest=None):
    """One value per line in permutation-sorted order, full precision."""
    return _write("".join(f"{x!r}\n" for x in null.values.tolist()), dest)
