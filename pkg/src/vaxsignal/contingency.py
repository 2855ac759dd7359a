"""Weighted vaccine-by-AE contingency tables.

Cell counts are sums of per-report weights ``1/|vaccines|``. They are kept
exactly as integer numerators over one common denominator (the lcm of the
vaccine-set sizes that occur), so margin identities hold exactly and
permuted tables can be compared bit for bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import Report


@dataclass(frozen=True)
class ReportMatrix:
    """Sparse incidence encoding of a report list.

    ``vaccine_weights`` is R x I with entry ``denominator / |vaccines_r|`` for
    each vaccine on report r; ``ae_incidence`` is R x J with 0/1 entries.
    The table numerators are ``vaccine_weights.T @ ae_incidence``.
    """

    vaccines: tuple[str, ...]
    aes: tuple[str, ...]
    vaccine_weights: sp.csr_matrix
    ae_incidence: sp.csr_matrix
    denominator: int

    @property
    def n_reports(self) -> int:
        return self.vaccine_weights.shape[0]

    def table(self, order: np.ndarray | None = None) -> "ContingencyTable":
        """Tabulate, optionally relinking report r to the AE set of report ``order[r]``."""
        A = self.ae_incidence if order is None else self.ae_incidence[order]
        num = (self.vaccine_weights.T @ A).toarray().astype(np.int64)
        return ContingencyTable(self.vaccines, self.aes, num, self.denominator)


def encode_reports(
    reports: Sequence[Report], ae_universe: Sequence[str], vaccine_universe: Sequence[str]
) -> ReportMatrix:
    if not reports:
        raise ValueError("cannot build a table from an empty report list")
    if not ae_universe or not vaccine_universe:
        raise ValueError("AE and vaccine universes must be nonempty")
    vaccines = tuple(vaccine_universe)
    aes = tuple(ae_universe)
    v_index = {v: i for i, v in enumerate(vaccines)}
    a_index = {a: j for j, a in enumerate(aes)}
    if len(v_index) != len(vaccines) or len(a_index) != len(aes):
        raise ValueError("universes contain duplicates")

    denom = math.lcm(*{len(r.vaccines) for r in reports})
    v_rows, v_cols, v_vals = [], [], []
    a_rows, a_cols = [], []
    for n, rep in enumerate(reports):
        w = denom // len(rep.vaccines)
        for v in rep.vaccines:
            try:
                v_cols.append(v_index[v])
            except KeyError:
                raise ValueError(f"report {rep.report_id!r}: vaccine {v!r} not in universe") from None
            v_rows.append(n)
            v_vals.append(w)
        for a in rep.aes:
            try:
                a_cols.append(a_index[a])
            except KeyError:
                raise ValueError(f"report {rep.report_id!r}: AE {a!r} not in universe") from None
            a_rows.append(n)
    R = len(reports)
    V = sp.csr_matrix(
        (np.asarray(v_vals, dtype=np.int64), (v_rows, v_cols)), shape=(R, len(vaccines))
    )
    A = sp.csr_matrix(
        (np.ones(len(a_rows), dtype=np.int64), (a_rows, a_cols)), shape=(R, len(aes))
    )
    return ReportMatrix(vaccines, aes, V, A, denom)


@dataclass(frozen=True)
class ContingencyTable:
    vaccines: tuple[str, ...]
    aes: tuple[str, ...]
    numerators: np.ndarray
    denominator: int = 1

    def __post_init__(self):
        num = np.asarray(self.numerators)
        if num.shape != (len(self.vaccines), len(self.aes)):
            raise ValueError("numerator shape does not match labels")
        if (num < 0).any():
            raise ValueError("negative cell count")
        num = num.astype(np.int64)
        num.setflags(write=False)
        object.__setattr__(self, "numerators", num)

    @property
    def counts(self) -> np.ndarray:
        return self.numerators / self.denominator

    @property
    def row_margins(self) -> np.ndarray:
        return self.numerators.sum(axis=1) / self.denominator

    @property
    def col_margins(self) -> np.ndarray:
        return self.numerators.sum(axis=0) / self.denominator

    @property
    def total(self) -> float:
        return int(self.numerators.sum()) / self.denominator

    def same_margins(self, other: "ContingencyTable") -> bool:
        """Exact comparison of row margins, column margins and total."""
        a, b = self.numerators, other.numerators
        return (
            self.denominator == other.denominator
            and np.array_equal(a.sum(axis=1), b.sum(axis=1))
            and np.array_equal(a.sum(axis=0), b.sum(axis=0))
            and int(a.sum()) == int(b.sum())
        )


@dataclass(frozen=True)
class ExpectedCounts:
    M: np.ndarray


def build_table(
    reports: Sequence[Report], ae_universe: Sequence[str], vaccine_universe: Sequence[str]
) -> ContingencyTable:
    return encode_reports(reports, ae_universe, vaccine_universe).table()


def expected_counts(table: ContingencyTable) -> ExpectedCounts:
    """Counts expected under vaccine/AE independence, ``y_i. * y_.j / y_..``."""
    num = table.numerators
    total = int(num.sum())
    if total <= 0:
        raise ValueError("table total is zero; expected counts undefined")
    rows = num.sum(axis=1).astype(float)
    cols = num.sum(axis=0).astype(float)
    M = np.outer(rows, cols) / (float(total) * table.denominator)
    M.setflags(write=False)
    return ExpectedCounts(M)


def naive_rr(table: ContingencyTable, expected: ExpectedCounts) -> np.ndarray:
    """Observed over expected; cells with zero expectation are NaN."""
    M = expected.M
    y = table.counts
    out = np.full(M.shape, np.nan)
    ok = M > 0
    out[ok] = y[ok] / M[ok]
    return out


def dump_table_csv(table: ContingencyTable, dest) -> None:
    """Wide CSV: vaccine id, then one column per AE, six fractional digits."""
    lines = [",".join(("vaccine",) + table.aes)]
    counts = table.counts
    for i, v in enumerate(table.vaccines):
        lines.append(",".join([v] + [f"{x:.6f}" for x in counts[i]]))
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)
