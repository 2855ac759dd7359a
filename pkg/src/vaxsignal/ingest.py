"""Report and ontology parsing, term filtering.

Reports are read from a flat delimited file with header ``report_id,vaccines,aes``
where the two list fields are pipe-separated. The ontology file has header
``term,group`` and maps each AE term to exactly one group.
"""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence, TextIO

REPORT_FIELDS = ("report_id", "vaccines", "aes")
ONTOLOGY_FIELDS = ("term", "group")


class IngestError(ValueError):
    """Malformed input data. ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Report:
    report_id: str
    vaccines: frozenset[str]
    aes: frozenset[str]

    def __post_init__(self):
        if not self.vaccines:
            raise ValueError(f"report {self.report_id!r} has no vaccines")
        if not self.aes:
            raise ValueError(f"report {self.report_id!r} has no AEs")

    @property
    def weight(self) -> Fraction:
        """Per vaccine-AE pair weight: the inverse of the number of vaccines."""
        return Fraction(1, len(self.vaccines))


@dataclass(frozen=True)
class Ontology:
    term_to_group: dict[str, str]
    groups: dict[str, tuple[str, ...]] = field(default=None)

    def __post_init__(self):
        groups: dict[str, list[str]] = {}
        for term, group in self.term_to_group.items():
            groups.setdefault(group, []).append(term)
        built = {g: tuple(sorted(set(ts))) for g, ts in sorted(groups.items())}
        if self.groups is not None:
            given = {g: tuple(ts) for g, ts in self.groups.items()}
            if given != built:
                raise ValueError("groups do not match term_to_group")
        object.__setattr__(self, "groups", built)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "Ontology":
        mapping: dict[str, str] = {}
        for term, group in pairs:
            if term in mapping:
                raise ValueError(f"term {term!r} mapped more than once")
            mapping[term] = group
        return cls(mapping)

    def __len__(self):
        return len(self.term_to_group)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, term: str) -> str:
        return self.term_to_group[term]


@dataclass(frozen=True)
class FilterPolicy:
    min_ae_frequency: int = 20
    min_group_size: int = 15
    vaccine_whitelist: frozenset[str] | None = None

    def __post_init__(self):
        if self.min_ae_frequency < 0 or self.min_group_size < 0:
            raise ValueError("filter thresholds must be nonnegative")
        if self.vaccine_whitelist is not None:
            object.__setattr__(self, "vaccine_whitelist", frozenset(self.vaccine_whitelist))


@dataclass(frozen=True)
class ColumnFilter:
    """Inclusive range filter on an extra column of the reports file.

    Values are compared numerically when both sides parse as numbers and as
    strings otherwise, so ISO dates work as bounds.
    """

    column: str
    low: str | None = None
    high: str | None = None

    @classmethod
    def parse(cls, text: str) -> "ColumnFilter":
        parts = text.split(":")
        if len(parts) != 3 or not parts[0]:
            raise ValueError(f"column filter must be COLUMN:LOW:HIGH, got {text!r}")
        column, low, high = parts
        return cls(column, low or None, high or None)

    def accepts(self, value: str) -> bool:
        return (self.low is None or _compare(value, self.low) >= 0) and (
            self.high is None or _compare(value, self.high) <= 0
        )


def _compare(a: str, b: str) -> int:
    try:
        x, y = float(a), float(b)
    except ValueError:
        x, y = a, b
    return (x > y) - (x < y)


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def _split_list(text: str, sep: str) -> list[str]:
    return [item.strip() for item in text.split(sep) if item.strip()]


def parse_reports(
    source,
    delimiter: str = ",",
    list_delimiter: str = "|",
    column_filters: Sequence[ColumnFilter] = (),
) -> list[Report]:
    """Read reports from a path or text stream.

    Extra columns are allowed and only consulted by ``column_filters``;
    rows rejected by a filter are skipped before any validation of their
    list fields.
    """
    stream, owned = _open_text(source)
    try:
        reader = csv.reader(stream, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError("empty reports file", line=1) from None
        missing = [f for f in REPORT_FIELDS if f not in header]
        if missing:
            raise IngestError(f"missing columns {missing}", line=1)
        col = {name: header.index(name) for name in header}
        for flt in column_filters:
            if flt.column not in col:
                raise IngestError(f"filter column {flt.column!r} not in header", line=1)

        reports: list[Report] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            if not all(flt.accepts(row[col[flt.column]].strip()) for flt in column_filters):
                continue
            report_id = row[col["report_id"]].strip()
            if not report_id:
                raise IngestError("empty report_id", line=lineno)
            if report_id in seen:
                raise IngestError(f"duplicate report_id {report_id!r}", line=lineno)
            vaccines = _split_list(row[col["vaccines"]], list_delimiter)
            aes = _split_list(row[col["aes"]], list_delimiter)
            if not vaccines:
                raise IngestError(f"report {report_id!r}: empty vaccine list", line=lineno)
            if not aes:
                raise IngestError(f"report {report_id!r}: empty AE list", line=lineno)
            seen.add(report_id)
            reports.append(Report(report_id, frozenset(vaccines), frozenset(aes)))
        return reports
    finally:
        if owned:
            stream.close()


def serialize_reports(reports: Iterable[Report], dest=None, delimiter=",", list_delimiter="|"):
    """Write reports in the format read by :func:`parse_reports`.

    Returns the text when ``dest`` is None.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for rep in reports:
        writer.writerow(
            [rep.report_id, list_delimiter.join(sorted(rep.vaccines)), list_delimiter.join(sorted(rep.aes))]
        )
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)
    return None


def parse_ontology(source, delimiter: str = ",") -> Ontology:
    stream, owned = _open_text(source)
    try:
        reader = csv.reader(stream, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError("empty ontology file", line=1) from None
        missing = [f for f in ONTOLOGY_FIELDS if f not in header]
        if missing:
            raise IngestError(f"missing columns {missing}", line=1)
        ti, gi = header.index("term"), header.index("group")
        mapping: dict[str, str] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            term, group = row[ti].strip(), row[gi].strip()
            if not term or not group:
                raise IngestError("empty term or group", line=lineno)
            if term in mapping:
                raise IngestError(
                    f"term {term!r} already mapped to {mapping[term]!r}", line=lineno
                )
            mapping[term] = group
        if not mapping:
            raise IngestError("ontology has no terms", line=1)
        return Ontology(mapping)
    finally:
        if owned:
            stream.close()


def serialize_ontology(ontology: Ontology, dest=None, delimiter=","):
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(ONTOLOGY_FIELDS)
    for group, terms in ontology.groups.items():
        for term in terms:
            writer.writerow([term, group])
    text = buf.getvalue()
    if dest is None:
        return text
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


def _map_reports(reports, keep_vaccine: Callable[[str], bool], keep_ae: Callable[[str], bool]):
    out = []
    for rep in reports:
        vaccines = frozenset(v for v in rep.vaccines if keep_vaccine(v))
        aes = frozenset(a for a in rep.aes if keep_ae(a))
        if vaccines and aes:
            if vaccines == rep.vaccines and aes == rep.aes:
                out.append(rep)
            else:
                out.append(Report(rep.report_id, vaccines, aes))
    return out


def restrict_to_ontology(reports: Sequence[Report], ontology: Ontology):
    """Drop AE terms that the ontology does not map.

    Returns the cleaned reports and a Counter of unmapped term mentions.
    """
    unmapped: Counter[str] = Counter()
    for rep in reports:
        for ae in rep.aes:
            if ae not in ontology.term_to_group:
                unmapped[ae] += 1
    if not unmapped:
        return list(reports), unmapped
    mapped = ontology.term_to_group
    return _map_reports(reports, lambda v: True, lambda a: a in mapped), unmapped


def ae_frequencies(reports: Iterable[Report]) -> Counter[str]:
    """Unweighted count of reports mentioning each term."""
    freq: Counter[str] = Counter()
    for rep in reports:
        freq.update(rep.aes)
    return freq


def apply_filters(reports: Sequence[Report], ontology: Ontology, policy: FilterPolicy):
    """Single-pass cleanup: vaccine whitelist, rare terms, then small groups.

    Dropping vaccines outside the whitelist recomputes the report weight from
    the remaining vaccines. Reports left without vaccines or AEs are dropped.
    """
    if policy.vaccine_whitelist is not None:
        allowed = policy.vaccine_whitelist
        reports = _map_reports(reports, lambda v: v in allowed, lambda a: True)

    freq = ae_frequencies(reports)
    kept_terms = {
        t: g for t, g in ontology.term_to_group.items() if freq.get(t, 0) >= policy.min_ae_frequency
    }
    sizes = Counter(kept_terms.values())
    kept_terms = {t: g for t, g in kept_terms.items() if sizes[g] >= policy.min_group_size}

    in_ontology = ontology.term_to_group
    # Terms the ontology never knew about are left for restrict_to_ontology to handle.
    def keep_ae(a):
        return a in kept_terms or a not in in_ontology

    new_reports = _map_reports(reports, lambda v: True, keep_ae)
    if len(new_reports) == len(reports) and all(a is b for a, b in zip(new_reports, reports)):
        new_reports = list(reports)
    return new_reports, Ontology(kept_terms)
