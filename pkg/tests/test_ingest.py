import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaxsignal.ingest import (
    ColumnFilter,
    FilterPolicy,
    IngestError,
    Ontology,
    Report,
    apply_filters,
    parse_ontology,
    parse_reports,
    restrict_to_ontology,
    serialize_ontology,
    serialize_reports,
)


def reports_text(*rows, header="report_id,vaccines,aes"):
    return io.StringIO("\n".join((header,) + rows) + "\n")


def test_single_vaccine_weight_one():
    (rep,) = parse_reports(io.StringIO("report_id;vaccines;aes\nr1; FLU; Fever\n"), delimiter=";")
    assert rep.vaccines == {"FLU"}
    assert rep.aes == {"Fever"}
    assert rep.weight == 1


def test_two_vaccines_weight_half():
    (rep,) = parse_reports(io.StringIO("report_id;vaccines;aes\nr2; FLU|MMR; Fever|Rash\n"), delimiter=";")
    assert rep.weight == Fraction(1, 2)
    assert rep.aes == {"Fever", "Rash"}


def test_empty_vaccine_list_rejected_with_line():
    with pytest.raises(IngestError) as err:
        parse_reports(io.StringIO("report_id;vaccines;aes\nr1;FLU;Fever\nr3; ; Fever\n"), delimiter=";")
    assert err.value.line == 3


def test_empty_ae_list_rejected():
    with pytest.raises(IngestError):
        parse_reports(reports_text("r1,FLU,"))


def test_duplicate_report_id_rejected():
    with pytest.raises(IngestError, match="duplicate"):
        parse_reports(reports_text("r1,FLU,Fever", "r1,MMR,Rash"))


def test_malformed_record_reports_line():
    with pytest.raises(IngestError) as err:
        parse_reports(reports_text("r1,FLU,Fever", "r2,FLU"))
    assert err.value.line == 3


def test_missing_header_column():
    with pytest.raises(IngestError):
        parse_reports(io.StringIO("id,vaccines,aes\nr1,FLU,Fever\n"))


def test_duplicate_vaccines_collapse():
    (rep,) = parse_reports(reports_text("r1,FLU|FLU|MMR,Fever|Fever"))
    assert rep.vaccines == {"FLU", "MMR"}
    assert rep.weight == Fraction(1, 2)
    assert len(rep.aes) == 1


def test_column_filter_skips_rows():
    text = reports_text("r1,FLU,Fever,1", "r2,FLU,Rash,60", "r3,MMR,Rash,30",
                        header="report_id,vaccines,aes,age")
    reps = parse_reports(text, column_filters=[ColumnFilter.parse("age:2:49")])
    assert [r.report_id for r in reps] == ["r3"]


def test_column_filter_string_bounds():
    f = ColumnFilter("date", "2005-01-01", "2018-12-31")
    assert f.accepts("2010-06-30")
    assert not f.accepts("2019-01-01")


def test_ontology_two_groups():
    ont = parse_ontology(io.StringIO("term,group\nFever,General\nRash,Skin\n"))
    assert ont.n_groups == 2
    assert ont.groups == {"General": ("Fever",), "Skin": ("Rash",)}


def test_ontology_partition_violation():
    with pytest.raises(IngestError):
        parse_ontology(io.StringIO("term,group\nFever,General\nFever,Skin\n"))


def test_ontology_empty_file():
    with pytest.raises(IngestError):
        parse_ontology(io.StringIO(""))
    with pytest.raises(IngestError):
        parse_ontology(io.StringIO("term,group\n"))


def test_ontology_large_round_trip():
    rng = np.random.default_rng(7)
    groups = rng.integers(0, 42, size=1477)
    groups[:42] = np.arange(42)
    ont = Ontology({f"PT{k:04d}": f"HLGT{g:02d}" for k, g in enumerate(groups)})
    back = parse_ontology(io.StringIO(serialize_ontology(ont)))
    assert len(back) == 1477
    assert back.n_groups == 42
    assert back.term_to_group == ont.term_to_group
    assert back.groups == ont.groups


def test_ontology_groups_sorted_unique():
    ont = Ontology({"b": "G", "a": "G", "c": "H"})
    assert ont.groups["G"] == ("a", "b")


def _reports_with_counts(counts: dict[str, int]):
    reps, n = [], 0
    for term, k in counts.items():
        for _ in range(k):
            reps.append(Report(f"r{n}", frozenset({"V"}), frozenset({term})))
            n += 1
    return reps


def test_filters_zero_thresholds_identity():
    reps = _reports_with_counts({"a": 3, "b": 1})
    ont = Ontology({"a": "G", "b": "H"})
    out, ont2 = apply_filters(reps, ont, FilterPolicy(0, 0))
    assert out == reps
    assert ont2.term_to_group == ont.term_to_group


def test_filter_rare_term_removed():
    reps = _reports_with_counts({"rare": 19, "common": 20})
    ont = Ontology({"rare": "G", "common": "G"})
    out, ont2 = apply_filters(reps, ont, FilterPolicy(min_ae_frequency=20, min_group_size=0))
    assert "rare" not in ont2.term_to_group
    assert all("rare" not in r.aes for r in out)
    assert len(out) == 20


def test_filter_small_group_removed():
    terms = {f"s{k}": 1 for k in range(14)} | {f"b{k}": 1 for k in range(15)}
    reps = _reports_with_counts(terms)
    ont = Ontology({t: ("Small" if t.startswith("s") else "Big") for t in terms})
    out, ont2 = apply_filters(reps, ont, FilterPolicy(min_ae_frequency=0, min_group_size=15))
    assert set(ont2.groups) == {"Big"}
    assert len(out) == 15


def test_filter_defaults():
    p = FilterPolicy()
    assert (p.min_ae_frequency, p.min_group_size) == (20, 15)


def test_whitelist_recomputes_weight():
    reps = [Report("r1", frozenset({"A", "B"}), frozenset({"x"})), Report("r2", frozenset({"B"}), frozenset({"x"}))]
    out, _ = apply_filters(reps, Ontology({"x": "G"}), FilterPolicy(0, 0, frozenset({"A"})))
    assert len(out) == 1
    assert out[0].vaccines == {"A"} and out[0].weight == 1


def test_restrict_to_ontology_counts_unmapped():
    reps = [Report("r1", frozenset({"A"}), frozenset({"x", "y"})), Report("r2", frozenset({"A"}), frozenset({"y"}))]
    out, unmapped = restrict_to_ontology(reps, Ontology({"x": "G"}))
    assert unmapped == {"y": 2}
    assert len(out) == 1 and out[0].aes == {"x"}


names = st.text(alphabet="abcdefgh", min_size=1, max_size=3)


@st.composite
def report_lists(draw):
    n = draw(st.integers(1, 25))
    reps = []
    for k in range(n):
        vs = draw(st.frozensets(st.sampled_from(["V1", "V2", "V3", "V4"]), min_size=1))
        aes = draw(st.frozensets(names, min_size=1, max_size=5))
        reps.append(Report(f"r{k}", vs, aes))
    return reps


@given(report_lists())
def test_pair_weights_sum_to_number_of_aes(reps):
    for rep in reps:
        assert sum(rep.weight for _ in rep.vaccines) * len(rep.aes) == len(rep.aes)
        assert rep.weight * len(rep.vaccines) == 1


@given(report_lists())
def test_serialize_round_trip(reps):
    assert parse_reports(io.StringIO(serialize_reports(reps))) == reps


@settings(max_examples=60)
@given(report_lists(), st.integers(0, 5), st.integers(0, 4))
def test_filters_idempotent(reps, min_freq, min_size):
    terms = sorted(set().union(*(r.aes for r in reps)))
    ont = Ontology({t: f"G{len(t)}" for t in terms})
    policy = FilterPolicy(min_freq, min_size)
    once = apply_filters(reps, ont, policy)
    twice = apply_filters(once[0], once[1], policy)
    assert twice[0] == once[0]
    assert twice[1].term_to_group == once[1].term_to_group
