"""Vaccine adverse-event signal mining.

AE-group relative reporting rates come from zero-inflated negative-binomial
fits with expected-count offsets; individual AE rates are empirical-Bayes
posterior means under the fitted group prior; significance comes from a
max-statistic permutation test that reshuffles whole AE sets across reports.
"""

__version__ = "0.1.0"

from .contingency import ContingencyTable, ExpectedCounts, build_table, expected_counts, naive_rr
from .estimators import SignalMiner, ZinbGroupRegressor
from .ingest import FilterPolicy, Ontology, Report, apply_filters, parse_ontology, parse_reports
from .shrink import (
    group_rr,
    posterior_lambda_mean,
    posterior_lambda_quadrature_oracle,
    posterior_weights,
    posterior_zero_weight,
)
from .signal import (
    NullDistribution,
    PermutationPlan,
    SignalTable,
    assign_pvalues,
    flag_signals,
    mine,
    null_distribution,
    prepare,
    reshuffle_ae_sets,
)
from .sim import SimReport, SimScenario, emit_sim_plots, run_study, simulate_group
from .zinb import FitConfig, GroupDesign, GroupFit, ZinbParams, fit_group, zinb_log_pmf

__all__ = [
    "ContingencyTable", "ExpectedCounts", "build_table", "expected_counts", "naive_rr",
    "SignalMiner", "ZinbGroupRegressor",
    "FilterPolicy", "Ontology", "Report", "apply_filters", "parse_ontology", "parse_reports",
    "group_rr", "posterior_lambda_mean", "posterior_lambda_quadrature_oracle",
    "posterior_weights", "posterior_zero_weight",
    "NullDistribution", "PermutationPlan", "SignalTable", "assign_pvalues", "flag_signals",
    "mine", "null_distribution", "prepare", "reshuffle_ae_sets",
    "SimReport", "SimScenario", "emit_sim_plots", "run_study", "simulate_group",
    "FitConfig", "GroupDesign", "GroupFit", "ZinbParams", "fit_group", "zinb_log_pmf",
]
