"""Monte Carlo study of group-RR and AE-RR estimation accuracy.

Each replication draws per-AE rate multipliers from the zero/gamma mixture
prior, Poisson counts given those rates, refits the group and records
estimate minus truth for the group RR and for every AE's posterior mean.
"""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .shrink import posterior_lambda_mean
from .zinb import FitConfig, GroupDesign, ZinbParams, fit_group

ZIP_R = 1e8


@dataclass(frozen=True)
class SimScenario:
    name: str = "base"
    group_sizes: tuple[int, ...] = (20, 50, 100, 200)
    n_vaccines: int = 3
    n_replications: int = 1000
    offset_multiplier: float = 1.0
    zip_mode: bool = False
    p: tuple[float, ...] = (0.2, 0.4, 0.6)
    mu: tuple[float, ...] = (0.8, 1.5, 3.0)
    r: float = 1.2
    # optional (low, high) ranges; when set, the parameters are drawn once per scenario
    p_range: tuple[float, float] | None = None
    mu_range: tuple[float, float] | None = None
    r_range: tuple[float, float] | None = None
    offset_range: tuple[float, float] = (1.0, 100.0)
    seed: int = 0
    fit_config: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(k) for k in self.group_sizes))
        if not self.group_sizes or min(self.group_sizes) < 1:
            raise ValueError("group sizes must be positive")
        if self.n_vaccines < 1:
            raise ValueError("need at least one vaccine")
        if self.n_replications < 1:
            raise ValueError("need at least one replication")
        if self.offset_multiplier <= 0:
            raise ValueError("offset multiplier must be positive")
        lo, hi = self.offset_range
        if not 0 < lo <= hi:
            raise ValueError("offset range must satisfy 0 < low <= high")
        if self.p_range is None and len(self.p) != self.n_vaccines:
            raise ValueError("need one p per vaccine")
        if self.mu_range is None and len(self.mu) != self.n_vaccines:
            raise ValueError("need one mu per vaccine")

    def true_params(self) -> ZinbParams:
        """Generating parameters; ``r`` is replaced by a huge value in ZIP mode."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0,)))
        I = self.n_vaccines
        p = rng.uniform(*self.p_range, size=I) if self.p_range else np.asarray(self.p, dtype=float)
        mu = rng.uniform(*self.mu_range, size=I) if self.mu_range else np.asarray(self.mu, dtype=float)
        r = float(rng.uniform(*self.r_range)) if self.r_range else float(self.r)
        return ZinbParams(p, mu, ZIP_R if self.zip_mode else r)

    def offsets(self, group_size: int) -> np.ndarray:
        """Expected counts for one group size, log-uniform on ``offset_range``.

        The draw depends only on the seed and the group size, so scenarios
        that differ only in the multiplier share the same base offsets.
        """
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1, group_size)))
        lo, hi = np.log(self.offset_range)
        return np.exp(rng.uniform(lo, hi, size=(self.n_vaccines, group_size))) * self.offset_multiplier


def simulate_group(scenario: SimScenario, group_size: int, replication_index: int):
    """One synthetic AE group: true rates ``lam``, counts ``y`` and offsets ``M`` (all I x K)."""
    params = scenario.true_params()
    M = scenario.offsets(group_size)
    rng = np.random.default_rng(
        np.random.SeedSequence(scenario.seed, spawn_key=(2, group_size, replication_index))
    )
    I, K = M.shape
    p = np.asarray(params.p)[:, None]
    mu = np.asarray(params.mu)[:, None]
    r = params.r
    structural = rng.random((I, K)) < p
    lam = np.where(structural, 0.0, rng.gamma(r, mu / r, size=(I, K)))
    y = rng.poisson(M * lam).astype(float)
    y[lam == 0] = 0.0
    return lam, y, M


@dataclass
class SimReport:
    scenario: SimScenario
    # group size -> (n_replications, I)
    s_bias: dict[int, np.ndarray]
    # group size -> (n_replications, I, K)
    lambda_bias: dict[int, np.ndarray]
    n_nonconverged: dict[int, int]

    def mse_s(self, group_size: int) -> np.ndarray:
        """Per-vaccine mean squared error of the group RR."""
        return np.mean(self.s_bias[group_size] ** 2, axis=0)

    def mse_lambda(self, group_size: int) -> np.ndarray:
        """Per-vaccine mean squared error of the AE posterior means."""
        b = self.lambda_bias[group_size]
        return np.mean(b**2, axis=(0, 2))

    def mean_bias_s(self, group_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-vaccine mean bias and its Monte Carlo standard error."""
        b = self.s_bias[group_size]
        return b.mean(axis=0), b.std(axis=0, ddof=1) / np.sqrt(b.shape[0])


def run_replication(scenario: SimScenario, group_size: int, replication_index: int):
    lam, y, M = simulate_group(scenario, group_size, replication_index)
    I, K = y.shape
    design = GroupDesign(y.ravel(), M.ravel(), np.repeat(np.arange(I), K), I)
    fit = fit_group(design, scenario.fit_config)
    truth = scenario.true_params()
    s_true = (1.0 - np.asarray(truth.p)) * np.asarray(truth.mu)
    vi = design.vaccine_index
    post = ZinbParams(np.asarray(fit.params.p)[vi], np.asarray(fit.params.mu)[vi], fit.params.r)
    lam_hat = posterior_lambda_mean(design.y, post, design.M).reshape(I, K)
    return fit.s - s_true, lam_hat - lam, fit.converged


def run_study(scenario: SimScenario) -> SimReport:
    s_bias, lam_bias, bad = {}, {}, {}
    for K in scenario.group_sizes:
        n = scenario.n_replications
        sb = np.empty((n, scenario.n_vaccines))
        lb = np.empty((n, scenario.n_vaccines, K))
        nb = 0
        for rep in range(n):
            sb[rep], lb[rep], ok = run_replication(scenario, K, rep)
            nb += not ok
        s_bias[K], lam_bias[K], bad[K] = sb, lb, nb
    return SimReport(scenario, s_bias, lam_bias, bad)


# ----------------------------------------------------------------------------
# long-format output

SIM_COLUMNS = ("scenario", "vaccine", "group_size", "metric", "value")


def _rows_group(report: SimReport):
    name = report.scenario.name
    for K, b in report.s_bias.items():
        for rep in range(b.shape[0]):
            for i in range(b.shape[1]):
                yield (name, i + 1, K, "bias_s", repr(float(b[rep, i])))
        for i, v in enumerate(report.mse_s(K)):
            yield (name, i + 1, K, "mse_s", repr(float(v)))


def _rows_ae(report: SimReport):
    name = report.scenario.name
    for K, b in report.lambda_bias.items():
        n, I, _ = b.shape
        for rep in range(n):
            for i in range(I):
                for val in b[rep, i]:
                    yield (name, i + 1, K, "bias_lambda", repr(float(val)))
        for i, v in enumerate(report.mse_lambda(K)):
            yield (name, i + 1, K, "mse_lambda", repr(float(v)))


def _write_rows(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_COLUMNS)
        w.writerows(rows)


def emit_sim_plots(report: SimReport | None, out_dir, prefix: str = "") -> tuple[Path, Path]:
    """Write group-level and AE-level long-format CSVs for box plots.

    ``None`` writes header-only files. Values are written at full precision.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g_path = out / f"{prefix}sim_group.csv"
    a_path = out / f"{prefix}sim_ae.csv"
    _write_rows(g_path, [] if report is None else _rows_group(report))
    _write_rows(a_path, [] if report is None else _rows_ae(report))
    return g_path, a_path


def read_sim_csv(path) -> dict[tuple[str, int, int, str], list[float]]:
    """Parse an emitted file into ``(scenario, vaccine, group_size, metric) -> values``."""
    out: dict[tuple[str, int, int, str], list[float]] = defaultdict(list)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["scenario"], int(row["vaccine"]), int(row["group_size"]), row["metric"])
            out[key].append(float(row["value"]))
    return dict(out)
