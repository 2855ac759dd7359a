"""Synthetic report generators shared by the tests."""

import numpy as np

from vaxsignal.ingest import Ontology, Report
from vaxsignal.zinb import GroupDesign


def null_reports(seed, n_reports=150, n_vaccines=3, group_sizes=(4, 4)):
    """Reports whose AE sets are drawn independently of their vaccine sets."""
    rng = np.random.default_rng(seed)
    vaccines = [f"V{i + 1}" for i in range(n_vaccines)]
    terms, mapping = [], {}
    for g, size in enumerate(group_sizes):
        for k in range(size):
            term = f"G{g + 1}_ae{k + 1}"
            terms.append(term)
            mapping[term] = f"G{g + 1}"
    popularity = rng.dirichlet(np.full(len(terms), 2.0))
    reports = []
    for n in range(n_reports):
        nv = 1 if rng.random() < 0.8 else 2
        vs = rng.choice(vaccines, size=nv, replace=False)
        na = int(rng.integers(1, 4))
        aes = rng.choice(terms, size=na, replace=False, p=popularity)
        reports.append(Report(f"r{n}", frozenset(vs), frozenset(aes)))
    return reports, Ontology(mapping)


def planted_reports(seed, rr=5.0, base=40, n_vaccines=4, n_groups=4, group_size=5, heavy=6):
    """Single-vaccine, single-AE reports with one elevated vaccine-group pair.

    V1 and the terms of G1 are light (weight 1) while every other vaccine
    and term has weight ``heavy``, so the elevated (V1, G1) block moves the
    margins little and its observed/expected ratio stays well above 3.
    Every cell has a Poisson count with mean at least ``base``.
    """
    rng = np.random.default_rng(seed)
    a = np.array([1.0] + [heavy] * (n_vaccines - 1))
    c = np.array([1.0] * group_size + [heavy] * (group_size * (n_groups - 1)))
    mean = base * np.outer(a, c)
    mean[0, :group_size] *= rr
    counts = rng.poisson(mean)
    vaccines = [f"V{i + 1}" for i in range(n_vaccines)]
    terms, mapping = [], {}
    for g in range(n_groups):
        for k in range(group_size):
            term = f"G{g + 1}_ae{k + 1}"
            terms.append(term)
            mapping[term] = f"G{g + 1}"
    reports = []
    n = 0
    for i, v in enumerate(vaccines):
        for j, t in enumerate(terms):
            for _ in range(counts[i, j]):
                reports.append(Report(f"r{n}", frozenset((v,)), frozenset((t,))))
                n += 1
    return reports, Ontology(mapping)


def random_reports(rng, n_reports=30, n_vaccines=4, n_terms=6):
    vaccines = [f"V{i}" for i in range(n_vaccines)]
    terms = [f"t{k}" for k in range(n_terms)]
    out = []
    for n in range(n_reports):
        vs = rng.choice(vaccines, size=int(rng.integers(1, n_vaccines + 1)), replace=False)
        aes = rng.choice(terms, size=int(rng.integers(1, n_terms + 1)), replace=False)
        out.append(Report(f"r{n}", frozenset(vs), frozenset(aes)))
    return out, vaccines, terms


def central_diff(f, x, h=1e-5):
    out = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def random_instance(rng):
    """Random parameter vector and small group design, with some half-weight counts."""
    I = int(rng.integers(1, 4))
    K = int(rng.integers(3, 10))
    M = np.exp(rng.uniform(np.log(0.5), np.log(50), size=I * K))
    lam = rng.gamma(1.5, 1 / 1.5, size=I * K) * (rng.random(I * K) > 0.3)
    y = rng.poisson(M * lam).astype(float)
    y = np.where(rng.random(I * K) < 0.3, y / 2, y)
    theta = np.r_[rng.normal(0, 1.5, I), rng.normal(0, 1, I), rng.uniform(-1.5, 3)]
    return theta, GroupDesign(y, M, np.repeat(np.arange(I), K), I)
