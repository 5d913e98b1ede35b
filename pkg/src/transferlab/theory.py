"""Gaussian binary model with weakly correlated features.

Labels y are uniform on {-1, +1}; x_1 equals +y with probability p and -y
otherwise; x_2..x_{d+1} are i.i.d. N(eta*y, 1). The three linear classifiers
ignore x_1 and weight the weak features uniformly (``unif``), ascending
(``A``) or descending (``B``). The perturbation flips the mean of the first
k = d/2 weak features to -eta*y.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

SCHEMES = ("unif", "A", "B")


@dataclass(frozen=True)
class TheoryParams:
    d: int = 1000
    eta: float = 0.11
    p: float = 0.5

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be an even integer >= 2")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.d // 2


@dataclass(frozen=True)
class LinearClassifier:
    scheme: str
    weights: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        # sign(0) -> +1
        return np.where(X @ self.weights >= 0, 1, -1)


def _scheme(scheme: str) -> str:
    key = {"unif": "unif", "avg": "unif", "uniform": "unif", "a": "A", "b": "B"}.get(scheme.lower())
    if key is None:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    return key


def build_classifier(scheme: str, d: int) -> LinearClassifier:
    scheme = _scheme(scheme)
    if d < 2:
        raise ValueError("d must be >= 2")
    w = np.zeros(d + 1)
    ranks = np.arange(1, d + 1, dtype=np.float64)
    if scheme == "unif":
        w[1:] = 1.0 / d
    elif scheme == "A":
        w[1:] = 2.0 / (d * (d + 1)) * ranks
    else:
        w[1:] = 2.0 / (d * (d + 1)) * ranks[::-1]
    return LinearClassifier(scheme, w)


CHUNK = 10_000


def _chunks(params: TheoryParams, n: int, seed: int, perturbed: bool):
    rng = np.random.default_rng(seed)
    for start in range(0, n, CHUNK):
        m = min(CHUNK, n - start)
        y = rng.choice(np.array([-1, 1]), size=m)
        agree = rng.random(m) < params.p
        X = np.empty((m, params.d + 1))
        X[:, 0] = np.where(agree, y, -y)
        X[:, 1:] = rng.standard_normal((m, params.d)) + params.eta * y[:, None]
        if perturbed:
            X[:, 1 : params.k + 1] -= 2.0 * params.eta * y[:, None]
        yield X, y


def sample(params: TheoryParams, n: int, seed: int, perturbed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw n labelled points. The perturbed draw reuses the clean draw of the
    same seed and shifts the first k weak features by -2*eta*y."""
    if n < 1:
        raise ValueError("n must be >= 1")
    parts = list(_chunks(params, n, seed, perturbed))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _sums(d):
    s1 = d * (d + 1) / 2
    s2 = d * (d + 1) * (2 * d + 1) / 6
    return s1, s2


def closed_form_z(scheme: str, params: TheoryParams, perturbed: bool = False) -> float:
    """Standardized margin z with P[correct] = Phi(z)."""
    scheme = _scheme(scheme)
    d, eta = params.d, params.eta
    if scheme == "unif":
        # the k shifted features cancel k unshifted ones
        mean = 0.0 if perturbed else eta
        return mean * math.sqrt(d)
    s1, s2 = _sums(d)
    if not perturbed:
        return eta * s1 / math.sqrt(s2)
    shift = eta * d * d / 4
    return (shift if scheme == "A" else -shift) / math.sqrt(s2)


def closed_form_accuracy(scheme: str, params: TheoryParams, perturbed: bool = False) -> float:
    return float(norm.cdf(closed_form_z(scheme, params, perturbed)))


def monte_carlo_accuracies(
    params: TheoryParams, perturbed: bool, n: int, seed: int, schemes=SCHEMES
) -> dict[str, tuple[float, float]]:
    """Empirical accuracy and binomial standard error of several classifiers on shared draws."""
    if n < 100:
        raise ValueError("n must be >= 100")
    clfs = {s: build_classifier(s, params.d) for s in schemes}
    hits = dict.fromkeys(clfs, 0)
    for X, y in _chunks(params, n, seed, perturbed):
        for s, clf in clfs.items():
            hits[s] += int((clf.predict(X) == y).sum())
    out = {}
    for s, h in hits.items():
        acc = h / n
        out[s] = (acc, math.sqrt(acc * (1 - acc) / n))
    return out


def monte_carlo_accuracy(scheme: str, params: TheoryParams, perturbed: bool, n: int, seed: int) -> tuple[float, float]:
    return monte_carlo_accuracies(params, perturbed, n, seed, schemes=(_scheme(scheme),))[_scheme(scheme)]


def joint_disagreement(params: TheoryParams, n: int, seed: int, scheme_a: str = "A", scheme_b: str = "B") -> float:
    """Fraction of perturbed samples that ``scheme_a`` gets right and ``scheme_b`` wrong."""
    if n < 100:
        raise ValueError("n must be >= 100")
    fa = build_classifier(scheme_a, params.d)
    fb = build_classifier(scheme_b, params.d)
    count = 0
    for X, y in _chunks(params, n, seed, perturbed=True):
        count += int(((fa.predict(X) == y) & (fb.predict(X) != y)).sum())
    return count / n


def weight_correlation(scheme_a: str, scheme_b: str, d: int) -> float:
    """Correlation of the two classifiers' noise projections, wa.wb / |wa||wb|."""
    wa = build_classifier(scheme_a, d).weights
    wb = build_classifier(scheme_b, d).weights
    return float(wa @ wb / (np.linalg.norm(wa) * np.linalg.norm(wb)))


SWEEP_COLUMNS = ["scheme", "d", "eta", "perturbed", "closed_form", "mc_estimate", "mc_stderr", "n", "seed"]


def sweep(ds=(10, 100, 1000), etas=(0.05, 0.11, 0.3), n: int = 100_000, seed: int = 0) -> list[dict]:
    rows = []
    for d in ds:
        for eta in etas:
            params = TheoryParams(d=d, eta=eta)
            for perturbed in (False, True):
                mc = monte_carlo_accuracies(params, perturbed, n, seed)
                for scheme in SCHEMES:
                    est, se = mc[scheme]
                    rows.append({
                        "scheme": scheme, "d": d, "eta": eta, "perturbed": perturbed,
                        "closed_form": closed_form_accuracy(scheme, params, perturbed),
                        "mc_estimate": est, "mc_stderr": se, "n": n, "seed": seed,
                    })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    from .metrics import fmt_float

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([
            r["scheme"], r["d"], fmt_float(r["eta"]), int(r["perturbed"]), fmt_float(r["closed_form"]),
            fmt_float(r["mc_estimate"]), fmt_float(r["mc_stderr"]), r["n"], r["seed"],
        ])
    return buf.getvalue()
