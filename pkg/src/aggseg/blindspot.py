"""Probability that two classifiers agree on the same wrong label.

Consensus training gets no signal from such pixels. Under class-independent
error rates and uniformly chosen wrong labels, the joint probability of this
event for reference class ``i`` is ``e**2 / (n_classes - 1) * prior_i``, so
frequent classes hide proportionally more errors.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .exceptions import ConfigurationError, InputError


@dataclass
class BlindSpotModel:
    class_priors: Sequence[float]
    error_rate: float

    def __post_init__(self):
        self.class_priors = tuple(float(p) for p in self.class_priors)
        self.error_rate = float(self.error_rate)
        if len(self.class_priors) < 2:
            raise ConfigurationError("class_priors", "need at least two classes")
        if min(self.class_priors) < 0 or abs(sum(self.class_priors) - 1.0) > 1e-9:
            raise ConfigurationError("class_priors", f"{self.class_priors} is not a distribution")
        if not 0.0 <= self.error_rate <= 1.0:
            raise ConfigurationError("error_rate", f"{self.error_rate} outside [0, 1]")

    @property
    def num_classes(self):
        return len(self.class_priors)


def blind_spot_from_parts(prior, error_rate, num_classes):
    """Closed form without distribution checks (prior need not be normalised)."""
    return error_rate ** 2 / (num_classes - 1) * prior


def blind_spot_probability(m: BlindSpotModel, class_index: int) -> float:
    if not 0 <= class_index < m.num_classes:
        raise InputError(f"class index {class_index} outside [0, {m.num_classes})")
    return blind_spot_from_parts(m.class_priors[class_index], m.error_rate, m.num_classes)


def joint_wrong_prediction(m: BlindSpotModel, predicted: int, reference: int) -> float:
    """P(predicted class k, reference class i, wrong) for one classifier, k != i."""
    if predicted == reference:
        return 0.0
    return m.error_rate * m.class_priors[reference] / (m.num_classes - 1)


def conditional_agreement(m: BlindSpotModel) -> float:
    """P(second classifier wrong with a given label), independent of the first."""
    return m.error_rate / (m.num_classes - 1)


def chained_blind_spot(m: BlindSpotModel, class_index: int) -> float:
    """Blind-spot probability rebuilt from the per-label joint and conditional terms."""
    return sum(joint_wrong_prediction(m, k, class_index) * conditional_agreement(m)
               for k in range(m.num_classes) if k != class_index)


def self_check(m: BlindSpotModel, atol=1e-15) -> bool:
    return all(abs(chained_blind_spot(m, i) - blind_spot_probability(m, i)) <= atol
               for i in range(m.num_classes))


@dataclass
class SimulationResult:
    trials: int
    counts: np.ndarray

    @property
    def frequency(self):
        return self.counts / self.trials

    @property
    def std_error(self):
        p = self.frequency
        return np.sqrt(p * (1.0 - p) / self.trials)

    def merge(self, other):
        return SimulationResult(self.trials + other.trials, self.counts + other.counts)


def simulate_blind_spot(m: BlindSpotModel, trials: int, rng=None, chunk_size=1_000_000) -> SimulationResult:
    """Monte Carlo estimate of the blind-spot frequency per reference class.

    Each trial draws a reference class, then two independent classifiers that
    are wrong with probability ``error_rate`` and, when wrong, pick one of the
    other classes uniformly. A trial counts when both are wrong and agree.
    """
    if trials < 1:
        raise InputError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    n = m.num_classes
    priors = np.asarray(m.class_priors)
    counts = np.zeros(n, dtype=np.int64)
    done = 0
    while done < trials:
        size = min(chunk_size, trials - done)
        ref = rng.choice(n, size=size, p=priors)
        wrong_a = rng.random(size) < m.error_rate
        wrong_b = rng.random(size) < m.error_rate
        # offset in 1..n-1 picks a wrong label uniformly
        pred_a = (ref + rng.integers(1, n, size=size)) % n
        pred_b = (ref + rng.integers(1, n, size=size)) % n
        blind = wrong_a & wrong_b & (pred_a == pred_b)
        counts += np.bincount(ref[blind], minlength=n)
        done += size
    return SimulationResult(trials, counts)


REPORT_COLUMNS = ("class", "prior", "analytic_p", "empirical_p", "std_error", "ratio")


def bias_report(m: BlindSpotModel, trials: int = 0, rng=None, class_names=None) -> List[dict]:
    """Per-class blind-spot table sorted by prior, largest first.

    ``ratio`` compares each class to the class with the smallest non-zero prior;
    it is NaN where undefined (zero prior or zero reference probability).
    Empirical columns are filled only when ``trials > 0``.
    """
    n = m.num_classes
    names = list(class_names) if class_names is not None else [str(i) for i in range(n)]
    analytic = [blind_spot_probability(m, i) for i in range(n)]
    nonzero = [i for i in range(n) if m.class_priors[i] > 0]
    ref = min(nonzero, key=lambda i: m.class_priors[i])
    sim = simulate_blind_spot(m, trials, rng) if trials > 0 else None
    rows = []
    for i in range(n):
        if m.class_priors[i] > 0 and analytic[ref] > 0:
            ratio = analytic[i] / analytic[ref]
        else:
            ratio = math.nan
        rows.append({
            "class": names[i],
            "prior": m.class_priors[i],
            "analytic_p": analytic[i],
            "empirical_p": float(sim.frequency[i]) if sim else math.nan,
            "std_error": float(sim.std_error[i]) if sim else math.nan,
            "ratio": ratio,
        })
    rows.sort(key=lambda r: -r["prior"])
    return rows


def report_to_csv(rows, fh=None) -> str:
    buf = fh or io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue() if fh is None else ""
