"""
Certified security levels.

All certificate comparisons run on exact rationals (fractions.Fraction over
Python's arbitrary-precision integers). Probability bounds coming from
floating point are converted to the exact dyadic rational the double holds.

Exact mode: label probabilities are known exactly from all C(n,k) models.
Sampled mode: a one-sided Clopper-Pearson lower bound on the top label's
probability, with the confidence budget alpha split evenly across the d test
examples, and the runner-up bounded by 1 - p_lower.
"""

import functools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .ensemble import EnsembleMode, PredictionMatrix, ensemble_predict, label_probabilities
from .errors import ConfigError, DomainError, FormatError, NumericError
from .rng import STREAM_TIE_BREAK, derive_seed

logger = logging.getLogger(__name__)

ABSTAIN = -1

BETA_MAX_ITERATIONS = 500
BETA_EPSILON = 1e-15
BETA_TINY = 1e-300
QUANTILE_TOLERANCE = 1e-10

Rational = Union[Fraction, int, float]


@dataclass(frozen=True)
class BinomRatio:
    """C(n-m,k)/C(n,k): the fraction of subsamples untouched by m malicious clients"""

    n: int
    k: int
    m: int
    value: Fraction

    @property
    def float_value(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class ProbBounds:
    """Lower bound on the top label's probability, upper bound on the runner-up's"""

    p_lower: Fraction
    p_upper: Fraction

    def __post_init__(self):
        object.__setattr__(self, "p_lower", Fraction(self.p_lower))
        object.__setattr__(self, "p_upper", Fraction(self.p_upper))
        if not (0 <= self.p_lower <= 1 and 0 <= self.p_upper <= 1):
            raise DomainError(f"probability bounds outside [0, 1]: {self.p_lower}, {self.p_upper}")

    @property
    def separated(self) -> bool:
        return self.p_lower > self.p_upper


@dataclass(frozen=True)
class Certificate:
    """
    Prediction plus certified security level for one test example.

    predicted and m_star are both ABSTAIN or both set. alpha is None for
    exact certificates and the confidence parameter otherwise.
    """

    predicted: int
    m_star: int
    bounds: ProbBounds
    alpha: Optional[float] = None

    def __post_init__(self):
        if (self.predicted == ABSTAIN) != (self.m_star == ABSTAIN):
            raise DomainError("predicted and m_star must abstain together")

    @property
    def abstained(self) -> bool:
        return self.predicted == ABSTAIN

    @property
    def deterministic(self) -> bool:
        return self.alpha is None

    @property
    def mode_label(self) -> str:
        return "EXACT" if self.deterministic else f"CONF(1-{self.alpha!r})"


@dataclass(frozen=True)
class CertifiedAccuracyCurve:
    """ca[m] for m = 0..n-k"""

    ca: List[Fraction]
    alpha: Optional[float] = None

    def __post_init__(self):
        for m in range(1, len(self.ca)):
            if self.ca[m] > self.ca[m - 1]:
                raise AssertionError(f"certified accuracy rises from m={m - 1} to m={m}")


def binom_ratio(n: int, k: int, m: int) -> BinomRatio:
    if not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n, got n={n}, k={k}")
    if not 0 <= m <= n - k:
        raise DomainError(f"m={m} outside [0, n-k={n - k}]")
    return BinomRatio(n, k, m, Fraction(math.comb(n - m, k), math.comb(n, k)))


def _rhs(n: int, k: int, m: int) -> Fraction:
    return 2 - 2 * binom_ratio(n, k, m).value


def cert_condition_exact(p_y: Rational, p_z: Rational, n: int, k: int, m: int) -> bool:
    """p_y - p_z > 2 - 2 C(n-m,k)/C(n,k)"""
    return Fraction(p_y) - Fraction(p_z) > _rhs(n, k, m)


def cert_condition_bounds(bounds: ProbBounds, n: int, k: int, m: int) -> bool:
    """
    ceil(p_lower C)/C - floor(p_upper C)/C > 2 - 2 C(n-m,k)/C with C = C(n,k).

    Multiplied through by C this is an integer comparison:
    ceil(p_lower C) - floor(p_upper C) > 2C - 2 C(n-m,k).
    """
    if not 0 <= m <= n - k:
        raise DomainError(f"m={m} outside [0, n-k={n - k}]")
    total = math.comb(n, k)
    lhs = math.ceil(bounds.p_lower * total) - math.floor(bounds.p_upper * total)
    return lhs > 2 * total - 2 * math.comb(n - m, k)


def cert_condition_unnormalized(bounds: ProbBounds, n: int, k: int, m: int) -> bool:
    """p_lower - p_upper > 2 - 2 C(n-m,k)/C(n,k), without rounding to multiples of 1/C(n,k)"""
    return bounds.p_lower - bounds.p_upper > _rhs(n, k, m)


def _largest_satisfying(condition, n: int, k: int) -> int:
    """Largest m in [0, n-k] with condition(m), given condition(0) and the prefix property"""
    lo, hi = 0, n - k
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if condition(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def search_level(bounds: ProbBounds, n: int, k: int) -> int:
    """
    Certified security level for separated bounds.

    The right-hand side of the condition is nondecreasing in m, so the
    satisfying m form a prefix of [0, n-k] and binary search applies. m = 0
    always satisfies it when p_lower > p_upper.
    """
    if not bounds.separated:
        raise DomainError(f"need p_lower > p_upper, got {bounds.p_lower} <= {bounds.p_upper}")
    return _largest_satisfying(lambda m: cert_condition_bounds(bounds, n, k, m), n, k)


def search_level_linear(bounds: ProbBounds, n: int, k: int) -> int:
    """Reference scan over every m"""
    if not bounds.separated:
        raise DomainError(f"need p_lower > p_upper, got {bounds.p_lower} <= {bounds.p_upper}")
    level = 0
    for m in range(n - k + 1):
        if cert_condition_bounds(bounds, n, k, m):
            level = m
        else:
            break
    return level


def search_level_unnormalized(bounds: ProbBounds, n: int, k: int) -> int:
    """Level from the unrounded condition; ABSTAIN when even m = 0 fails"""
    if not cert_condition_unnormalized(bounds, n, k, 0):
        return ABSTAIN
    return _largest_satisfying(lambda m: cert_condition_unnormalized(bounds, n, k, m), n, k)


def _beta_continued_fraction(x: float, a: float, b: float) -> float:
    """Continued fraction for I_x(a,b), evaluated with the modified Lentz method"""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < BETA_TINY:
        d = BETA_TINY
    d = 1.0 / d
    h = d
    for m in range(1, BETA_MAX_ITERATIONS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < BETA_TINY:
            d = BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < BETA_TINY:
            c = BETA_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < BETA_TINY:
            d = BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < BETA_TINY:
            c = BETA_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_EPSILON:
            return h
    raise NumericError(f"incomplete beta did not converge for x={x}, a={a}, b={b}")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b)"""
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x={x} outside [0, 1]")
    if not (a > 0 and b > 0):
        raise DomainError(f"shape parameters must be positive, got a={a}, b={b}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        value = front * _beta_continued_fraction(x, a, b) / a
    else:
        value = 1.0 - front * _beta_continued_fraction(1.0 - x, b, a) / b
    return min(1.0, max(0.0, value))


def beta_quantile(q: float, a: float, b: float) -> float:
    """
    x with I_x(a, b) = q, by bisection to QUANTILE_TOLERANCE.

    Returns the lower end of the final bracket, so the result never
    overshoots the true quantile by more than rounding in I_x.
    """
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level q={q} outside (0, 1)")
    lo, hi = 0.0, 1.0
    while hi - lo > QUANTILE_TOLERANCE:
        mid = 0.5 * (lo + hi)
        if reg_inc_beta(mid, a, b) < q:
            lo = mid
        else:
            hi = mid
    return lo


@functools.lru_cache(maxsize=4096)
def clopper_pearson_lower(count: int, total: int, alpha_eff: float) -> float:
    """One-sided Clopper-Pearson lower confidence bound on a binomial proportion"""
    if not 0 <= count <= total:
        raise DomainError(f"need 0 <= count <= total, got {count}, {total}")
    if not 0.0 < alpha_eff < 1.0:
        raise DomainError(f"alpha_eff={alpha_eff} outside (0, 1)")
    if count == 0:
        return 0.0
    return beta_quantile(alpha_eff, count, total - count + 1)


def certify_all(matrix: PredictionMatrix, alpha: float) -> List[Certificate]:
    """
    Probabilistic certificates for a SAMPLED-mode ensemble.

    With probability at least 1 - alpha all d certificates hold simultaneously.
    """
    if matrix.mode is not EnsembleMode.SAMPLED:
        raise ConfigError("certify_all needs a SAMPLED-mode matrix; use exact_certify for EXACT mode")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha={alpha} outside (0, 1)")
    d = matrix.test_count
    if d == 0:
        return []
    alpha_eff = alpha / d

    certs = []
    for t in range(d):
        probs = label_probabilities(matrix, t)
        predicted = ensemble_predict(
            probs, derive_seed(matrix.master_seed, STREAM_TIE_BREAK, t), EnsembleMode.SAMPLED
        )
        p_lower = Fraction(clopper_pearson_lower(probs.counts[predicted], probs.total, alpha_eff))
        bounds = ProbBounds(p_lower, 1 - p_lower)
        if bounds.separated:
            certs.append(Certificate(predicted, search_level(bounds, matrix.n, matrix.k), bounds, alpha))
        else:
            logger.debug("example %d abstains: p_lower=%.6f", t, float(p_lower))
            certs.append(Certificate(ABSTAIN, ABSTAIN, bounds, alpha))
    return certs


def exact_level(p_y: Fraction, p_z: Fraction, n: int, k: int) -> int:
    """Largest m satisfying the exact condition, ABSTAIN when p_y <= p_z"""
    if p_y <= p_z:
        return ABSTAIN
    return _largest_satisfying(lambda m: cert_condition_exact(p_y, p_z, n, k, m), n, k)


def exact_certify(matrix: PredictionMatrix) -> List[Certificate]:
    """Deterministic certificates from an EXACT-mode ensemble"""
    if matrix.mode is not EnsembleMode.EXACT:
        raise ConfigError("exact_certify needs an EXACT-mode matrix")
    certs = []
    for t in range(matrix.test_count):
        probs = label_probabilities(matrix, t)
        predicted = ensemble_predict(probs)
        p_y = probs.p[predicted]
        p_z = max((p for label, p in enumerate(probs.p) if label != predicted), default=Fraction(0))
        bounds = ProbBounds(p_y, p_z)
        level = exact_level(p_y, p_z, matrix.n, matrix.k)
        if level == ABSTAIN:
            logger.debug("example %d abstains: exact tie at %s", t, p_y)
            certs.append(Certificate(ABSTAIN, ABSTAIN, bounds))
        else:
            certs.append(Certificate(predicted, level, bounds))
    return certs


def certify_matrix(matrix: PredictionMatrix, alpha: float) -> List[Certificate]:
    """exact_certify or certify_all depending on the matrix mode"""
    if matrix.mode is EnsembleMode.EXACT:
        return exact_certify(matrix)
    return certify_all(matrix, alpha)


def certified_accuracy(certs: Sequence[Certificate], true_labels: Sequence[int], m: int) -> Fraction:
    """Fraction of examples predicted correctly with a certified level of at least m"""
    if len(certs) != len(true_labels):
        raise DomainError(f"{len(certs)} certificates for {len(true_labels)} labels")
    if not certs:
        raise DomainError("certified accuracy of an empty test set is undefined")
    hits = sum(
        1
        for cert, label in zip(certs, true_labels)
        if not cert.abstained and cert.predicted == int(label) and cert.m_star >= m
    )
    return Fraction(hits, len(certs))


def certified_accuracy_curve(
    certs: Sequence[Certificate], true_labels: Sequence[int], n: int, k: int, alpha: Optional[float] = None
) -> CertifiedAccuracyCurve:
    ca = [certified_accuracy(certs, true_labels, m) for m in range(n - k + 1)]
    return CertifiedAccuracyCurve(ca, alpha)


def baseline_curve(
    predictions: Sequence[int], true_labels: Sequence[int], n: int, k: int
) -> CertifiedAccuracyCurve:
    """
    Curve of a single global model: its accuracy at m = 0 and nothing beyond,
    since one malicious client can steer a single model anywhere.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(true_labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise DomainError("baseline needs one prediction per true label and a non-empty test set")
    accuracy = Fraction(int((predictions == labels).sum()), int(labels.size))
    return CertifiedAccuracyCurve([accuracy] + [Fraction(0)] * (n - k))


REPORT_HEADER = "example,true_label,predicted,m_star,p_lower,p_upper,mode"


def _encode(value: int) -> str:
    return "-" if value == ABSTAIN else str(value)


def _decode(value: str) -> int:
    return ABSTAIN if value == "-" else int(value)


def write_certificate_report(
    certs: Sequence[Certificate], true_labels: Sequence[int], path: Union[str, Path]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [REPORT_HEADER]
    for t, (cert, label) in enumerate(zip(certs, true_labels)):
        lines.append(
            f"{t},{int(label)},{_encode(cert.predicted)},{_encode(cert.m_star)},"
            f"{float(cert.bounds.p_lower)!r},{float(cert.bounds.p_upper)!r},{cert.mode_label}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def read_certificate_report(path: Union[str, Path]):
    """Parse a report back into (certificates, true labels)"""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise FormatError(f"{path} is not a certificate report")
    certs, labels = [], []
    for line in lines[1:]:
        try:
            _, label, predicted, m_star, p_lower, p_upper, mode = line.split(",")
            alpha = None
            if mode != "EXACT":
                alpha = float(mode[len("CONF(1-") : -1])
            bounds = ProbBounds(float(p_lower), float(p_upper))
            certs.append(Certificate(_decode(predicted), _decode(m_star), bounds, alpha))
            labels.append(int(label))
        except ValueError as e:
            raise FormatError(f"bad report line in {path}: {line!r} ({e})")
    return certs, labels


def write_curve(curve: CertifiedAccuracyCurve, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["m,certified_accuracy"]
    lines.extend(f"{m},{float(value)!r}" for m, value in enumerate(curve.ca))
    path.write_text("\n".join(lines) + "\n")
    return path
