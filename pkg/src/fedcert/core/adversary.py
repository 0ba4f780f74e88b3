"""
Malicious clients.

Three things live here:
1. Attack simulations that tamper with malicious clients' data or updates
   during FedAvg training, and the attack evaluation that retrains the
   contaminated ensemble rows and checks certified predictions
2. A brute-force worst-case oracle over every malicious set of a given size
3. Table-defined base algorithms that show the certified level cannot be
   raised: for bounds just past the certified level, a table exists whose
   ensemble prediction flips
"""

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .certify import (
    ABSTAIN,
    Certificate,
    ProbBounds,
    exact_level,
    search_level,
)
from .config import get_config
from .datasets import ClientPartition, Dataset
from .ensemble import (
    EnsembleMode,
    PredictionMatrix,
    Subsample,
    ensemble_predict,
    label_probabilities,
    retrain_rows,
)
from .errors import CapError, ConfigError, DomainError, ShapeError
from .fedlearn import BaseAlgorithm, ClientUpdate, FedAvgAlgorithm, FedConfig, fedavg_train
from .model import ModelConfig, ModelParams
from .rng import STREAM_ATTACK, STREAM_TIE_BREAK, derive_seed, make_rng

logger = logging.getLogger(__name__)

TIGHTNESS_MAX_N = 10
LABEL_Y = 0
LABEL_Z = 1


@dataclass(frozen=True)
class MaliciousSet:
    client_ids: FrozenSet[int]
    n: int

    def __post_init__(self):
        object.__setattr__(self, "client_ids", frozenset(int(c) for c in self.client_ids))
        if any(not 0 <= c < self.n for c in self.client_ids):
            raise DomainError(f"malicious clients {sorted(self.client_ids)} not all in [0, {self.n})")

    @property
    def size(self) -> int:
        return len(self.client_ids)


def contaminated(subsample: Iterable[int], malicious: MaliciousSet) -> bool:
    """True iff the subsample contains at least one malicious client"""
    return not malicious.client_ids.isdisjoint(subsample)


def choose_malicious(n: int, size: int, master_seed: int) -> MaliciousSet:
    """A uniformly random malicious set, keyed by (master_seed, size)"""
    if not 0 <= size <= n:
        raise DomainError(f"cannot pick {size} malicious clients out of {n}")
    rng = make_rng(master_seed, STREAM_ATTACK, size)
    return MaliciousSet(frozenset(int(c) for c in rng.choice(n, size=size, replace=False)), n)


class AttackKind(str, enum.Enum):
    LABEL_FLIP = "LABEL_FLIP"
    SCALED_UPDATE = "SCALED_UPDATE"
    ARBITRARY_UPDATE = "ARBITRARY_UPDATE"


@dataclass(frozen=True)
class AttackSpec:
    """
    LABEL_FLIP relabels malicious clients' data through flip_map (labels not in
    the map are kept). SCALED_UPDATE multiplies their deltas by factor.
    ARBITRARY_UPDATE replaces their deltas with factor * (w_target - w).
    """

    kind: AttackKind
    flip_map: Mapping[int, int] = field(default_factory=dict)
    factor: float = 10.0
    target_label: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not math.isfinite(self.factor):
            raise ConfigError(f"attack factor must be finite, got {self.factor}")

    def validate(self, num_labels: int):
        for source, target in self.flip_map.items():
            if not (0 <= source < num_labels and 0 <= target < num_labels):
                raise ConfigError(f"flip {source}->{target} outside [0, {num_labels})")
        if self.kind is AttackKind.ARBITRARY_UPDATE and not 0 <= self.target_label < num_labels:
            raise ConfigError(f"target label {self.target_label} outside [0, {num_labels})")


def flip_labels(data: Dataset, flip_map: Mapping[int, int]) -> Dataset:
    table = np.arange(data.num_labels)
    for source, target in flip_map.items():
        table[source] = target
    return Dataset(data.features, table[data.labels], data.num_labels, subject=data.subject)


def pretrain_target(
    partition: ClientPartition,
    malicious: MaliciousSet,
    target_label: int,
    fed_config: FedConfig,
    model_config: ModelConfig,
) -> ModelParams:
    """A model trained on the malicious clients' data with every label set to target_label"""
    ids = sorted(malicious.client_ids)
    relabelled = [
        Dataset(d.features, np.full(len(d), target_label), d.num_labels)
        for d in partition.datasets_for(tuple(ids))
    ]
    return fedavg_train(relabelled, fed_config, model_config, ids)


def apply_attack(
    partition: ClientPartition,
    malicious: MaliciousSet,
    spec: AttackSpec,
    fed_config: FedConfig,
    model_config: ModelConfig,
) -> Tuple[ClientPartition, FedAvgAlgorithm]:
    """
    Tampered training behaviour: the partition the ensemble should train on and
    a FedAvg instance whose update hook rewrites malicious clients' deltas.
    """
    spec.validate(partition.num_labels)
    if malicious.n != partition.n:
        raise DomainError(f"malicious set over {malicious.n} clients, partition has {partition.n}")
    if malicious.size == 0:
        return partition, FedAvgAlgorithm()

    if spec.kind is AttackKind.LABEL_FLIP:
        replacements = {c: flip_labels(partition.client_data[c], spec.flip_map) for c in malicious.client_ids}
        return partition.with_clients(replacements), FedAvgAlgorithm()

    if spec.kind is AttackKind.SCALED_UPDATE:

        def scale_hook(client_id: int, update: ClientUpdate, global_params: ModelParams) -> ClientUpdate:
            if client_id not in malicious.client_ids:
                return update
            return ClientUpdate(update.delta.scale(spec.factor), update.weight)

        return partition, FedAvgAlgorithm(scale_hook)

    target = pretrain_target(partition, malicious, spec.target_label, fed_config, model_config)

    def replace_hook(client_id: int, update: ClientUpdate, global_params: ModelParams) -> ClientUpdate:
        if client_id not in malicious.client_ids:
            return update
        return ClientUpdate((target - global_params).scale(spec.factor), update.weight)

    return partition, FedAvgAlgorithm(replace_hook)


@dataclass(frozen=True)
class AttackOutcome:
    """Result of retraining the ensemble with one malicious set"""

    size: int
    malicious: Tuple[int, ...]
    retrained_rows: int
    certified: int
    changed: int
    violations: Tuple[int, ...]


def evaluate_attack(
    matrix: PredictionMatrix,
    certs: Sequence[Certificate],
    partition: ClientPartition,
    spec: AttackSpec,
    fed_config: FedConfig,
    model_config: ModelConfig,
    test_set: Dataset,
    sizes: Sequence[int],
    threads: int = 1,
) -> List[AttackOutcome]:
    """
    For each size, pick a malicious set, retrain only the contaminated rows and
    compare predictions. A certified example (m_star >= size) whose prediction
    changes is a certificate violation.
    """
    if len(certs) != matrix.test_count:
        raise ShapeError(f"{len(certs)} certificates for {matrix.test_count} test examples")
    spec.validate(partition.num_labels)
    outcomes = []
    for size in sizes:
        malicious = choose_malicious(matrix.n, size, matrix.master_seed)
        rows = [r for r, s in enumerate(matrix.subsamples) if contaminated(s, malicious)]
        if rows:
            attacked_partition, algorithm = apply_attack(partition, malicious, spec, fed_config, model_config)
            attacked = retrain_rows(
                matrix, rows, attacked_partition, algorithm, fed_config, model_config, test_set, threads
            )
        else:
            attacked = matrix

        certified = changed = 0
        violations = []
        for t, cert in enumerate(certs):
            if cert.abstained:
                continue
            tie_seed = derive_seed(matrix.master_seed, STREAM_TIE_BREAK, t)
            new_label = ensemble_predict(label_probabilities(attacked, t), tie_seed, matrix.mode)
            is_certified = cert.m_star >= size
            certified += is_certified
            if new_label != cert.predicted:
                changed += 1
                if is_certified:
                    violations.append(t)
        if violations:
            logger.error("size %d: %d certified predictions changed", size, len(violations))
        ids = tuple(sorted(malicious.client_ids))
        outcomes.append(AttackOutcome(size, ids, len(rows), certified, changed, tuple(violations)))
    return outcomes


def write_attack_report(outcomes: Sequence[AttackOutcome], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["size,malicious,retrained_rows,certified,changed,violations"]
    for o in outcomes:
        malicious = " ".join(str(c) for c in o.malicious)
        violations = " ".join(str(t) for t in o.violations)
        lines.append(f"{o.size},{malicious},{o.retrained_rows},{o.certified},{o.changed},{violations}")
    path.write_text("\n".join(lines) + "\n")
    return path


class LookupClassifier:
    """Returns a fixed prediction vector for any test set of matching size"""

    def __init__(self, predictions: Sequence[int]):
        self.predictions = np.asarray(predictions, dtype=np.int64)

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        if len(features) != len(self.predictions):
            raise ShapeError(f"lookup holds {len(self.predictions)} predictions, asked for {len(features)}")
        return self.predictions.copy()


class LookupBaseAlgorithm(BaseAlgorithm):
    """A base algorithm defined by a table from subsample to test predictions"""

    ALGORITHM_NAME = "lookup"

    def __init__(self, table: Mapping[Subsample, Sequence[int]]):
        self.table = {tuple(s): tuple(int(v) for v in labels) for s, labels in table.items()}

    @property
    def description(self) -> str:
        return "Fixed predictions per client subsample (no training)"

    def __call__(self, subsample: Subsample) -> Tuple[int, ...]:
        try:
            return self.table[tuple(subsample)]
        except KeyError:
            raise DomainError(f"lookup table has no entry for subsample {tuple(subsample)}")

    def train(self, client_datasets, fed_config, model_config, client_ids) -> LookupClassifier:
        return LookupClassifier(self(tuple(client_ids)))


def _membership(subsamples: Sequence[Subsample], n: int) -> np.ndarray:
    member = np.zeros((len(subsamples), n), dtype=bool)
    for row, s in enumerate(subsamples):
        member[row, list(s)] = True
    return member


def _survives(
    column: np.ndarray, member: np.ndarray, malicious: Sequence[int], y: int, num_labels: int
) -> bool:
    """
    Whether label y keeps a strict majority whatever the contaminated models vote.

    Funneling: the adversary controls the T contaminated votes. Giving all of
    them to one rival j raises clean_j by T; any split raises every rival by at
    most T. So the worst case over all reassignments is max_j clean_j + T, and
    y survives every reassignment iff clean_y > max_j (clean_j + T).
    """
    if num_labels < 2:
        raise DomainError(f"a prediction can only change with at least 2 labels, got {num_labels}")
    hit = member[:, list(malicious)].any(axis=1) if len(malicious) else np.zeros(len(column), dtype=bool)
    t_count = int(hit.sum())
    clean = np.bincount(column[~hit], minlength=num_labels)
    rivals = np.delete(clean, y)
    return bool(clean[y] > rivals.max() + t_count)


def worst_case_safe_level(matrix: PredictionMatrix, t: int, cap: Optional[int] = None) -> int:
    """
    Largest m such that no malicious set of size at most m can change the
    clean prediction of example t, by enumeration of every malicious set.
    ABSTAIN when the clean prediction has no strict majority.
    """
    if matrix.mode is not EnsembleMode.EXACT:
        raise ConfigError("worst_case_safe_level needs an EXACT-mode matrix")
    cap = get_config().brute_force_cap if cap is None else cap
    if matrix.n > cap:
        raise CapError(f"enumerating malicious sets over n={matrix.n} clients exceeds the cap of {cap}")

    column = matrix.column(t)
    y = ensemble_predict(label_probabilities(matrix, t))
    member = _membership(matrix.subsamples, matrix.n)
    if not _survives(column, member, (), y, matrix.num_labels):
        return ABSTAIN
    for m in range(1, matrix.n + 1):
        for malicious in itertools.combinations(range(matrix.n), m):
            if not _survives(column, member, malicious, y, matrix.num_labels):
                return m - 1
    return matrix.n


def _compositions(total: int, parts: int) -> Iterable[Tuple[int, ...]]:
    """Every way to write total as an ordered sum of `parts` non-negative integers"""
    for cuts in itertools.combinations(range(total + parts - 1), parts - 1):
        bounds = (-1,) + cuts + (total + parts - 1,)
        yield tuple(bounds[i + 1] - bounds[i] - 1 for i in range(parts))


def survives_every_reassignment(matrix: PredictionMatrix, t: int, malicious: MaliciousSet) -> bool:
    """
    Explicit check: try every distribution of the contaminated votes over all
    labels and apply the ensemble's own tie rule. Exponential; tiny cases only.
    """
    column = matrix.column(t)
    y = ensemble_predict(label_probabilities(matrix, t))
    hit = np.array([contaminated(s, malicious) for s in matrix.subsamples], dtype=bool)
    clean = np.bincount(column[~hit], minlength=matrix.num_labels)
    for votes in _compositions(int(hit.sum()), matrix.num_labels):
        counts = clean + np.asarray(votes)
        if int(np.argmax(counts)) != y:
            return False
    return True


@dataclass(frozen=True)
class SubsampleSpacePartition:
    """
    Subsamples over C (the clean clients) and C' (C with m clients replaced).
    o_o is their overlap; o_a and o_b are the y- and z-labelled anchor sets.
    """

    o_c: Tuple[Subsample, ...]
    o_cprime: Tuple[Subsample, ...]
    o_o: Tuple[Subsample, ...]
    o_a: Tuple[Subsample, ...]
    o_b: Tuple[Subsample, ...]


@dataclass
class TightnessInstance:
    case_id: int
    n: int
    k: int
    m: int
    algorithm: LookupBaseAlgorithm
    malicious: MaliciousSet
    space: SubsampleSpacePartition
    num_labels: int

    def clean_matrix(self) -> PredictionMatrix:
        """EXACT-mode matrix over the clean clients for the single test point"""
        rows = [[self.algorithm(s)[0]] for s in self.space.o_c]
        return PredictionMatrix(
            np.array(rows), self.n, self.k, self.num_labels, EnsembleMode.EXACT, list(self.space.o_c)
        )

    def counts(self, subsamples: Sequence[Subsample]) -> np.ndarray:
        labels = [self.algorithm(s)[0] for s in subsamples]
        return np.bincount(labels, minlength=self.num_labels)


def _case_failures(case_id: int, n: int, k: int, m: int, p_lower: Fraction, p_upper: Fraction) -> List[str]:
    """The case's own parameter ranges that do not hold (empty list when it applies)"""
    if case_id == 1:
        return [] if m >= n - k else [f"case 1 needs m >= n-k, got m={m}, n-k={n - k}"]
    if case_id not in (2, 3, 4):
        return [f"unknown case {case_id}"]
    failures = []
    bounds = ProbBounds(p_lower, p_upper)
    m_star = search_level(bounds, n, k) if bounds.separated else ABSTAIN
    if not m_star < m < n - k:
        failures.append(f"case {case_id} needs m*={m_star} < m={m} < n-k={n - k}")
        return failures
    r = Fraction(math.comb(n - m, k), math.comb(n, k))
    if case_id == 2:
        if not p_lower <= 1 - r:
            failures.append(f"case 2 needs p_lower <= 1 - r = {1 - r}")
        if not p_upper <= r:
            failures.append(f"case 2 needs p_upper <= r = {r}")
    elif case_id == 3:
        if not p_lower <= 1 - r:
            failures.append(f"case 3 needs p_lower <= 1 - r = {1 - r}")
        if not r <= p_upper <= 1 - p_lower:
            failures.append(f"case 3 needs r = {r} <= p_upper <= 1 - p_lower")
    else:
        if not p_lower > 1 - r:
            failures.append(f"case 4 needs p_lower > 1 - r = {1 - r}")
        if not p_upper <= 1 - p_lower:
            failures.append("case 4 needs p_upper <= 1 - p_lower")
    return failures


def spare_labels_needed(leftover: int, cap: int) -> Optional[int]:
    """
    Fewest spare labels (at least one) holding `leftover` votes with no more
    than `cap` each. None when cap is 0 and there are votes to place.
    """
    if leftover == 0:
        return 1
    if cap == 0:
        return None
    return math.ceil(leftover / cap)


def build_tightness_instance(
    n: int,
    k: int,
    m: int,
    p_lower,
    p_upper,
    case_id: int,
    num_labels: Optional[int] = None,
) -> TightnessInstance:
    """
    Table-defined base algorithm plus malicious set for one construction case.

    C' keeps clients 0..n-m-1 and replaces n-m..n-1 with fresh ids n..n+m-1.
    Labels: y = 0, z = 1, everything else round-robin over 2..num_labels-1.
    No label other than y gets more clean votes than floor(p_upper * C(n,k));
    num_labels defaults to the fewest labels that allow this.

    Raises:
        DomainError: the case's preconditions do not hold, or the leftover
            votes cannot be spread over num_labels labels within that limit
    """
    p_lower, p_upper = Fraction(p_lower), Fraction(p_upper)
    failures = []
    if not 1 <= k <= n:
        failures.append(f"need 1 <= k <= n, got n={n}, k={k}")
    if not 1 <= m <= n:
        failures.append(f"need 1 <= m <= n, got m={m}")
    if num_labels is not None and num_labels < 3:
        failures.append(f"construction needs at least 3 labels, got {num_labels}")
    if not (0 <= p_upper and p_lower <= 1 and p_lower + p_upper <= 1):
        failures.append(f"need 0 <= p_upper, p_lower <= 1, p_lower + p_upper <= 1 ({p_lower}, {p_upper})")
    if not failures:
        failures = _case_failures(case_id, n, k, m, p_lower, p_upper)
    if failures:
        raise DomainError("; ".join(failures))

    total = math.comb(n, k)
    overlap = math.comb(n - m, k) if m <= n - k else 0
    size_a = math.ceil(p_lower * total)
    size_b = math.floor(p_upper * total)

    normal = list(range(n - m))
    o_c = tuple(itertools.combinations(range(n), k))
    o_cprime = tuple(itertools.combinations(normal + list(range(n, n + m)), k))
    o_o = tuple(itertools.combinations(normal, k))
    o_o_set = set(o_o)
    rest = [s for s in o_c if s not in o_o_set]

    if case_id == 1:
        # at most one subsample avoids every replaced client; it goes to O_B first, then O_A
        pool = list(o_o) + rest
        o_b = pool[:size_b]
        o_a = pool[size_b : size_b + size_a]
    elif case_id == 2:
        o_a = rest[:size_a]
        o_b = list(o_o[:size_b])
    elif case_id == 3:
        o_a = rest[:size_a]
        o_b = rest[size_a : size_a + size_b - overlap]
    else:
        split = size_a + overlap - total
        o_a = list(o_o[:split])
        o_b = list(o_o[split : split + size_b])

    in_a, in_b = set(o_a), set(o_b)
    in_c, in_cprime = set(o_c), set(o_cprime)
    labels: Dict[Subsample, int] = {}
    leftover = []
    for s in o_c + tuple(x for x in o_cprime if x not in in_c):
        if s in in_a or (case_id == 4 and s in in_c and s not in o_o_set):
            labels[s] = LABEL_Y
        elif s in in_b:
            labels[s] = LABEL_Z
        elif s in in_cprime and (case_id in (1, 3) or s not in o_o_set):
            labels[s] = LABEL_Z
        else:
            leftover.append(s)

    # subsamples of C' outside C are all z, so every leftover one is a clean vote
    needed = spare_labels_needed(len(leftover), size_b)
    if needed is None:
        raise DomainError(
            f"{len(leftover)} leftover votes but floor(p_upper * C(n,k)) = 0 leaves no room for other labels"
        )
    if num_labels is None:
        num_labels = 2 + needed
    elif num_labels - 2 < needed:
        raise DomainError(
            f"{len(leftover)} leftover votes need at least {2 + needed} labels, got {num_labels}"
        )
    for i, s in enumerate(leftover):
        labels[s] = 2 + i % (num_labels - 2)

    return TightnessInstance(
        case_id,
        n,
        k,
        m,
        LookupBaseAlgorithm({s: (label,) for s, label in labels.items()}),
        MaliciousSet(frozenset(range(n - m, n)), n),
        SubsampleSpacePartition(o_c, o_cprime, o_o, tuple(o_a), tuple(o_b)),
        num_labels,
    )


@dataclass(frozen=True)
class TightnessReport:
    case_id: int
    n: int
    k: int
    p_lower: Fraction
    p_upper: Fraction
    m_star: int
    break_at: int
    verdict: str
    failures: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.verdict in ("BROKEN", "TIE")

    def row(self) -> str:
        return (
            f"{self.case_id},{self.n},{self.k},{self.p_lower},{self.p_upper},"
            f"{self.m_star},{self.break_at},{self.verdict}"
        )


TIGHTNESS_HEADER = "case,n,k,p_lower,p_upper,m_star,break_at,verdict"


def verify_tightness(n: int, k: int, p_lower, p_upper, num_labels: Optional[int] = None) -> TightnessReport:
    """
    Show the certified level m* cannot be raised for these bounds: build the
    applicable construction at m*+1 and check that the prediction breaks (or
    ties) while the clean table still meets the bounds. y must hold exactly
    ceil(p_lower * C) votes and z exactly floor(p_upper * C), with no other
    label above z.
    """
    p_lower, p_upper = Fraction(p_lower), Fraction(p_upper)
    failures = []
    if not 1 <= k <= n:
        failures.append(f"need 1 <= k <= n, got n={n}, k={k}")
    if n > TIGHTNESS_MAX_N:
        failures.append(f"n={n} above the enumeration limit {TIGHTNESS_MAX_N}")
    if num_labels is not None and num_labels < 3:
        failures.append(f"need at least 3 labels, got {num_labels}")
    if not p_lower > p_upper:
        failures.append(f"need p_lower > p_upper, got {p_lower} <= {p_upper}")
    if not (0 <= p_upper and p_lower <= 1 and p_lower + p_upper <= 1):
        failures.append(f"need 0 <= p_upper, p_lower <= 1, p_lower + p_upper <= 1 ({p_lower}, {p_upper})")
    if failures:
        return TightnessReport(0, n, k, p_lower, p_upper, ABSTAIN, ABSTAIN, "PRECONDITION", tuple(failures))

    m_star = search_level(ProbBounds(p_lower, p_upper), n, k)
    m = m_star + 1
    if m >= n - k:
        case_id = 1
    else:
        case_id = 0
        for candidate in (2, 3, 4):
            reasons = _case_failures(candidate, n, k, m, p_lower, p_upper)
            if not reasons:
                case_id = candidate
                break
            failures.extend(reasons)
        if case_id == 0:
            return TightnessReport(0, n, k, p_lower, p_upper, m_star, m, "NO_CASE", tuple(failures))

    try:
        instance = build_tightness_instance(n, k, m, p_lower, p_upper, case_id, num_labels)
    except DomainError as e:
        return TightnessReport(case_id, n, k, p_lower, p_upper, m_star, m, "NO_LABELS", (str(e),))

    total = math.comb(n, k)
    ceiling = math.floor(p_upper * total)
    clean = instance.counts(instance.space.o_c)
    others = np.delete(clean, [LABEL_Y, LABEL_Z])
    if (
        clean[LABEL_Y] != math.ceil(p_lower * total)
        or clean[LABEL_Z] != ceiling
        or (others.size and int(others.max()) > ceiling)
    ):
        return TightnessReport(case_id, n, k, p_lower, p_upper, m_star, m, "BOUNDS_MISMATCH")

    # below the break point the bounds must still protect the prediction
    safe = worst_case_safe_level(instance.clean_matrix(), 0, cap=TIGHTNESS_MAX_N)
    if safe < m_star:
        return TightnessReport(case_id, n, k, p_lower, p_upper, m_star, m, "UNSOUND")

    attacked = instance.counts(instance.space.o_cprime)
    best_rival = int(np.delete(attacked, LABEL_Y).max())
    if attacked[LABEL_Y] < best_rival:
        verdict = "BROKEN"
    elif attacked[LABEL_Y] == best_rival:
        verdict = "TIE"
    else:
        verdict = "HELD"
    logger.debug("tightness n=%d k=%d bounds=(%s, %s): case %d %s", n, k, p_lower, p_upper, case_id, verdict)
    return TightnessReport(case_id, n, k, p_lower, p_upper, m_star, m, verdict)


def tightness_grid(
    ns: Sequence[int], ks: Sequence[int], pairs_per_setting: int, seed: int = 0
) -> List[TightnessReport]:
    """
    verify_tightness over random exact bound pairs with p_lower > p_upper > 0
    and p_lower + p_upper <= 1. A zero upper bound leaves no room for labels
    outside y and z, so those pairs are left to single checks.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for n in ns:
        for k in ks:
            if not 1 <= k <= n:
                continue
            total = math.comb(n, k)
            if total < 3:
                continue
            for _ in range(pairs_per_setting):
                upper_count = int(rng.integers(1, (total - 1) // 2 + 1))
                lower_count = int(rng.integers(upper_count + 1, total - upper_count + 1))
                bounds = (Fraction(lower_count, total), Fraction(upper_count, total))
                reports.append(verify_tightness(n, k, *bounds))
    return reports


def write_tightness_report(reports: Sequence[TightnessReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [TIGHTNESS_HEADER] + [r.row() for r in reports]
    path.write_text("\n".join(lines) + "\n")
    return path


def exact_levels(matrix: PredictionMatrix) -> List[int]:
    """Exact certified level per example (ABSTAIN on ties), for oracle comparisons"""
    levels = []
    for t in range(matrix.test_count):
        probs = label_probabilities(matrix, t)
        y = ensemble_predict(probs)
        p_z = max((p for label, p in enumerate(probs.p) if label != y), default=Fraction(0))
        levels.append(exact_level(probs.p[y], p_z, matrix.n, matrix.k))
    return levels
