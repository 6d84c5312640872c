import logging
import math
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from utils import new_permutation_func, new_randint_func


logger = logging.getLogger(__name__)


class ScheduleKind(Enum):
    EQUAL = "equal"
    ASCENDING = "ascending"
    DESCENDING = "descending"
    FLUCTUATING = "fluctuating"
    EXTREME = "extreme"
    EXPLICIT = "explicit"


class ScheduleError(Exception):
    """
    Raised when a ScheduleSpec cannot produce a schedule. `bound` names the
    violated constraint, e.g. "min_per_step" or "total_classes".
    """

    def __init__(self, bound: str, message: str):
        super().__init__("{}: {}".format(bound, message))
        self.bound = bound


class ScheduleSpec(NamedTuple):
    kind: ScheduleKind
    total_classes: int
    num_steps: int
    min_per_step: int = config.min_per_step
    max_per_step: Optional[int] = None  # defaults to total_classes
    explicit_counts: Optional[Tuple[int, ...]] = None
    seed: int = 0

    @property
    def upper(self) -> int:
        return self.total_classes if self.max_per_step is None else self.max_per_step

    @property
    def fluctuation_gap(self) -> int:
        """Smallest jump between some pair of adjacent steps of a fluctuating schedule."""
        return math.ceil((self.upper - self.min_per_step) / 2)

    def check(self):
        if self.total_classes < 1:
            raise ScheduleError("total_classes", "must be positive, got {}".format(self.total_classes))
        if self.num_steps < 1:
            raise ScheduleError("num_steps", "must be positive, got {}".format(self.num_steps))
        if self.min_per_step < 1:
            raise ScheduleError("min_per_step", "must be >= 1, got {}".format(self.min_per_step))
        if self.upper < self.min_per_step:
            raise ScheduleError("max_per_step", "{} is below min_per_step {}".format(
                self.upper, self.min_per_step))
        if not 0 <= self.seed < 2**64:
            raise ScheduleError("seed", "must be an unsigned 64-bit integer, got {}".format(self.seed))

        if self.kind == ScheduleKind.EXPLICIT:
            if self.explicit_counts is None:
                raise ScheduleError("explicit_counts", "required when kind is explicit")
            if len(self.explicit_counts) != self.num_steps:
                raise ScheduleError("num_steps", "explicit_counts has {} entries but num_steps is {}".format(
                    len(self.explicit_counts), self.num_steps))
            for t, c in enumerate(self.explicit_counts):
                if not self.min_per_step <= c <= self.upper:
                    raise ScheduleError("explicit_counts", "count {} at step {} outside [{}, {}]".format(
                        c, t, self.min_per_step, self.upper))
            if sum(self.explicit_counts) != self.total_classes:
                raise ScheduleError("explicit_counts", "counts sum to {} but total_classes is {}".format(
                    sum(self.explicit_counts), self.total_classes))
            return

        if self.num_steps * self.min_per_step > self.total_classes:
            raise ScheduleError("min_per_step", "{} steps x {} classes exceeds total_classes {}".format(
                self.num_steps, self.min_per_step, self.total_classes))
        if self.total_classes > self.num_steps * self.upper:
            raise ScheduleError("max_per_step", "{} steps x {} classes cannot cover total_classes {}".format(
                self.num_steps, self.upper, self.total_classes))
        if self.kind == ScheduleKind.EXTREME and self.num_steps > 1:
            tail_min = (self.num_steps - 1) * min(config.extreme_tail)
            if self.total_classes - tail_min < 1:
                raise ScheduleError("total_classes", "extreme schedule needs more than {} classes for {} steps".format(
                    tail_min, self.num_steps))
        if self.kind == ScheduleKind.FLUCTUATING and self.num_steps > 1:
            gap = self.fluctuation_gap
            if self.num_steps * self.min_per_step + gap > self.total_classes:
                raise ScheduleError("min_per_step", "{} steps of at least {} classes with one jump of {} exceed "
                                    "total_classes {}".format(self.num_steps, self.min_per_step, gap,
                                                              self.total_classes))
            if self.total_classes > self.num_steps * self.upper - gap:
                raise ScheduleError("max_per_step", "{} steps of at most {} classes with one jump of {} cannot "
                                    "cover total_classes {}".format(self.num_steps, self.upper, gap,
                                                                    self.total_classes))


class IncrementSchedule(NamedTuple):
    counts: Tuple[int, ...]
    class_sets: Tuple[Tuple[int, ...], ...]

    @property
    def num_steps(self) -> int:
        return len(self.counts)

    @property
    def total_classes(self) -> int:
        return sum(self.counts)

    def offsets(self) -> List[int]:
        """Number of classes known before each step (K for that step)."""
        return [int(x) for x in np.concatenate(([0], np.cumsum(self.counts)[:-1]))]

    def arrival_order(self) -> np.ndarray:
        """Original labels in the order they arrive; position = incremental index."""
        return np.array([c for step in self.class_sets for c in step], dtype=np.int64)

    def to_arrival(self, labels) -> np.ndarray:
        """Maps original dataset labels to incremental (arrival-order) indices."""
        order = self.arrival_order()
        index = np.empty(len(order), dtype=np.int64)
        index[order] = np.arange(len(order))
        return index[np.asarray(labels, dtype=np.int64)]


class ScheduleValidation(NamedTuple):
    ok: bool
    violation: Optional[str] = None
    detail: str = ""


def _largest_remainder(ideal: np.ndarray, total: int) -> List[int]:
    counts = np.floor(ideal).astype(int)
    fractions = ideal - counts
    leftover = total - counts.sum()
    # ties go to the later step so ascending sequences stay non-decreasing
    order = sorted(range(len(ideal)), key=lambda t: (-fractions[t], -t))
    for t in order[:max(leftover, 0)]:
        counts[t] += 1
    return [int(c) for c in counts]


def _fill_ascending(counts: List[int], total: int, upper: int) -> List[int]:
    """Raises counts from the last step backwards until they sum to total."""
    counts = list(counts)
    while sum(counts) < total:
        for t in reversed(range(len(counts))):
            if counts[t] < upper and (t == len(counts) - 1 or counts[t] < counts[t + 1]):
                counts[t] += 1
                break
        else:
            raise ScheduleError("max_per_step", "cannot reach {} classes with at most {} per step".format(
                total, upper))
    return counts


def _ascending_counts(spec: ScheduleSpec) -> List[int]:
    T, lo, hi, N = spec.num_steps, spec.min_per_step, spec.upper, spec.total_classes
    if T == 1:
        return [N]
    # arithmetic progression starting at min_per_step with the given total
    step = 2.0 * (N - T * lo) / (T * (T - 1))
    if lo + step * (T - 1) > hi:
        step = (hi - lo) / (T - 1)
    ideal = lo + step * np.arange(T)
    target = min(N, int(np.floor(ideal.sum() + 1e-9)))
    counts = _largest_remainder(ideal, target)
    return _fill_ascending(counts, N, hi)


def _equal_counts(spec: ScheduleSpec) -> List[int]:
    base, remainder = divmod(spec.total_classes, spec.num_steps)
    return [base + 1 if t < remainder else base for t in range(spec.num_steps)]


def _repair_sum(counts: np.ndarray, total: int, lo: int, hi: int, randint_func) -> np.ndarray:
    counts = counts.copy()
    while counts.sum() != total:
        if counts.sum() < total:
            movable = np.flatnonzero(counts < hi)
            delta = 1
        else:
            movable = np.flatnonzero(counts > lo)
            delta = -1
        counts[movable[randint_func(0, len(movable) - 1)]] += delta
    return counts


def _constructed_fluctuation(T: int, lo: int, hi: int, N: int, gap: int, randint_func) -> List[int]:
    """Builds counts around one adjacent pair that differs by gap; ScheduleSpec.check guarantees it fits."""
    counts = [lo] * T
    p = int(randint_func(0, T - 2))
    low, high = (p, p + 1) if randint_func(0, 1) else (p + 1, p)
    counts[high] = lo + gap
    remaining = N - sum(counts)
    for t in [t for t in range(T) if t not in (low, high)] + [high]:
        add = min(hi - counts[t], remaining)
        counts[t] += add
        remaining -= add
    counts[low] += remaining
    return counts


def _fluctuating_counts(spec: ScheduleSpec) -> List[int]:
    T, lo, hi, N = spec.num_steps, spec.min_per_step, spec.upper, spec.total_classes
    randint_func = new_randint_func(spec.seed, "counts")
    gap = spec.fluctuation_gap
    for _ in range(config.fluctuation_attempts):
        counts = _repair_sum(randint_func(lo, hi, size=T), N, lo, hi, randint_func)
        if T == 1 or np.max(np.abs(np.diff(counts))) >= gap:
            return [int(c) for c in counts]
    logger.debug("No random fluctuating schedule in {} draws, constructing one".format(config.fluctuation_attempts))
    return _constructed_fluctuation(T, lo, hi, N, gap, randint_func)


def _extreme_counts(spec: ScheduleSpec) -> List[int]:
    randint_func = new_randint_func(spec.seed, "counts")
    low, high = config.extreme_tail
    tail = [int(c) for c in randint_func(low, high, size=spec.num_steps - 1)]
    # the first step keeps at least one class
    while spec.total_classes - sum(tail) < 1:
        larger = [t for t, c in enumerate(tail) if c > low]
        tail[larger[int(randint_func(0, len(larger) - 1))]] -= 1
    return [spec.total_classes - sum(tail)] + tail


def generate_schedule(spec: ScheduleSpec) -> IncrementSchedule:
    spec.check()
    if spec.kind == ScheduleKind.EQUAL:
        counts = _equal_counts(spec)
    elif spec.kind == ScheduleKind.ASCENDING:
        counts = _ascending_counts(spec)
    elif spec.kind == ScheduleKind.DESCENDING:
        counts = list(reversed(_ascending_counts(spec)))
    elif spec.kind == ScheduleKind.FLUCTUATING:
        counts = _fluctuating_counts(spec)
    elif spec.kind == ScheduleKind.EXTREME:
        counts = _extreme_counts(spec)
    else:
        counts = [int(c) for c in spec.explicit_counts]

    # one global permutation so counts and identities share a single seed
    permutation = new_permutation_func(spec.seed, "class_order")(spec.total_classes)
    bounds = np.cumsum([0] + counts)
    class_sets = tuple(tuple(int(c) for c in permutation[bounds[t]:bounds[t + 1]])
                       for t in range(len(counts)))
    logger.debug("Generated {} schedule {}".format(spec.kind.value, counts))
    return IncrementSchedule(counts=tuple(counts), class_sets=class_sets)


def validate_schedule(s: IncrementSchedule, expected_total: int) -> ScheduleValidation:
    for t, c in enumerate(s.counts):
        if c < 1:
            return ScheduleValidation(False, "free-flow", "step {} introduces {} classes".format(t, c))
    if len(s.class_sets) != len(s.counts):
        return ScheduleValidation(False, "cardinality", "{} counts but {} class sets".format(
            len(s.counts), len(s.class_sets)))
    for t, (c, labels) in enumerate(zip(s.counts, s.class_sets)):
        if len(set(labels)) != c or len(labels) != c:
            return ScheduleValidation(False, "cardinality", "step {} lists {} distinct labels for count {}".format(
                t, len(set(labels)), c))
    first_seen = {}
    for t, labels in enumerate(s.class_sets):
        for label in labels:
            if label in first_seen:
                return ScheduleValidation(False, "non-repetition", "label {} appears in steps {} and {}".format(
                    label, first_seen[label], t))
            first_seen[label] = t
    total = sum(s.counts)
    if set(first_seen) != set(range(total)):
        missing = sorted(set(range(total)) - set(first_seen))
        extra = sorted(set(first_seen) - set(range(total)))
        return ScheduleValidation(False, "coverage", "missing {} unexpected {}".format(missing, extra))
    if total != expected_total:
        return ScheduleValidation(False, "total", "counts sum to {} but {} expected".format(total, expected_total))
    return ScheduleValidation(True)


def schedule_to_text(s: IncrementSchedule) -> str:
    lines = ["steps {}".format(s.num_steps)]
    for t, (c, labels) in enumerate(zip(s.counts, s.class_sets)):
        lines.append("step {} {}: {}".format(t, c, " ".join(str(x) for x in labels)))
    return "\n".join(lines) + "\n"


def schedule_from_text(text: str) -> IncrementSchedule:
    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if not lines or not lines[0].startswith("steps "):
        raise ScheduleError("format", "schedule block must start with 'steps <T>'")
    num_steps = int(lines[0].split()[1])
    if len(lines) - 1 != num_steps:
        raise ScheduleError("format", "header announces {} steps but {} step lines follow".format(
            num_steps, len(lines) - 1))
    counts, class_sets = [], []
    for t, line in enumerate(lines[1:]):
        head, _, labels = line.partition(":")
        fields = head.split()
        if len(fields) != 3 or fields[0] != "step" or int(fields[1]) != t:
            raise ScheduleError("format", "bad step line {!r}".format(line))
        counts.append(int(fields[2]))
        class_sets.append(tuple(int(x) for x in labels.split()))
    return IncrementSchedule(counts=tuple(counts), class_sets=tuple(class_sets))


def schedule_spec(kind, total_classes: int, num_steps: int, min_per_step: int = config.min_per_step,
                  max_per_step: Optional[int] = None, explicit_counts: Optional[Sequence[int]] = None,
                  seed: int = 0) -> ScheduleSpec:
    """Convenience constructor accepting the kind by name."""
    if isinstance(kind, str):
        kind = ScheduleKind(kind)
    return ScheduleSpec(kind=kind, total_classes=total_classes, num_steps=num_steps,
                        min_per_step=min_per_step, max_per_step=max_per_step,
                        explicit_counts=None if explicit_counts is None else tuple(explicit_counts),
                        seed=seed)
