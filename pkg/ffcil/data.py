import copy
import logging
from enum import Enum
from typing import Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from stream_protocol import IncrementSchedule
from utils import new_random_state


logger = logging.getLogger(__name__)


class DataError(Exception):
    pass


class LabeledExample(NamedTuple):
    features: np.ndarray
    label: int


class StepData(NamedTuple):
    """
    A block of examples stored column-wise: features is (n, d), labels is (n,).
    Use size for the number of examples; len() is the tuple length.
    """
    features: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)

    def examples(self) -> Iterator[LabeledExample]:
        for x, y in zip(self.features, self.labels):
            yield LabeledExample(x, int(y))

    def subset(self, mask) -> "StepData":
        return StepData(self.features[mask], self.labels[mask])

    @staticmethod
    def concatenate(parts: Iterable["StepData"], dim: int) -> "StepData":
        parts = [p for p in parts if p.size]
        if not parts:
            return StepData(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
        return StepData(np.concatenate([p.features for p in parts]),
                        np.concatenate([p.labels for p in parts]))


class DatasetSource(NamedTuple):
    train: StepData
    test: StepData
    num_classes: int
    dim: int


class DatasetSplit(NamedTuple):
    train: List[StepData]
    test: List[StepData]
    dim: int
    schedule: IncrementSchedule

    def cumulative_test(self, step: int) -> StepData:
        return StepData.concatenate(self.test[:step + 1], self.dim)


def _class_directions(num_classes: int, dim: int, random_state: np.random.RandomState) -> np.ndarray:
    gaussian = random_state.normal(size=(num_classes, dim))
    if num_classes <= dim:
        q, _ = np.linalg.qr(gaussian.T)
        return q.T[:num_classes]
    return gaussian / np.linalg.norm(gaussian, axis=1, keepdims=True)


def make_gaussian_dataset(num_classes: int, dim: int, train_per_class: int, test_per_class: int,
                          separation: float, seed: int) -> DatasetSource:
    """
    Class c is an isotropic unit-variance Gaussian centred at separation * u_c,
    where u_c is a seeded random unit direction (orthonormal when
    num_classes <= dim). Samples are stored class by class.
    """
    if min(num_classes, train_per_class, test_per_class) < 1:
        raise DataError("class and sample counts must be positive")
    if dim < 2:
        raise DataError("dim must be at least 2, got {}".format(dim))
    if separation < 0:
        raise DataError("separation must be non-negative, got {}".format(separation))

    means = separation * _class_directions(num_classes, dim, new_random_state(seed, "class_means"))
    noise_state = new_random_state(seed, "samples")

    def draw(per_class):
        features = np.concatenate([means[c] + noise_state.normal(size=(per_class, dim))
                                   for c in range(num_classes)])
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
        return StepData(features, labels)

    train = draw(train_per_class)
    test = draw(test_per_class)
    return DatasetSource(train=train, test=test, num_classes=num_classes, dim=dim)


def load_feature_matrix(path: str, test_fraction: float, seed: int) -> DatasetSource:
    """
    Reads the plain-text matrix format: a header line `d N`, then N lines of
    `label f_1 ... f_d`. Each class is split into train/test by a seeded draw
    keeping at least one example on each side.
    """
    with open(path) as f:
        header = f.readline().split()
    if len(header) != 2:
        raise DataError("{}: header must be 'd N', got {!r}".format(path, " ".join(header)))
    dim, n = int(header[0]), int(header[1])
    df = pd.read_csv(path, sep=r"\s+", header=None, skiprows=1)
    if df.shape != (n, dim + 1):
        raise DataError("{}: expected {} rows of {} columns, found {}".format(path, n, dim + 1, df.shape))
    labels = df.iloc[:, 0].to_numpy(dtype=np.int64)
    features = df.iloc[:, 1:].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DataError("{}: non-finite feature values".format(path))
    num_classes = int(labels.max()) + 1
    if labels.min() < 0 or set(np.unique(labels)) != set(range(num_classes)):
        raise DataError("{}: labels must cover 0..{} without gaps".format(path, num_classes - 1))
    if not 0 < test_fraction < 1:
        raise DataError("test_fraction must be in (0, 1), got {}".format(test_fraction))

    random_state = new_random_state(seed, "import_split")
    is_test = np.zeros(n, dtype=bool)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise DataError("{}: class {} needs at least 2 examples".format(path, c))
        n_test = min(max(1, int(round(test_fraction * len(idx)))), len(idx) - 1)
        is_test[random_state.permutation(idx)[:n_test]] = True
    return DatasetSource(train=StepData(features[~is_test], labels[~is_test]),
                         test=StepData(features[is_test], labels[is_test]),
                         num_classes=num_classes, dim=dim)


def write_feature_matrix(path: str, data: StepData):
    n, dim = data.features.shape
    with open(path, "w") as f:
        f.write("{} {}\n".format(dim, n))
        for example in data.examples():
            f.write("{} {}\n".format(example.label, " ".join(repr(float(v)) for v in example.features)))


def split_by_schedule(source: DatasetSource, schedule: IncrementSchedule) -> DatasetSplit:
    if schedule.total_classes != source.num_classes:
        raise DataError("schedule covers {} classes but the dataset has {}".format(
            schedule.total_classes, source.num_classes))
    train, test = [], []
    for labels in schedule.class_sets:
        train.append(source.train.subset(np.isin(source.train.labels, labels)))
        test.append(source.test.subset(np.isin(source.test.labels, labels)))
    return DatasetSplit(train=train, test=test, dim=source.dim, schedule=schedule)


class Selection(Enum):
    RANDOM = "random"
    HERDING = "herding"


def herding_order(vectors: np.ndarray, m: int) -> List[int]:
    """
    Greedy herding: at every pick choose the remaining example whose addition
    brings the running mean closest to the class mean. Returns indices in pick
    order, so any prefix is itself a herding selection.
    """
    class_mean = vectors.mean(axis=0)
    remaining = list(range(len(vectors)))
    selected: List[int] = []
    running_sum = np.zeros(vectors.shape[1])
    for k in range(1, min(m, len(vectors)) + 1):
        candidates = vectors[remaining]
        mu_p = (candidates + running_sum) / k
        i = int(np.argmin(np.sqrt(np.sum((class_mean - mu_p) ** 2, axis=1))))
        selected.append(remaining[i])
        running_sum += candidates[i]
        del remaining[i]
    return selected


class ReplayBuffer:
    """
    Per-class exemplar store under a global budget. Exemplars of each class are
    kept in priority order (herding pick order, or a seeded random order), so
    shrinking a quota keeps the best prefix.
    """

    def __init__(self, budget: int, selection: Selection = Selection.HERDING, seed: int = 0):
        if budget < 0:
            raise DataError("buffer budget must be non-negative, got {}".format(budget))
        self.budget = budget
        self.selection = selection
        self.seed = seed
        self.store: Dict[int, np.ndarray] = {}
        self._updates = 0

    def __repr__(self):
        return "<{} budget={} classes={} stored={}>".format(
            self.__class__.__name__, self.budget, len(self.store), len(self))

    def __len__(self):
        return sum(len(v) for v in self.store.values())

    @property
    def classes_seen(self) -> List[int]:
        return sorted(self.store)

    def copy(self) -> "ReplayBuffer":
        return copy.deepcopy(self)

    def quota(self, classes_seen: int) -> int:
        return self.budget // classes_seen

    def update(self, step_train: StepData, new_classes: Iterable[int],
               feature_map: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> "ReplayBuffer":
        new_classes = sorted(set(int(c) for c in new_classes) - set(self.store))
        classes_seen = len(self.store) + len(new_classes)
        if classes_seen == 0:
            return self
        if self.budget < classes_seen:
            raise DataError("budget {} cannot hold one exemplar for each of {} classes".format(
                self.budget, classes_seen))
        m = self.quota(classes_seen)

        logger.debug("Reducing exemplars...({} per classes)".format(m))
        for c in self.store:
            self.store[c] = self.store[c][:m]

        logger.debug("Constructing exemplars...({} per classes, {})".format(m, self.selection.value))
        random_state = new_random_state(self.seed, "buffer", self._updates)
        for c in new_classes:
            features = step_train.features[step_train.labels == c]
            if len(features) == 0:
                raise DataError("class {} has no training examples in this step".format(c))
            if self.selection == Selection.HERDING:
                vectors = features if feature_map is None else feature_map(features)
                order = herding_order(np.asarray(vectors, dtype=np.float64), m)
            else:
                order = random_state.permutation(len(features))[:m]
            self.store[c] = features[np.asarray(order, dtype=np.int64)]
        self._updates += 1
        return self

    def as_step_data(self, dim: int) -> StepData:
        return StepData.concatenate(
            (StepData(self.store[c], np.full(len(self.store[c]), c, dtype=np.int64))
             for c in self.classes_seen), dim)


def sample_batches(buf: ReplayBuffer, current: StepData, batch_size: int,
                   random_state: np.random.RandomState) -> Iterator[StepData]:
    """
    One epoch over the concatenation of current-step data and every buffered
    exemplar, shuffled; the last batch may be smaller.
    """
    if current.size == 0:
        raise DataError("current step data is empty")
    if batch_size < 1:
        raise DataError("batch_size must be positive, got {}".format(batch_size))
    pool = StepData.concatenate([current, buf.as_step_data(current.features.shape[1])],
                                current.features.shape[1])
    order = random_state.permutation(pool.size)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield StepData(pool.features[idx], pool.labels[idx])
