import copy
import logging
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

import config
from utils import attrs


logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = "ffcil-checkpoint v1"

Gradients = Dict[str, np.ndarray]


class ModelError(Exception):
    def __init__(self, message: str, term: Optional[str] = None):
        super().__init__(message)
        self.term = term


class HeadInit(Enum):
    ZERO = "zero"
    SMALL_UNIFORM = "small_uniform"


def _as_batch(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ModelError("expected inputs of dimension {}, got shape {}".format(dim, x.shape))
    return x


class ClassifierModel:
    """
    Two-layer tanh network with an expanding softmax head. With
    hidden_width == 0 the head sits directly on the inputs.

    Parameters: W1 (h x d), b1 (h), W (C x d_feat), b (C). Row c of W is the
    classifier vector of the class with incremental index c.
    """

    def __init__(self, W1: np.ndarray, b1: np.ndarray, W: np.ndarray, b: np.ndarray, head_bias: bool = True):
        self.W1 = W1
        self.b1 = b1
        self.W = W
        self.b = b
        self.head_bias = head_bias

    def __repr__(self):
        return "<{} dim={} hidden={} classes={} head_bias={}>".format(
            self.__class__.__name__, self.dim, self.hidden_width, self.num_classes, self.head_bias)

    @classmethod
    def create(cls, dim: int, hidden_width: int, random_state: np.random.RandomState,
               head_bias: bool = config.head_bias) -> "ClassifierModel":
        bound = 1.0 / np.sqrt(dim)
        W1 = random_state.uniform(-bound, bound, size=(hidden_width, dim))
        b1 = random_state.uniform(-bound, bound, size=hidden_width)
        d_feat = hidden_width if hidden_width > 0 else dim
        return cls(W1, b1, np.zeros((0, d_feat)), np.zeros(0), head_bias=head_bias)

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {"W": self.W}
        if self.head_bias:
            params["b"] = self.b
        if self.hidden_width > 0:
            params["W1"] = self.W1
            params["b1"] = self.b1
        return params

    def copy(self) -> "ClassifierModel":
        return copy.deepcopy(self)

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = _as_batch(x, self.dim)
        if self.hidden_width == 0:
            return x
        return np.tanh(x @ self.W1.T + self.b1)

    def head(self, features: np.ndarray) -> np.ndarray:
        return features @ self.W.T + self.b

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (logits, probabilities); a single vector gives a batch of one."""
        logits = self.head(self.embed(x))
        return logits, softmax(logits, axis=1)

    def expand_head(self, num_new: int, init: HeadInit = HeadInit.SMALL_UNIFORM,
                    random_state: Optional[np.random.RandomState] = None) -> "ClassifierModel":
        if num_new < 1:
            raise ModelError("num_new must be at least 1, got {}".format(num_new))
        if init == HeadInit.ZERO:
            rows = np.zeros((num_new, self.feature_dim))
        else:
            if random_state is None:
                raise ModelError("small_uniform head init needs a random state")
            rows = random_state.uniform(-config.head_init_range, config.head_init_range,
                                        size=(num_new, self.feature_dim))
        self.W = np.concatenate([self.W, rows])
        self.b = np.concatenate([self.b, np.zeros(num_new)])
        return self


class TeacherSnapshot:
    """Frozen copy of a ClassifierModel; its arrays are read-only."""

    def __init__(self, model: ClassifierModel):
        self._model = model.copy()
        for value in (self._model.W1, self._model.b1, self._model.W, self._model.b):
            value.setflags(write=False)

    def __repr__(self):
        return "<{} K={}>".format(self.__class__.__name__, self.num_classes)

    def __deepcopy__(self, memo):
        # frozen, so state history can share it
        return self

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self._model.forward(x)


def snapshot(model: ClassifierModel) -> TeacherSnapshot:
    return TeacherSnapshot(model)


class AuxHead:
    """(m+1)-way classifier on the shared features; row 0 is the merged "other" class."""

    def __init__(self, A: np.ndarray, a: np.ndarray):
        self.A = A
        self.a = a

    def __repr__(self):
        return "<{} {}>".format(self.__class__.__name__, attrs(self))

    @classmethod
    def create(cls, num_new: int, feature_dim: int, random_state: Optional[np.random.RandomState],
               init: HeadInit = HeadInit.SMALL_UNIFORM) -> "AuxHead":
        if init == HeadInit.ZERO:
            A = np.zeros((num_new + 1, feature_dim))
        else:
            A = random_state.uniform(-config.head_init_range, config.head_init_range,
                                     size=(num_new + 1, feature_dim))
        return cls(A, np.zeros(num_new + 1))

    @property
    def num_new(self) -> int:
        return self.A.shape[0] - 1

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"A": self.A, "a": self.a}

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.A.T + self.a


def backward(model: ClassifierModel, x: np.ndarray, terms: Sequence, aux_head: Optional[AuxHead] = None
             ) -> Tuple[Gradients, Gradients]:
    """
    Analytic gradients of sum(coefficient * term.value) over `terms`, a
    sequence of (coefficient, AggregatedLoss). Each term carries the gradient
    of its value w.r.t. the logits of its head ("main" or "aux"); this
    backpropagates the weighted sum through the heads and the tanh layer.
    Returns (model gradients, aux-head gradients).
    """
    x = _as_batch(x, model.dim)
    features = model.embed(x)
    g_main = np.zeros((len(x), model.num_classes))
    g_aux = None if aux_head is None else np.zeros((len(x), aux_head.A.shape[0]))

    for coefficient, term in terms:
        if not np.isfinite(term.value):
            raise ModelError("non-finite loss in term {}".format(term.name), term=term.name)
        if term.head == "aux":
            if g_aux is None:
                raise ModelError("term {} targets the auxiliary head but none is attached".format(term.name),
                                 term=term.name)
            g_aux += coefficient * term.logit_grad
        else:
            g_main += coefficient * term.logit_grad

    grads = {"W": g_main.T @ features}
    if model.head_bias:
        grads["b"] = g_main.sum(axis=0)
    d_features = g_main @ model.W

    aux_grads = {}
    if aux_head is not None:
        aux_grads = {"A": g_aux.T @ features, "a": g_aux.sum(axis=0)}
        d_features = d_features + g_aux @ aux_head.A

    if model.hidden_width > 0:
        d_pre = d_features * (1.0 - features ** 2)
        grads["W1"] = d_pre.T @ x
        grads["b1"] = d_pre.sum(axis=0)
    return grads, aux_grads


class SGDOptimizer:
    """
    Mini-batch SGD with classical momentum and L2 weight decay:
    v <- momentum * v + (g + weight_decay * theta); theta <- theta - lr * v.
    Velocity buffers are keyed by parameter name; a new optimizer is created
    for every incremental step since the head shape changes.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ModelError("learning rate must be non-negative, got {}".format(lr))
        if not 0 <= momentum < 1:
            raise ModelError("momentum must be in [0, 1), got {}".format(momentum))
        if weight_decay < 0:
            raise ModelError("weight decay must be non-negative, got {}".format(weight_decay))
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[Tuple[int, str], np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Gradients, group: int = 0):
        for name, g in grads.items():
            theta = params[name]
            if theta.shape != g.shape:
                raise ModelError("gradient for {} has shape {}, parameter has {}".format(name, g.shape, theta.shape))
            d = g + self.weight_decay * theta if self.weight_decay else g
            key = (group, name)
            if self.momentum:
                v = self.velocity.get(key)
                v = d.copy() if v is None else self.momentum * v + d
                self.velocity[key] = v
                d = v
            theta -= self.lr * d


def sgd_step(model: ClassifierModel, grads: Gradients, lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, optimizer: Optional[SGDOptimizer] = None) -> ClassifierModel:
    """Applies one update in place; pass the same optimizer across calls to carry momentum."""
    if optimizer is None:
        optimizer = SGDOptimizer(lr, momentum, weight_decay)
    optimizer.step(model.parameters(), grads)
    return model


def save_checkpoint(model: ClassifierModel, path: str):
    with open(path, "w") as f:
        f.write(CHECKPOINT_HEADER + "\n")
        f.write("head_bias {}\n".format(int(model.head_bias)))
        for name in ("W1", "b1", "W", "b"):
            value = np.atleast_2d(getattr(model, name)) if name in ("W1", "W") else getattr(model, name)
            shape = value.shape
            f.write("{} {}\n".format(name, " ".join(str(s) for s in shape)))
            f.write(" ".join(repr(float(v)) for v in value.ravel()) + "\n")


def load_checkpoint(path: str) -> ClassifierModel:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ModelError("{}: not a {} file".format(path, CHECKPOINT_HEADER))
    head_bias = bool(int(lines[1].split()[1]))
    arrays = {}
    for i in range(2, len(lines), 2):
        fields = lines[i].split()
        name, shape = fields[0], tuple(int(s) for s in fields[1:])
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        arrays[name] = values.reshape(shape)
    return ClassifierModel(arrays["W1"], arrays["b1"], arrays["W"], arrays["b"], head_bias=head_bias)
