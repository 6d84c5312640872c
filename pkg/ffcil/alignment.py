import logging
import math
from enum import Enum
from typing import NamedTuple, Tuple

import numpy as np

import config
from model import ClassifierModel


logger = logging.getLogger(__name__)


class AlignmentError(Exception):
    pass


class AlignmentMode(Enum):
    NONE = "none"
    WA = "wa"
    DIWA = "diwa"


class AlignmentConfig(NamedTuple):
    mode: AlignmentMode = AlignmentMode.NONE
    eta_min: float = config.eta_min
    tau: float = config.tau

    def check(self):
        if not 0.0 <= self.eta_min <= 1.0:
            raise AlignmentError("eta_min must be in [0, 1], got {}".format(self.eta_min))
        if not self.tau > 0:
            raise AlignmentError("tau must be positive, got {}".format(self.tau))


class AlignmentOutcome(NamedTuple):
    gamma: float
    eta: float
    mu_old: float
    mu_new: float


def row_norm_means(W: np.ndarray, K: int, C_t: int) -> Tuple[float, float]:
    if K < 1 or C_t < 1:
        raise AlignmentError("need at least one old and one new class, got K={} C_t={}".format(K, C_t))
    if W.shape[0] != K + C_t:
        raise AlignmentError("head has {} rows, expected K + C_t = {}".format(W.shape[0], K + C_t))
    norms = np.linalg.norm(W, axis=1)
    return float(norms[:K].mean()), float(norms[K:].mean())


def wa_scale(mu_old: float, mu_new: float) -> float:
    if mu_new <= 0:
        raise AlignmentError("new-class rows have zero norm; a zero-initialised head cannot be aligned")
    return mu_old / mu_new


def diwa_eta(C_t: int, eta_min: float, tau: float) -> float:
    """Intervention factor: eta_min for a single new class, approaching 1 as C_t grows."""
    # written around eta_min so C_t = 1 returns it exactly
    return eta_min + (1.0 - eta_min) * (1.0 - math.exp(-(C_t - 1) / tau))


def diwa_scale(mu_old: float, mu_new: float, eta: float) -> float:
    return (1.0 - eta) + eta * wa_scale(mu_old, mu_new)


def apply_alignment(model: ClassifierModel, K: int, C_t: int, alignment: AlignmentConfig) -> AlignmentOutcome:
    """
    Rescales the last C_t head rows in place. Biases, old rows and the hidden
    layer are untouched.
    """
    if alignment.mode == AlignmentMode.NONE:
        return AlignmentOutcome(gamma=1.0, eta=0.0, mu_old=math.nan, mu_new=math.nan)
    alignment.check()
    mu_old, mu_new = row_norm_means(model.W, K, C_t)
    if alignment.mode == AlignmentMode.WA:
        eta = 1.0
        gamma = wa_scale(mu_old, mu_new)
    else:
        eta = diwa_eta(C_t, alignment.eta_min, alignment.tau)
        gamma = diwa_scale(mu_old, mu_new, eta)
    model.W[K:] = gamma * model.W[K:]
    logger.debug("Aligned {} new rows: mu_old={:.4f} mu_new={:.4f} eta={:.4f} gamma={:.4f}".format(
        C_t, mu_old, mu_new, eta, gamma))
    return AlignmentOutcome(gamma=gamma, eta=eta, mu_old=mu_old, mu_new=mu_new)
