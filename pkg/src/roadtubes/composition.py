"""Duplex and event scores from individual-label scores."""

from __future__ import annotations

import enum
from typing import Callable, Optional, Tuple

import numpy as np

from .detections import Detection
from .schema import CompositeVocab


class CompositionMode(str, enum.Enum):
    JOINT = "joint"
    PRODUCT = "product"


class MissingJointScores(ValueError):
    pass


def _index_arrays(cv: CompositeVocab) -> Tuple[np.ndarray, np.ndarray]:
    duplex = np.asarray(cv.duplex, dtype=np.intp).reshape(-1, 2)
    event = np.asarray(cv.event, dtype=np.intp).reshape(-1, 3)
    return duplex, event


def compose_scores(
    det: Detection, cv: CompositeVocab, mode: CompositionMode = CompositionMode.PRODUCT
) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(duplex, event)`` score vectors for one detection.

    Product mode multiplies the marginal scores of each constituent label
    (raw scores stand in for probabilities, uncalibrated). Joint mode
    passes the detection's own joint vectors through.
    """
    mode = CompositionMode(mode)
    if mode is CompositionMode.JOINT:
        if det.duplex is None or det.event is None:
            raise MissingJointScores("joint composition needs duplex and event vectors on every detection")
        return np.asarray(det.duplex, dtype=float), np.asarray(det.event, dtype=float)
    return product_of_marginals(det.agent, det.action, det.loc, cv)


def product_of_marginals(
    agent,
    action,
    loc,
    cv: CompositeVocab,
    calibrate: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized product of marginals.

    ``calibrate`` maps a raw score array to calibrated ones before
    multiplication; identity when omitted.
    """
    agent = np.asarray(agent, dtype=float)
    action = np.asarray(action, dtype=float)
    loc = np.asarray(loc, dtype=float)
    if calibrate is not None:
        agent, action, loc = calibrate(agent), calibrate(action), calibrate(loc)
    d_idx, e_idx = _index_arrays(cv)
    duplex = agent[d_idx[:, 0]] * action[d_idx[:, 1]]
    event = agent[e_idx[:, 0]] * action[e_idx[:, 1]] * loc[e_idx[:, 2]]
    return duplex, event
