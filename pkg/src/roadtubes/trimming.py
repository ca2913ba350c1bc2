"""Temporal trimming of tubes with a two-state label-consistency DP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

from .linker import ActiveTube
from .schema import label_runs

OUT, IN = 0, 1


@dataclass(frozen=True)
class TrimConfig:
    theta: float = 0.5
    alpha: float = 1.0
    enabled: bool = False

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    def to_json(self) -> Dict[str, Any]:
        return {"enabled": self.enabled, "theta": self.theta, "alpha": self.alpha}

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "TrimConfig":
        return cls(**{k: obj[k] for k in ("theta", "alpha", "enabled") if k in obj})


def labeling_objective(scores: Sequence[float], labels: Sequence[int], theta: float, alpha: float) -> float:
    unary = sum(s - theta for s, l in zip(scores, labels) if l == IN)
    switches = sum(1 for a, b in zip(labels, labels[1:]) if a != b)
    return unary - alpha * switches


def viterbi_labels(scores: Sequence[float], theta: float, alpha: float) -> List[int]:
    """Optimal in/out labeling of a score sequence.

    Maximizes ``sum(score - theta over in-frames) - alpha * #switches``.
    Equal objectives prefer more out-frames, then fewer switches; this is
    done by carrying ``(objective, n_out, -n_switches)`` tuples through
    the recursion and comparing them lexicographically.
    """
    n = len(scores)
    if n == 0:
        return []

    def unary(t: int, state: int) -> Tuple[float, int, int]:
        return (scores[t] - theta, 0, 0) if state == IN else (0.0, 1, 0)

    def add(a, b):
        return (a[0] + b[0], a[1] + b[1], a[2] + b[2])

    switch = (-alpha, 0, -1)
    value = [unary(0, OUT), unary(0, IN)]
    back: List[List[int]] = []
    for t in range(1, n):
        new_value, pointers = [], []
        for s in (OUT, IN):
            stay = value[s]
            move = add(value[1 - s], switch)
            prev = s if stay >= move else 1 - s
            new_value.append(add(stay if prev == s else move, unary(t, s)))
            pointers.append(prev)
        value = new_value
        back.append(pointers)

    state = OUT if value[OUT] >= value[IN] else IN
    labels = [state]
    for pointers in reversed(back):
        state = pointers[state]
        labels.append(state)
    labels.reverse()
    return labels


def trim_tube(tube: ActiveTube, cfg: TrimConfig) -> List[ActiveTube]:
    """Split a finalized tube into its high-agentness segments.

    Segments keep the parent's class-score statistics. Disabled trimming
    returns the tube unchanged.
    """
    if not cfg.enabled:
        return [tube]
    labels = viterbi_labels(tube.agentness, cfg.theta, cfg.alpha)
    return [tube.segment(lo, hi) for lo, hi in label_runs([l == IN for l in labels])]
