"""Accuracy reward, pairwise IoU and the redundancy penalty on zoom boxes."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import TYPE_CHECKING, Sequence

from .geometry import BBox, intersection_area
from .synthenv import Scene, verify_answer

if TYPE_CHECKING:
    from .rollout import Trajectory


class FewerThanTwoBoxes(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    epsilon: float = 0.5
    lam: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    gamma_rdn: float
    total: float
    T: int
    pairwise_ious: tuple[tuple[int, int, float], ...] = field(default=())
    penalty_active: bool = False

    def to_dict(self) -> dict:
        return {
            "r_acc": self.r_acc,
            "gamma_rdn": self.gamma_rdn,
            "total": self.total,
            "T": self.T,
            "penalty_active": self.penalty_active,
            "pairwise_ious": [list(p) for p in self.pairwise_ious],
        }


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    assert union > 0.0
    return inter / union


def pairwise_ious(boxes: Sequence[BBox | None]) -> list[tuple[int, int, float]]:
    """IoU for every pair of present boxes, keyed by 1-based turn positions."""
    present = [(t, b) for t, b in enumerate(boxes, start=1) if b is not None]
    return [(t, u, iou(a, b)) for (t, a), (u, b) in combinations(present, 2)]


def redundancy_penalty(boxes: Sequence[BBox | None], cfg: RewardConfig = RewardConfig()) -> float:
    """Negative overlap charge ``-(lam / C(T,2)) * sum max(0, IoU - eps)`` over present boxes."""
    T = sum(b is not None for b in boxes)
    if T < 2:
        raise FewerThanTwoBoxes(f"need at least two boxes, got {T}")
    excess = sum(max(0.0, v - cfg.epsilon) for _, _, v in pairwise_ious(boxes))
    return -cfg.lam / comb(T, 2) * excess + 0.0  # normalizes -0.0


def accuracy_reward(traj: Trajectory, scene: Scene) -> int:
    if traj.termination != "answered" or traj.final_answer is None:
        return 0
    return int(verify_answer(scene, traj.qa, traj.final_answer))


def total_reward(traj: Trajectory, scene: Scene, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    boxes = traj.boxes
    r_acc = accuracy_reward(traj, scene)
    return score_boxes(r_acc, boxes, cfg)


def score_boxes(r_acc: int, boxes: Sequence[BBox | None], cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Gated total reward from the accuracy bit and the per-turn boxes."""
    T = sum(b is not None for b in boxes)
    ious = tuple(pairwise_ious(boxes))
    active = r_acc == 0 and T > 1
    gamma = redundancy_penalty(boxes, cfg) if active else 0.0
    return RewardBreakdown(
        r_acc=r_acc,
        gamma_rdn=gamma,
        total=r_acc + gamma,
        T=T,
        pairwise_ious=ious,
        penalty_active=active and gamma < 0.0,
    )
