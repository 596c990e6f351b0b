"""Group-relative policy gradient, masked to model actions, and cold-start cloning.

With one parameter update per collection phase the importance ratio is
identically 1, so the update is the group-baselined score-function gradient
with advantages normalized inside each group.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .policy import N_ACTIONS, LogLinearPolicy, PolicyParams, softmax
from .reward import RewardBreakdown, RewardConfig, total_reward
from .rollout import RolloutConfig, Trajectory, run_episode
from .synthenv import QAPair, Scene, generate_scene, make_qa

log = logging.getLogger(__name__)


class GroupTooSmall(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_prompts: int = 96
    group_size: int = 12
    learning_rate: float = 0.5
    std_floor: float = 1e-6
    kl_coeff: float = 0.0
    entropy_coeff: float = 0.0

    def __post_init__(self) -> None:
        if self.kl_coeff != 0.0 or self.entropy_coeff != 0.0:
            raise ValueError("KL and entropy regularization are not supported")
        if self.group_size < 2:
            raise GroupTooSmall(f"group_size must be >= 2, got {self.group_size}")


@dataclass
class Group:
    prompt_ref: tuple[int, str]
    trajectories: list[tuple[Trajectory, RewardBreakdown]]


@dataclass(frozen=True)
class TrainStats:
    step: int
    mean_reward: float
    success_rate: float
    mean_T: float
    mean_pairwise_iou_incorrect: float
    penalty_activation_rate: float
    split: str = "train"

    CSV_FIELDS = ("step", "mean_reward", "success_rate", "split", "mean_T",
                  "mean_pairwise_iou_incorrect", "penalty_activation_rate")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


@dataclass
class ExpertDataset:
    items: list[tuple[tuple[int, str], QAPair, Trajectory]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-6) -> list[float]:
    """``(r - mean) / std`` with population std; degenerate groups get zeros."""
    if len(rewards) < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {len(rewards)}")
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std < std_floor:
        return [0.0] * len(r)
    return list((r - r.mean()) / std)


def trajectory_mean_iou(rb: RewardBreakdown) -> float | None:
    if not rb.pairwise_ious:
        return None
    return sum(v for _, _, v in rb.pairwise_ious) / len(rb.pairwise_ious)


def summarize(step: int, scored: Iterable[tuple[Trajectory, RewardBreakdown]], split: str = "train") -> TrainStats:
    scored = list(scored)
    n = len(scored)
    ious = [v for _, rb in scored if rb.r_acc == 0 and (v := trajectory_mean_iou(rb)) is not None]
    return TrainStats(
        step=step,
        mean_reward=sum(rb.total for _, rb in scored) / n,
        success_rate=sum(rb.r_acc for _, rb in scored) / n,
        mean_T=sum(rb.T for _, rb in scored) / n,
        mean_pairwise_iou_incorrect=float(np.mean(ious)) if ious else math.nan,
        penalty_activation_rate=sum(rb.penalty_active for _, rb in scored) / n,
        split=split,
    )


def _model_rows(traj: Trajectory) -> tuple[list[np.ndarray], list[int]]:
    feats, acts = [], []
    for s in traj.steps:
        if s.is_model_action and s.action is not None and s.features is not None:
            feats.append(s.features)
            acts.append(s.action)
    return feats, acts


def weighted_score_gradient(
    params: PolicyParams, feats: np.ndarray, actions: np.ndarray, weights: np.ndarray
) -> PolicyParams:
    """``sum_i w_i * grad log pi(a_i | s_i)`` for stacked rows."""
    if len(actions) == 0:
        return PolicyParams.zeros()
    p = softmax(feats @ params.W + params.b)
    g = -p
    g[np.arange(len(actions)), actions] += 1.0
    g *= weights[:, None]
    return PolicyParams(feats.T @ g, g.sum(axis=0))


def policy_gradient(groups: Sequence[Group], params: PolicyParams, cfg: TrainConfig = TrainConfig()) -> PolicyParams:
    """Mean over trajectories of advantage times the summed model-turn score functions.

    Environment steps never enter the sum, whatever their features hold.
    """
    feats, acts, weights = [], [], []
    n_traj = sum(len(g.trajectories) for g in groups)
    for group in groups:
        adv = group_advantages([rb.total for _, rb in group.trajectories], cfg.std_floor)
        for (traj, _), a in zip(group.trajectories, adv):
            if a == 0.0:
                continue
            f, x = _model_rows(traj)
            feats.extend(f)
            acts.extend(x)
            weights.extend([a / n_traj] * len(x))
    if not acts:
        return PolicyParams.zeros()
    return weighted_score_gradient(params, np.array(feats), np.array(acts), np.array(weights))


def surrogate_objective(groups: Sequence[Group], params: PolicyParams, cfg: TrainConfig = TrainConfig()) -> float:
    """Scalar whose gradient :func:`policy_gradient` returns (advantages held fixed)."""
    total = 0.0
    n_traj = sum(len(g.trajectories) for g in groups)
    for group in groups:
        adv = group_advantages([rb.total for _, rb in group.trajectories], cfg.std_floor)
        for (traj, _), a in zip(group.trajectories, adv):
            f, x = _model_rows(traj)
            if not x:
                continue
            z = np.array(f) @ params.W + params.b
            m = z.max(axis=1, keepdims=True)
            lp = z[np.arange(len(x)), x] - (m[:, 0] + np.log(np.exp(z - m).sum(axis=1)))
            total += a * lp.sum()
    return total / n_traj


def masked_pg_update(
    groups: Sequence[Group], params: PolicyParams, cfg: TrainConfig = TrainConfig(), step: int = 0
) -> tuple[PolicyParams, TrainStats]:
    grad = policy_gradient(groups, params, cfg)
    new = PolicyParams(params.W + cfg.learning_rate * grad.W, params.b + cfg.learning_rate * grad.b)
    stats = summarize(step, (pair for g in groups for pair in g.trajectories))
    return new, stats


def collect_group(
    params: PolicyParams,
    scene: Scene,
    qa: QAPair,
    size: int,
    rng: np.random.Generator,
    rollout_cfg: RolloutConfig = RolloutConfig(),
    reward_cfg: RewardConfig = RewardConfig(),
) -> Group:
    policy = LogLinearPolicy(params)
    trajs = []
    for _ in range(size):
        traj = run_episode(policy, scene, qa, rollout_cfg, rng)
        trajs.append((traj, total_reward(traj, scene, reward_cfg)))
    return Group((scene.seed, scene.difficulty), trajs)


SceneSampler = Callable[[np.random.Generator, int], list[tuple[int, str]]]


def pool_sampler(pool: Sequence[tuple[int, str]]) -> SceneSampler:
    """Sample scene refs uniformly with replacement from a fixed training pool."""
    pool = list(pool)

    def sample(rng: np.random.Generator, n: int) -> list[tuple[int, str]]:
        return [pool[i] for i in rng.integers(len(pool), size=n)]

    return sample


def train_rl(
    sampler: SceneSampler,
    params: PolicyParams,
    cfg: TrainConfig,
    steps: int,
    seed: int,
    rollout_cfg: RolloutConfig = RolloutConfig(),
    reward_cfg: RewardConfig = RewardConfig(),
    on_step: Callable[[TrainStats, list[Group]], None] | None = None,
) -> tuple[PolicyParams, list[TrainStats]]:
    """Collect, score and update for ``steps`` rounds; deterministic in ``seed``.

    ``on_step`` sees each step's stats and the scored groups it was computed from.
    """
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x47525030])
    params = params.copy()
    history: list[TrainStats] = []
    for step in range(steps):
        groups = []
        for ref in sampler(rng, cfg.batch_prompts):
            scene = generate_scene(*ref)
            groups.append(collect_group(params, scene, make_qa(scene), cfg.group_size, rng,
                                        rollout_cfg, reward_cfg))
        params, stats = masked_pg_update(groups, params, cfg, step)
        history.append(stats)
        if on_step is not None:
            on_step(stats, groups)
    return params, history


def expert_dataset(policy, refs: Iterable[tuple[int, str]], rollout_cfg: RolloutConfig = RolloutConfig()) -> ExpertDataset:
    """Roll out a scripted expert and keep its (correct, answered) trajectories."""
    ds = ExpertDataset()
    for ref in refs:
        scene = generate_scene(*ref)
        qa = make_qa(scene)
        traj = run_episode(policy, scene, qa, rollout_cfg, np.random.default_rng(scene.seed))
        if total_reward(traj, scene).r_acc != 1:
            raise RuntimeError(f"expert failed on scene {ref}")
        ds.items.append((ref, qa, traj))
    return ds


def _bc_arrays(dataset: ExpertDataset) -> tuple[np.ndarray, np.ndarray]:
    feats, acts = [], []
    for _, _, traj in dataset.items:
        f, x = _model_rows(traj)
        feats.extend(f)
        acts.extend(x)
    return np.array(feats), np.array(acts, dtype=int)


def bc_loss(params: PolicyParams, feats: np.ndarray, acts: np.ndarray) -> float:
    z = feats @ params.W + params.b
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(acts)), acts]))


def behavior_clone(
    dataset: ExpertDataset, params: PolicyParams, epochs: int, lr: float = 1.0,
    losses: list[float] | None = None,
) -> PolicyParams:
    """Full-batch gradient descent on the expert negative log-likelihood.

    Each epoch is one step; the step size halves whenever it would raise the
    loss, so the loss sequence (appended to ``losses`` if given, starting with
    the initial loss) never increases.
    """
    if len(dataset) == 0:
        raise EmptyDataset("behavior cloning needs at least one trajectory")
    feats, acts = _bc_arrays(dataset)
    if len(acts) == 0:
        raise EmptyDataset("expert trajectories contain no scored actions")
    params = params.copy()
    loss = bc_loss(params, feats, acts)
    if losses is None:
        losses = []
    losses.append(loss)
    weights = np.full(len(acts), 1.0 / len(acts))
    for _ in range(epochs):
        g = weighted_score_gradient(params, feats, acts, weights)
        while True:
            cand = PolicyParams(params.W + lr * g.W, params.b + lr * g.b)
            new_loss = bc_loss(cand, feats, acts)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if new_loss <= loss:
            params, loss = cand, new_loss
        losses.append(loss)
    return params
