"""Experiment orchestration: datasets, cold start, RL, evaluation and the ablation.

Every artifact is a pure function of an :class:`ExperimentConfig` (including its
master seed). Outputs are plain files: JSONL for datasets and trajectories, CSV
for per-step training stats, JSON for checkpoints and reports.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from scipy.stats import mannwhitneyu

from .geometry import BBox
from .grpo import (
    ExpertDataset,
    TrainConfig,
    TrainStats,
    behavior_clone,
    pool_sampler,
    summarize,
    train_rl,
    trajectory_mean_iou,
)
from .policy import LogLinearPolicy, MultiScaleExpert, PolicyParams
from .reward import RewardBreakdown, RewardConfig, total_reward
from .rollout import RolloutConfig, Trajectory, run_episode, trajectory_record
from .synthenv import BASE_RESOLUTION, dataset_record, generate_scene, legibility_oracle, make_qa

log = logging.getLogger(__name__)

VARIANTS = ("A", "B", "C", "DRIM")
DIFFICULTIES = ("easy", "medium", "hard")
SEED_MASK = 0xFFFFFFFFFFFFFFFF


class SplitOverlap(ValueError):
    pass


class BadCheckpoint(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of a run. Serialized as a flat YAML mapping."""

    master_seed: int = 0
    variant: str = "DRIM"
    # scene seeds: split k of difficulty d uses seeds [start, start + size)
    train_seed_start: int = 0
    eval_seed_start: int = 100_000
    train_easy: int = 300
    train_medium: int = 300
    train_hard: int = 300
    eval_easy: int = 100
    eval_medium: int = 100
    eval_hard: int = 300
    # cold start
    detour_fraction: float = 0.15
    bc_epochs: int = 1500
    bc_lr: float = 2.0
    init_scale: float = 0.01
    # reinforcement learning
    rl_difficulties: tuple[str, ...] = ("hard",)
    rl_steps: int = 100
    batch_prompts: int = 16
    group_size: int = 12
    learning_rate: float = 0.5
    log_every: int = 25
    # environment and reward
    max_turns: int = 5
    epsilon: float = 0.5
    lam: float = 0.2
    # ablation
    ablation_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for d in self.rl_difficulties:
            if d not in DIFFICULTIES:
                raise ConfigError(f"unknown difficulty {d!r} in rl_difficulties")
        for name in ("train_easy", "train_medium", "train_hard", "eval_easy", "eval_medium",
                     "eval_hard", "bc_epochs", "rl_steps", "log_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.detour_fraction <= 1.0:
            raise ConfigError("detour_fraction must lie in [0, 1]")
        # delegate range checks to the component configs
        self.rollout_cfg()
        self.reward_cfg()
        self.train_cfg()
        self.check_splits()

    def train_size(self, difficulty: str) -> int:
        return getattr(self, f"train_{difficulty}")

    def eval_size(self, difficulty: str) -> int:
        return getattr(self, f"eval_{difficulty}")

    def train_refs(self, difficulty: str) -> list[tuple[int, str]]:
        return [(self.train_seed_start + i, difficulty) for i in range(self.train_size(difficulty))]

    def eval_refs(self, difficulty: str) -> list[tuple[int, str]]:
        return [(self.eval_seed_start + i, difficulty) for i in range(self.eval_size(difficulty))]

    def check_splits(self) -> None:
        """Reject configs whose train and eval seed ranges intersect for any difficulty."""
        for d in DIFFICULTIES:
            a0, a1 = self.train_seed_start, self.train_seed_start + self.train_size(d)
            b0, b1 = self.eval_seed_start, self.eval_seed_start + self.eval_size(d)
            if a1 > a0 and b1 > b0 and a0 < b1 and b0 < a1:
                raise SplitOverlap(
                    f"{d}: train seeds [{a0}, {a1}) overlap eval seeds [{b0}, {b1})")

    def rollout_cfg(self) -> RolloutConfig:
        return RolloutConfig(max_turns=self.max_turns)

    def reward_cfg(self) -> RewardConfig:
        lam = 0.0 if self.variant == "C" else self.lam
        return RewardConfig(epsilon=self.epsilon, lam=lam)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(batch_prompts=self.batch_prompts, group_size=self.group_size,
                           learning_rate=self.learning_rate)

    @property
    def uses_coldstart(self) -> bool:
        return self.variant != "A"

    @property
    def uses_rl(self) -> bool:
        return self.variant != "B"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rl_difficulties"] = list(self.rl_difficulties)
        d["ablation_seeds"] = list(self.ablation_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("rl_difficulties", "ablation_seeds"):
            if key in d and not isinstance(d[key], (list, tuple)):
                raise ConfigError(f"{key} must be a list")
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e.strerror or e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from e
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a key-value mapping at top level")
        return cls.from_dict(doc)

    def dump(self, path: str | Path) -> None:
        _write_text(Path(path), yaml.safe_dump(self.to_dict(), sort_keys=False))

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass
class EvalReport:
    """Greedy evaluation of frozen parameters on the eval splits."""

    variant: str
    master_seed: int
    success: dict[str, float] = field(default_factory=dict)
    mean_T: dict[str, float] = field(default_factory=dict)
    mean_iou_incorrect: dict[str, float] = field(default_factory=dict)
    penalty_rate: dict[str, float] = field(default_factory=dict)
    episodes: dict[str, int] = field(default_factory=dict)
    scene_seeds: dict[str, list[int]] = field(default_factory=dict)
    # per-trajectory mean pairwise IoU of incorrect trajectories with T >= 2
    incorrect_ious: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- file helpers

def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[dict]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow(r)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def load_checkpoint(path: str | Path) -> PolicyParams:
    return PolicyParams.load(path)


# ---------------------------------------------------------------- datasets

def cmd_gen_data(cfg: ExperimentConfig, out: str | Path) -> dict[str, Path]:
    """Write train/eval scene splits per difficulty as JSONL.

    Every record is audited: the scene must need zooming exactly as its
    difficulty says (illegible at full frame for medium and hard).
    """
    cfg.check_splits()
    out = Path(out)
    written = {}
    for split, refs_of in (("train", cfg.train_refs), ("eval", cfg.eval_refs)):
        for d in DIFFICULTIES:
            records = []
            for seed, diff in refs_of(d):
                scene = generate_scene(seed, diff)
                full_frame = legibility_oracle(scene, BBox.full(), BASE_RESOLUTION)
                if full_frame != (diff == "easy"):
                    raise RuntimeError(f"legibility audit failed for scene ({seed}, {diff})")
                records.append(dataset_record(scene, make_qa(scene)))
            path = out / f"{split}_{d}.jsonl"
            _write_jsonl(path, records)
            written[f"{split}_{d}"] = path
    return written


def _detour_rng(cfg: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.master_seed & SEED_MASK, 0xC01D])


def build_expert_dataset(cfg: ExperimentConfig) -> ExpertDataset:
    """Expert trajectories on the training splits.

    On a ``detour_fraction`` share of hard scenes the expert first inspects a
    randomly chosen distractor, then restarts toward the target, so the cloned
    policy sees how to recover from a wrong first guess.
    """
    rng = _detour_rng(cfg)
    ds = ExpertDataset()
    for d in DIFFICULTIES:
        for ref in cfg.train_refs(d):
            scene = generate_scene(*ref)
            qa = make_qa(scene)
            detour = None
            if d == "hard" and rng.random() < cfg.detour_fraction:
                others = [i for i in scene.candidate_indices if i != scene.target_cell]
                detour = int(others[rng.integers(len(others))])
            traj = run_episode(MultiScaleExpert(detour), scene, qa, cfg.rollout_cfg(),
                               np.random.default_rng(scene.seed))
            if total_reward(traj, scene, cfg.reward_cfg()).r_acc != 1:
                raise RuntimeError(f"expert failed on scene {ref}")
            ds.items.append((ref, qa, traj))
    return ds


def initial_params(cfg: ExperimentConfig) -> PolicyParams:
    return PolicyParams.init(cfg.master_seed, cfg.init_scale)


def coldstart(cfg: ExperimentConfig) -> tuple[PolicyParams, list[float]]:
    ds = build_expert_dataset(cfg)
    losses: list[float] = []
    params = behavior_clone(ds, initial_params(cfg), cfg.bc_epochs, cfg.bc_lr, losses=losses)
    return params, losses


def cmd_coldstart(cfg: ExperimentConfig, out: str | Path) -> Path:
    out = Path(out)
    params, losses = coldstart(cfg)
    path = out / "coldstart.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
    _write_csv(out / "bc_loss.csv", ("epoch", "loss"),
               ({"epoch": i, "loss": v} for i, v in enumerate(losses)))
    return path


# ---------------------------------------------------------------- RL

def rl_pool(cfg: ExperimentConfig) -> list[tuple[int, str]]:
    return [ref for d in cfg.rl_difficulties for ref in cfg.train_refs(d)]


def run_rl(
    cfg: ExperimentConfig, params: PolicyParams, trajectory_log: list[dict] | None = None
) -> tuple[PolicyParams, list[TrainStats]]:
    """RL from ``params`` under the config's reward (lambda is 0 for variant C)."""
    pool = rl_pool(cfg)
    if not pool:
        raise ConfigError("RL needs a non-empty training pool")
    on_step = None
    if cfg.log_every > 0 and trajectory_log is not None:
        def on_step(stats, groups):
            if stats.step % cfg.log_every == 0 or stats.step == cfg.rl_steps - 1:
                for g in groups:
                    for traj, rb in g.trajectories:
                        rec = trajectory_record(traj, rb)
                        rec["step"] = stats.step
                        trajectory_log.append(rec)
    return train_rl(pool_sampler(pool), params, cfg.train_cfg(), cfg.rl_steps, cfg.master_seed,
                    cfg.rollout_cfg(), cfg.reward_cfg(), on_step=on_step)


def train_variant(
    cfg: ExperimentConfig, coldstart_params: PolicyParams | None = None,
    trajectory_log: list[dict] | None = None,
) -> tuple[PolicyParams, list[TrainStats]]:
    """Final parameters of ``cfg.variant``; cold start is computed unless supplied."""
    if cfg.uses_coldstart:
        start = coldstart_params if coldstart_params is not None else coldstart(cfg)[0]
    else:
        start = initial_params(cfg)
    if not cfg.uses_rl:
        return start.copy(), []
    return run_rl(cfg, start, trajectory_log)


def cmd_train_rl(cfg: ExperimentConfig, out: str | Path, init: str | Path | None = None) -> Path:
    out = Path(out)
    start = load_checkpoint(init) if init is not None and cfg.uses_coldstart else None
    log_records: list[dict] = []
    params, history = train_variant(cfg, start, log_records)
    path = out / f"policy_{cfg.variant}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
    _write_csv(out / f"train_stats_{cfg.variant}.csv", TrainStats.CSV_FIELDS,
               (s.row() for s in history))
    _write_jsonl(out / f"rollouts_{cfg.variant}.jsonl", log_records)
    cfg.dump(out / f"config_{cfg.variant}.yaml")
    return path


# ---------------------------------------------------------------- evaluation

def run_split(
    policy, refs: Sequence[tuple[int, str]], rollout_cfg: RolloutConfig, reward_cfg: RewardConfig
) -> list[tuple[Trajectory, RewardBreakdown]]:
    scored = []
    for ref in refs:
        scene = generate_scene(*ref)
        traj = run_episode(policy, scene, make_qa(scene), rollout_cfg, np.random.default_rng(scene.seed))
        scored.append((traj, total_reward(traj, scene, reward_cfg)))
    return scored


def evaluate(
    policy, cfg: ExperimentConfig, splits: Sequence[str] = DIFFICULTIES,
    records: list[dict] | None = None,
) -> EvalReport:
    """Score ``policy`` on the eval splits; a LogLinearPolicy should be greedy here."""
    report = EvalReport(variant=cfg.variant, master_seed=cfg.master_seed)
    # the report always uses the full reward so penalty rates are comparable across variants
    reward_cfg = RewardConfig(cfg.epsilon, cfg.lam)
    for d in splits:
        refs = cfg.eval_refs(d)
        if not refs:
            continue
        scored = run_split(policy, refs, cfg.rollout_cfg(), reward_cfg)
        stats = summarize(0, scored, split=d)
        report.success[d] = stats.success_rate
        report.mean_T[d] = stats.mean_T
        report.mean_iou_incorrect[d] = stats.mean_pairwise_iou_incorrect
        report.penalty_rate[d] = stats.penalty_activation_rate
        report.episodes[d] = len(scored)
        report.scene_seeds[d] = [r[0] for r in refs]
        report.incorrect_ious[d] = [
            v for _, rb in scored if rb.r_acc == 0 and (v := trajectory_mean_iou(rb)) is not None
        ]
        if records is not None:
            for traj, rb in scored:
                records.append(trajectory_record(traj, rb))
    return report


def cmd_eval(
    cfg: ExperimentConfig, checkpoint: str | Path, out: str | Path,
    splits: Sequence[str] = DIFFICULTIES,
) -> EvalReport:
    params = load_checkpoint(checkpoint)
    records: list[dict] = []
    report = evaluate(LogLinearPolicy(params, greedy=True), cfg, splits, records)
    out = Path(out)
    _write_jsonl(out / "eval_trajectories.jsonl", records)
    _write_text(out / "eval_report.json", json.dumps(_json_safe(report.to_dict()), indent=2) + "\n")
    return report


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# ---------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    reports: dict[str, list[EvalReport]]
    histories: dict[str, list[list[TrainStats]]]
    seconds: float

    def mean_success(self, variant: str, split: str) -> float:
        return float(np.mean([r.success[split] for r in self.reports[variant]]))

    def pooled_incorrect_ious(self, variant: str, split: str = "hard") -> list[float]:
        return [v for r in self.reports[variant] for v in r.incorrect_ious.get(split, [])]

    def iou_test(self, split: str = "hard") -> tuple[float, float]:
        """One-sided Mann-Whitney U: are DRIM's incorrect-trajectory IoUs lower than C's?"""
        drim, c = self.pooled_incorrect_ious("DRIM", split), self.pooled_incorrect_ious("C", split)
        if not drim or not c:
            return math.nan, math.nan
        res = mannwhitneyu(drim, c, alternative="less")
        return float(res.statistic), float(res.pvalue)

    def table(self) -> list[dict]:
        """Variants by splits, success averaged over master seeds."""
        splits = [d for d in DIFFICULTIES if d in self.reports["DRIM"][0].success]
        rows = []
        for v in VARIANTS:
            row = {"variant": v, "coldstart": v != "A", "acc_reward": v != "B",
                   "penalty": v in ("A", "DRIM")}
            for d in splits:
                row[d] = round(self.mean_success(v, d), 4)
            rows.append(row)
        return rows


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int] | None = None) -> AblationResult:
    """Train and evaluate A/B/C/DRIM for every master seed under identical budgets."""
    seeds = tuple(cfg.ablation_seeds if seeds is None else seeds)
    t0 = time.perf_counter()
    reports: dict[str, list[EvalReport]] = {v: [] for v in VARIANTS}
    histories: dict[str, list[list[TrainStats]]] = {v: [] for v in VARIANTS}
    for seed in seeds:
        base = replace(cfg, master_seed=seed)
        cold, _ = coldstart(base)
        for v in VARIANTS:
            vcfg = replace(base, variant=v)
            params, hist = train_variant(vcfg, cold)
            histories[v].append(hist)
            reports[v].append(evaluate(LogLinearPolicy(params, greedy=True), vcfg))
            log.info("seed %d variant %s: %s", seed, v, reports[v][-1].success)
    return AblationResult(reports, histories, time.perf_counter() - t0)


def cmd_run_ablation(cfg: ExperimentConfig, out: str | Path) -> AblationResult:
    out = Path(out)
    result = run_ablation(cfg)
    table = result.table()
    splits = [k for k in table[0] if k in DIFFICULTIES]
    _write_csv(out / "ablation_table.csv", list(table[0]), table)
    for v in VARIANTS:
        for seed, hist in zip(cfg.ablation_seeds, result.histories[v]):
            if hist:
                _write_csv(out / f"train_stats_{v}_seed{seed}.csv", TrainStats.CSV_FIELDS,
                           (s.row() for s in hist))
    u, p = result.iou_test()
    summary = {
        "seeds": list(cfg.ablation_seeds),
        "table": table,
        "reports": {v: [r.to_dict() for r in rs] for v, rs in result.reports.items()},
        "iou_incorrect_hard": {v: _mean_or_nan(result.pooled_incorrect_ious(v)) for v in VARIANTS},
        "mannwhitney_drim_lt_c": {"U": u, "p": p},
        "seconds": result.seconds,
    }
    _write_text(out / "ablation_summary.json", json.dumps(_json_safe(summary), indent=2) + "\n")
    lines = ["| variant | cold start | acc reward | penalty | " + " | ".join(splits) + " |",
             "|---|---|---|---|" + "---|" * len(splits)]
    for row in table:
        marks = ["yes" if row[k] else "no" for k in ("coldstart", "acc_reward", "penalty")]
        lines.append(f"| {row['variant']} | " + " | ".join(marks) + " | "
                     + " | ".join(f"{100 * row[d]:.1f}" for d in splits) + " |")
    _write_text(out / "ablation_table.md", "\n".join(lines) + "\n")
    cfg.dump(out / "config.yaml")
    return result


def _mean_or_nan(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if xs else math.nan
