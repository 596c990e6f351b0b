"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary under "acceptance criteria".
Criteria 9 and 10 share one full-size ablation run (about five minutes).
"""
import math
import string
import time
from itertools import combinations

import numpy as np
import pytest

from zoomsearch.geometry import BBox
from zoomsearch.grpo import Group, group_advantages, policy_gradient
from zoomsearch.harness import ExperimentConfig, run_ablation
from zoomsearch.policy import (
    FEATURE_DIM,
    N_ACTIONS,
    ImmediateAnswerPolicy,
    LogLinearPolicy,
    MultiScaleExpert,
    PolicyParams,
    logprob,
    logprob_grad,
)
from zoomsearch.protocol import ProtocolError, ToolCall, parse_assistant_turn, serialize_tool_call
from zoomsearch.reward import iou, total_reward
from zoomsearch.rollout import Step, Trajectory, run_episode
from zoomsearch.synthenv import ANSWER_VOCAB, BASE_RESOLUTION, generate_scene, legibility_oracle, make_qa

from .conftest import record_criterion
from .helpers import make_trajectory

SCENE = generate_scene(0, "hard")
QA = make_qa(SCENE)
WRONG = next(v for v in ANSWER_VOCAB if v != QA.answer)


def oracle_iou(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(w, 0.0) * max(h, 0.0)
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


def oracle_reward(correct, boxes, eps=0.5, lam=0.2):
    present = [b.as_tuple() for b in boxes if b is not None]
    if correct:
        return 1.0
    T = len(present)
    if T <= 1:
        return 0.0
    excess = sum(max(0.0, oracle_iou(a, b) - eps) for a, b in combinations(present, 2))
    return -lam * excess / (T * (T - 1) / 2)


def random_box(rng, min_side=0.01):
    x1, y1 = rng.uniform(0, 1 - min_side, 2)
    return BBox(x1, y1, rng.uniform(x1 + min_side, 1), rng.uniform(y1 + min_side, 1))


# ---------------------------------------------------------------- 1

def test_criterion_1_reward_formula():
    t0 = time.perf_counter()
    b = BBox(0.1, 0.1, 0.6, 0.6)
    shifted = BBox(0.15, 0.1, 0.65, 0.6)
    far = BBox(0.7, 0.7, 0.9, 0.9)
    cases = [
        (False, [b, b]),  # anchor: -0.1
        (True, [b, b]),  # anchor: 1.0
        (True, []), (True, [b]), (True, [b, b, b, b, b]), (True, [None, None]),
        (False, []), (False, [b]), (False, [None]), (False, [b, None]), (False, [None, None, None]),
        (False, [b, far]), (False, [b, shifted]), (False, [b, b, b]), (False, [b, b, far]),
        (False, [b, shifted, far]), (False, [b, None, b]), (False, [b, b, b, b, b]),
        (False, [BBox(0, 0, 1, 1), BBox(0, 0, 0.7072, 0.7072)]),
        (False, [BBox(0, 0, 0.5, 1), BBox(0.5, 0, 1, 1)]),
        (False, [BBox(0.2, 0.2, 0.4, 0.4), BBox(0.2, 0.2, 0.4, 0.4), BBox(0.21, 0.2, 0.41, 0.4)]),
    ]
    rng = np.random.default_rng(1)
    for _ in range(10):
        cases.append((False, [random_box(rng, 0.2) for _ in range(rng.integers(2, 6))]))
    worst = 0.0
    for correct, boxes in cases:
        traj = make_trajectory(SCENE, QA, boxes, QA.answer if correct else WRONG)
        got = total_reward(traj, SCENE).total
        worst = max(worst, abs(got - oracle_reward(correct, boxes)))
    anchors = (total_reward(make_trajectory(SCENE, QA, [b, b], WRONG), SCENE).total,
               total_reward(make_trajectory(SCENE, QA, [b, far, shifted], QA.answer), SCENE).total)
    elapsed = time.perf_counter() - t0
    ok = len(cases) >= 20 and worst <= 1e-12 and abs(anchors[0] + 0.1) <= 1e-12 and anchors[1] == 1.0 \
        and elapsed < 1.0
    record_criterion(1, "reward formula exactness", ok,
                     f"{len(cases)} cases, max |err| {worst:.1e}, anchors {anchors}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_indicator_gating():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(10_000):
        n = int(rng.integers(0, 6))
        # draw from a small pool of boxes so high-overlap pairs are common
        pool = [random_box(rng, 0.05) for _ in range(2)]
        boxes = []
        for _ in range(n):
            u = rng.random()
            boxes.append(None if u < 0.15 else pool[int(rng.integers(2))] if u < 0.6 else random_box(rng, 0.05))
        correct = rng.random() < 0.3
        rb = total_reward(make_trajectory(SCENE, QA, boxes, QA.answer if correct else WRONG), SCENE)
        present = [b for b in boxes if b is not None]
        over = any(iou(a, c) > 0.5 for a, c in combinations(present, 2))
        if rb.r_acc == 1:
            violations += rb.total != 1.0
        elif rb.T <= 1:
            violations += rb.total != 0.0
        elif rb.total != 0.0:
            violations += not (-0.1 <= rb.total < 0.0 and over)
        else:
            violations += over
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 10.0
    record_criterion(2, "indicator gating", ok, f"10000 trajectories, {violations} violations, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 3

N_RASTER = 2048


def raster_iou(a, b):
    # count pixel centres inside each box; axis-aligned boxes factor into row x column masks
    c = (np.arange(N_RASTER) + 0.5) / N_RASTER

    def mask(lo, hi):
        return (c >= lo) & (c < hi)

    ax, ay = mask(a.x1, a.x2), mask(a.y1, a.y2)
    bx, by = mask(b.x1, b.x2), mask(b.y1, b.y2)
    inter = int((ax & bx).sum()) * int((ay & by).sum())
    union = int(ax.sum()) * int(ay.sum()) + int(bx.sum()) * int(by.sum()) - inter
    return inter / union if union else 0.0


def test_criterion_3_iou_raster_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        a, b = random_box(rng, 0.02), random_box(rng, 0.02)
        worst = max(worst, abs(iou(a, b) - raster_iou(a, b)))
    exact = 0
    grid = [k / 16 for k in range(17)]
    aligned = []
    for _ in range(300):
        x1, x2 = sorted(rng.choice(grid, 2, replace=False))
        y1, y2 = sorted(rng.choice(grid, 2, replace=False))
        u1, u2 = sorted(rng.choice(grid, 2, replace=False))
        v1, v2 = sorted(rng.choice(grid, 2, replace=False))
        aligned.append((BBox(x1, y1, x2, y2), BBox(u1, v1, u2, v2)))
    exact = sum(iou(a, b) == raster_iou(a, b) for a, b in aligned)
    elapsed = time.perf_counter() - t0
    ok = worst < 2e-2 and exact == len(aligned) and elapsed < 30.0
    record_criterion(3, "IoU raster equivalence", ok,
                     f"max |err| {worst:.2e} on 1000 pairs, {exact}/{len(aligned)} grid-aligned exact, "
                     f"{elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 4

class _Recorder:
    """Wraps a policy and keeps the features of every state it acts in."""

    def __init__(self, inner):
        self.inner = inner
        self.phis = []

    def act(self, state, rng):
        d = self.inner.act(state, rng)
        self.phis.append(d.features)
        return d


def random_states(n, seed):
    rng = np.random.default_rng(seed)
    rec = _Recorder(LogLinearPolicy(PolicyParams.init(seed, scale=1.0)))
    k = 0
    while len(rec.phis) < n:
        scene = generate_scene(k, ("easy", "medium", "hard")[k % 3])
        run_episode(rec, scene, make_qa(scene), rng=rng)
        k += 1
    return rec.phis[:n]


def test_criterion_4_gradient_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    h = 1e-5
    worst = 0.0
    for k, phi in enumerate(random_states(100, 4)):
        params = PolicyParams.init(1000 + k, scale=float(rng.uniform(0.1, 2.0)))
        a = int(rng.integers(N_ACTIONS))
        g = logprob_grad(params, phi, a).flat()
        base = params.flat()
        f = lambda v: logprob(PolicyParams.from_flat(v), phi, a)
        # central differences on the largest and on random coordinates, plus one random direction
        idx = np.concatenate([np.argsort(-np.abs(g))[:15], rng.choice(len(base), 15, replace=False)])
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            e = np.zeros_like(base)
            e[i] = h
            fd[j] = (f(base + e) - f(base - e)) / (2 * h)
        rel = np.linalg.norm(fd - g[idx]) / max(np.linalg.norm(g[idx]), 1e-12)
        u = rng.normal(size=len(base))
        u /= np.linalg.norm(u)
        dd = (f(base + h * u) - f(base - h * u)) / (2 * h)
        rel_dir = abs(dd - g @ u) / max(abs(g @ u), np.linalg.norm(g) * 1e-3, 1e-12)
        worst = max(worst, rel, rel_dir)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    record_criterion(4, "gradient correctness", ok,
                     f"100 (state, action) pairs, max relative error {worst:.2e}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_advantage_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_mean = worst_shift = 0.0
    degenerate_ok = True
    for _ in range(2000):
        n = int(rng.integers(2, 17))
        r = rng.choice([1.0, 0.0, -0.05, -0.1, -0.025], size=n)
        a = np.array(group_advantages(r))
        if np.std(r) < 1e-6:
            degenerate_ok &= bool((a == 0).all())
            continue
        worst_mean = max(worst_mean, abs(a.mean()))
        c = float(rng.choice([-1.0, 0.5, 2.0, 4.0]))
        worst_shift = max(worst_shift, np.abs(np.array(group_advantages(r + c)) - a).max())
    degenerate_ok &= group_advantages([1.0] * 4) == [0.0] * 4 and group_advantages([0.0] * 3) == [0.0] * 3
    pair = [float(x) for x in group_advantages([1.0, 0.0])]
    elapsed = time.perf_counter() - t0
    ok = (worst_mean < 1e-9 and worst_shift <= 1e-12 and degenerate_ok and pair == [1.0, -1.0]
          and elapsed < 1.0)
    record_criterion(5, "GRPO advantage invariants", ok,
                     f"|mean| {worst_mean:.1e}, shift {worst_shift:.1e}, degenerate zeroed {degenerate_ok}, "
                     f"{{1,0}} -> {pair}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 6

def _rebuild(traj, rng, scale):
    steps = tuple(s if s.is_model_action else Step(s.text, False, features=rng.normal(size=FEATURE_DIM) * scale,
                                                    action=int(rng.integers(N_ACTIONS)))
                  for s in traj.steps)
    return Trajectory(traj.scene_ref, traj.qa, steps, traj.final_answer, traj.termination)


def test_criterion_6_mask_soundness():
    t0 = time.perf_counter()
    params = PolicyParams.init(6, scale=0.5)
    policy = LogLinearPolicy(params)
    rng = np.random.default_rng(6)
    groups = []
    for k in range(8):
        scene = generate_scene(k, "hard")
        qa = make_qa(scene)
        trajs = []
        for _ in range(6):
            traj = run_episode(policy, scene, qa, rng=rng)
            trajs.append((traj, total_reward(traj, scene)))
        groups.append(Group((k, "hard"), trajs))
    base = policy_gradient(groups, params)
    identical = True
    env_steps = 0
    for trial in range(20):
        perturbed = [Group(g.prompt_ref, [(_rebuild(t, rng, 10.0 ** (trial % 5)), rb) for t, rb in g.trajectories])
                     for g in groups]
        env_steps += sum(not s.is_model_action for g in perturbed for t, _ in g.trajectories for s in t.steps)
        g2 = policy_gradient(perturbed, params)
        identical &= base.W.tobytes() == g2.W.tobytes() and base.b.tobytes() == g2.b.tobytes()
    nonzero = bool(np.abs(base.W).max() > 0)
    elapsed = time.perf_counter() - t0
    ok = identical and nonzero and env_steps > 0 and elapsed < 5.0
    record_criterion(6, "mask soundness", ok,
                     f"20 perturbations of {env_steps // 20} env steps, bit-identical {identical}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 7

def _mutate(text: str, rng) -> str:
    chars = list(text)
    for _ in range(int(rng.integers(1, 6))):
        op = rng.integers(5)
        pos = int(rng.integers(len(chars) + 1))
        if op == 0 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op == 1:
            chars.insert(pos, chr(int(rng.integers(0, 0x250))))
        elif op == 2 and chars:
            chars[min(pos, len(chars) - 1)] = rng.choice(list('{}[]<>(),":.0123456789 '))
        elif op == 3:
            chars = chars[:pos]
        else:
            chars.insert(pos, rng.choice(["<tool_call>", "</tool_call>", "<box>", "</box>", "\\u0000", "1e309"]))
    return "".join(chars)


def test_criterion_7_protocol_robustness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    mismatched = 0
    seeds = []
    for _ in range(10_000):
        x1, y1 = rng.uniform(0, 0.99, 2)
        b = BBox(round(x1, 6), round(y1, 6), round(rng.uniform(x1 + 0.01, 1), 6), round(rng.uniform(y1 + 0.01, 1), 6))
        label = None if rng.random() < 0.5 else "".join(rng.choice(list(string.printable), int(rng.integers(0, 12))))
        tc = ToolCall(int(rng.integers(1, 10**6)), b, label)
        text = serialize_tool_call(tc)
        seeds.append(text)
        back = parse_assistant_turn(text).action
        mismatched += back.image_idx != tc.image_idx or back.label != tc.label
        worst = max(worst, max(abs(u - v) for u, v in zip(back.bbox.as_tuple(), b.as_tuple())))
    aborts = structured = parsed = 0
    alphabet = list(string.printable) + [" ", "中", "퟿", "\x00"]
    for i in range(100_000):
        if i % 4 == 0:
            data = "".join(rng.choice(alphabet, int(rng.integers(0, 80))))
        elif i % 4 == 1:
            data = bytes(rng.integers(0, 256, int(rng.integers(0, 80)), dtype=np.uint8))
        else:
            data = _mutate(seeds[i % len(seeds)], rng)
        try:
            parse_assistant_turn(data)
            parsed += 1
        except ProtocolError:
            structured += 1
        except Exception:
            aborts += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and mismatched == 0 and aborts == 0 and elapsed < 60.0
    record_criterion(7, "protocol robustness", ok,
                     f"round-trip max |err| {worst:.1e} over 10000, fuzz 100000: {aborts} aborts, "
                     f"{structured} structured errors, {parsed} parsed, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_zoom_necessity():
    t0 = time.perf_counter()
    n = 1000
    eval_start = ExperimentConfig().eval_seed_start
    legible_full = chance_hits = expert_hits = 0
    for seed in range(eval_start, eval_start + n):
        scene = generate_scene(seed, "hard")
        qa = make_qa(scene)
        legible_full += legibility_oracle(scene, BBox.full(), BASE_RESOLUTION)
        rng = np.random.default_rng(seed)
        chance_hits += total_reward(run_episode(ImmediateAnswerPolicy(), scene, qa, rng=rng), scene).r_acc
        expert_hits += total_reward(run_episode(MultiScaleExpert(), scene, qa, rng=rng), scene).r_acc
    p = 1 / len(ANSWER_VOCAB)
    sigma = math.sqrt(p * (1 - p) / n)
    chance = chance_hits / n
    elapsed = time.perf_counter() - t0
    ok = legible_full == 0 and abs(chance - p) <= 3 * sigma and expert_hits == n and elapsed < 120.0
    record_criterion(8, "zoom necessity", ok,
                     f"{legible_full}/{n} legible at full frame, immediate-answer {chance:.3f} "
                     f"(chance {p:.3f} +/- {3 * sigma:.3f}), expert {expert_hits / n:.3f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 9 and 10

@pytest.fixture(scope="module")
def ablation():
    return run_ablation(ExperimentConfig())


@pytest.mark.slow
def test_criterion_9_ablation_ordering(ablation):
    s = {v: ablation.mean_success(v, "hard") for v in ("B", "C", "DRIM")}
    gap = 100 * (s["DRIM"] - s["C"])
    _, p = ablation.iou_test("hard")
    iou_c = float(np.mean(ablation.pooled_incorrect_ious("C")))
    iou_d = float(np.mean(ablation.pooled_incorrect_ious("DRIM")))
    checks = {
        "B<C<DRIM": s["B"] < s["C"] < s["DRIM"],
        "DRIM-C>=3pt": gap >= 3.0,
        "IoU Mann-Whitney p<0.05": p < 0.05,
        "runtime<10min": ablation.seconds < 600,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(9, "ablation ordering", ok,
                     f"hard success B {s['B']:.3f} C {s['C']:.3f} DRIM {s['DRIM']:.3f} (DRIM-C {gap:+.1f} pt); "
                     f"incorrect IoU C {iou_c:.3f} DRIM {iou_d:.3f}, p={p:.2g}; {ablation.seconds:.0f}s"
                     + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


@pytest.mark.slow
def test_criterion_10_no_coldstart_degradation(ablation):
    a, d = ablation.mean_success("A", "hard"), ablation.mean_success("DRIM", "hard")
    ok = 100 * (d - a) >= 10.0
    record_criterion(10, "variant A degradation", ok,
                     f"hard success A {a:.3f} vs DRIM {d:.3f} ({100 * (d - a):+.1f} pt)")
    assert ok


@pytest.mark.slow
def test_rl_improves_mean_reward(ablation):
    # training-curve check from the same run: mean hard-scene reward, step 0 vs the last 10 steps
    gains = []
    for v in ("C", "DRIM"):
        for hist in ablation.histories[v]:
            gains.append(np.mean([h.mean_reward for h in hist[-10:]]) - hist[0].mean_reward)
    gain = float(np.mean(gains))
    ok = gain >= 0.1
    record_criterion("rl", "mean training reward gain", ok,
                     f"{gain:+.3f} averaged over C and DRIM runs ({len(gains)} runs)")
    assert ok
