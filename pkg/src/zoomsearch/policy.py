"""Trainable log-linear policy over a discrete zoom/answer action space, plus
scripted reference policies.

Action layout (``N_ACTIONS`` = 43):

* ``0..12``   zoom anchor k on the latest image ("refine")
* ``13..25``  zoom anchor k on image 1 ("restart")
* ``26..42``  answer with vocabulary entry j
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox, compose, intersection_area
from .protocol import ToolCall, serialize_tool_call
from .rollout import Decision, State
from .synthenv import ANSWER_VOCAB, ZOOM_ANCHORS, is_cue_visible, is_legible

N_ANCHORS = len(ZOOM_ANCHORS)
REFINE = 0
RESTART = N_ANCHORS
ANSWER = 2 * N_ANCHORS
N_ACTIONS = ANSWER + len(ANSWER_VOCAB)
CHECKPOINT_VERSION = 1

_ANCHOR_ARR = np.array([a.as_tuple() for a in ZOOM_ANCHORS])
_VOCAB_INDEX = {v: i for i, v in enumerate(ANSWER_VOCAB)}

# feature layout
_F_REFINE_ANY = 0
_F_REFINE_SEEN = _F_REFINE_ANY + N_ANCHORS
_F_RESTART_ANY = _F_REFINE_SEEN + N_ANCHORS
_F_RESTART_SEEN = _F_RESTART_ANY + N_ANCHORS
_F_VISITED = _F_RESTART_SEEN + N_ANCHORS
_F_CUE = _F_VISITED + N_ANCHORS
_F_TARGET = _F_CUE + 1
_F_ANSWER = _F_TARGET + 1
_F_DISTRACTOR = _F_ANSWER + len(ANSWER_VOCAB)
_F_DEPTH = _F_DISTRACTOR + 1
_F_TURNS = _F_DEPTH + 4
_F_GRID = _F_TURNS + 5
GRID = 4
FEATURE_DIM = _F_GRID + GRID * GRID
_GRID_LO = np.arange(GRID, dtype=float)


def action_label(a: int) -> str:
    if a < RESTART:
        return f"refine[{a}]"
    if a < ANSWER:
        return f"restart[{a - RESTART}]"
    return f"answer[{ANSWER_VOCAB[a - ANSWER]}]"


def _windows(view: BBox) -> np.ndarray:
    w, h = view.x2 - view.x1, view.y2 - view.y1
    out = np.empty_like(_ANCHOR_ARR)
    out[:, 0] = view.x1 + _ANCHOR_ARR[:, 0] * w
    out[:, 1] = view.y1 + _ANCHOR_ARR[:, 1] * h
    out[:, 2] = view.x1 + _ANCHOR_ARR[:, 2] * w
    out[:, 3] = view.y1 + _ANCHOR_ARR[:, 3] * h
    return out


def _contains(windows: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(n_windows, n_boxes) boolean: box fully inside window."""
    return (
        (boxes[None, :, 0] >= windows[:, None, 0])
        & (boxes[None, :, 1] >= windows[:, None, 1])
        & (boxes[None, :, 2] <= windows[:, None, 2])
        & (boxes[None, :, 3] <= windows[:, None, 3])
    )


def featurize(state: State) -> np.ndarray:
    """Fixed-length encoding of the current view and interaction history.

    Perception is replaced by geometry: which anchors hold a boxed glyph,
    which boxes were already identified by their border colour, and the asked
    attribute of the target once it is legible.
    """
    key = (len(state.images), len(state.turns))
    if state.feature_cache is not None and state.feature_cache[0] == key:
        return state.feature_cache[1].copy()
    phi = _featurize(state)
    state.feature_cache = (key, phi)
    return phi.copy()


def _featurize(state: State) -> np.ndarray:
    scene = state.scene
    image = state.current
    view = image.window
    cand = scene.candidate_indices
    glyphs, regions = scene.candidate_boxes
    seen = np.array([i in state.resolved for i in cand])
    phi = np.zeros(FEATURE_DIM)

    inside = _contains(_windows(view), glyphs)
    phi[_F_REFINE_ANY:_F_REFINE_ANY + N_ANCHORS] = inside.any(axis=1)
    phi[_F_REFINE_SEEN:_F_REFINE_SEEN + N_ANCHORS] = (inside & seen).any(axis=1)
    inside0 = _contains(_ANCHOR_ARR, glyphs)
    phi[_F_RESTART_ANY:_F_RESTART_ANY + N_ANCHORS] = inside0.any(axis=1)
    phi[_F_RESTART_SEEN:_F_RESTART_SEEN + N_ANCHORS] = (inside0 & seen).any(axis=1)
    # restart windows already zoomed into earlier in the episode
    opened = np.array([im.window.as_tuple() for im in state.images[1:]]).reshape(-1, 4)
    if len(opened):
        same = np.abs(_ANCHOR_ARR[:, None, :] - opened[None, :, :]).max(axis=2) < 1e-9
        phi[_F_VISITED:_F_VISITED + N_ANCHORS] = same.any(axis=1)

    for i in cand:
        cell = scene.cells[i]
        if not is_cue_visible(cell, view, image.width, image.height):
            continue
        if not cell.is_target:
            phi[_F_DISTRACTOR] = 1.0
            continue
        phi[_F_CUE] = 1.0
        if is_legible(cell, view, image.width, image.height):
            phi[_F_TARGET] = 1.0
            phi[_F_ANSWER + _VOCAB_INDEX[cell.attribute(scene.ask)]] = 1.0

    phi[_F_DEPTH + min(state.depth(), 3)] = 1.0
    phi[_F_TURNS + min(max(state.turns_remaining, 1), 5) - 1] = 1.0

    # coarse occupancy grid of boxed cells in the current view
    w, h = view.x2 - view.x1, view.y2 - view.y1
    gx = np.clip((regions[:, [0, 2]] - view.x1) / w * GRID, 0, GRID)
    gy = np.clip((regions[:, [1, 3]] - view.y1) / h * GRID, 0, GRID)
    cols = (_GRID_LO[None, :] < gx[:, 1:2]) & (_GRID_LO[None, :] + 1 > gx[:, 0:1])
    rows = (_GRID_LO[None, :] < gy[:, 1:2]) & (_GRID_LO[None, :] + 1 > gy[:, 0:1])
    occupied = (rows[:, :, None] & cols[:, None, :]).any(axis=0)
    phi[_F_GRID:_F_GRID + GRID * GRID] = occupied.ravel()
    return phi


def action_to_text(state: State, a: int) -> str:
    if a >= ANSWER:
        return f"<think>I can read the marked symbol now.</think>\n{ANSWER_VOCAB[a - ANSWER]}"
    if a < RESTART:
        idx, k = len(state.images), a
    else:
        idx, k = 1, a - RESTART
    tc = ToolCall(image_idx=idx, bbox=ZOOM_ANCHORS[k])
    return f"Let me zoom into region {k} of image {idx}.\n{serialize_tool_call(tc)}"


@dataclass
class PolicyParams:
    W: np.ndarray  # (FEATURE_DIM, N_ACTIONS)
    b: np.ndarray  # (N_ACTIONS,)

    @classmethod
    def zeros(cls) -> PolicyParams:
        return cls(np.zeros((FEATURE_DIM, N_ACTIONS)), np.zeros(N_ACTIONS))

    @classmethod
    def init(cls, seed: int, scale: float = 0.01) -> PolicyParams:
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x5EED])
        return cls(
            rng.uniform(-scale, scale, size=(FEATURE_DIM, N_ACTIONS)),
            rng.uniform(-scale, scale, size=N_ACTIONS),
        )

    def copy(self) -> PolicyParams:
        return PolicyParams(self.W.copy(), self.b.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    @classmethod
    def from_flat(cls, v: np.ndarray) -> PolicyParams:
        n = FEATURE_DIM * N_ACTIONS
        return cls(v[:n].reshape(FEATURE_DIM, N_ACTIONS).copy(), v[n:].copy())

    def save(self, path: str | Path) -> None:
        doc = {
            "header": {"feature_dim": FEATURE_DIM, "action_count": N_ACTIONS, "version": CHECKPOINT_VERSION},
            "W": self.W.ravel().tolist(),
            "b": self.b.tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> PolicyParams:
        from .harness import BadCheckpoint

        try:
            doc = json.loads(Path(path).read_text())
            head = doc["header"]
            if (head["feature_dim"], head["action_count"]) != (FEATURE_DIM, N_ACTIONS):
                raise BadCheckpoint(f"{path}: shape {head} does not match this policy")
            if head["version"] != CHECKPOINT_VERSION:
                raise BadCheckpoint(f"{path}: unsupported checkpoint version {head['version']}")
            W = np.array(doc["W"], dtype=float).reshape(FEATURE_DIM, N_ACTIONS)
            b = np.array(doc["b"], dtype=float).reshape(N_ACTIONS)
        except BadCheckpoint:
            raise
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise BadCheckpoint(f"{path}: {e}") from e
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise BadCheckpoint(f"{path}: non-finite parameters")
        return cls(W, b)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probs_from_features(params: PolicyParams, phi: np.ndarray) -> np.ndarray:
    return softmax(phi @ params.W + params.b)


def action_distribution(params: PolicyParams, state: State) -> np.ndarray:
    return probs_from_features(params, featurize(state))


def logprob(params: PolicyParams, phi: np.ndarray, action: int) -> float:
    z = phi @ params.W + params.b
    m = z.max()
    return float(z[action] - m - np.log(np.exp(z - m).sum()))


def logprob_grad(params: PolicyParams, phi: np.ndarray, action: int) -> PolicyParams:
    """Score function: d log pi(a|s) = phi (x) (e_a - pi), bias part e_a - pi."""
    p = probs_from_features(params, phi)
    g = -p
    g[action] += 1.0
    return PolicyParams(np.outer(phi, g), g)


class LogLinearPolicy:
    """Softmax policy over ``N_ACTIONS``; samples, or takes the argmax when greedy."""

    def __init__(self, params: PolicyParams, greedy: bool = False):
        self.params = params
        self.greedy = greedy

    featurize = staticmethod(featurize)

    def act(self, state: State, rng: np.random.Generator) -> Decision:
        phi = featurize(state)
        p = probs_from_features(self.params, phi)
        if self.greedy:
            a = int(np.argmax(p))
        else:
            a = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
            a = min(a, N_ACTIONS - 1)
        return Decision(action_to_text(state, a), action=a, features=phi)


def _answer_action(state: State) -> int:
    scene = state.scene
    return ANSWER + _VOCAB_INDEX[scene.target.attribute(scene.ask)]


class MultiScaleExpert:
    """Ground-truth guided zoomer: coarse-to-fine toward the target, then answers.

    Reads the scene's target location, so it plays the data-synthesis role of
    a strong model that already knows where to look. With ``detour`` set, it
    first inspects that candidate cell down to legibility, then restarts from
    image 1 toward the real target (a self-correcting trajectory).
    """

    featurize = staticmethod(featurize)

    def __init__(self, detour: int | None = None):
        self.detour = detour

    def _goal(self, state: State) -> int:
        if self.detour is not None and self.detour not in state.resolved:
            return self.detour
        return state.scene.target_cell

    def choose(self, state: State) -> int:
        scene = state.scene
        image = state.current
        if is_legible(scene.target, image.window, image.width, image.height):
            return _answer_action(state)
        goal = self._goal(state)
        g = scene.cells[goal].glyph_box
        # restart from the original once the current view no longer holds the goal
        restart = len(state.images) == 1 or intersection_area(image.window, g) < g.area
        base = BBox.full() if restart else image.window
        gc = ((g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2)
        best, best_key = 0, None
        for k, anchor in enumerate(ZOOM_ANCHORS):
            w = compose(base, anchor)
            cx, cy = (w.x1 + w.x2) / 2, (w.y1 + w.y2) / 2
            key = (-intersection_area(w, g), (cx - gc[0]) ** 2 + (cy - gc[1]) ** 2)
            if best_key is None or key < best_key:
                best, best_key = k, key
        return (RESTART if restart else REFINE) + best

    def act(self, state: State, rng: np.random.Generator) -> Decision:
        a = self.choose(state)
        return Decision(action_to_text(state, a), action=a, features=featurize(state))


class ImmediateAnswerPolicy:
    """Answers on the first turn, uniformly at random over the vocabulary."""

    def act(self, state: State, rng: np.random.Generator) -> Decision:
        a = ANSWER + int(rng.integers(len(ANSWER_VOCAB)))
        return Decision(action_to_text(state, a), action=a)


class AlwaysZoomPolicy:
    """Never answers; zooms into the top-left anchor of the latest image."""

    def act(self, state: State, rng: np.random.Generator) -> Decision:
        return Decision(action_to_text(state, REFINE), action=REFINE)


class OscillatoryPolicy:
    """Zooms repeatedly into nearly the same window on image 1, then answers.

    The window is centred on the boxed cell nearest the image centre and is
    shifted by ``jitter`` per turn, so successive boxes overlap heavily.
    """

    def __init__(self, n_zooms: int = 3, size: float = 0.5, jitter: float = 0.01):
        self.n_zooms = n_zooms
        self.size = size
        self.jitter = jitter

    def act(self, state: State, rng: np.random.Generator) -> Decision:
        scene = state.scene
        n_done = len(state.turns)
        if n_done >= self.n_zooms or state.turns_remaining == 1:
            image = state.current
            if is_legible(scene.target, image.window, image.width, image.height):
                a = _answer_action(state)
            else:
                a = ANSWER + scene.seed % len(ANSWER_VOCAB)
            return Decision(action_to_text(state, a), action=a)
        cells = [scene.cells[i] for i in scene.candidate_indices]
        focus = min(cells, key=lambda c: ((c.region.x1 + c.region.x2) / 2 - 0.5) ** 2
                    + ((c.region.y1 + c.region.y2) / 2 - 0.5) ** 2)
        cx = (focus.region.x1 + focus.region.x2) / 2 + self.jitter * n_done
        cy = (focus.region.y1 + focus.region.y2) / 2 + self.jitter * n_done
        half = self.size / 2
        x1 = min(max(cx - half, 0.0), 1.0 - self.size)
        y1 = min(max(cy - half, 0.0), 1.0 - self.size)
        box = BBox(round(x1, 6), round(y1, 6), round(x1 + self.size, 6), round(y1 + self.size, 6))
        tc = ToolCall(image_idx=1, bbox=box, label="marked box")
        return Decision(f"The marked box should be around here.\n{serialize_tool_call(tc)}")
