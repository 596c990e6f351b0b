"""Multi-turn episode loop against a scene.

The state holds the full interaction history: the question, every image seen
so far (index 1 is the original) and every assistant turn with the
environment's reply. Each model turn and each environment reply becomes a
:class:`Step`; only model turns carry ``is_model_action=True``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Protocol, Sequence

import numpy as np

from . import protocol
from .geometry import BBox, compose
from .protocol import AssistantTurn, FinalAnswer, ProtocolError, ToolCall
from .synthenv import (
    BASE_RESOLUTION,
    Crop,
    DegenerateBox,
    Image,
    QAPair,
    Scene,
    is_cue_visible,
    render,
)

log = logging.getLogger(__name__)

Termination = Literal["answered", "max_turns", "protocol_error"]
LOG_SCHEMA_VERSION = 1


class BadImageIndex(ValueError):
    pass


@dataclass(frozen=True)
class RolloutConfig:
    max_turns: int = 5
    base_size: int = BASE_RESOLUTION
    crop_size: int = BASE_RESOLUTION

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


@dataclass
class State:
    scene: Scene
    qa: QAPair
    images: list[Image]
    turns: list[tuple[AssistantTurn | None, str | None]] = field(default_factory=list)
    max_turns: int = 5
    # candidate cells whose border colour has been visible in some image so far
    resolved: set[int] = field(default_factory=set)
    # (key, features) memo for policies that encode the state
    feature_cache: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def turns_remaining(self) -> int:
        return self.max_turns - len(self.turns)

    @property
    def current(self) -> Image:
        return self.images[-1]

    def depth(self, image_idx: int | None = None) -> int:
        """Provenance chain length of an image (0 for the original)."""
        idx = len(self.images) if image_idx is None else image_idx
        d = 0
        while (prov := self.images[idx - 1].provenance) is not None:
            idx = prov.source_index
            d += 1
        return d

    def _note_resolved(self, image: Image) -> None:
        for i in self.scene.candidate_indices:
            if is_cue_visible(self.scene.cells[i], image.window, image.width, image.height):
                self.resolved.add(i)


def initial_state(scene: Scene, qa: QAPair, cfg: RolloutConfig = RolloutConfig()) -> State:
    original = render(scene, BBox.full(), cfg.base_size, cfg.base_size)
    state = State(scene=scene, qa=qa, images=[original], max_turns=cfg.max_turns)
    state._note_resolved(original)
    return state


@dataclass(frozen=True)
class Decision:
    """What a policy emits for one turn.

    ``action`` and ``features`` are filled in by policies that act in the
    discrete action space, so the learner can score the turn.
    """

    text: str
    action: int | None = None
    features: np.ndarray | None = None


class Policy(Protocol):
    def act(self, state: State, rng: np.random.Generator) -> Decision: ...


@dataclass(frozen=True)
class Step:
    text: str
    is_model_action: bool
    turn: AssistantTurn | None = None
    error: str | None = None
    observation: Image | None = None
    box_in_original: BBox | None = None
    features: np.ndarray | None = field(default=None, repr=False, compare=False)
    action: int | None = None


@dataclass(frozen=True)
class Trajectory:
    scene_ref: tuple[int, str]
    qa: QAPair
    steps: tuple[Step, ...]
    final_answer: str | None
    termination: Termination

    @property
    def model_steps(self) -> list[Step]:
        return [s for s in self.steps if s.is_model_action]

    @property
    def boxes(self) -> list[BBox | None]:
        return extract_boxes(self)

    @property
    def T(self) -> int:
        return sum(s.box_in_original is not None for s in self.steps)

    @property
    def num_turns(self) -> int:
        return len(self.model_steps)


def compose_to_original(state: State, image_idx: int, bbox: BBox) -> BBox:
    """Express ``bbox`` (relative to image ``image_idx``) in original-image coordinates."""
    if not 1 <= image_idx <= len(state.images):
        raise BadImageIndex(f"image_idx {image_idx} not in 1..{len(state.images)}")
    box = bbox
    idx = image_idx
    while (prov := state.images[idx - 1].provenance) is not None:
        box = compose(prov.bbox_in_source, box)
        idx = prov.source_index
    return box


def apply_tool(state: State, tc: ToolCall, cfg: RolloutConfig = RolloutConfig()) -> Image:
    """Execute a zoom: render the composed window and append it as the next image."""
    window = compose_to_original(state, tc.image_idx, tc.bbox)
    image = render(state.scene, window, cfg.crop_size, cfg.crop_size,
                   provenance=Crop(tc.image_idx, tc.bbox))
    state.images.append(image)
    state._note_resolved(image)
    return image


def extract_boxes(traj: Trajectory) -> list[BBox | None]:
    """One entry per model turn: the zoom box in original coordinates, or None."""
    return [s.box_in_original for s in traj.steps if s.is_model_action]


def run_episode(
    policy: Policy,
    scene: Scene,
    qa: QAPair,
    cfg: RolloutConfig = RolloutConfig(),
    rng: np.random.Generator | None = None,
) -> Trajectory:
    rng = np.random.default_rng(scene.seed) if rng is None else rng
    state = initial_state(scene, qa, cfg)
    steps: list[Step] = []
    final_answer: str | None = None
    termination: Termination | None = None
    last_failed = False

    while state.turns_remaining > 0:
        try:
            decision = policy.act(state, rng)
        except Exception as e:  # a broken policy ends the episode, it does not crash collection
            log.warning("policy failed on seed %s: %s", scene.seed, e)
            termination = "protocol_error"
            break

        try:
            turn = protocol.parse_assistant_turn(decision.text)
        except ProtocolError as e:
            reply = protocol.format_tool_error(str(e))
            steps.append(Step(decision.text, True, error=str(e), features=decision.features,
                              action=decision.action))
            steps.append(Step(reply, False, action=decision.action))
            state.turns.append((None, reply))
            last_failed = True
            continue

        if isinstance(turn.action, FinalAnswer):
            steps.append(Step(decision.text, True, turn=turn, features=decision.features,
                              action=decision.action))
            state.turns.append((turn, None))
            final_answer = turn.action.text
            termination = "answered"
            break

        tc = turn.action
        try:
            box = compose_to_original(state, tc.image_idx, tc.bbox)
            image = apply_tool(state, tc, cfg)
        except (BadImageIndex, DegenerateBox) as e:
            reply = protocol.format_tool_error(str(e))
            steps.append(Step(decision.text, True, turn=turn, error=str(e),
                              features=decision.features, action=decision.action))
            steps.append(Step(reply, False, action=decision.action))
            state.turns.append((turn, reply))
            last_failed = True
            continue

        reply = protocol.format_observation(len(state.images), tc.image_idx)
        steps.append(Step(decision.text, True, turn=turn, box_in_original=box,
                          features=decision.features, action=decision.action))
        state.turns.append((turn, reply))
        obs_features = None
        featurize = getattr(policy, "featurize", None)
        if featurize is not None and decision.features is not None:
            obs_features = featurize(state)
        # pseudo-label for the observation: the zoom that produced it
        steps.append(Step(reply, False, observation=image, features=obs_features,
                          action=decision.action))
        last_failed = False

    if termination is None:
        termination = "protocol_error" if last_failed else "max_turns"
    return Trajectory(
        scene_ref=(scene.seed, scene.difficulty),
        qa=qa,
        steps=tuple(steps),
        final_answer=final_answer,
        termination=termination,
    )


def trajectory_record(traj: Trajectory, reward=None) -> dict:
    """JSON-ready log record for one trajectory."""
    turns = []
    for s in traj.steps:
        entry = {"role": "assistant" if s.is_model_action else "tool", "text": s.text}
        if s.error is not None:
            entry["error"] = s.error
        turns.append(entry)
    return {
        "schema": LOG_SCHEMA_VERSION,
        "seed": traj.scene_ref[0],
        "difficulty": traj.scene_ref[1],
        "question": traj.qa.question,
        "answer": traj.qa.answer,
        "turns": turns,
        "boxes_in_original": [None if b is None else list(b.as_tuple()) for b in traj.boxes],
        "final_answer": traj.final_answer,
        "T": traj.T,
        "termination": traj.termination,
        "reward": None if reward is None else reward.to_dict(),
    }
