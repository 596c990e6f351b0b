"""Shared builders and strategies for the test suite."""
from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from zoomsearch import protocol
from zoomsearch.geometry import BBox
from zoomsearch.protocol import AssistantTurn, FinalAnswer, ToolCall
from zoomsearch.rollout import Step, Trajectory
from zoomsearch.synthenv import QAPair, Scene


@st.composite
def boxes(draw, min_side=1e-3):
    x1 = draw(st.floats(0.0, 1.0 - min_side))
    y1 = draw(st.floats(0.0, 1.0 - min_side))
    x2 = draw(st.floats(x1 + min_side, 1.0))
    y2 = draw(st.floats(y1 + min_side, 1.0))
    return BBox(x1, y1, x2, y2)


def make_trajectory(
    scene: Scene, qa: QAPair, turn_boxes: list[BBox | None], answer: str | None,
    features: list[np.ndarray] | None = None, actions: list[int] | None = None,
) -> Trajectory:
    """Hand-built trajectory: one model turn per entry of ``turn_boxes``.

    A box is a zoom on image 1 followed by an environment step; ``None`` is a
    malformed turn answered with an error. A non-None ``answer`` appends a
    final-answer turn.
    """
    steps = []
    k = 0

    def extras():
        nonlocal k
        f = None if features is None else features[k]
        a = None if actions is None else actions[k]
        k += 1
        return f, a

    for b in turn_boxes:
        f, a = extras()
        if b is None:
            steps.append(Step("<tool_call>", True, error="unterminated", features=f, action=a))
            steps.append(Step(protocol.format_tool_error("unterminated"), False))
        else:
            tc = ToolCall(1, b)
            turn = AssistantTurn("", tc)
            steps.append(Step(protocol.serialize_tool_call(tc), True, turn=turn, box_in_original=b,
                              features=f, action=a))
            steps.append(Step(protocol.format_observation(2, 1), False))
    termination = "max_turns"
    if answer is not None:
        f, a = extras()
        steps.append(Step(answer, True, turn=AssistantTurn("", FinalAnswer(answer)), features=f, action=a))
        termination = "answered"
    return Trajectory((scene.seed, scene.difficulty), qa, tuple(steps), answer, termination)
