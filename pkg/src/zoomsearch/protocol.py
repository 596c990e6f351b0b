"""Conversation protocol: prompt templates, tool-call grammar and parsing.

The parser is total: any input either yields an :class:`AssistantTurn` or
raises a :class:`ProtocolError` subclass.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

from .geometry import BBox, BoxError, EmptyBox, OutOfRange

TOOL_NAME = "image_zoom_in_tool"
TEMPLATE_VERSION = "v1"
COORD_DECIMALS = 6

__all__ = [
    "AssistantTurn", "FinalAnswer", "ToolCall", "ProtocolError", "MalformedBox", "MalformedToolCall",
    "UnknownTool", "OutOfRange", "EmptyBox", "build_system_prompt", "build_user_prompt",
    "format_tool_response", "format_observation", "parse_bbox_string", "parse_assistant_turn",
    "serialize_tool_call", "format_bbox",
]


class ProtocolError(ValueError):
    """Any structured failure to interpret assistant output."""


class MalformedBox(ProtocolError):
    pass


class MalformedToolCall(ProtocolError):
    pass


class UnknownTool(ProtocolError):
    pass


class BoxRangeError(ProtocolError, OutOfRange):
    pass


class BoxEmptyError(ProtocolError, EmptyBox):
    pass


def _template(name: str) -> str:
    path = resources.files("zoomsearch") / "templates" / TEMPLATE_VERSION / name
    return path.read_text(encoding="utf-8").removesuffix("\n")


_SYSTEM_PROMPT = _template("system_prompt.txt")
_USER_PROMPT = _template("user_prompt.txt")
_TOOL_RESPONSE = _template("tool_response.txt")


def build_system_prompt() -> str:
    return _SYSTEM_PROMPT


def build_user_prompt(question: str) -> str:
    return _USER_PROMPT.replace("{question}", question)


def format_observation(new_idx: int, source_idx: int, image_token: str = "<image>") -> str:
    """Full environment message for a crop: image placeholder plus tool response."""
    if not new_idx > source_idx >= 1:
        raise ValueError(f"need new_idx > source_idx >= 1, got {new_idx}, {source_idx}")
    return (
        _TOOL_RESPONSE.replace("{image_zoom_in}", image_token)
        .replace("{new_idx}", str(new_idx))
        .replace("{image_idx}", str(source_idx))
    )


def format_tool_response(new_idx: int, source_idx: int) -> str:
    """The ``<tool_response>`` block announcing a new crop."""
    full = format_observation(new_idx, source_idx)
    return full[full.index("<tool_response>"):]


def format_tool_error(message: str) -> str:
    return f"<tool_response>\nError: {message}\n</tool_response>"


@dataclass(frozen=True)
class ToolCall:
    image_idx: int
    bbox: BBox
    label: str | None = None
    name: str = TOOL_NAME

    def __post_init__(self) -> None:
        if self.name != TOOL_NAME:
            raise UnknownTool(f"unknown tool {self.name!r}")
        if isinstance(self.image_idx, bool) or not isinstance(self.image_idx, int) or self.image_idx < 1:
            raise MalformedToolCall(f"image_idx must be an integer >= 1, got {self.image_idx!r}")


@dataclass(frozen=True)
class FinalAnswer:
    text: str


@dataclass(frozen=True)
class AssistantTurn:
    thought: str
    action: ToolCall | FinalAnswer
    extra_tool_calls: bool = False

    @property
    def is_tool_call(self) -> bool:
        return isinstance(self.action, ToolCall)


_WS = r"[ \t\n\r\f\v]*"
_NUM = r"([+-]?(?:\d+(?:\.\d*)?|\.\d+))"
_BOX_RE = re.compile(
    rf"<box>{_WS}\({_WS}{_NUM}{_WS},{_WS}{_NUM}{_WS}\){_WS},{_WS}\({_WS}{_NUM}{_WS},{_WS}{_NUM}{_WS}\){_WS}</box>",
    re.ASCII,
)


def parse_bbox_string(s: str) -> BBox:
    """Parse ``'<box>(x1,y1),(x2,y2)</box>'`` into a validated :class:`BBox`."""
    if not isinstance(s, str):
        raise MalformedBox(f"bbox must be a string, got {type(s).__name__}")
    m = _BOX_RE.fullmatch(s)
    if m is None:
        raise MalformedBox(f"not a box string: {s[:80]!r}")
    x1, y1, x2, y2 = (float(g) for g in m.groups())
    try:
        return BBox(x1, y1, x2, y2)
    except OutOfRange as e:
        raise BoxRangeError(str(e)) from None
    except EmptyBox as e:
        raise BoxEmptyError(str(e)) from None


def format_bbox(b: BBox) -> str:
    d = COORD_DECIMALS
    return f"<box>({b.x1:.{d}f},{b.y1:.{d}f}),({b.x2:.{d}f},{b.y2:.{d}f})</box>"


def serialize_tool_call(tc: ToolCall) -> str:
    args: dict = {"image_idx": tc.image_idx, "bbox_2d": format_bbox(tc.bbox)}
    if tc.label is not None:
        args["label"] = tc.label
    body = json.dumps({"name": tc.name, "arguments": args}, ensure_ascii=False)
    # keep tag-like substrings inside JSON strings from closing or opening a block
    body = body.replace("</tool_call>", "<\\/tool_call>").replace("<tool_call>", "\\u003ctool_call>")
    return f"<tool_call>\n{body}\n</tool_call>"


_OPEN, _CLOSE = "<tool_call>", "</tool_call>"
_THINK_CLOSE = "</think>"
_ARG_KEYS = {"image_idx", "bbox_2d", "label"}


def _decode_tool_call(payload: str) -> ToolCall:
    try:
        obj = json.loads(payload)
    except (ValueError, RecursionError) as e:
        raise MalformedToolCall(f"invalid JSON in tool call: {e}") from None
    if not isinstance(obj, dict) or set(obj) != {"name", "arguments"}:
        raise MalformedToolCall("tool call must be an object with exactly 'name' and 'arguments'")
    name, args = obj["name"], obj["arguments"]
    if name != TOOL_NAME:
        raise UnknownTool(f"unknown tool {name!r}")
    if not isinstance(args, dict):
        raise MalformedToolCall("'arguments' must be an object")
    if not {"image_idx", "bbox_2d"} <= set(args) or not set(args) <= _ARG_KEYS:
        raise MalformedToolCall(f"bad argument keys {sorted(args)}")
    label = args.get("label")
    if label is not None and not isinstance(label, str):
        raise MalformedToolCall("'label' must be a string")
    bbox = parse_bbox_string(args["bbox_2d"])
    return ToolCall(image_idx=args["image_idx"], bbox=bbox, label=label)


def parse_assistant_turn(text: str | bytes) -> AssistantTurn:
    """Split one assistant message into thought and action.

    The first well-formed ``<tool_call>`` block is the action; later blocks
    are ignored and flagged. Without any tool-call tag, the text after the
    last ``</think>`` (or the whole text) is the final answer.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"assistant output is not UTF-8: {e}") from None
    if not isinstance(text, str):
        raise ProtocolError(f"assistant output must be text, got {type(text).__name__}")

    start = text.find(_OPEN)
    if start < 0:
        if _CLOSE in text:
            raise MalformedToolCall("closing </tool_call> without opening tag")
        cut = text.rfind(_THINK_CLOSE)
        if cut >= 0:
            thought, answer = text[:cut + len(_THINK_CLOSE)], text[cut + len(_THINK_CLOSE):]
        else:
            thought, answer = "", text
        return AssistantTurn(thought=thought.strip(), action=FinalAnswer(answer.strip()))

    end = text.find(_CLOSE, start + len(_OPEN))
    if end < 0:
        raise MalformedToolCall("unterminated <tool_call> block")
    tc = _decode_tool_call(text[start + len(_OPEN):end])
    extra = _OPEN in text[end + len(_CLOSE):]
    return AssistantTurn(thought=text[:start].strip(), action=tc, extra_tool_calls=extra)
