"""Discrete edit instructions and their fixed-length token encoding.

The instruction vocabulary is tiny and closed: four task verbs, three shape
kinds, six colors and four style transforms, laid out in disjoint id ranges so
the 6-slot encoding is injective by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

TASKS = ("add", "remove", "replace", "style")
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
STYLES = ("grayscale", "hue_rotate", "sepia", "invert")

# RGB used by the procedural renderer, one row per entry of COLORS.
COLOR_RGB = np.array(
    [
        [0.85, 0.12, 0.12],
        [0.10, 0.70, 0.20],
        [0.15, 0.25, 0.85],
        [0.92, 0.85, 0.10],
        [0.80, 0.15, 0.80],
        [0.10, 0.80, 0.80],
    ],
    dtype=np.float32,
)

PAD_ID = 0
_TASK_BASE = 1
_SHAPE_BASE = _TASK_BASE + len(TASKS)
_COLOR_BASE = _SHAPE_BASE + len(SHAPES)
_STYLE_BASE = _COLOR_BASE + len(COLORS)
VOCAB_SIZE = _STYLE_BASE + len(STYLES)
INSTRUCTION_LEN = 6

_ABSENT_BYTE = 255


def _check_index(value: int, limit: int, what: str) -> None:
    if not isinstance(value, (int, np.integer)) or not 0 <= int(value) < limit:
        raise ValidationError(f"{what} must be an integer in [0, {limit}), got {value!r}")


@dataclass(frozen=True)
class Instruction:
    """One edit request over a source video.

    ``subject`` and ``object2`` are (shape index, color index) pairs into
    SHAPES/COLORS. Local tasks carry a subject; ``replace`` additionally
    carries the replacement in ``object2``; ``style`` carries only a style id.
    ``trajectory_id`` is generator metadata and does not affect the encoding.
    """

    task: str
    subject: tuple[int, int] | None = None
    object2: tuple[int, int] | None = None
    style_id: int | None = None
    trajectory_id: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.task == "style":
            if self.style_id is None:
                raise ValidationError("style instructions require style_id")
            if self.subject is not None or self.object2 is not None:
                raise ValidationError("style instructions carry no subject/object2")
            _check_index(self.style_id, len(STYLES), "style_id")
        else:
            if self.subject is None:
                raise ValidationError(f"{self.task} instructions require a subject")
            if self.style_id is not None:
                raise ValidationError("style_id is only valid for style instructions")
            _check_index(self.subject[0], len(SHAPES), "subject shape")
            _check_index(self.subject[1], len(COLORS), "subject color")
            if self.task == "replace":
                if self.object2 is None:
                    raise ValidationError("replace instructions require object2")
                _check_index(self.object2[0], len(SHAPES), "object2 shape")
                _check_index(self.object2[1], len(COLORS), "object2 color")
            elif self.object2 is not None:
                raise ValidationError(f"object2 is only valid for replace, not {self.task}")
        if self.trajectory_id is not None and int(self.trajectory_id) < 0:
            raise ValidationError("trajectory_id must be non-negative")


def task_code(task: str) -> int:
    return TASKS.index(task)


def encode_instruction(instr: Instruction) -> np.ndarray:
    """Encode an instruction as the fixed 6-slot id sequence.

    Layout: [task, subject shape, subject color, object2 shape, object2 color,
    style], with PAD_ID in unused slots. Disjoint id ranges per field make the
    mapping injective over valid instructions.
    """
    ids = [PAD_ID] * INSTRUCTION_LEN
    ids[0] = _TASK_BASE + TASKS.index(instr.task)
    if instr.subject is not None:
        ids[1] = _SHAPE_BASE + instr.subject[0]
        ids[2] = _COLOR_BASE + instr.subject[1]
    if instr.object2 is not None:
        ids[3] = _SHAPE_BASE + instr.object2[0]
        ids[4] = _COLOR_BASE + instr.object2[1]
    if instr.style_id is not None:
        ids[5] = _STYLE_BASE + instr.style_id
    return np.asarray(ids, dtype=np.int64)


def instruction_text(instr: Instruction) -> str:
    """Human-readable rendering, for logs and reports only."""
    if instr.task == "style":
        return f"apply {STYLES[instr.style_id]} style"
    shape, color = instr.subject
    noun = f"{COLORS[color]} {SHAPES[shape]}"
    if instr.task == "add":
        return f"add a {noun}"
    if instr.task == "remove":
        return f"remove the {noun}"
    shape2, color2 = instr.object2
    return f"replace the {noun} with a {COLORS[color2]} {SHAPES[shape2]}"


def pack_instruction(instr: Instruction) -> bytes:
    """7-byte record: task, subj shape/color, obj2 shape/color, style, trajectory."""

    def b(value):
        return _ABSENT_BYTE if value is None else int(value)

    subj = instr.subject or (None, None)
    obj2 = instr.object2 or (None, None)
    return bytes(
        [
            TASKS.index(instr.task),
            b(subj[0]),
            b(subj[1]),
            b(obj2[0]),
            b(obj2[1]),
            b(instr.style_id),
            b(instr.trajectory_id),
        ]
    )


def unpack_instruction(record: bytes) -> Instruction:
    if len(record) != 7:
        raise ValidationError(f"instruction record must be 7 bytes, got {len(record)}")

    def v(byte):
        return None if byte == _ABSENT_BYTE else int(byte)

    task_idx = record[0]
    if task_idx >= len(TASKS):
        raise ValidationError(f"unknown task code {task_idx}")
    subj = (v(record[1]), v(record[2]))
    obj2 = (v(record[3]), v(record[4]))
    return Instruction(
        task=TASKS[task_idx],
        subject=None if subj[0] is None else subj,
        object2=None if obj2[0] is None else obj2,
        style_id=v(record[5]),
        trajectory_id=v(record[6]),
    )
