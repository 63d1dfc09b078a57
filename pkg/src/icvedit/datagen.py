"""Procedural paired-video generator for the four editing tasks.

Scenes are a static procedural background plus moving solid shapes on linear
trajectories. Each task renders a (source, target) pair whose pixel mask is
the dilated set of changed pixels, so masks are sound by construction. All
randomness flows through per-sample seeds derived from a master seed with a
splitmix64 step, which keeps shards bit-reproducible.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .containers import read_array_block, read_exact, write_array_block
from .errors import (
    ShapeError,
    ShardMagicError,
    ShardTruncatedError,
    ShardVersionError,
    UnsupportedTaskError,
    ValidationError,
)
from .instructions import (
    COLOR_RGB,
    COLORS,
    Instruction,
    SHAPES,
    STYLES,
    TASKS,
    pack_instruction,
    unpack_instruction,
)
from .latents import CODEC_FACTOR, PixelVideo, _LUMA

SHARD_MAGIC = b"RCVD"
SHARD_VERSION = 1

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

N_BACKGROUNDS = 7
# saturated fills so global style transforms visibly change the statistics
_FLAT_BG = np.array(
    [[0.70, 0.30, 0.20], [0.20, 0.55, 0.80], [0.15, 0.20, 0.55], [0.85, 0.75, 0.30]],
    dtype=np.float64,
)


def splitmix64(x: int) -> int:
    """One splitmix64 output step (finalizer only)."""
    z = x & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Deterministic 64-bit per-sample seed from a master seed."""
    return splitmix64((master + (index + 1) * _GOLDEN) & _M64)


@dataclass(frozen=True)
class MovingShape:
    """A solid shape moving on a linear trajectory, fully inside the frame."""

    kind: int    # index into SHAPES
    color: int   # index into COLORS
    size: float  # half-extent in pixels
    start: tuple[float, float]  # (row, col) center at the first frame
    end: tuple[float, float]

    def center(self, frame: int, frames: int) -> tuple[float, float]:
        if frames == 1:
            return self.start
        a = frame / (frames - 1)
        return (
            self.start[0] + a * (self.end[0] - self.start[0]),
            self.start[1] + a * (self.end[1] - self.start[1]),
        )


@dataclass(frozen=True)
class SceneSpec:
    background: int
    shapes: tuple[MovingShape, ...]
    frames: int
    height: int
    width: int

    def __post_init__(self):
        if not self.shapes:
            raise ValidationError("a scene needs at least one shape")
        for shape in self.shapes:
            for cy, cx in (shape.start, shape.end):
                if not (
                    shape.size <= cy <= self.height - 1 - shape.size
                    and shape.size <= cx <= self.width - 1 - shape.size
                ):
                    raise ValidationError("shape trajectory leaves the frame")


@dataclass(frozen=True)
class SamplePair:
    """One training example: source/target videos, pixel mask, instruction."""

    source: PixelVideo
    target: PixelVideo
    pixel_mask: np.ndarray  # (F, H, W) uint8
    instruction: Instruction
    task: str
    seed: int

    def __post_init__(self):
        mask = np.asarray(self.pixel_mask)
        if mask.shape != self.source.values.shape[:3]:
            raise ShapeError(
                f"mask shape {mask.shape} != video shape {self.source.values.shape[:3]}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise ValidationError("pixel mask must be binary")
        if self.source.values.shape != self.target.values.shape:
            raise ShapeError("source and target must have identical shape")
        arr = mask.astype(np.uint8).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pixel_mask", arr)


@dataclass(frozen=True)
class ShardIndex:
    count: int
    offsets: tuple[int, ...]
    task_histogram: dict[str, int]
    master_seed: int


def render_background(bg_id: int, frames: int, height: int, width: int) -> np.ndarray:
    if not 0 <= bg_id < N_BACKGROUNDS:
        raise ValidationError(f"background id {bg_id} out of range")
    if bg_id < 4:
        img = np.broadcast_to(_FLAT_BG[bg_id], (height, width, 3)).copy()
    elif bg_id == 4:  # horizontal gradient
        ramp = np.linspace(0.0, 1.0, width)[None, :, None]
        img = (1 - ramp) * _FLAT_BG[0] + ramp * _FLAT_BG[1]
        img = np.broadcast_to(img, (height, width, 3)).copy()
    elif bg_id == 5:  # vertical gradient
        ramp = np.linspace(0.0, 1.0, height)[:, None, None]
        img = (1 - ramp) * _FLAT_BG[2] + ramp * _FLAT_BG[3]
        img = np.broadcast_to(img, (height, width, 3)).copy()
    else:  # checkerboard
        ys, xs = np.mgrid[0:height, 0:width]
        checker = ((ys // 8 + xs // 8) % 2).astype(np.float64)
        img = checker[..., None] * _FLAT_BG[1] + (1 - checker[..., None]) * _FLAT_BG[0]
    return np.broadcast_to(img[None], (frames, height, width, 3)).astype(np.float32).copy()


def _coverage(kind: int, cy: float, cx: float, size: float, height: int, width: int) -> np.ndarray:
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    if SHAPES[kind] == "square":
        return (np.abs(ys - cy) <= size) & (np.abs(xs - cx) <= size)
    if SHAPES[kind] == "circle":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= size**2
    # upward triangle: apex at (cy - size, cx), base at row cy + size
    inside_rows = (ys >= cy - size) & (ys <= cy + size)
    halfwidth = (ys - (cy - size)) / 2.0
    return inside_rows & (np.abs(xs - cx) <= halfwidth)


def render_scene(spec: SceneSpec, extra: tuple[MovingShape, ...] = ()) -> np.ndarray:
    """Rasterize background and shapes (painter's order) into (F, H, W, 3)."""
    video = render_background(spec.background, spec.frames, spec.height, spec.width)
    for frame in range(spec.frames):
        for shape in spec.shapes + tuple(extra):
            cy, cx = shape.center(frame, spec.frames)
            hit = _coverage(shape.kind, cy, cx, shape.size, spec.height, spec.width)
            video[frame][hit] = COLOR_RGB[shape.color]
    return video


def apply_style(video: np.ndarray, style_id: int) -> np.ndarray:
    """Exact per-pixel global color transform; target == transform(source)."""
    v = video.astype(np.float32)
    name = STYLES[style_id]
    if name == "grayscale":
        luma = (v @ _LUMA.astype(np.float32)).astype(np.float32)
        out = np.repeat(luma[..., None], 3, axis=-1)
    elif name == "hue_rotate":
        out = v[..., [2, 0, 1]]  # cyclic channel shift, a crude 120-degree rotation
    elif name == "sepia":
        m = np.array(
            [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]],
            dtype=np.float32,
        )
        out = np.clip(v @ m.T, 0.0, 1.0)
    elif name == "invert":
        out = 1.0 - v
    else:  # pragma: no cover
        raise ValidationError(f"unknown style {style_id}")
    return out.astype(np.float32)


def _sample_shape(
    rng: np.random.Generator,
    frames: int,
    height: int,
    width: int,
    forbid_colors: tuple[int, ...] = (),
) -> MovingShape:
    kind = int(rng.integers(len(SHAPES)))
    allowed = [c for c in range(len(COLORS)) if c not in forbid_colors]
    color = int(rng.choice(allowed))
    max_size = max(2.0, 0.18 * min(height, width))
    size = float(rng.uniform(2.0, max_size))
    lo_y, hi_y = size, height - 1 - size
    lo_x, hi_x = size, width - 1 - size
    start = (float(rng.uniform(lo_y, hi_y)), float(rng.uniform(lo_x, hi_x)))
    end = (float(rng.uniform(lo_y, hi_y)), float(rng.uniform(lo_x, hi_x)))
    return MovingShape(kind=kind, color=color, size=size, start=start, end=end)


def _sample_scene(rng: np.random.Generator, frames: int, height: int, width: int) -> SceneSpec:
    background = int(rng.integers(N_BACKGROUNDS))
    n_shapes = int(rng.integers(1, 3))
    shapes = tuple(_sample_shape(rng, frames, height, width) for _ in range(n_shapes))
    return SceneSpec(background=background, shapes=shapes, frames=frames, height=height, width=width)


def _diff_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frame dilation of the changed-pixel set (1 px margin)."""
    changed = np.any(a != b, axis=-1)
    out = np.zeros_like(changed)
    structure = np.ones((3, 3), dtype=bool)
    for f in range(changed.shape[0]):
        out[f] = binary_dilation(changed[f], structure=structure)
    return out.astype(np.uint8)


def generate_pair(task: str, seed: int, dims: tuple[int, int, int]) -> SamplePair:
    """Render one deterministic (source, target) pair for the given task.

    The scene and the edit subject depend only on the seed, not the task, so
    pairs of different tasks from the same seed share their background and
    subject (which is what cross-task augmentation relies on).
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    frames, height, width = dims
    if frames < 1 or height < CODEC_FACTOR or width < CODEC_FACTOR:
        raise ShapeError(f"dims too small for codec factor {CODEC_FACTOR}: {dims}")
    if height % CODEC_FACTOR or width % CODEC_FACTOR:
        raise ShapeError(f"height/width must be divisible by {CODEC_FACTOR}, got {dims}")

    scene_rng = np.random.default_rng(derive_seed(seed, 0))
    edit_rng = np.random.default_rng(derive_seed(seed, 1))
    scene = _sample_scene(scene_rng, frames, height, width)
    distractor_colors = tuple(s.color for s in scene.shapes)
    subject = _sample_shape(edit_rng, frames, height, width, forbid_colors=distractor_colors)
    subj_ref = (subject.kind, subject.color)

    base = render_scene(scene)
    with_subject = render_scene(scene, (subject,))

    if task == "add":
        source, target = base, with_subject
        instr = Instruction(task="add", subject=subj_ref)
    elif task == "remove":
        source, target = with_subject, base
        instr = Instruction(task="remove", subject=subj_ref)
    elif task == "replace":
        kind2 = int(edit_rng.integers(len(SHAPES)))
        other_colors = [c for c in range(len(COLORS)) if c != subject.color]
        color2 = int(edit_rng.choice(other_colors))
        object2 = replace(subject, kind=kind2, color=color2)
        source = with_subject
        target = render_scene(scene, (object2,))
        instr = Instruction(task="replace", subject=subj_ref, object2=(kind2, color2))
    else:  # style
        style_id = int(edit_rng.integers(len(STYLES)))
        source = with_subject
        target = apply_style(source, style_id)
        instr = Instruction(task="style", style_id=style_id)

    if task == "style":
        mask = np.ones((frames, height, width), dtype=np.uint8)
    else:
        mask = _diff_mask(source, target)
    return SamplePair(
        source=PixelVideo(source),
        target=PixelVideo(target),
        pixel_mask=mask,
        instruction=instr,
        task=task,
        seed=seed,
    )


def augment_reversible(pair: SamplePair) -> SamplePair:
    """Swap source and target, rewriting the instruction; an involution."""
    if pair.task == "style":
        raise UnsupportedTaskError("reversible augmentation is undefined for style pairs")
    instr = pair.instruction
    if pair.task == "replace":
        new_task = "replace"
        new_instr = Instruction(task="replace", subject=instr.object2, object2=instr.subject,
                                trajectory_id=instr.trajectory_id)
    elif pair.task == "add":
        new_task = "remove"
        new_instr = Instruction(task="remove", subject=instr.subject,
                                trajectory_id=instr.trajectory_id)
    else:
        new_task = "add"
        new_instr = Instruction(task="add", subject=instr.subject,
                                trajectory_id=instr.trajectory_id)
    return SamplePair(
        source=pair.target,
        target=pair.source,
        pixel_mask=pair.pixel_mask,
        instruction=new_instr,
        task=new_task,
        seed=pair.seed,
    )


def augment_cross_task(
    replace_pair: SamplePair, remove_pair: SamplePair
) -> tuple[SamplePair, SamplePair]:
    """Recombine a replace pair (bg+A -> bg+B) with a remove pair (bg+A -> bg).

    Emits an add pair (bg -> bg+B) and its reversed remove pair (bg+B -> bg),
    with masks recomputed from shape B's pixel footprint.
    """
    if replace_pair.task != "replace" or remove_pair.task != "remove":
        raise ValidationError("expected a replace pair and a remove pair")
    if replace_pair.seed != remove_pair.seed or not np.array_equal(
        replace_pair.source.values, remove_pair.source.values
    ):
        raise ValidationError("pairs do not share the same scene (seed/source mismatch)")
    background = remove_pair.target
    new_target = replace_pair.target
    mask = _diff_mask(background.values, new_target.values)
    add_pair = SamplePair(
        source=background,
        target=new_target,
        pixel_mask=mask,
        instruction=Instruction(task="add", subject=replace_pair.instruction.object2),
        task="add",
        seed=replace_pair.seed,
    )
    return add_pair, augment_reversible(add_pair)


def generate_shard_pairs(
    master_seed: int, size: int, dims: tuple[int, int, int]
) -> list[SamplePair]:
    """Balanced shard: size/4 pairs per task, seeds split from the master seed."""
    if size < 4 or size % 4 != 0:
        raise ValidationError(f"shard size must be a positive multiple of 4, got {size}")
    return [
        generate_pair(TASKS[i % len(TASKS)], derive_seed(master_seed, i), dims)
        for i in range(size)
    ]


def write_shard(pairs: list[SamplePair], path: str | Path, master_seed: int = 0) -> ShardIndex:
    """Write the binary shard container; see the package README for the layout."""
    if not pairs:
        raise ValidationError("cannot write an empty shard")
    offsets = []
    histogram = {task: 0 for task in TASKS}
    path = Path(path)
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<H", SHARD_VERSION))
        f.write(struct.pack("<I", len(pairs)))
        for pair in pairs:
            offsets.append(f.tell())
            histogram[pair.task] += 1
            f.write(struct.pack("<B", TASKS.index(pair.task)))
            f.write(struct.pack("<Q", pair.seed & _M64))
            f.write(pack_instruction(pair.instruction))
            write_array_block(f, pair.source.values)
            write_array_block(f, pair.target.values)
            write_array_block(f, pair.pixel_mask)
        index_offset = f.tell()
        for off in offsets:
            f.write(struct.pack("<Q", off))
        for task in TASKS:
            f.write(struct.pack("<Q", histogram[task]))
        f.write(struct.pack("<Q", master_seed & _M64))
        f.write(struct.pack("<Q", index_offset))
    return ShardIndex(
        count=len(pairs),
        offsets=tuple(offsets),
        task_histogram=histogram,
        master_seed=master_seed,
    )


def _read_shard_header(f) -> int:
    magic = read_exact(f, 4)
    if magic != SHARD_MAGIC:
        raise ShardMagicError(f"bad shard magic {magic!r}")
    (version,) = struct.unpack("<H", read_exact(f, 2))
    if version != SHARD_VERSION:
        raise ShardVersionError(f"unsupported shard version {version}")
    (count,) = struct.unpack("<I", read_exact(f, 4))
    return count


def read_shard_index(path: str | Path) -> ShardIndex:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        count = _read_shard_header(f)
        tail = 8 * (count + len(TASKS) + 2)
        if size < f.tell() + tail:
            raise ShardTruncatedError(f"shard too small for its index ({size} bytes)")
        f.seek(size - 8)
        (index_offset,) = struct.unpack("<Q", read_exact(f, 8))
        if index_offset + tail != size:
            raise ShardTruncatedError("index offset does not match file size")
        f.seek(index_offset)
        offsets = struct.unpack(f"<{count}Q", read_exact(f, 8 * count)) if count else ()
        hist_vals = struct.unpack(f"<{len(TASKS)}Q", read_exact(f, 8 * len(TASKS)))
        (master_seed,) = struct.unpack("<Q", read_exact(f, 8))
    histogram = dict(zip(TASKS, (int(v) for v in hist_vals)))
    if sum(histogram.values()) != count:
        raise ShardTruncatedError("task histogram does not sum to the sample count")
    return ShardIndex(
        count=count, offsets=tuple(int(o) for o in offsets),
        task_histogram=histogram, master_seed=master_seed,
    )


def read_shard(path: str | Path) -> list[SamplePair]:
    index = read_shard_index(path)
    pairs = []
    with open(path, "rb") as f:
        _read_shard_header(f)
        for expected_offset in index.offsets:
            if f.tell() != expected_offset:
                raise ShardTruncatedError("sample offset mismatch while reading shard")
            (task_code,) = struct.unpack("<B", read_exact(f, 1))
            if task_code >= len(TASKS):
                raise ShardTruncatedError(f"bad task code {task_code}")
            (seed,) = struct.unpack("<Q", read_exact(f, 8))
            instr = unpack_instruction(read_exact(f, 7))
            source = read_array_block(f)
            target = read_array_block(f)
            mask = read_array_block(f)
            pairs.append(
                SamplePair(
                    source=PixelVideo(source),
                    target=PixelVideo(target),
                    pixel_mask=mask,
                    instruction=instr,
                    task=TASKS[task_code],
                    seed=int(seed),
                )
            )
    return pairs
