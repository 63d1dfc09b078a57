"""Benchmark score aggregation, proxy metrics, and the rater wire protocol.

Nine sub-scores per sample roll up into three per-category geometric means and
their arithmetic mean. Aggregation over samples averages per-sample category
scores (geometric mean first, then arithmetic average across samples).
Reported tables round half-away-from-zero to two decimals.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import (
    RaterRangeError,
    RaterSchemaError,
    RaterTransportError,
    ShapeError,
    ValidationError,
)
from .instructions import TASKS
from .latents import PixelVideo

SUBSCORE_FIELDS = ("sa", "sp", "cp", "an", "sn", "mn", "vf", "ts", "es")
_CATEGORY_FIELDS = {
    "s_ea": ("sa", "sp", "cp"),
    "s_vn": ("an", "sn", "mn"),
    "s_vq": ("vf", "ts", "es"),
}

DEFAULT_SYSTEM_PROMPT = (
    "You rate one video edit. Compare the source and edited clips and score "
    "nine dimensions from 0 to 10 (higher is better): sa (does the edit match "
    "the request), sp (is the change confined to the intended region), cp (are "
    "untouched areas preserved), an (appearance plausibility), sn (object "
    "scale plausibility), mn (motion plausibility), vf (visual fidelity), ts "
    "(temporal stability), es (edit stability across frames). Respond with a "
    "JSON object containing exactly those nine numeric fields."
)


def round2(value: float) -> float:
    """Two-decimal rounding, ties away from zero (matches reported tables)."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ScoreCard:
    sa: float
    sp: float
    cp: float
    an: float
    sn: float
    mn: float
    vf: float
    ts: float
    es: float
    task: str = "add"
    sample_id: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        for name in SUBSCORE_FIELDS:
            value = getattr(self, name)
            if not np.isfinite(value) or not 0.0 <= value <= 10.0:
                raise ValidationError(f"score {name}={value!r} outside [0, 10]")

    def to_dict(self) -> dict:
        record = {name: getattr(self, name) for name in SUBSCORE_FIELDS}
        record["task"] = self.task
        record["sample_id"] = self.sample_id
        return record


@dataclass(frozen=True)
class CategoryScores:
    s_ea: float
    s_vn: float
    s_vq: float
    s: float


def _geomean3(a: float, b: float, c: float) -> float:
    return float((a * b * c) ** (1.0 / 3.0))


def category_scores(card: ScoreCard) -> CategoryScores:
    """Per-category geometric means and their arithmetic mean."""
    cats = {
        name: _geomean3(*(getattr(card, f) for f in fields))
        for name, fields in _CATEGORY_FIELDS.items()
    }
    s = (cats["s_ea"] + cats["s_vn"] + cats["s_vq"]) / 3.0
    return CategoryScores(s_ea=cats["s_ea"], s_vn=cats["s_vn"], s_vq=cats["s_vq"], s=s)


def overall_from_categories(s_ea: float, s_vn: float, s_vq: float) -> float:
    """Overall score from per-category scores, reported to two decimals."""
    for value in (s_ea, s_vn, s_vq):
        if value < 0 or not np.isfinite(value):
            raise ValidationError(f"category score {value!r} must be finite and >= 0")
    return round2((s_ea + s_vn + s_vq) / 3.0)


def aggregate_benchmark(cards: list[ScoreCard]) -> dict[str, dict[str, float]]:
    """Per-task table of averaged sub-scores and category/overall scores.

    Cards are sorted by (task, sample_id) before averaging, so the result is
    bit-identical under permutation of the input. Tasks without cards are
    absent from the table rather than reported as zero.
    """
    if not cards:
        raise ValidationError("cannot aggregate an empty card list")
    table: dict[str, dict[str, float]] = {}
    ordered = sorted(cards, key=lambda c: (c.task, c.sample_id))
    for task in TASKS:
        group = [c for c in ordered if c.task == task]
        if not group:
            continue
        row: dict[str, float] = {"count": len(group)}
        for name in SUBSCORE_FIELDS:
            row[name] = float(np.mean([getattr(c, name) for c in group]))
        per_sample = [category_scores(c) for c in group]
        row["s_ea"] = float(np.mean([p.s_ea for p in per_sample]))
        row["s_vn"] = float(np.mean([p.s_vn for p in per_sample]))
        row["s_vq"] = float(np.mean([p.s_vq for p in per_sample]))
        row["s"] = (row["s_ea"] + row["s_vn"] + row["s_vq"]) / 3.0
        table[task] = row
    return table


@dataclass(frozen=True)
class ProxyMetrics:
    edit_change: float        # mean |out - src| inside the mask
    background_error: float   # mean |out - src| outside the mask
    gt_compliance: float      # masked MSE against the ground-truth target
    flicker: float            # mean |Δout - Δgt| over consecutive frames

    def to_dict(self) -> dict[str, float]:
        return {
            "edit_change": self.edit_change,
            "background_error": self.background_error,
            "gt_compliance": self.gt_compliance,
            "flicker": self.flicker,
        }


def proxy_metrics(
    src: PixelVideo, out: PixelVideo, gt: PixelVideo, mask: np.ndarray
) -> ProxyMetrics:
    """Reference-based edit-quality metrics on pixel videos, no model needed."""
    a, b, g = src.values, out.values, gt.values
    if a.shape != b.shape or a.shape != g.shape:
        raise ShapeError(f"video shapes differ: {a.shape}, {b.shape}, {g.shape}")
    m = np.asarray(mask)
    if m.shape != a.shape[:3]:
        raise ShapeError(f"mask shape {m.shape} does not match videos {a.shape[:3]}")
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("mask must be binary")
    hot = m.astype(bool)

    def masked_mean(values: np.ndarray, region: np.ndarray) -> float:
        sel = values[region]
        return float(sel.mean()) if sel.size else 0.0

    change = np.abs(b.astype(np.float64) - a.astype(np.float64))
    sq_err = (b.astype(np.float64) - g.astype(np.float64)) ** 2
    if a.shape[0] > 1:
        d_out = np.diff(b.astype(np.float64), axis=0)
        d_gt = np.diff(g.astype(np.float64), axis=0)
        flicker = float(np.abs(d_out - d_gt).mean())
    else:
        flicker = 0.0
    return ProxyMetrics(
        edit_change=masked_mean(change, hot),
        background_error=masked_mean(change, ~hot),
        gt_compliance=masked_mean(sq_err, hot),
        flicker=flicker,
    )


class MockRater:
    """Deterministic stand-in for the remote rater, seeded per sample."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def rate(self, task: str, sample_id: str) -> ScoreCard:
        digest = hashlib.sha256(f"{self.seed}:{task}:{sample_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        scores = np.round(rng.uniform(0.0, 10.0, size=len(SUBSCORE_FIELDS)), 1)
        kwargs = {name: float(s) for name, s in zip(SUBSCORE_FIELDS, scores)}
        return ScoreCard(task=task, sample_id=sample_id, **kwargs)


def _default_transport(endpoint: str, payload: dict, timeout: float) -> dict:
    import requests

    try:
        response = requests.post(endpoint, json=payload, timeout=timeout)
        response.raise_for_status()
        return response.json()
    except ValueError as exc:  # body was not JSON
        raise RaterSchemaError(f"rater response is not valid JSON: {exc}") from exc
    except Exception as exc:
        raise RaterTransportError(f"rater endpoint {endpoint} failed: {exc}") from exc


def parse_rater_response(body: dict, task: str, sample_id: str) -> ScoreCard:
    if not isinstance(body, dict):
        raise RaterSchemaError(f"rater response must be a JSON object, got {type(body).__name__}")
    values = {}
    for name in SUBSCORE_FIELDS:
        if name not in body:
            raise RaterSchemaError(f"rater response is missing field {name!r}")
        try:
            values[name] = float(body[name])
        except (TypeError, ValueError) as exc:
            raise RaterSchemaError(f"rater field {name!r} is not numeric") from exc
        if not 0.0 <= values[name] <= 10.0:
            raise RaterRangeError(f"rater field {name!r}={values[name]} outside [0, 10]")
    return ScoreCard(task=task, sample_id=sample_id, **values)


def rate_remote(
    endpoint: str,
    task: str,
    sample_id: str,
    source_frames: np.ndarray,
    edited_frames: np.ndarray,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    retries: int = 2,
    timeout: float = 30.0,
    transport=None,
) -> ScoreCard:
    """POST one rating request and validate the structured response.

    ``transport(endpoint, payload, timeout) -> dict`` may be injected for
    testing; transport failures are retried up to ``retries`` extra times,
    schema and range violations are not.
    """
    payload = {
        "task": task,
        "sample_id": sample_id,
        "source": np.asarray(source_frames).tolist(),
        "edited": np.asarray(edited_frames).tolist(),
        "system_prompt": system_prompt,
    }
    send = transport or _default_transport
    attempts = retries + 1
    last_error: Exception | None = None
    for _ in range(attempts):
        try:
            body = send(endpoint, payload, timeout)
            return parse_rater_response(body, task, sample_id)
        except RaterTransportError as exc:
            last_error = exc
    raise last_error


def write_scorecards(cards: list[ScoreCard], path) -> None:
    with open(path, "w") as f:
        for card in cards:
            f.write(json.dumps(card.to_dict()) + "\n")


def read_scorecards(path) -> list[ScoreCard]:
    cards = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            cards.append(
                ScoreCard(
                    task=record["task"],
                    sample_id=str(record.get("sample_id", "")),
                    **{name: float(record[name]) for name in SUBSCORE_FIELDS},
                )
            )
    return cards
