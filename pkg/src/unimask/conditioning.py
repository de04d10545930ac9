"""Micro-conditions serialized as a plain-text suffix of the prompt.

Wire format: ``KEY: VALUE`` segments joined by ``"; "`` in the fixed order
RES, CROP, AESTHETIC, HPS, LUMINANCE, CONTRAST. RES renders as ``WxH``, CROP
as ``(x,y)``, scalars with two decimals.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields, replace

import numpy as np

KEY_ORDER = ("RES", "CROP", "AESTHETIC", "HPS", "LUMINANCE", "CONTRAST")
_FIELD = {
    "RES": "source_resolution",
    "CROP": "crop_coords",
    "AESTHETIC": "aesthetic_score",
    "HPS": "hps_score",
    "LUMINANCE": "luminance",
    "CONTRAST": "contrast",
}
DEFAULT_P_DROP = 0.3


@dataclass(frozen=True)
class MicroConditions:
    source_resolution: tuple[int, int] | None = None
    crop_coords: tuple[int, int] | None = None
    aesthetic_score: float | None = None
    hps_score: float | None = None
    luminance: float | None = None
    contrast: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            vals = v if isinstance(v, tuple) else (v,)
            if not all(math.isfinite(x) for x in vals):
                raise ValueError(f"{f.name} must be finite, got {v}")
        if self.luminance is not None and not 0 <= self.luminance <= 255:
            raise ValueError("luminance must lie in [0, 255]")
        if self.contrast is not None and self.contrast < 0:
            raise ValueError("contrast must be non-negative")

    def present(self) -> list[str]:
        return [k for k in KEY_ORDER if getattr(self, _FIELD[k]) is not None]


def _fmt(key: str, v) -> str:
    if key == "RES":
        return f"{int(v[0])}x{int(v[1])}"
    if key == "CROP":
        return f"({int(v[0])},{int(v[1])})"
    return f"{v:.2f}"


def render_conditions(c: MicroConditions) -> str:
    return "; ".join(f"{k}: {_fmt(k, getattr(c, _FIELD[k]))}" for k in c.present())


_SEGMENT = re.compile(r"^(RES|CROP|AESTHETIC|HPS|LUMINANCE|CONTRAST): (.+)$")


def parse_conditions(text: str) -> MicroConditions:
    """Inverse of :func:`render_conditions` (scalars come back rounded to 2 decimals)."""
    if not text:
        return MicroConditions()
    values, last = {}, -1
    for seg in text.split("; "):
        m = _SEGMENT.match(seg)
        if not m:
            raise ValueError(f"bad condition segment {seg!r}")
        key, raw = m.groups()
        idx = KEY_ORDER.index(key)
        if idx <= last:
            raise ValueError(f"{key} out of order or repeated")
        last = idx
        if key == "RES":
            w, h = raw.split("x")
            values[_FIELD[key]] = (int(w), int(h))
        elif key == "CROP":
            x, y = raw.strip("()").split(",")
            values[_FIELD[key]] = (int(x), int(y))
        else:
            values[_FIELD[key]] = float(raw)
    return MicroConditions(**values)


def quantize_conditions(c: MicroConditions) -> MicroConditions:
    """Scalars rounded the way the text format rounds them."""
    return parse_conditions(render_conditions(c))


def dropout_conditions(c: MicroConditions, rng: np.random.Generator,
                       p_drop: float = DEFAULT_P_DROP) -> MicroConditions:
    """Drop each present key independently with probability ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    u = rng.random(len(KEY_ORDER))
    drop = {_FIELD[k]: None for k, ui in zip(KEY_ORDER, u)
            if getattr(c, _FIELD[k]) is not None and ui < p_drop}
    return replace(c, **drop)


def measure_luminance_contrast(field) -> tuple[float, float]:
    """Mean and population standard deviation of a scalar image field."""
    a = np.asarray(field, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty image")
    return float(a.mean()), float(a.std())
