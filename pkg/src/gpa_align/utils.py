"""Utility functions for gpa-align."""

import math
from collections.abc import Iterable

import numpy as np

FLOAT_FORMAT = "%.17g"


def format_float(value: float) -> str:
    """Render a float with 17 significant digits (round-trips float64 exactly)."""
    return FLOAT_FORMAT % value


def stream_seed(seed: int, *keys: int) -> int:
    """Derive an independent 64-bit seed for the stream identified by (seed, keys...)."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """NaN-ignoring mean and sample standard deviation (0 for a single value)."""
    array = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if array.size == 0:
        return math.nan, math.nan
    std = float(np.std(array, ddof=1)) if array.size > 1 else 0.0
    return float(np.mean(array)), std


def parse_float_list(text: str) -> list[float]:
    """Parse '0.25,0.5,1' into floats."""
    items = [item.strip() for item in text.split(",") if item.strip()]
    return [float(item) for item in items]
