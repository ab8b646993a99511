"""SVG figures rendered from Jinja2 templates."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jinja2 import Environment, FileSystemLoader

from .errors import InvalidInputError
from .utils import format_float

TEMPLATES_DIR = Path(__file__).parent / "templates"

WIDTH = 640
HEIGHT = 480
PADDING = 48
LEGEND_WIDTH = 150
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c", "#ccb974")


def create_jinja_environment(templates_dir: Path = TEMPLATES_DIR) -> Environment:
    """Create and configure a Jinja2 environment."""
    env = Environment(
        loader=FileSystemLoader(templates_dir),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
        autoescape=True,
    )
    env.filters["num"] = lambda value: f"{value:.2f}"
    env.filters["float17"] = format_float
    return env


@dataclass(frozen=True)
class _Axis:
    lo: float
    hi: float
    start: float
    length: float

    def __call__(self, value: float) -> float:
        return self.start + (value - self.lo) / (self.hi - self.lo) * self.length


def _axis(values: np.ndarray, start: float, length: float) -> _Axis:
    finite = values[np.isfinite(values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = (hi - lo) * 0.05
    return _Axis(lo - pad, hi + pad, start, length)


def color(index: int) -> str:
    """Stroke color of the `index`-th series."""
    return PALETTE[index % len(PALETTE)]


def render_scatter(
    points: np.ndarray,
    classes: Sequence[int],
    domains: Sequence[str],
    title: str,
    env: Environment | None = None,
) -> str:
    """Scatter plot: color encodes the class, marker shape the domain (circle, square)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise InvalidInputError(f"Scatter points must have shape (N, 2), got {points.shape}")
    if len(classes) != points.shape[0] or len(domains) != points.shape[0]:
        raise InvalidInputError("Every point needs a class and a domain")
    plot_width = WIDTH - 2 * PADDING - LEGEND_WIDTH
    x_axis = _axis(points[:, 0], PADDING, plot_width)
    y_axis = _axis(points[:, 1], HEIGHT - PADDING, -(HEIGHT - 2 * PADDING))
    domain_names = sorted(set(domains))

    markers = [
        {
            "x": x_axis(float(x)),
            "y": y_axis(float(y)),
            "color": color(int(k)),
            "square": domain_names.index(domain) == 1,
        }
        for (x, y), k, domain in zip(points, classes, domains)
    ]
    legend = [{"label": f"class {k}", "color": color(k), "square": False} for k in sorted(set(map(int, classes)))]
    legend += [{"label": name, "color": "#333333", "square": i == 1} for i, name in enumerate(domain_names)]
    template = (env or create_jinja_environment()).get_template("scatter.svg.j2")
    return str(
        template.render(
            width=WIDTH,
            height=HEIGHT,
            padding=PADDING,
            plot_right=PADDING + plot_width,
            title=title,
            markers=markers,
            legend=legend,
            legend_x=WIDTH - LEGEND_WIDTH,
        )
    )


def render_lines(
    x_values: Sequence[float],
    series: dict[str, Sequence[float]],
    title: str,
    x_label: str,
    y_label: str,
    env: Environment | None = None,
) -> str:
    """Line chart of one or more series over shared x values; NaN points are skipped."""
    x = np.asarray(x_values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("A line chart needs at least one x value")
    for name, ys in series.items():
        if len(ys) != x.size:
            raise InvalidInputError(f"Series '{name}' has {len(ys)} points for {x.size} x values", key=name)
    all_y = np.concatenate([np.asarray(ys, dtype=np.float64) for ys in series.values()]) if series else np.zeros(0)
    plot_width = WIDTH - 2 * PADDING - LEGEND_WIDTH
    x_axis = _axis(x, PADDING, plot_width)
    y_axis = _axis(all_y, HEIGHT - PADDING, -(HEIGHT - 2 * PADDING))

    lines = []
    for index, (name, ys) in enumerate(series.items()):
        vertices = [(x_axis(float(xv)), y_axis(float(yv))) for xv, yv in zip(x, ys) if math.isfinite(yv)]
        lines.append({"label": name, "color": color(index), "vertices": vertices})
    ticks = [{"x": x_axis(float(xv)), "label": f"{xv:g}"} for xv in x]
    y_ticks = [
        {"y": y_axis(value), "label": f"{value:.3g}"} for value in np.linspace(y_axis.lo, y_axis.hi, 5).tolist()
    ]
    template = (env or create_jinja_environment()).get_template("lines.svg.j2")
    return str(
        template.render(
            width=WIDTH,
            height=HEIGHT,
            padding=PADDING,
            plot_right=PADDING + plot_width,
            title=title,
            x_label=x_label,
            y_label=y_label,
            lines=lines,
            ticks=ticks,
            y_ticks=y_ticks,
            legend_x=WIDTH - LEGEND_WIDTH,
        )
    )


def write_svg(path: Path, svg: str) -> Path:
    """Write an SVG document and return its path."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(svg)
    return path
