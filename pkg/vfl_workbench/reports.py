"""Swap and drop sweep reports: JSON, CSV and SVG line charts.

Layer indices are 0-based throughout. Every report carries the model config
hash and the sample seed, so a figure can be regenerated from its own header.
Output is byte-stable: JSON keys are sorted and SVGs carry a fixed hash salt
and no date.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import SVG_HASH_SALT
from .errors import ContractError

logger = logging.getLogger(__name__)

LAYER_INDEXING = "0-based"

SWAP_CSV_COLUMNS = ("task", "layer", "n", "changed", "rate")
DROP_CSV_COLUMNS = ("task", "k", "layers_omitted", "n", "correct", "accuracy")

_CHART_STYLE = {
    "svg.hashsalt": SVG_HASH_SALT,
    "svg.fonttype": "none",
    "figure.figsize": (6.0, 3.5),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def percent(part: int, whole: int) -> float:
    return 100.0 * part / whole if whole else 0.0


def _format_rate(value: float) -> str:
    return f"{value:.2f}"


# ---------------------------------------------------------------------------
# Swap probe
# ---------------------------------------------------------------------------

@dataclass
class LayerRate:
    layer: int
    n: int
    changed: int
    parse_failures: int = 0

    @property
    def rate(self) -> float:
        return percent(self.changed, self.n)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["rate"] = self.rate
        return out


@dataclass
class ChangeRateReport:
    task: str
    n_layers: int
    seed: int
    config_hash: str
    source: str
    baseline: LayerRate
    rows: list[LayerRate] = field(default_factory=list)

    def __post_init__(self) -> None:
        layers = [row.layer for row in self.rows]
        if layers != sorted(set(layers)):
            raise ContractError("change-rate rows must have strictly increasing layers")

    def rate_by_layer(self) -> dict[int, float]:
        return {row.layer: row.rate for row in self.rows}

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "change_rate",
            "task": self.task,
            "layer_indexing": LAYER_INDEXING,
            "n_layers": self.n_layers,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "source": self.source,
            "baseline": self.baseline.to_dict(),
            "rows": [row.to_dict() for row in self.rows],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ChangeRateReport:
        def row(d: dict[str, Any]) -> LayerRate:
            return LayerRate(int(d["layer"]), int(d["n"]), int(d["changed"]), int(d.get("parse_failures", 0)))

        try:
            if data.get("kind") != "change_rate":
                raise ContractError(f"not a change-rate report (kind={data.get('kind')!r})")
            return cls(
                task=data["task"],
                n_layers=int(data["n_layers"]),
                seed=int(data["seed"]),
                config_hash=data["config_hash"],
                source=data.get("source", "image"),
                baseline=row(data["baseline"]),
                rows=[row(r) for r in data["rows"]],
            )
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed change-rate report: {exc}") from exc

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWAP_CSV_COLUMNS)
        writer.writerow([self.task, "baseline", self.baseline.n, self.baseline.changed, _format_rate(self.baseline.rate)])
        for r in self.rows:
            writer.writerow([self.task, r.layer, r.n, r.changed, _format_rate(r.rate)])
        return buf.getvalue()

    def series(self) -> tuple[list[int], list[float]]:
        return [r.layer for r in self.rows], [r.rate for r in self.rows]


# ---------------------------------------------------------------------------
# Drop sweep
# ---------------------------------------------------------------------------

@dataclass
class DropRow:
    k: int
    layers_omitted: int
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return percent(self.correct, self.n)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["accuracy"] = self.accuracy
        return out


@dataclass
class DropSweepReport:
    tasks: list[str]
    n_layers: int
    seed: int
    config_hash: str
    baseline: DropRow
    rows: list[DropRow] = field(default_factory=list)

    def __post_init__(self) -> None:
        ks = [row.k for row in self.rows]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ContractError("drop points must be strictly increasing")

    @property
    def task_label(self) -> str:
        return "+".join(self.tasks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "drop_sweep",
            "tasks": list(self.tasks),
            "layer_indexing": LAYER_INDEXING,
            "n_layers": self.n_layers,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "baseline": self.baseline.to_dict(),
            "rows": [row.to_dict() for row in self.rows],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(DROP_CSV_COLUMNS)
        b = self.baseline
        writer.writerow([self.task_label, "baseline", b.layers_omitted, b.n, b.correct, _format_rate(b.accuracy)])
        for r in self.rows:
            writer.writerow([self.task_label, r.k, r.layers_omitted, r.n, r.correct, _format_rate(r.accuracy)])
        return buf.getvalue()

    def series(self) -> tuple[list[int], list[float]]:
        return [r.k for r in self.rows], [r.accuracy for r in self.rows]


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def to_json(report: ChangeRateReport | DropSweepReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def write_chart(report: ChangeRateReport | DropSweepReport, path: str | Path) -> Path:
    """Line chart of rate (swap) or accuracy (drop) against layer."""
    path = Path(path)
    xs, ys = report.series()
    with plt.rc_context(_CHART_STYLE):
        fig, ax = plt.subplots()
        try:
            ax.plot(xs, ys, marker="o", linewidth=1.5)
            if isinstance(report, ChangeRateReport):
                ax.set_xlabel("swapped layer (0-based)")
                ax.set_ylabel("change rate (%)")
                ax.set_title(f"{report.task}: vision token swapping")
            else:
                ax.axhline(report.baseline.accuracy, linestyle="--", linewidth=1.0, color="gray")
                ax.set_xlabel("vision dropped from layer k")
                ax.set_ylabel("accuracy (%)")
                ax.set_title(f"{report.task_label}: vision token dropping")
            ax.set_ylim(-2, 102)
            if xs:
                ax.set_xticks(xs)
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    logger.info("Wrote chart %s", path)
    return path


def write_report(report: ChangeRateReport | DropSweepReport, path: str | Path, chart: bool = False) -> list[Path]:
    """Write JSON or CSV by suffix; with ``chart`` an SVG goes alongside. Returns written paths."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".json":
        text = to_json(report)
    elif suffix == ".csv":
        text = report.to_csv()
    else:
        raise ContractError(f"report path must end in .json or .csv, got {path.name!r}")
    path.write_text(text, encoding="utf-8", newline="\n")
    logger.info("Wrote report %s", path)
    written = [path]
    if chart:
        written.append(write_chart(report, path.with_suffix(".svg")))
    return written


def read_change_rate_report(path: str | Path) -> ChangeRateReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not a JSON report ({exc})") from exc
    return ChangeRateReport.from_dict(data)


__all__ = [
    "ChangeRateReport",
    "DROP_CSV_COLUMNS",
    "DropRow",
    "DropSweepReport",
    "LAYER_INDEXING",
    "LayerRate",
    "SWAP_CSV_COLUMNS",
    "percent",
    "read_change_rate_report",
    "to_json",
    "write_chart",
    "write_report",
]
