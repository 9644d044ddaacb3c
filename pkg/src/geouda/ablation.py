"""Grid runner for component and hyperparameter sweeps.

Each cell names a set of dotted-path deltas on a shared base configuration
(`encoding.noise_radius_m`, `components.dcs`, ...). Cells train independently
with the base seed, so any two cells differ only by their deltas. A failing
cell is recorded with its error message and the rest of the grid still runs.
"""

from __future__ import annotations

import csv
import dataclasses
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .data import GeoDataset
from .training import TrainConfig, evaluate, fit, write_history_csv

RESULT_FIELDS = ["cell_id", "miou", "params", "epochs_run", "error"]


@dataclass(frozen=True)
class AblationCell:
    """One grid point: an id plus (dotted field path, value) deltas."""

    cell_id: str
    deltas: tuple[tuple[str, object], ...] = ()

    def __post_init__(self):
        if not self.cell_id or any(ch in self.cell_id for ch in ",\n/"):
            raise ValueError(f"cell_id {self.cell_id!r} must be non-empty and csv/path safe")


def apply_deltas(cfg: TrainConfig, deltas: Mapping[str, object]) -> TrainConfig:
    """New config with each dotted path replaced, validation re-run."""

    def set_path(obj, parts: list[str], value):
        name = parts[0]
        if not any(f.name == name for f in dataclasses.fields(obj)):
            raise KeyError(f"unknown config field {name!r} on {type(obj).__name__}")
        if len(parts) == 1:
            return dataclasses.replace(obj, **{name: value})
        return dataclasses.replace(obj, **{name: set_path(getattr(obj, name), parts[1:], value)})

    for path, value in deltas.items():
        cfg = set_path(cfg, path.split("."), value)
    return cfg


def standard_grid() -> list[AblationCell]:
    """The default sweep: noise x frequency, head tap, time variants, components."""
    cells = []
    for noise_km in (0, 30, 50):
        for freq in (10000.0, 20000.0):
            cells.append(
                AblationCell(
                    f"noise{noise_km}km_f{freq:.0f}",
                    (
                        ("encoding.noise_radius_m", float(noise_km) * 1000.0),
                        ("encoding.base_frequency", freq),
                    ),
                )
            )
    for source in ("encoder", "decoder"):
        cells.append(AblationCell(f"tap_{source}", (("geo_head.feature_source", source),)))
    cells.append(AblationCell("time_none", (("components.time_mt", False),)))
    cells.append(
        AblationCell(
            "time_month_hour",
            (
                ("components.time_mt", True),
                ("time_head.use_month", True),
                ("time_head.use_hour", True),
                ("time_head.noise", True),
            ),
        )
    )
    cells.append(
        AblationCell(
            "time_month_noise",
            (
                ("components.time_mt", True),
                ("time_head.use_month", True),
                ("time_head.use_hour", False),
                ("time_head.noise", True),
            ),
        )
    )
    cells.append(
        AblationCell(
            "comp_baseline",
            (("components.geo_mt", False), ("components.dcs", False)),
        )
    )
    cells.append(
        AblationCell(
            "comp_geo",
            (("components.geo_mt", True), ("components.dcs", False)),
        )
    )
    cells.append(
        AblationCell(
            "comp_dcs",
            (("components.geo_mt", False), ("components.dcs", True)),
        )
    )
    cells.append(
        AblationCell(
            "comp_full",
            (("components.geo_mt", True), ("components.dcs", True)),
        )
    )
    return cells


def run_cell(
    cell: AblationCell,
    base_cfg: TrainConfig,
    source_ds: GeoDataset,
    target_ds: GeoDataset | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Train and evaluate one cell; the row carries its result or its error."""
    row = {"cell_id": cell.cell_id, "miou": "", "params": "", "epochs_run": "", "error": ""}
    try:
        cfg = apply_deltas(base_cfg, dict(cell.deltas))
        cell_dir = Path(out_dir) / cell.cell_id if out_dir is not None else None
        result = fit(cfg, source_ds, target_ds)
        eval_ds = target_ds if target_ds is not None else source_ds
        report, _ = evaluate(result.model, eval_ds)
        row["miou"] = repr(report.miou)
        row["params"] = result.param_count
        row["epochs_run"] = result.epochs_run
        if cell_dir is not None:
            cell_dir.mkdir(parents=True, exist_ok=True)
            write_history_csv(cell_dir / "history.csv", result.history)
    except Exception as exc:  # noqa: BLE001 - a bad cell must not sink the grid
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc()
    return row


def ablate(
    base_cfg: TrainConfig,
    cells: Sequence[AblationCell],
    source_ds: GeoDataset,
    target_ds: GeoDataset | None = None,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Run every cell, write `results.csv`, and return the rows in order."""
    if not cells:
        raise ValueError("empty ablation grid")
    seen = set()
    for cell in cells:
        if cell.cell_id in seen:
            raise ValueError(f"duplicate cell id {cell.cell_id!r}")
        seen.add(cell.cell_id)
    rows = [run_cell(cell, base_cfg, source_ds, target_ds, out_dir) for cell in cells]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results_csv(out_dir / "results.csv", rows)
    return rows


def write_results_csv(path: str | Path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for row in rows:
            writer.writerow([row.get(k, "") for k in RESULT_FIELDS])
