#!/usr/bin/env python3
"""
Scheduling toolkit - Result Store

Owns the layout of a run output directory and reads back everything it
writes:

    <output_dir>/
        config.toml          merged configuration of the run
        curve.csv            learning curve (train)
        table.csv            goal metric per trace and scheduler (evaluate)
        metrics.csv          every metric in long form (evaluate)
        checkpoints/<name>/  policy.bin, value.bin, manifest.txt
        manifest.txt         run summary
"""

import csv
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from app.config import ToolkitSettings, dump_settings, settings_hash
from app.exceptions import ModelFormatError
from app.models import CurveRow, LearningCurve
from app.neural import PolicyNet, ValueNet, load_model, save_model
from app.simulator import ScheduleRecord
from app.utils.logger import get_logger

logger = get_logger("storage")

CURVE_COLUMNS = ("epoch", "mean_metric", "std_metric", "policy_loss", "value_loss", "seconds", "filter_capped")
METRICS_COLUMNS = ("trace", "backfilling", "scheduler", "metric", "value")
TABLE_KEY_COLUMNS = ("trace", "backfilling")

POLICY_FILE = "policy.bin"
VALUE_FILE = "value.bin"
MANIFEST_FILE = "manifest.txt"

TableRows = Dict[Tuple[str, bool], Dict[str, float]]


def _as_bool(value: str) -> bool:
    return value.strip().lower() in {"1", "true", "yes", "on"}


def write_manifest(path: Union[str, Path], fields: Mapping[str, object]) -> None:
    """Write `key: value` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{key}: {value}\n" for key, value in fields.items()), encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            fields[key.strip()] = value.strip()
    return fields


def read_curve(path: Union[str, Path]) -> LearningCurve:
    with Path(path).open(newline="", encoding="utf-8") as fp:
        rows = [
            CurveRow(
                epoch=int(r["epoch"]),
                mean_metric=float(r["mean_metric"]),
                std_metric=float(r["std_metric"]),
                policy_loss=float(r["policy_loss"]),
                value_loss=float(r["value_loss"]),
                seconds=float(r["seconds"]),
                filter_capped=int(r.get("filter_capped") or 0),
            )
            for r in csv.DictReader(fp)
        ]
    return LearningCurve(rows=rows)


def read_table(path: Union[str, Path]) -> Tuple[List[str], TableRows]:
    """Scheduler columns and {(trace, backfilling): {scheduler: value}}."""
    with Path(path).open(newline="", encoding="utf-8") as fp:
        reader = csv.DictReader(fp)
        columns = [c for c in (reader.fieldnames or []) if c not in TABLE_KEY_COLUMNS]
        rows: TableRows = {}
        for r in reader:
            rows[(r["trace"], _as_bool(r["backfilling"]))] = {c: float(r[c]) for c in columns}
    return columns, rows


def read_metrics(path: Union[str, Path]) -> List[Dict[str, object]]:
    with Path(path).open(newline="", encoding="utf-8") as fp:
        return [
            {
                "trace": r["trace"],
                "backfilling": _as_bool(r["backfilling"]),
                "scheduler": r["scheduler"],
                "metric": r["metric"],
                "value": float(r["value"]),
            }
            for r in csv.DictReader(fp)
        ]


def resolve_policy_path(location: Union[str, Path]) -> Path:
    """A checkpoint directory resolves to its policy file."""
    path = Path(location)
    return path / POLICY_FILE if path.is_dir() else path


class ResultStore:
    """Writer for one run output directory."""

    def __init__(self, output_dir: Union[str, Path]):
        self.root = Path(output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stats = {
            "curve_rows": 0,
            "checkpoints_saved": 0,
            "tables_written": 0,
        }

    @property
    def curve_path(self) -> Path:
        return self.root / "curve.csv"

    @property
    def table_path(self) -> Path:
        return self.root / "table.csv"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def config_path(self) -> Path:
        return self.root / "config.toml"

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    def checkpoint_dir(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    def save_config(self, settings: ToolkitSettings) -> Path:
        self.config_path.write_text(dump_settings(settings), encoding="utf-8")
        return self.config_path

    def start_curve(self) -> None:
        with self.curve_path.open("w", newline="", encoding="utf-8") as fp:
            csv.writer(fp, lineterminator="\n").writerow(CURVE_COLUMNS)
        self.stats["curve_rows"] = 0

    def append_curve_row(self, row: CurveRow) -> None:
        if not self.curve_path.exists():
            self.start_curve()
        with self.curve_path.open("a", newline="", encoding="utf-8") as fp:
            csv.writer(fp, lineterminator="\n").writerow([
                row.epoch, repr(row.mean_metric), repr(row.std_metric),
                repr(row.policy_loss), repr(row.value_loss), repr(row.seconds), row.filter_capped,
            ])
        self.stats["curve_rows"] += 1

    def save_curve(self, curve: LearningCurve) -> Path:
        self.start_curve()
        for row in curve.rows:
            self.append_curve_row(row)
        return self.curve_path

    def save_checkpoint(
        self,
        name: str,
        policy: PolicyNet,
        value_net: Optional[ValueNet],
        manifest: Mapping[str, object],
    ) -> Path:
        """Model files plus a sidecar manifest under checkpoints/<name>/."""
        directory = self.checkpoint_dir(name)
        directory.mkdir(parents=True, exist_ok=True)
        save_model(directory / POLICY_FILE, policy)
        if value_net is not None:
            save_model(directory / VALUE_FILE, value_net)
        write_manifest(directory / MANIFEST_FILE, manifest)
        self.stats["checkpoints_saved"] += 1
        logger.debug(f"Checkpoint {name} written to {directory}")
        return directory

    def save_table(self, columns: Sequence[str], rows: TableRows) -> Path:
        with self.table_path.open("w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow([*TABLE_KEY_COLUMNS, *columns])
            for (trace, backfilling), values in rows.items():
                writer.writerow([trace, str(backfilling).lower(), *(repr(float(values[c])) for c in columns)])
        self.stats["tables_written"] += 1
        return self.table_path

    def save_metrics(self, records: Sequence[Mapping[str, object]]) -> Path:
        with self.metrics_path.open("w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow(METRICS_COLUMNS)
            for r in records:
                writer.writerow([r["trace"], str(r["backfilling"]).lower(), r["scheduler"], r["metric"],
                                 repr(float(r["value"]))])
        return self.metrics_path

    def save_record(self, name: str, record: ScheduleRecord) -> Path:
        path = self.root / "records" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(record.to_csv(), encoding="utf-8")
        return path

    def write_run_manifest(self, settings: ToolkitSettings, **fields: object) -> Path:
        write_manifest(self.manifest_path, {"config_hash": settings_hash(settings), **fields})
        return self.manifest_path

    def load_policy(self, name: str = "best") -> PolicyNet:
        net = load_model(self.checkpoint_dir(name) / POLICY_FILE)
        if not isinstance(net, PolicyNet):
            raise ModelFormatError(f"checkpoint {name} does not hold a policy network")
        return net

    def get_stats(self) -> Dict[str, int]:
        return dict(self.stats)
