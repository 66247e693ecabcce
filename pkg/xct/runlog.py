# xct/runlog.py

"""Per-step training log, run directories and their manifests."""

from __future__ import annotations

import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import polars as pl

from xct import __version__
from xct.errors import UsageError
from xct.losses import LossReport

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.ndjson"
MANIFEST_NAME = "manifest.json"

_LOSS_COLUMNS = ["l_lsgan", "l_re", "l_pl", "l_sind", "l_total", "l_disc"]


# ----------------------------
# Training log
# ----------------------------


class TrainLog:
    """
    Newline-delimited JSON, one object per optimizer step. Records are also
    kept in memory so callers without a run directory can inspect them.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = None if path is None else Path(path)
        self.records: list[dict[str, Any]] = []

    def write(self, *, stage: str, phase: str, epoch: int, step: int, report: LossReport):
        record = {"stage": stage, "phase": phase, "epoch": epoch, "step": step, **report.as_dict()}
        self.records.append(record)

        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def phases(self, stage: str | None = None) -> list[str]:
        return [r["phase"] for r in self.records if stage is None or r["stage"] == stage]


def read_log(path: str | Path) -> pl.DataFrame:
    schema = {"stage": pl.String, "phase": pl.String, "epoch": pl.Int64, "step": pl.Int64}
    schema |= {column: pl.Float64 for column in _LOSS_COLUMNS}
    return pl.read_ndjson(path, schema=schema)


def summarize_log(path: str | Path) -> pl.DataFrame:
    """Per (stage, epoch, phase) step count and mean of every loss column."""
    return (
        read_log(path)
        .group_by(["stage", "epoch", "phase"], maintain_order=True)
        .agg(pl.len().alias("steps"), *[pl.col(c).mean() for c in _LOSS_COLUMNS])
    )


# ----------------------------
# Run directories
# ----------------------------


@dataclass
class RunManifest:
    command: str
    argv: list[str] = field(default_factory=lambda: list(sys.argv))
    version: str = __version__
    config_hash: str | None = None
    config: dict[str, Any] | None = None
    datasets: dict[str, Any] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started: str = field(default_factory=lambda: _now())
    finished: str | None = None

    def finish(self, outputs: list[str | Path] = ()) -> RunManifest:
        self.outputs = sorted(str(p) for p in outputs)
        self.finished = _now()
        return self

    def write(self, run_dir: str | Path) -> Path:
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, run_dir: str | Path) -> RunManifest:
        path = Path(run_dir) / MANIFEST_NAME
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def prepare_run_dir(path: str | Path, force: bool = False) -> Path:
    """
    Create ``path``, or accept it if empty. A non-empty directory is refused
    unless ``force``, in which case its contents are removed.
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")

    existing = list(path.iterdir()) if path.exists() else []
    if existing and not force:
        raise UsageError(f"run directory {path} is not empty (use --force to overwrite)")

    for entry in existing:
        if entry.is_dir():
            shutil.rmtree(entry)
        else:
            entry.unlink()
        logger.debug("removed %s", entry)

    path.mkdir(parents=True, exist_ok=True)
    return path
