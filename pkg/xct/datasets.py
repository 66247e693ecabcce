# xct/datasets.py

"""
Datasets on disk.

A dataset directory holds one ``.xry`` per sample, one ``.vol`` per paired
sample, and a manifest describing how it was drawn. Unpaired sets keep their
ground-truth volumes under ``hidden/``; the loader seals them back into an
``UnpairedXraySet``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any
from typing_extensions import Self

from xct.errors import DataError
from xct.phantom import ClassLabel, StyleShiftParams
from xct.runlog import MANIFEST_NAME, RunManifest
from xct.volume import (
    PairedDataset,
    PairedSample,
    UnpairedXraySet,
    load_volume,
    load_xray,
    save_volume,
    save_xray,
)

logger = logging.getLogger(__name__)

HIDDEN_DIR = "hidden"


class DatasetKind(Enum):
    paired = "paired"
    unpaired = "unpaired"


@dataclass
class DatasetManifest:
    kind: DatasetKind
    master_seed: int
    dims: tuple[int, int, int]
    class_mix: tuple[float, ...]
    shift: StyleShiftParams | None = None
    files: list[dict[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.files)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "master_seed": self.master_seed,
            "dims": list(self.dims),
            "class_mix": list(self.class_mix),
            "shift": None if self.shift is None else asdict(self.shift),
            "files": self.files,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        try:
            shift = data.get("shift")
            return cls(
                kind=DatasetKind(data["kind"]),
                master_seed=int(data["master_seed"]),
                dims=tuple(data["dims"]),
                class_mix=tuple(data["class_mix"]),
                shift=None if shift is None else StyleShiftParams(**shift),
                files=list(data["files"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed dataset manifest: {e!r}") from e


def _name(index: int, suffix: str) -> str:
    return f"sample_{index:04d}{suffix}"


def write_paired(dataset: PairedDataset, out_dir: str | Path, class_mix) -> DatasetManifest:
    out_dir = Path(out_dir)
    dims = dataset[0].ct.dims if len(dataset) else (0, 0, 0)
    manifest = DatasetManifest(DatasetKind.paired, dataset.master_seed, dims, tuple(class_mix))

    for i, sample in enumerate(dataset):
        xray, volume = _name(i, ".xry"), _name(i, ".vol")
        save_xray(sample.xray, out_dir / xray)
        save_volume(sample.ct, out_dir / volume)
        manifest.files.append({"xray": xray, "volume": volume, "label": sample.label.name})

    return manifest


def write_unpaired(
    unpaired: UnpairedXraySet, out_dir: str | Path, class_mix, shift: StyleShiftParams
) -> DatasetManifest:
    out_dir = Path(out_dir)
    hidden_dir = out_dir / HIDDEN_DIR
    hidden_dir.mkdir(parents=True, exist_ok=True)

    volumes, labels = unpaired.unseal()
    dims = volumes[0].dims if volumes else (0, 0, 0)
    manifest = DatasetManifest(
        DatasetKind.unpaired, unpaired.master_seed, dims, tuple(class_mix), shift
    )

    for i, (xray, volume, label) in enumerate(zip(unpaired.xrays, volumes, labels)):
        xray_name, volume_name = _name(i, ".xry"), f"{HIDDEN_DIR}/{_name(i, '.vol')}"
        save_xray(xray, out_dir / xray_name)
        save_volume(volume, out_dir / volume_name)
        manifest.files.append({"xray": xray_name, "volume": volume_name, "label": label.name})

    return manifest


def read_dataset(root: str | Path, manifest: DatasetManifest) -> PairedDataset | UnpairedXraySet:
    root = Path(root)
    try:
        xrays = [load_xray(root / f["xray"]) for f in manifest.files]
        labels = [ClassLabel.parse(f["label"]) for f in manifest.files]
    except FileNotFoundError as e:
        raise DataError(f"dataset {root} is missing {e.filename}") from e
    except (KeyError, ValueError) as e:
        raise DataError(f"dataset {root}: bad file entry: {e}") from e

    volume_paths = [root / f["volume"] for f in manifest.files]

    if manifest.kind is DatasetKind.paired:
        try:
            volumes = [load_volume(p) for p in volume_paths]
        except FileNotFoundError as e:
            raise DataError(f"dataset {root} is missing {e.filename}") from e
        samples = tuple(PairedSample(x, v, y) for x, v, y in zip(xrays, volumes, labels))
        return PairedDataset(samples, manifest.master_seed)

    if not all(p.exists() for p in volume_paths):
        logger.warning("unpaired set %s has no complete hidden/ part; it can train but not be evaluated", root)
        return UnpairedXraySet(xrays, None, None, manifest.master_seed)

    return UnpairedXraySet(xrays, [load_volume(p) for p in volume_paths], labels, manifest.master_seed)


def load_dataset(root: str | Path) -> PairedDataset | UnpairedXraySet:
    """Load the dataset a ``phantom`` run wrote into ``root``."""
    root = Path(root)
    try:
        run = RunManifest.read(root)
    except FileNotFoundError as e:
        raise DataError(f"{root} has no {MANIFEST_NAME}") from e

    if "dataset" not in run.datasets:
        raise DataError(f"{root}/{MANIFEST_NAME} describes no dataset")
    return read_dataset(root, DatasetManifest.from_dict(run.datasets["dataset"]))
