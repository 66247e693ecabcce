# xct/volume.py

"""
CT volumes, X-ray images, the datasets built from them and their binary
file formats.

Axis convention for a volume of dims (D, H, W):

    depth  D : anterior → posterior
    height H : superior → inferior
    width  W : patient left → right

Voxels and pixels hold normalized attenuation in [0, 1] in the working
precision of ``autodiff``; files store float32. Hounsfield units would map
through (hu + 1000) / 2000 clipped to [0, 1]; phantoms are generated directly
in normalized units, so no HU data ever enters the pipeline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np
import numpy.typing as npt

from autodiff import default_dtype
from xct.errors import DataError, EvaluationError, FormatError

if TYPE_CHECKING:
    from xct.phantom import ClassLabel, PhantomSpec

_VOLUME_MAGIC = b"XCTV"
_XRAY_MAGIC = b"XCTX"
_FORMAT_VERSION = 1
_STORAGE = np.dtype("<f4")


class Plane(Enum):
    axial = "axial"
    coronal = "coronal"
    sagittal = "sagittal"

    @property
    def axis(self) -> int:
        """Volume axis collapsed by a projection onto this plane."""
        return _PLANE_AXIS[self]


_PLANE_AXIS = {Plane.axial: 1, Plane.coronal: 0, Plane.sagittal: 2}


class StyleTag(Enum):
    drr = 0
    shifted = 1


def _canonical(data: npt.ArrayLike, ndim: int, what: str) -> np.ndarray:
    array = np.ascontiguousarray(data, dtype=default_dtype())

    if array.ndim != ndim:
        raise ValueError(f"{what} must have {ndim} axes, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{what} contains non-finite values")
    if array.size and (array.min() < 0 or array.max() > 1):
        raise ValueError(f"{what} values must lie in [0, 1]")

    array.setflags(write=False)
    return array


# ----------------------------
# Data model
# ----------------------------


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    meta: PhantomSpec | None = None

    def __post_init__(self):
        voxels = _canonical(self.voxels, 3, "volume")
        if min(voxels.shape) < 2:
            raise ValueError(f"volume dims must all be >= 2, got {voxels.shape}")
        object.__setattr__(self, "voxels", voxels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def coronal_face(self) -> tuple[int, int]:
        return self.dims[1], self.dims[2]


@dataclass(frozen=True, eq=False)
class XrayImage:
    pixels: np.ndarray
    style_tag: StyleTag = StyleTag.drr

    def __post_init__(self):
        object.__setattr__(self, "pixels", _canonical(self.pixels, 2, "x-ray"))

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class PairedSample:
    xray: XrayImage
    ct: Volume
    label: ClassLabel


@dataclass(frozen=True, eq=False)
class PairedDataset:
    samples: tuple[PairedSample, ...]
    master_seed: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[PairedSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> PairedSample:
        return self.samples[index]

    def subset(self, indices: Sequence[int]) -> PairedDataset:
        return PairedDataset(tuple(self.samples[i] for i in indices), self.master_seed)


class UnpairedXraySet:
    """
    X-rays without usable CT. The volumes and labels they were rendered from
    are sealed: training sees ``xrays`` only, and every call to ``unseal``
    is counted in ``access_count``. A set loaded without its hidden part
    can still train but cannot be evaluated.
    """

    def __init__(
        self,
        xrays: Sequence[XrayImage],
        hidden_ct: Sequence[Volume] | None,
        hidden_labels: Sequence[ClassLabel] | None,
        master_seed: int,
    ):
        if (hidden_ct is None) != (hidden_labels is None):
            raise DataError("unpaired set needs both hidden volumes and labels, or neither")
        if hidden_ct is not None and not len(xrays) == len(hidden_ct) == len(hidden_labels):
            raise DataError(
                f"unpaired set is misaligned: {len(xrays)} x-rays, "
                f"{len(hidden_ct)} volumes, {len(hidden_labels)} labels"
            )

        self._xrays = tuple(xrays)
        self._hidden_ct = None if hidden_ct is None else tuple(hidden_ct)
        self._hidden_labels = None if hidden_labels is None else tuple(hidden_labels)
        self.master_seed = master_seed
        self.access_count = 0

    def __len__(self):
        return len(self._xrays)

    @property
    def xrays(self) -> tuple[XrayImage, ...]:
        return self._xrays

    @property
    def has_hidden(self) -> bool:
        return self._hidden_ct is not None

    def unseal(self) -> tuple[tuple[Volume, ...], tuple[ClassLabel, ...]]:
        if self._hidden_ct is None:
            raise EvaluationError("unpaired set carries no hidden volumes")
        self.access_count += 1
        return self._hidden_ct, self._hidden_labels


# ----------------------------
# Binary formats
# ----------------------------


def _read_header(path: Path, data: bytes, magic: bytes, fmt: str, fields: Sequence[str]):
    if data[:4] != magic:
        raise FormatError(path, "magic", "bad magic")

    size = struct.calcsize(fmt)
    if len(data) < 4 + size:
        raise FormatError(path, fields[min(len(fields) - 1, (len(data) - 4) // 4)], "truncated header")

    values = struct.unpack_from(fmt, data, 4)
    if values[0] != _FORMAT_VERSION:
        raise FormatError(path, "version", f"unsupported version {values[0]}")

    return values, 4 + size


def _read_payload(path: Path, data: bytes, offset: int, shape: tuple[int, ...], field: str) -> np.ndarray:
    expected = int(np.prod(shape))
    found = (len(data) - offset) // _STORAGE.itemsize

    if len(data) - offset != expected * _STORAGE.itemsize:
        detail = "truncated payload" if found < expected else "trailing bytes after payload"
        raise FormatError(path, field, f"{detail}: expected {expected} values, found {found}")

    return np.frombuffer(data, dtype=_STORAGE, offset=offset).reshape(shape)


def save_volume(volume: Volume, path: str | Path) -> Path:
    path = Path(path)
    header = _VOLUME_MAGIC + struct.pack("<4I", _FORMAT_VERSION, *volume.dims)
    path.write_bytes(header + volume.voxels.astype(_STORAGE).tobytes())
    return path


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    data = path.read_bytes()

    (_, d, h, w), offset = _read_header(path, data, _VOLUME_MAGIC, "<4I", ["version", "D", "H", "W"])
    voxels = _read_payload(path, data, offset, (d, h, w), "voxels")

    try:
        return Volume(voxels)
    except ValueError as e:
        raise FormatError(path, "voxels", str(e)) from e


def save_xray(image: XrayImage, path: str | Path) -> Path:
    path = Path(path)
    header = _XRAY_MAGIC + struct.pack("<3IB", _FORMAT_VERSION, *image.dims, image.style_tag.value)
    path.write_bytes(header + image.pixels.astype(_STORAGE).tobytes())
    return path


def load_xray(path: str | Path) -> XrayImage:
    path = Path(path)
    data = path.read_bytes()

    (_, h, w, tag), offset = _read_header(
        path, data, _XRAY_MAGIC, "<3IB", ["version", "H", "W", "style_tag"]
    )
    try:
        style = StyleTag(tag)
    except ValueError as e:
        raise FormatError(path, "style_tag", f"unknown style tag {tag}") from e

    pixels = _read_payload(path, data, offset, (h, w), "pixels")

    try:
        return XrayImage(pixels, style)
    except ValueError as e:
        raise FormatError(path, "pixels", str(e)) from e


# ----------------------------
# Slice export
# ----------------------------


def to_gray8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Binary portable graymap (P5, maxval 255) of a [0, 1] image."""
    path = Path(path)
    gray = to_gray8(image)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + gray.tobytes())
    return path


def export_slices(volume: Volume, plane: Plane | str, out_dir: str | Path) -> list[Path]:
    """
    Write every slice of ``volume`` perpendicular to the collapsed axis of
    ``plane`` as ``slice_%04d.pgm`` in ``out_dir``.
    """
    if isinstance(plane, str):
        try:
            plane = Plane(plane)
        except ValueError as e:
            raise ValueError(
                f"Invalid plane: {plane!r}. Valid values: {[p.value for p in Plane]}"
            ) from e

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    return [
        write_pgm(out_dir / f"slice_{i:04d}.pgm", np.take(volume.voxels, i, axis=plane.axis))
        for i in range(volume.dims[plane.axis])
    ]
