# xct/phantom.py

"""
Procedural 3-class chest phantoms and the synthetic real-vs-DRR gap.

A phantom is a body ellipsoid holding two lung ellipsoids, a rib cage of
curved bands on the body wall and, depending on the class, lesions inside the
lungs:

    healthy : no lesions
    sick    : one or two infiltrates, no cavities
    tb      : a cavity (plus up to one nodule), or two to three nodules

Unpaired X-rays come from phantoms drawn with wider geometry priors and are
then passed through a photometric style shift.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np

from xct.errors import ConfigError, PhantomGenerationError
from xct.projection import drr
from xct.volume import PairedDataset, PairedSample, StyleTag, UnpairedXraySet, Volume, XrayImage

logger = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]

_PAIRED_STREAM = 0
_UNPAIRED_STREAM = 1
_MAX_RETRIES = 64


class ClassLabel(Enum):
    healthy = 0
    sick = 1
    tb = 2

    @classmethod
    def parse(cls, name: str) -> ClassLabel:
        try:
            return cls[name]
        except KeyError as e:
            raise ValueError(
                f"Invalid class label: {name!r}. Valid values: {[c.name for c in cls]}"
            ) from e


class LesionKind(Enum):
    nodule = "nodule"
    cavity = "cavity"
    infiltrate = "infiltrate"


# ----------------------------
# Geometry
# ----------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center: Vec3
    semi_axes: Vec3

    def radius2(self, grid) -> np.ndarray:
        return sum(((g - c) / a) ** 2 for g, c, a in zip(grid, self.center, self.semi_axes))

    def mask(self, grid) -> np.ndarray:
        return self.radius2(grid) <= 1

    def inside(self, dims: tuple[int, int, int]) -> bool:
        return all(
            c - a >= 0 and c + a <= n - 1 for c, a, n in zip(self.center, self.semi_axes, dims)
        )


@dataclass(frozen=True)
class Ribs:
    count: int
    thickness: float
    attenuation: float


@dataclass(frozen=True)
class Lesion:
    kind: LesionKind
    center: Vec3
    radius: float
    attenuation_delta: float

    def extent(self, wall: float) -> float:
        """Outer radius, including the wall around a cavity."""
        return self.radius + wall if self.kind is LesionKind.cavity else self.radius

    def ball(self, grid, radius: float | None = None) -> np.ndarray:
        r = self.radius if radius is None else radius
        return sum((g - c) ** 2 for g, c in zip(grid, self.center)) <= r * r


@dataclass(frozen=True)
class Attenuation:
    """Normalized attenuation constants of the phantom tissues."""

    body: float = 0.35
    lung: float = 0.08
    rib: float = 0.85
    cavity: float = 0.05
    cavity_wall: float = 1.5  # voxels of lesion tissue around a cavity void


DEFAULT_ATTENUATION = Attenuation()


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    label: ClassLabel
    body: Ellipsoid
    lungs: tuple[Ellipsoid, Ellipsoid]
    ribs: Ribs
    lesions: tuple[Lesion, ...] = ()

    def __post_init__(self):
        kinds = [lesion.kind for lesion in self.lesions]
        nodules = kinds.count(LesionKind.nodule)
        cavities = kinds.count(LesionKind.cavity)
        infiltrates = kinds.count(LesionKind.infiltrate)

        match self.label:
            case ClassLabel.healthy:
                ok = not kinds
            case ClassLabel.sick:
                ok = infiltrates >= 1 and cavities == 0
            case ClassLabel.tb:
                ok = cavities >= 1 or nodules >= 2
            case _:
                ok = False

        if not ok:
            raise ValueError(f"lesions {[k.value for k in kinds]} violate label {self.label.name}")


@dataclass(frozen=True)
class GeometryPriors:
    """Sampling ranges, as fractions of the volume dims unless noted."""

    body_semi: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = (
        (0.30, 0.36),
        (0.42, 0.46),
        (0.40, 0.46),
    )
    body_jitter: float = 0.02
    # fractions of the body semi-axes
    lung_semi: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = (
        (0.55, 0.65),
        (0.60, 0.70),
        (0.36, 0.42),
    )
    lung_offset: tuple[float, float] = (0.44, 0.50)
    lung_jitter: float = 1.0  # voxels
    rib_count: tuple[int, int] = (4, 6)
    rib_thickness: tuple[float, float] = (0.035, 0.06)
    # fractions of the smallest lung semi-axis
    nodule_radius: tuple[float, float] = (0.25, 0.35)
    cavity_radius: tuple[float, float] = (0.20, 0.30)
    infiltrate_radius: tuple[float, float] = (0.40, 0.60)
    nodule_delta: float = 0.52
    infiltrate_delta: float = 0.22

    def widened(self, factor: float = 2.0) -> GeometryPriors:
        """Same centers, ranges widened by ``factor`` around their midpoints."""

        def widen(lo: float, hi: float) -> tuple[float, float]:
            mid, half = (lo + hi) / 2, (hi - lo) / 2 * factor
            return (mid - half, mid + half)

        return replace(
            self,
            body_semi=tuple(widen(*r) for r in self.body_semi),
            body_jitter=self.body_jitter * factor,
            lung_semi=tuple(widen(*r) for r in self.lung_semi),
            lung_jitter=self.lung_jitter * factor,
        )


DEFAULT_PRIORS = GeometryPriors()
SHIFTED_PRIORS = DEFAULT_PRIORS.widened()


@dataclass(frozen=True)
class StyleShiftParams:
    gamma: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    vignette: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError(f"style shift gamma must be > 0, got {self.gamma}")
        if self.contrast < 0 or self.noise_sigma < 0 or self.vignette < 0:
            raise ConfigError("style shift contrast, noise_sigma and vignette must be >= 0")


# ----------------------------
# Seeds and apportionment
# ----------------------------


def derive_seed(master_seed: int, index: int, stream: int = _PAIRED_STREAM) -> int:
    sequence = np.random.SeedSequence(master_seed, spawn_key=(stream, index))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _as_dims(dims: int | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(dims, int):
        return (dims, dims, dims)
    if len(dims) != 3:
        raise ConfigError(f"dims must have three axes, got {dims}")
    return tuple(int(d) for d in dims)


def _validate_mix(class_mix: Sequence[float]) -> list[Fraction]:
    if any(m < 0 for m in class_mix):
        raise ConfigError("class mix entries must be >= 0")

    fractions = [Fraction(m).limit_denominator(10**6) for m in class_mix]
    if sum(fractions) != 1:
        raise ConfigError(f"class mix must sum to 1, got {[float(m) for m in class_mix]}")
    if len(fractions) != len(ClassLabel):
        raise ConfigError(f"class mix needs {len(ClassLabel)} entries, got {len(fractions)}")
    return fractions


def apportion(n: int, class_mix: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``n`` samples by ``class_mix``; ties go to the lower class."""
    fractions = _validate_mix(class_mix)
    quotas = [n * f for f in fractions]
    counts = [int(q) for q in quotas]

    by_remainder = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in by_remainder[: n - sum(counts)]:
        counts[i] += 1

    return counts


def _label_order(n: int, class_mix: Sequence[float], master_seed: int, stream: int) -> list[ClassLabel]:
    counts = apportion(n, class_mix)
    labels = [label for label, count in zip(ClassLabel, counts) for _ in range(count)]
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(stream,)))
    return [labels[i] for i in rng.permutation(n)]


# ----------------------------
# Phantom draws
# ----------------------------


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(*bounds))


def _point_in(rng: np.random.Generator, center: Vec3, semi: Vec3) -> Vec3 | None:
    for _ in range(_MAX_RETRIES):
        u = rng.uniform(-1, 1, size=3)
        if np.sum(u**2) <= 1:
            return tuple(float(c + a * x) for c, a, x in zip(center, semi, u))
    return None


def _lesion_plan(rng: np.random.Generator, label: ClassLabel) -> list[LesionKind]:
    match label:
        case ClassLabel.healthy:
            return []
        case ClassLabel.sick:
            return [LesionKind.infiltrate] * int(rng.integers(1, 3))
        case ClassLabel.tb:
            if rng.random() < 0.5:
                return [LesionKind.cavity] + [LesionKind.nodule] * int(rng.integers(0, 2))
            return [LesionKind.nodule] * int(rng.integers(2, 4))
    raise ValueError(f"Unsupported label: {label}")


def _place_lesions(
    rng: np.random.Generator,
    kinds: list[LesionKind],
    lungs: tuple[Ellipsoid, Ellipsoid],
    priors: GeometryPriors,
    attenuation: Attenuation,
) -> tuple[Lesion, ...] | None:
    placed: list[Lesion] = []

    for kind in kinds:
        lung = lungs[int(rng.integers(0, 2))]
        scale = min(lung.semi_axes)

        match kind:
            case LesionKind.nodule:
                radius = scale * _uniform(rng, priors.nodule_radius)
                delta = priors.nodule_delta
            case LesionKind.cavity:
                radius = scale * _uniform(rng, priors.cavity_radius)
                delta = priors.nodule_delta
            case LesionKind.infiltrate:
                radius = scale * _uniform(rng, priors.infiltrate_radius)
                delta = priors.infiltrate_delta

        candidate = Lesion(kind, (0.0, 0.0, 0.0), radius, delta)
        extent = candidate.extent(attenuation.cavity_wall)
        room = tuple(a - extent for a in lung.semi_axes)
        if min(room) <= 0:
            return None

        for _ in range(_MAX_RETRIES):
            center = _point_in(rng, lung.center, room)
            if center is None:
                return None
            lesion = replace(candidate, center=center)
            clear = all(
                np.linalg.norm(np.subtract(center, other.center))
                >= extent + other.extent(attenuation.cavity_wall) + 1
                for other in placed
            )
            if clear:
                placed.append(lesion)
                break
        else:
            return None

    return tuple(placed)


def draw_phantom_spec(
    seed: int,
    label: ClassLabel,
    dims: int | Sequence[int],
    priors: GeometryPriors = DEFAULT_PRIORS,
    attenuation: Attenuation = DEFAULT_ATTENUATION,
) -> PhantomSpec:
    """Sample a phantom of class ``label``; retries lesion placement a bounded number of times."""
    dims = _as_dims(dims)
    rng = np.random.default_rng(seed)

    for _ in range(_MAX_RETRIES):
        body_semi = tuple(n * _uniform(rng, r) for n, r in zip(dims, priors.body_semi))
        body_center = tuple(
            (n - 1) / 2 + n * rng.uniform(-priors.body_jitter, priors.body_jitter) for n in dims
        )
        body = Ellipsoid(body_center, body_semi)
        if not body.inside(dims):
            continue

        lung_semi = tuple(b * _uniform(rng, r) for b, r in zip(body_semi, priors.lung_semi))
        offset = body_semi[2] * _uniform(rng, priors.lung_offset)
        lungs = tuple(
            Ellipsoid(
                (
                    body_center[0] + rng.uniform(-priors.lung_jitter, priors.lung_jitter),
                    body_center[1] + rng.uniform(-priors.lung_jitter, priors.lung_jitter),
                    body_center[2] + side * offset,
                ),
                lung_semi,
            )
            for side in (-1, 1)
        )

        ribs = Ribs(
            count=int(rng.integers(priors.rib_count[0], priors.rib_count[1] + 1)),
            thickness=max(1.0, min(dims) * _uniform(rng, priors.rib_thickness)),
            attenuation=attenuation.rib,
        )

        lesions = _place_lesions(rng, _lesion_plan(rng, label), lungs, priors, attenuation)
        if lesions is None:
            continue

        spec = PhantomSpec(seed, label, body, lungs, ribs, lesions)
        if _geometry_fits(spec, dims, attenuation):
            return spec

    raise PhantomGenerationError(seed, f"no feasible {label.name} geometry after {_MAX_RETRIES} tries")


# ----------------------------
# Rendering
# ----------------------------


def _geometry_fits(spec: PhantomSpec, dims: tuple[int, int, int], attenuation: Attenuation) -> bool:
    if not spec.body.inside(dims) or not all(lung.inside(dims) for lung in spec.lungs):
        return False

    for lesion in spec.lesions:
        extent = lesion.extent(attenuation.cavity_wall)
        if not all(c - extent >= 0 and c + extent <= n - 1 for c, n in zip(lesion.center, dims)):
            return False

    return True


def _rib_mask(spec: PhantomSpec, grid) -> np.ndarray:
    d, h, w = grid
    body = spec.body
    cd, ch, cw = body.center
    ad, ah, aw = body.semi_axes

    axial_r = np.sqrt(((d - cd) / ad) ** 2 + ((w - cw) / aw) ** 2)
    shell = (axial_r <= 1) & (axial_r >= 1 - spec.ribs.thickness / min(ad, aw))

    top = min(lung.center[1] - lung.semi_axes[1] for lung in spec.lungs)
    bottom = max(lung.center[1] + lung.semi_axes[1] for lung in spec.lungs)
    pitch = (bottom - top) / spec.ribs.count
    heights = top + pitch * (np.arange(spec.ribs.count) + 0.5)

    band = np.zeros(np.broadcast_shapes(d.shape, h.shape, w.shape), dtype=bool)
    for rib_height in heights:
        band |= np.abs(h - rib_height) <= spec.ribs.thickness / 2

    return shell & band & body.mask(grid)


def generate_phantom(
    spec: PhantomSpec,
    dims: int | Sequence[int],
    attenuation: Attenuation = DEFAULT_ATTENUATION,
) -> tuple[Volume, ClassLabel]:
    """
    Rasterize ``spec`` onto a (D, H, W) grid. Deterministic in (spec, dims).

    Raises
    ------
    PhantomGenerationError
        If any structure falls outside the volume.
    """
    dims = _as_dims(dims)
    if min(dims) < 16:
        raise ConfigError(f"phantom dims must be >= 16 per axis, got {dims}")
    if not _geometry_fits(spec, dims, attenuation):
        raise PhantomGenerationError(spec.seed, f"geometry does not fit in {dims}")

    grid = np.ogrid[: dims[0], : dims[1], : dims[2]]
    voxels = np.zeros(dims, dtype=np.float64)

    voxels[spec.body.mask(grid)] = attenuation.body
    for lung in spec.lungs:
        voxels[lung.mask(grid)] = attenuation.lung
    voxels[_rib_mask(spec, grid)] = spec.ribs.attenuation

    for lesion in spec.lesions:
        tissue = np.clip(attenuation.lung + lesion.attenuation_delta, 0, 1)
        if lesion.kind is LesionKind.cavity:
            voxels[lesion.ball(grid, lesion.extent(attenuation.cavity_wall))] = tissue
            voxels[lesion.ball(grid)] = attenuation.cavity
        else:
            voxels[lesion.ball(grid)] = tissue

    return Volume(voxels, meta=spec), spec.label


# ----------------------------
# Style shift
# ----------------------------


def style_shift(image: XrayImage, params: StyleShiftParams, rng: np.random.Generator) -> XrayImage:
    """pixel ← clamp(contrast · pixel^gamma − vignette · r²/2 + noise, 0, 1)."""
    x = image.pixels.astype(np.float64)
    out = params.contrast * x**params.gamma

    if params.vignette > 0:
        h, w = x.shape
        i, j = np.ogrid[:h, :w]
        ci, cj = (h - 1) / 2, (w - 1) / 2
        r2 = ((i - ci) / max(ci, 1)) ** 2 + ((j - cj) / max(cj, 1)) ** 2
        out = out - params.vignette * r2 / 2

    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, size=x.shape)

    return XrayImage(np.clip(out, 0, 1), StyleTag.shifted)


# ----------------------------
# Datasets
# ----------------------------


@dataclass(frozen=True)
class _Draw:
    seed: int
    label: ClassLabel
    volume: Volume = field(repr=False)


def _draw_all(
    n: int,
    dims: tuple[int, int, int],
    class_mix: Sequence[float],
    master_seed: int,
    stream: int,
    priors: GeometryPriors,
    attenuation: Attenuation,
) -> list[_Draw]:
    if n < 0:
        raise ConfigError(f"sample count must be >= 0, got {n}")

    draws = []
    for index, label in enumerate(_label_order(n, class_mix, master_seed, stream)):
        seed = derive_seed(master_seed, index, stream)
        spec = draw_phantom_spec(seed, label, dims, priors, attenuation)
        volume, _ = generate_phantom(spec, dims, attenuation)
        draws.append(_Draw(seed, label, volume))

    return draws


def sample_paired_dataset(
    n: int,
    dims: int | Sequence[int],
    class_mix: Sequence[float],
    master_seed: int,
    priors: GeometryPriors = DEFAULT_PRIORS,
    attenuation: Attenuation = DEFAULT_ATTENUATION,
) -> PairedDataset:
    dims = _as_dims(dims)
    draws = _draw_all(n, dims, class_mix, master_seed, _PAIRED_STREAM, priors, attenuation)
    logger.debug("sampled %d paired phantoms (seed %d, dims %s)", n, master_seed, dims)

    return PairedDataset(
        tuple(PairedSample(drr(d.volume), d.volume, d.label) for d in draws),
        master_seed,
    )


def sample_unpaired_set(
    m: int,
    dims: int | Sequence[int],
    class_mix: Sequence[float],
    shift: StyleShiftParams,
    master_seed: int,
    priors: GeometryPriors = SHIFTED_PRIORS,
    attenuation: Attenuation = DEFAULT_ATTENUATION,
) -> UnpairedXraySet:
    dims = _as_dims(dims)
    draws = _draw_all(m, dims, class_mix, master_seed, _UNPAIRED_STREAM, priors, attenuation)
    logger.debug("sampled %d unpaired phantoms (seed %d, dims %s)", m, master_seed, dims)

    xrays = [
        style_shift(
            drr(d.volume),
            shift,
            np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(_UNPAIRED_STREAM, i, 1))),
        )
        for i, d in enumerate(draws)
    ]

    return UnpairedXraySet(
        xrays,
        [d.volume for d in draws],
        [d.label for d in draws],
        master_seed,
    )
