# xct/evaluation.py

"""
Reconstruction metrics against the sealed ground truth, the downstream
3-class classification proxy and the λ4 ablation.

Evaluation is the one authorized reader of an unpaired set's hidden volumes.
"""

from __future__ import annotations

import contextlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
import polars as pl

from autodiff import AdamState, NonFiniteGradient, adam_step, backward, fresh_tape, ops
from xct.checkpoint import Checkpoint
from xct.config import ClassifierConfig, ClassifierProtocol, TrainConfig
from xct.errors import ConfigError, EvaluationError, NumericalAbort
from xct.losses import volume_batch, xray_batch
from xct.models import ClassifierModel
from xct.phantom import ClassLabel
from xct.projection import Plane, mean_projection
from xct.training import finetune, load_generator, pretrain, working_precision
from xct.volume import PairedDataset, UnpairedXraySet, Volume, XrayImage, write_pgm

logger = logging.getLogger(__name__)

_ABLATION_METRICS = ["accuracy", "tb_recall", "tb_precision", "projection_mse", "hidden_volume_mse"]


# ----------------------------
# Reconstructors
# ----------------------------


class Reconstructor(Protocol):
    def reconstruct(self, xrays: np.ndarray) -> np.ndarray:
        """(n, 1, H, W) x-rays → (n, 1, D, H, W) volumes."""
        ...


def _key(pixels: np.ndarray) -> bytes:
    return np.asarray(pixels, dtype=np.float64).tobytes()


class OracleReconstructor:
    """Returns the true volume behind each known x-ray: the upper bound."""

    def __init__(self, xrays: Sequence[XrayImage], volumes: Sequence[Volume]):
        self._lookup = {_key(x.pixels): v.voxels for x, v in zip(xrays, volumes)}

    def reconstruct(self, xrays: np.ndarray) -> np.ndarray:
        out = []
        for x in xrays:
            key = _key(x[0])
            if key not in self._lookup:
                raise EvaluationError("oracle asked for an x-ray it has no volume for")
            out.append(self._lookup[key])
        return np.stack(out)[:, None].astype(xrays.dtype)


class ConstantReconstructor:
    def __init__(self, value: float = 0.5):
        self.value = value

    def reconstruct(self, xrays: np.ndarray) -> np.ndarray:
        n, _, h, w = xrays.shape
        return np.full((n, 1, h, h, w), self.value, dtype=xrays.dtype)


def _as_reconstructor(model: Reconstructor | Checkpoint) -> Reconstructor:
    return load_generator(model) if isinstance(model, Checkpoint) else model


# ----------------------------
# Reconstruction metrics
# ----------------------------


@dataclass(frozen=True)
class ReconstructionMetrics:
    projection_mse: float
    hidden_volume_mse: float
    count: int


def reconstruction_errors(
    model: Reconstructor,
    xrays: Sequence[XrayImage],
    volumes: Sequence[Volume],
    batch_size: int = 8,
) -> ReconstructionMetrics:
    """Per-sample pixel and voxel MSE of ``model`` averaged over the set, in float64."""
    if not xrays:
        raise EvaluationError("cannot evaluate on an empty set")

    projection, hidden = [], []
    for start in range(0, len(xrays), batch_size):
        chunk = xrays[start : start + batch_size]
        x = xray_batch(chunk)
        pred = np.asarray(model.reconstruct(x), dtype=np.float64)
        truth = volumes[start : start + batch_size]

        if pred.shape[2:] != truth[0].dims:
            raise EvaluationError(f"model output {pred.shape[2:]} does not match hidden volumes {truth[0].dims}")

        for p, image, v in zip(pred[:, 0], chunk, truth):
            projection.append(np.mean((mean_projection(p, Plane.coronal) - image.pixels.astype(np.float64)) ** 2))
            hidden.append(np.mean((p - v.voxels.astype(np.float64)) ** 2))

    return ReconstructionMetrics(float(np.mean(projection)), float(np.mean(hidden)), len(xrays))


def eval_reconstruction(
    model: Reconstructor | Checkpoint, unpaired: UnpairedXraySet, batch_size: int = 8
) -> ReconstructionMetrics:
    if not unpaired.has_hidden:
        raise EvaluationError("reconstruction metrics need the unpaired set's hidden volumes")
    volumes, _ = unpaired.unseal()
    return reconstruction_errors(_as_reconstructor(model), unpaired.xrays, volumes, batch_size)


# ----------------------------
# Classification metrics
# ----------------------------


def confusion_matrix(true: np.ndarray, pred: np.ndarray, n_classes: int = len(ClassLabel)) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(true), np.asarray(pred)), 1)
    return matrix


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class MetricsReport:
    """
    Classification results of one model on one test set.

    Recall and precision are None where undefined (no true samples, or no
    predictions, of that class) rather than 0.
    """

    name: str
    seed: int
    confusion: tuple[tuple[int, ...], ...]
    projection_mse: float | None = None
    hidden_volume_mse: float | None = None
    lambda4: float | None = None

    @classmethod
    def from_predictions(cls, name: str, seed: int, true, pred, **extra) -> MetricsReport:
        matrix = confusion_matrix(true, pred)
        return cls(name=name, seed=seed, confusion=tuple(tuple(int(c) for c in row) for row in matrix), **extra)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.confusion, dtype=np.int64)

    @property
    def count(self) -> int:
        return int(self.matrix.sum())

    @property
    def accuracy(self) -> float | None:
        return _ratio(int(np.trace(self.matrix)), self.count)

    @property
    def recall(self) -> dict[str, float | None]:
        m = self.matrix
        return {c.name: _ratio(int(m[c.value, c.value]), int(m[c.value].sum())) for c in ClassLabel}

    @property
    def precision(self) -> dict[str, float | None]:
        m = self.matrix
        return {c.name: _ratio(int(m[c.value, c.value]), int(m[:, c.value].sum())) for c in ClassLabel}

    @property
    def tb_recall(self) -> float | None:
        return self.recall[ClassLabel.tb.name]

    @property
    def tb_precision(self) -> float | None:
        return self.precision[ClassLabel.tb.name]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "lambda4": self.lambda4,
            "count": self.count,
            "accuracy": self.accuracy,
            "tb_recall": self.tb_recall,
            "tb_precision": self.tb_precision,
            "recall": self.recall,
            "precision": self.precision,
            "confusion": [list(row) for row in self.confusion],
            "projection_mse": self.projection_mse,
            "hidden_volume_mse": self.hidden_volume_mse,
        }

    def table(self) -> pl.DataFrame:
        """One row per class: support, recall, precision."""
        m = self.matrix
        rows = [
            {
                "class": c.name,
                "support": int(m[c.value].sum()),
                "recall": self.recall[c.name],
                "precision": self.precision[c.name],
            }
            for c in ClassLabel
        ]
        with pl.Config(set_tbl_rows=-1, set_tbl_cols=-1, set_float_precision=3):
            return pl.DataFrame(rows, schema={"class": pl.String, "support": pl.Int64, "recall": pl.Float64, "precision": pl.Float64})


# ----------------------------
# Classifier
# ----------------------------


def _label_array(labels: Sequence[ClassLabel]) -> np.ndarray:
    return np.array([label.value for label in labels], dtype=np.int64)


def _accuracy(clf: ClassifierModel, volumes: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(clf.predict(volumes) == labels)) if len(labels) else 0.0


def train_classifier(
    paired: PairedDataset,
    cfg: ClassifierConfig,
    generator: Reconstructor | None = None,
) -> ClassifierModel:
    """
    Cross-entropy training of the volume classifier; returns the parameters
    of the epoch with the best validation accuracy (earliest on ties).

    With the ``true`` protocol the classifier sees the true volumes; with
    ``generated`` it sees ``generator``'s reconstructions of the x-rays.
    """
    labels = _label_array([s.label for s in paired])
    counts = np.bincount(labels, minlength=len(ClassLabel))

    absent = [c.name for c in ClassLabel if counts[c.value] == 0]
    if absent:
        raise ConfigError(f"classifier training set has no samples of class {absent}")
    if counts.min() < cfg.min_per_class:
        raise ConfigError(
            f"classifier training needs >= {cfg.min_per_class} samples per class, "
            f"got {dict(zip([c.name for c in ClassLabel], counts.tolist()))}"
        )

    if cfg.protocol is ClassifierProtocol.generated:
        if generator is None:
            raise ConfigError("the generated classifier protocol needs a generator")
        volumes = np.asarray(generator.reconstruct(xray_batch([s.xray for s in paired])))
    else:
        volumes = volume_batch([s.ct for s in paired])

    init_seed, split_seed, shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(4)
    clf = ClassifierModel.create(cfg, np.random.default_rng(init_seed))

    n = len(labels)
    n_val = min(round(cfg.validation_fraction * n), n - 1)
    order = np.random.default_rng(split_seed).permutation(n)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    if n_val == 0:
        val_idx = train_idx

    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    opt = AdamState(lr=cfg.lr)

    best_acc, best_state = -1.0, clf.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        batches = shuffle_rng.permutation(train_idx)
        losses = []
        for start in range(0, len(batches), cfg.batch_size):
            idx = batches[start : start + cfg.batch_size]
            with fresh_tape():
                loss = ops.cross_entropy(clf.logits(ops.constant(volumes[idx]), rng=dropout_rng), labels[idx])
                try:
                    opt = adam_step(clf.params, backward(loss), opt)
                except NonFiniteGradient as e:
                    raise NumericalAbort(step=opt.step + 1, term="cross_entropy", max_grad=e.max_abs, param=e.param) from e
            losses.append(loss.item())

        acc = _accuracy(clf, volumes[val_idx], labels[val_idx])
        if acc > best_acc:
            best_acc, best_state = acc, clf.state_dict()
        logger.info("classifier epoch %d/%d: loss=%.4f, val accuracy=%.3f", epoch, cfg.epochs, float(np.mean(losses)), acc)

    clf.load_state_dict(best_state)
    return clf


def classify_volumes(
    clf: ClassifierModel, volumes: np.ndarray, labels: Sequence[ClassLabel], name: str = "volumes", seed: int = 0
) -> MetricsReport:
    return MetricsReport.from_predictions(name, seed, _label_array(labels), clf.predict(volumes))


def eval_generated_classification(
    clf: ClassifierModel,
    model: Reconstructor | Checkpoint,
    xrays: Sequence[XrayImage],
    labels: Sequence[ClassLabel],
    name: str = "generated",
    seed: int = 0,
) -> MetricsReport:
    """x → G(x) → classifier, scored against ``labels``."""
    if not xrays:
        raise EvaluationError("cannot classify an empty test set")
    if len(xrays) != len(labels):
        raise EvaluationError(f"{len(xrays)} test x-rays but {len(labels)} labels")

    volumes = np.asarray(_as_reconstructor(model).reconstruct(xray_batch(xrays)))
    return classify_volumes(clf, volumes, labels, name, seed)


# ----------------------------
# λ4 ablation
# ----------------------------


@dataclass(frozen=True)
class _TestSet:
    xrays: tuple[XrayImage, ...]
    volumes: tuple[Volume, ...]
    labels: tuple[ClassLabel, ...]


@dataclass(frozen=True)
class AblationRow:
    lambda4: float
    runs: int
    mean: dict[str, float | None]
    std: dict[str, float | None]


@dataclass(frozen=True)
class AblationResult:
    rows: tuple[AblationRow, ...]
    cells: tuple[MetricsReport, ...]
    oracle: MetricsReport | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": [
                {"lambda4": r.lambda4, "runs": r.runs, "mean": r.mean, "std": r.std} for r in self.rows
            ],
            "cells": [c.to_dict() for c in self.cells],
            "oracle": None if self.oracle is None else self.oracle.to_dict(),
        }

    def table(self) -> pl.DataFrame:
        rows = [
            {"lambda4": r.lambda4, "runs": r.runs}
            | {f"{k}_mean": r.mean[k] for k in _ABLATION_METRICS}
            | {f"{k}_std": r.std[k] for k in _ABLATION_METRICS}
            for r in self.rows
        ]
        schema = {"lambda4": pl.Float64, "runs": pl.Int64}
        schema |= {f"{k}_{s}": pl.Float64 for s in ("mean", "std") for k in _ABLATION_METRICS}
        return pl.DataFrame(rows, schema=schema)

    def to_text(self) -> str:
        """Aligned plain-text table, mean ± std per metric, undefined shown as n/a."""
        def cell(mean: float | None, std: float | None) -> str:
            if mean is None:
                return "n/a"
            return f"{mean:.4f} ± {std:.4f}" if std is not None else f"{mean:.4f}"

        header = ["lambda4", "runs", *_ABLATION_METRICS]
        body = [
            [f"{r.lambda4:g}", str(r.runs), *(cell(r.mean[k], r.std[k]) for k in _ABLATION_METRICS)]
            for r in self.rows
        ]
        if self.oracle is not None:
            o = self.oracle.to_dict()
            body.append(["oracle", "1", *(cell(o[k], None) for k in _ABLATION_METRICS)])

        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(text.rjust(w) for text, w in zip(row, widths)) for row in [header, *body]]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        json_path = out_dir / "ablation.json"
        text_path = out_dir / "ablation.txt"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        text_path.write_text(self.to_text(), encoding="utf-8")
        return [json_path, text_path]


def _aggregate(cells: Sequence[MetricsReport]) -> tuple[AblationRow, ...]:
    schema = {"lambda4": pl.Float64} | {k: pl.Float64 for k in _ABLATION_METRICS}
    frame = pl.DataFrame([{k: c.to_dict()[k] for k in schema} for c in cells], schema=schema)

    summary = (
        frame.group_by("lambda4")
        .agg(
            pl.len().alias("runs"),
            *[pl.col(k).mean().alias(f"{k}_mean") for k in _ABLATION_METRICS],
            *[pl.col(k).std().alias(f"{k}_std") for k in _ABLATION_METRICS],
        )
        .sort("lambda4")
    )

    return tuple(
        AblationRow(
            lambda4=row["lambda4"],
            runs=row["runs"],
            mean={k: row[f"{k}_mean"] for k in _ABLATION_METRICS},
            std={k: row[f"{k}_std"] for k in _ABLATION_METRICS},
        )
        for row in summary.iter_rows(named=True)
    )


def _seed_config(base: TrainConfig, index: int) -> TrainConfig:
    return replace(base, seed=base.seed + index)


def _pretrain_job(cfg: TrainConfig, paired: PairedDataset, run_dir: Path | None) -> Checkpoint:
    return pretrain(cfg, paired, run_dir)


def _cell_job(
    cfg: TrainConfig,
    paired: PairedDataset,
    unpaired: UnpairedXraySet,
    start: Checkpoint,
    test: _TestSet,
    clf: ClassifierModel | None,
    run_dir: Path | None,
) -> MetricsReport:
    with working_precision(cfg):
        generator = load_generator(finetune(cfg, paired, unpaired, start, run_dir))

        if clf is None:
            clf = train_classifier(paired, cfg.classifier, generator)

        errors = reconstruction_errors(generator, test.xrays, test.volumes)
        report = eval_generated_classification(
            clf, generator, test.xrays, test.labels, name=f"lambda4={cfg.weights.lambda4:g}", seed=cfg.seed
        )
    return replace(
        report,
        lambda4=cfg.weights.lambda4,
        projection_mse=errors.projection_mse,
        hidden_volume_mse=errors.hidden_volume_mse,
    )


def _run_dir(out_dir: Path | None, *parts: str) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir.joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_ablation(
    base_cfg: TrainConfig,
    lambda4_values: Sequence[float] | None,
    n_seeds: int,
    paired: PairedDataset,
    unpaired: UnpairedXraySet,
    test: UnpairedXraySet,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> AblationResult:
    """
    For every λ4 and seed: fine-tune the seed's pretrained checkpoint (one per
    seed, shared by all λ4 values) and evaluate on ``test``.

    Parameters
    ----------
    lambda4_values : sequence of float, optional
        Defaults to ``base_cfg.lambda4_grid``.
    n_seeds : int
        Training seeds ``base_cfg.seed + k`` for k < n_seeds; at least 2.
    jobs : int
        Worker processes for the pretraining and fine-tuning cells. Results
        are keyed by (λ4, seed), so they do not depend on ``jobs``.
    """
    values = tuple(float(v) for v in (base_cfg.lambda4_grid if lambda4_values is None else lambda4_values))
    if n_seeds < 2:
        raise ConfigError(f"an ablation needs at least 2 seeds, got {n_seeds}")
    if not values or len(set(values)) != len(values):
        raise ConfigError(f"lambda4 values must be distinct and non-empty, got {values}")
    if any(v < 0 for v in values):
        raise ConfigError("lambda4 values must be >= 0")
    if not test.has_hidden:
        raise EvaluationError("the ablation test set needs its hidden volumes")

    out_dir = None if out_dir is None else Path(out_dir)
    volumes, labels = test.unseal()
    test_set = _TestSet(test.xrays, volumes, labels)

    clf = None
    oracle_report = None
    if base_cfg.classifier.protocol is ClassifierProtocol.true_volumes:
        clf = train_classifier(paired, base_cfg.classifier)
        oracle = OracleReconstructor(test_set.xrays, test_set.volumes)
        oracle_report = eval_generated_classification(clf, oracle, test_set.xrays, test_set.labels, name="oracle", seed=base_cfg.seed)

    seeds = [_seed_config(base_cfg, k) for k in range(n_seeds)]
    cells = [(v, k) for v in values for k in range(n_seeds)]

    with ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else contextlib.nullcontext() as pool:
        run = map if pool is None else pool.map
        pretrained = list(
            run(
                _pretrain_job,
                seeds,
                [paired] * n_seeds,
                [_run_dir(out_dir, f"seed_{k}", "pretrain") for k in range(n_seeds)],
            )
        )
        logger.info("pretrained %d seeds; running %d fine-tuning cells", n_seeds, len(cells))

        reports = list(
            run(
                _cell_job,
                [seeds[k].with_lambda4(v) for v, k in cells],
                [paired] * len(cells),
                [unpaired] * len(cells),
                [pretrained[k] for _, k in cells],
                [test_set] * len(cells),
                [clf] * len(cells),
                [_run_dir(out_dir, f"seed_{k}", f"lambda4_{v:g}") for v, k in cells],
            )
        )

    keyed = sorted(zip(cells, reports), key=lambda item: item[0])
    result = AblationResult(
        rows=_aggregate([r for _, r in keyed]),
        cells=tuple(r for _, r in keyed),
        oracle=oracle_report,
    )
    if out_dir is not None:
        result.write(out_dir)
    return result


# ----------------------------
# Projection comparison
# ----------------------------


def export_projection_comparison(
    xrays: Sequence[XrayImage],
    reconstructors: Mapping[str, Reconstructor | Checkpoint],
    out_dir: str | Path,
) -> list[Path]:
    """
    One ``compare_%04d.pgm`` montage per x-ray: the input, then the coronal
    projection of each reconstructor's volume, left to right in mapping
    order, separated by one white pixel column.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    x = xray_batch(xrays)
    columns = [[img.pixels for img in xrays]]
    for name, model in reconstructors.items():
        volumes = np.asarray(_as_reconstructor(model).reconstruct(x))
        columns.append([mean_projection(v[0], Plane.coronal) for v in volumes])
        logger.debug("projected %d reconstructions from %s", len(volumes), name)

    paths = []
    for i in range(len(xrays)):
        tiles = [column[i] for column in columns]
        separator = np.ones((tiles[0].shape[0], 1))
        montage = np.concatenate([part for tile in tiles for part in (tile, separator)][:-1], axis=1)
        paths.append(write_pgm(out_dir / f"compare_{i:04d}.pgm", montage))
    return paths
