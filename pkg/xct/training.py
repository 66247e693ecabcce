# xct/training.py

"""
Two-stage schedule.

pretrain
    Shuffled paired batches. Each step updates the discriminator on
    (real CT | x) against (detached G(x) | x), then the generator on
    λ1·L_lsgan + λ2·L_re + λ3·L_pl.

finetune
    Batches alternate unpaired, paired, unpaired, ... within every epoch.
    Unpaired steps update the generator on λ4·L_sind (plus λ1·L_lsgan if
    ``include_lsgan_on_unpaired``) and leave the discriminator untouched,
    since no real CT exists for its real branch. Paired steps are the
    pretraining step unchanged.

Training reads unpaired data through ``UnpairedXraySet.xrays`` only.

Each epoch ends with the validation L_re on a seed-derived 10 % split of the
paired data and a checkpoint; the lowest validation L_re is also written as
``best.ckpt``.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence
from typing_extensions import Self

import numpy as np

from autodiff import (
    AdamState,
    ContractViolation,
    Node,
    NonFiniteGradient,
    adam_step,
    backward,
    detach,
    fresh_tape,
    no_grad,
    ops,
    set_precision,
)
from xct.checkpoint import Checkpoint, stored, write_checkpoint
from xct.config import TrainConfig
from xct.errors import ConfigError, DataError, NumericalAbort
from xct.losses import (
    LossParts,
    LossReport,
    loss_discriminator,
    loss_lsgan_g,
    loss_projection,
    loss_reconstruction,
    loss_shape_induction,
    loss_total,
    volume_batch,
    xray_batch,
)
from xct.models import DiscriminatorModel, GeneratorModel, discriminator_forward, generator_forward
from xct.runlog import LOG_NAME, TrainLog
from xct.volume import PairedDataset, PairedSample, UnpairedXraySet, XrayImage

logger = logging.getLogger(__name__)

# phantom sampling owns streams 0 and 1
_VALIDATION_STREAM = 2

BEST_NAME = "best.ckpt"


class Stage(Enum):
    init = "init"
    pretrain = "pretrain"
    finetune = "finetune"


# ----------------------------
# Model bundle
# ----------------------------


@dataclass
class ModelBundle:
    """Everything a training run mutates; a checkpoint is its snapshot."""

    generator: GeneratorModel
    discriminator: DiscriminatorModel
    g_opt: AdamState
    d_opt: AdamState
    rng: np.random.Generator
    stage: Stage = Stage.init
    epoch: int = 0
    step: int = 0
    best_val: float | None = None
    last_val: float | None = None
    max_grad: float = 0.0

    @classmethod
    def create(cls, cfg: TrainConfig) -> Self:
        init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        init_rng = np.random.default_rng(init_seed)

        generator = GeneratorModel.create(cfg.volume_side, cfg.model, init_rng)
        discriminator = DiscriminatorModel.create(cfg.model, init_rng)
        logger.info(
            "generator: %d parameters, discriminator: %d parameters",
            generator.parameter_count(),
            discriminator.parameter_count(),
        )

        return cls(
            generator=generator,
            discriminator=discriminator,
            g_opt=_adam(cfg, cfg.lr_g),
            d_opt=_adam(cfg, cfg.lr_d),
            rng=np.random.default_rng(shuffle_seed),
        )

    def to_checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        tensors = stored(self.generator.state_dict() | self.discriminator.state_dict())

        optimizer = {}
        for key, state in (("g", self.g_opt), ("d", self.d_opt)):
            optimizer |= stored({f"adam.{key}.m.{name}": m for name, m in state.m.items()})
            optimizer |= stored({f"adam.{key}.v.{name}": v for name, v in state.v.items()})

        meta = {
            "config": cfg.to_dict(),
            "stage": self.stage.value,
            "epoch": self.epoch,
            "step": self.step,
            "best_val": self.best_val,
            "last_val": self.last_val,
            "rng_state": self.rng.bit_generator.state,
            "adam_steps": {"g": self.g_opt.step, "d": self.d_opt.step},
        }
        return Checkpoint(tensors, optimizer, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig | None = None) -> Self:
        """
        Rebuild a bundle from ``ckpt``. Architecture always comes from the
        stored config; learning rates and betas from ``cfg`` when given.
        """
        stored_cfg = TrainConfig.from_dict(ckpt.meta["config"])
        cfg = cfg or stored_cfg
        if cfg.volume_side != stored_cfg.volume_side or cfg.model != stored_cfg.model:
            raise ConfigError("config architecture differs from the checkpoint's")

        # parameters are overwritten from the checkpoint right away
        scratch = np.random.default_rng(0)
        generator = GeneratorModel.create(stored_cfg.volume_side, stored_cfg.model, scratch)
        discriminator = DiscriminatorModel.create(stored_cfg.model, scratch)
        generator.load_state_dict(ckpt.subset("g."))
        discriminator.load_state_dict(ckpt.subset("d."))

        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.meta["rng_state"]
        steps = ckpt.meta.get("adam_steps", {"g": 0, "d": 0})

        return cls(
            generator=generator,
            discriminator=discriminator,
            g_opt=_restore_adam(ckpt, "g", cfg, cfg.lr_g, steps["g"]),
            d_opt=_restore_adam(ckpt, "d", cfg, cfg.lr_d, steps["d"]),
            rng=rng,
            stage=Stage(ckpt.meta["stage"]),
            epoch=ckpt.meta["epoch"],
            step=ckpt.meta["step"],
            best_val=ckpt.meta.get("best_val"),
            last_val=ckpt.meta.get("last_val"),
        )


def _adam(cfg: TrainConfig, lr: float) -> AdamState:
    beta1, beta2 = cfg.adam_betas
    return AdamState(lr=lr, beta1=beta1, beta2=beta2)


def _restore_adam(ckpt: Checkpoint, key: str, cfg: TrainConfig, lr: float, step: int) -> AdamState:
    moments = {}
    for kind in ("m", "v"):
        prefix = f"adam.{key}.{kind}."
        moments[kind] = {
            name.removeprefix(prefix): value
            for name, value in ckpt.optimizer.items()
            if name.startswith(prefix)
        }
    return replace(_adam(cfg, lr), step=step, m=moments["m"], v=moments["v"])


def load_generator(ckpt: Checkpoint) -> GeneratorModel:
    return ModelBundle.from_checkpoint(ckpt).generator


# ----------------------------
# Steps
# ----------------------------


def _check_finite(bundle: ModelBundle, terms: dict[str, Node | None]):
    for term, node in terms.items():
        if node is not None and not np.all(np.isfinite(node.value)):
            raise NumericalAbort(step=bundle.step, term=term, max_grad=bundle.max_grad)


def _update(bundle: ModelBundle, params: dict[str, Node], grads, state: AdamState) -> AdamState:
    try:
        new_state = adam_step(params, grads, state)
    except NonFiniteGradient as e:
        raise NumericalAbort(step=bundle.step, term="gradient", max_grad=e.max_abs, param=e.param) from e

    relevant = [np.abs(grads[name]).max() for name in params if name in grads]
    bundle.max_grad = float(max(relevant, default=0.0))
    return new_state


def _parts(parts: LossParts) -> dict[str, Node | None]:
    return {"l_lsgan": parts.lsgan, "l_re": parts.re, "l_pl": parts.pl, "l_sind": parts.sind}


def train_step_paired(bundle: ModelBundle, batch: Sequence[PairedSample], cfg: TrainConfig) -> LossReport:
    """One discriminator update, then one generator update, on the same batch."""
    if not batch:
        raise ContractViolation("train_step_paired needs a non-empty batch")

    bundle.step += 1
    g, d = bundle.generator, bundle.discriminator
    x = ops.constant(xray_batch([s.xray for s in batch]))
    y = volume_batch([s.ct for s in batch])

    with fresh_tape():
        fake = generator_forward(g, x)

        real_scores = discriminator_forward(d, ops.constant(y), x)
        fake_scores = discriminator_forward(d, detach(fake), x)
        l_disc = loss_discriminator(real_scores, fake_scores)
        _check_finite(bundle, {"l_disc": l_disc})
        bundle.d_opt = _update(bundle, d.params, backward(l_disc), bundle.d_opt)

        parts = LossParts(
            lsgan=loss_lsgan_g(discriminator_forward(d, fake, x)),
            re=loss_reconstruction(fake, y),
            pl=loss_projection(fake, y),
        )
        total, report = loss_total(cfg.weights, parts)
        _check_finite(bundle, _parts(parts))
        bundle.g_opt = _update(bundle, g.params, backward(total), bundle.g_opt)

    return replace(report, l_disc=l_disc.item())


def train_step_unpaired(bundle: ModelBundle, batch: Sequence[XrayImage], cfg: TrainConfig) -> LossReport:
    """
    Generator update on λ4·L_sind. With λ4 = 0 and no adversarial term the
    step only reports the losses; no parameter or optimizer state changes.
    """
    if not batch:
        raise ContractViolation("train_step_unpaired needs a non-empty batch")

    bundle.step += 1
    g, d = bundle.generator, bundle.discriminator
    x = ops.constant(xray_batch(batch))

    with fresh_tape():
        fake = generator_forward(g, x)
        lsgan = loss_lsgan_g(discriminator_forward(d, fake, x)) if cfg.include_lsgan_on_unpaired else None
        parts = LossParts(lsgan=lsgan, sind=loss_shape_induction(fake, batch))
        total, report = loss_total(cfg.weights, parts)
        _check_finite(bundle, _parts(parts))

        active = cfg.weights.lambda4 > 0 or (lsgan is not None and cfg.weights.lambda1 > 0)
        if active:
            bundle.g_opt = _update(bundle, g.params, backward(total), bundle.g_opt)

    return report


# ----------------------------
# Data plumbing
# ----------------------------


def split_validation(paired: PairedDataset, fraction: float, seed: int) -> tuple[PairedDataset, PairedDataset]:
    """
    Seed-derived (train, validation) partition. A single-sample dataset
    validates on its training sample.
    """
    n = len(paired)
    if n < 2:
        return paired, paired

    n_val = min(max(1, round(fraction * n)), n - 1) if fraction > 0 else 0
    if n_val == 0:
        return paired, paired

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_VALIDATION_STREAM,)))
    order = rng.permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return paired.subset(train), paired.subset(val)


def validation_l_re(generator: GeneratorModel, samples: PairedDataset, batch_size: int = 8) -> float:
    """Per-voxel MSE over ``samples``, every sample weighted equally."""
    total = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples.samples[start : start + batch_size]
            pred = generator_forward(generator, ops.constant(xray_batch([s.xray for s in chunk])))
            total += loss_reconstruction(pred, [s.ct for s in chunk]).item() * len(chunk)
    return total / max(len(samples), 1)


def _epoch_batches(n_items: int, n_batches: int, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """
    ``n_batches`` full batches drawn from back-to-back permutations of
    ``n_items``, so a stream shorter than the epoch cycles.
    """
    needed = n_batches * batch_size
    order: list[int] = []
    while len(order) < needed:
        order.extend(rng.permutation(n_items).tolist())
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]


def _check_side(cfg: TrainConfig, paired: PairedDataset):
    side = cfg.volume_side
    for sample in paired:
        if sample.ct.dims != (side, side, side):
            raise DataError(f"dataset volume dims {sample.ct.dims} do not match volume_side {side}")


def _end_epoch(bundle: ModelBundle, cfg: TrainConfig, val: PairedDataset, run_dir: Path | None) -> Checkpoint:
    val_l_re = validation_l_re(bundle.generator, val)
    is_best = bundle.best_val is None or val_l_re < bundle.best_val
    if is_best:
        bundle.best_val = val_l_re
    bundle.last_val = val_l_re

    ckpt = bundle.to_checkpoint(cfg)
    if run_dir is not None:
        write_checkpoint(ckpt, run_dir / f"ckpt_epoch_{bundle.epoch:04d}.ckpt")
        if is_best:
            write_checkpoint(ckpt, run_dir / BEST_NAME)
    return ckpt


def _log_epoch(bundle: ModelBundle, reports: list[LossReport], total_epochs: int):
    def mean(key: str) -> float | None:
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return sum(values) / len(values) if values else None

    summary = ", ".join(
        f"{key}={value:.5f}"
        for key in ("l_total", "l_re", "l_pl", "l_sind", "l_lsgan", "l_disc")
        if (value := mean(key)) is not None
    )
    logger.info(
        "%s epoch %d/%d: %s, val l_re=%.5f%s",
        bundle.stage.value,
        bundle.epoch,
        total_epochs,
        summary or "no steps",
        bundle.last_val,
        " (best)" if bundle.last_val == bundle.best_val else "",
    )


def _open_log(run_dir: Path | None) -> TrainLog:
    return TrainLog(None if run_dir is None else run_dir / LOG_NAME)


@contextlib.contextmanager
def working_precision(cfg: TrainConfig):
    """Run a block at ``cfg.precision``; the previous precision is restored."""
    previous = set_precision(cfg.precision)
    try:
        yield
    finally:
        set_precision(previous)


# ----------------------------
# Stages
# ----------------------------


def pretrain(
    cfg: TrainConfig,
    paired: PairedDataset,
    run_dir: str | Path | None = None,
    start: Checkpoint | None = None,
    log: TrainLog | None = None,
) -> Checkpoint:
    """
    Paired pretraining for ``cfg.pretrain_epochs`` epochs.

    Parameters
    ----------
    start : Checkpoint, optional
        A pretraining checkpoint to resume from; its remaining epochs run
        exactly as an uninterrupted run would have run them.

    Returns
    -------
    Checkpoint
        State after the final epoch (the initial state for zero epochs).
    """
    with working_precision(cfg):
        return _pretrain(cfg, paired, run_dir, start, log)


def _pretrain(
    cfg: TrainConfig,
    paired: PairedDataset,
    run_dir: str | Path | None,
    start: Checkpoint | None,
    log: TrainLog | None,
) -> Checkpoint:
    if len(paired) == 0:
        raise DataError("pretraining needs a non-empty paired dataset")
    _check_side(cfg, paired)

    run_dir = None if run_dir is None else Path(run_dir)
    log = log or _open_log(run_dir)

    if start is None:
        bundle = ModelBundle.create(cfg)
    else:
        bundle = ModelBundle.from_checkpoint(start, cfg)
        if bundle.stage is Stage.finetune:
            raise ConfigError("cannot resume pretraining from a fine-tuning checkpoint")

    train, val = split_validation(paired, cfg.validation_fraction, cfg.seed)
    if bundle.stage is Stage.init:
        bundle.stage = Stage.pretrain

    for epoch in range(bundle.epoch + 1, cfg.pretrain_epochs + 1):
        order = bundle.rng.permutation(len(train)).tolist()
        reports = []
        for start_at in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start_at : start_at + cfg.batch_size]]
            report = train_step_paired(bundle, batch, cfg)
            log.write(stage="pretrain", phase="paired", epoch=epoch, step=bundle.step, report=report)
            reports.append(report)

        bundle.epoch = epoch
        _end_epoch(bundle, cfg, val, run_dir)
        _log_epoch(bundle, reports, cfg.pretrain_epochs)

    return bundle.to_checkpoint(cfg)


def train_baseline(cfg: TrainConfig, paired: PairedDataset, run_dir: str | Path | None = None) -> Checkpoint:
    """The paired-only reference model: pretraining for ``baseline_epochs``."""
    return pretrain(replace(cfg, pretrain_epochs=cfg.baseline_epochs), paired, run_dir)


def finetune(
    cfg: TrainConfig,
    paired: PairedDataset,
    unpaired: UnpairedXraySet,
    start: Checkpoint,
    run_dir: str | Path | None = None,
    log: TrainLog | None = None,
) -> Checkpoint:
    """
    Alternating fine-tuning for ``cfg.finetune_epochs`` epochs from ``start``.

    An epoch holds ``ceil(max(|paired|, |unpaired|) / batch_size)`` batches
    per stream; each round is one unpaired batch then one paired batch.
    ``start`` may be a pretraining checkpoint or a fine-tuning checkpoint
    to resume.
    """
    with working_precision(cfg):
        return _finetune(cfg, paired, unpaired, start, run_dir, log)


def _finetune(
    cfg: TrainConfig,
    paired: PairedDataset,
    unpaired: UnpairedXraySet,
    start: Checkpoint,
    run_dir: str | Path | None,
    log: TrainLog | None,
) -> Checkpoint:
    if len(paired) == 0:
        raise DataError("fine-tuning needs a non-empty paired dataset")
    _check_side(cfg, paired)

    run_dir = None if run_dir is None else Path(run_dir)
    log = log or _open_log(run_dir)
    bundle = ModelBundle.from_checkpoint(start, cfg)

    if bundle.stage is not Stage.finetune:
        bundle.stage, bundle.epoch, bundle.best_val, bundle.last_val = Stage.finetune, 0, None, None

    xrays = unpaired.xrays
    if not xrays:
        logger.warning("unpaired set is empty; fine-tuning on paired batches only")

    train, val = split_validation(paired, cfg.validation_fraction, cfg.seed)
    bs = cfg.batch_size

    for epoch in range(bundle.epoch + 1, cfg.finetune_epochs + 1):
        n_batches = math.ceil(max(len(train), len(xrays)) / bs)
        paired_batches = _epoch_batches(len(train), n_batches, bs, bundle.rng)
        unpaired_batches = _epoch_batches(len(xrays), n_batches, bs, bundle.rng) if xrays else []

        reports = []
        for i in range(n_batches):
            if unpaired_batches:
                report = train_step_unpaired(bundle, [xrays[j] for j in unpaired_batches[i]], cfg)
                log.write(stage="finetune", phase="unpaired", epoch=epoch, step=bundle.step, report=report)
                reports.append(report)

            report = train_step_paired(bundle, [train[j] for j in paired_batches[i]], cfg)
            log.write(stage="finetune", phase="paired", epoch=epoch, step=bundle.step, report=report)
            reports.append(report)

        bundle.epoch = epoch
        _end_epoch(bundle, cfg, val, run_dir)
        _log_epoch(bundle, reports, cfg.finetune_epochs)

    return bundle.to_checkpoint(cfg)
