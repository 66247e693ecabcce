import math
from dataclasses import replace

import numpy as np
import pytest

from autodiff import ContractViolation, Precision, get_precision
from xct import training
from xct.checkpoint import read_checkpoint
from xct.config import LossWeights, ModelConfig, TrainConfig
from xct.errors import ConfigError, DataError, NumericalAbort
from xct.phantom import StyleShiftParams, sample_paired_dataset, sample_unpaired_set
from xct.runlog import LOG_NAME, TrainLog, read_log
from xct.training import (
    BEST_NAME,
    ModelBundle,
    _epoch_batches,
    finetune,
    load_generator,
    pretrain,
    split_validation,
    train_baseline,
    train_step_paired,
    train_step_unpaired,
    validation_l_re,
)
from xct.volume import UnpairedXraySet


def _params(model) -> dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in model.params.items()}


def _changed(before, model) -> bool:
    return any(not np.array_equal(before[name], p.value) for name, p in model.params.items())


def _same_tensors(a, b):
    assert list(a.tensors) == list(b.tensors)
    for name in a.tensors:
        assert a.tensors[name].tobytes() == b.tensors[name].tobytes(), name
    for name in a.optimizer:
        assert a.optimizer[name].tobytes() == b.optimizer[name].tobytes(), name


# ----------------------------
# Splits and batching
# ----------------------------


def test_split_validation_is_seeded_and_disjoint(paired_small):
    train, val = split_validation(paired_small, 0.2, seed=3)
    again, _ = split_validation(paired_small, 0.2, seed=3)

    assert len(val) == 1 and len(train) == 5
    assert {id(s) for s in train}.isdisjoint({id(s) for s in val})
    assert [id(s) for s in train] == [id(s) for s in again]


def test_single_sample_validates_on_itself(paired_small):
    one = paired_small.subset([0])
    train, val = split_validation(one, 0.1, seed=0)
    assert train.samples == val.samples == one.samples


def test_epoch_batches_cycle_a_short_stream():
    batches = _epoch_batches(3, 4, 2, np.random.default_rng(0))

    assert len(batches) == 4
    assert all(len(b) == 2 for b in batches)
    assert sorted(batches[0] + batches[1][:1]) == [0, 1, 2]


# ----------------------------
# Steps
# ----------------------------


def test_paired_step_updates_both_models(tiny_config, paired_small):
    bundle = ModelBundle.create(tiny_config)
    g_before, d_before = _params(bundle.generator), _params(bundle.discriminator)

    report = train_step_paired(bundle, paired_small.samples[:2], tiny_config)

    assert _changed(g_before, bundle.generator)
    assert _changed(d_before, bundle.discriminator)
    assert bundle.step == 1
    assert bundle.g_opt.step == bundle.d_opt.step == 1
    assert report.l_disc is not None and report.l_sind is None
    w = tiny_config.weights
    expected = w.lambda1 * report.l_lsgan + w.lambda2 * report.l_re + w.lambda3 * report.l_pl
    assert report.l_total == pytest.approx(expected, rel=1e-9)


def test_paired_step_with_zero_learning_rate_changes_nothing(tiny_config, paired_small):
    cfg = replace(tiny_config, lr_g=0.0, lr_d=0.0)
    bundle = ModelBundle.create(cfg)
    g_before, d_before = _params(bundle.generator), _params(bundle.discriminator)

    train_step_paired(bundle, paired_small.samples[:2], cfg)

    assert not _changed(g_before, bundle.generator)
    assert not _changed(d_before, bundle.discriminator)
    assert bundle.step == 1


def test_unpaired_step_leaves_the_discriminator_alone(tiny_config, unpaired_small):
    bundle = ModelBundle.create(tiny_config)
    g_before, d_before = _params(bundle.generator), _params(bundle.discriminator)

    report = train_step_unpaired(bundle, unpaired_small.xrays[:2], tiny_config)

    assert _changed(g_before, bundle.generator)
    assert not _changed(d_before, bundle.discriminator)
    assert bundle.d_opt.step == 0
    assert report.l_sind is not None and report.l_re is None and report.l_lsgan is None
    assert unpaired_small.access_count == 0


def test_unpaired_step_with_zero_weight_changes_nothing(tiny_config, unpaired_small):
    cfg = tiny_config.with_lambda4(0.0)
    bundle = ModelBundle.create(cfg)
    g_before, g_opt = _params(bundle.generator), bundle.g_opt

    report = train_step_unpaired(bundle, unpaired_small.xrays[:2], cfg)

    assert not _changed(g_before, bundle.generator)
    assert bundle.g_opt is g_opt
    assert report.l_total == 0.0


def test_unpaired_step_can_include_the_adversarial_term(tiny_config, unpaired_small):
    cfg = replace(tiny_config, include_lsgan_on_unpaired=True)
    report = train_step_unpaired(ModelBundle.create(cfg), unpaired_small.xrays[:2], cfg)
    assert report.l_lsgan is not None


def test_empty_batches_are_contract_violations(tiny_config):
    bundle = ModelBundle.create(tiny_config)
    with pytest.raises(ContractViolation):
        train_step_paired(bundle, [], tiny_config)
    with pytest.raises(ContractViolation):
        train_step_unpaired(bundle, [], tiny_config)


def test_non_finite_loss_aborts(tiny_config, paired_small):
    bundle = ModelBundle.create(tiny_config)
    head = bundle.generator.params["g.head.b"]
    head.value = np.full_like(head.value, np.nan)

    with pytest.raises(NumericalAbort) as err:
        train_step_paired(bundle, paired_small.samples[:2], tiny_config)

    assert err.value.step == 1
    assert err.value.term == "l_disc"
    assert err.value.exit_code == 4


# ----------------------------
# Stages
# ----------------------------


def test_pretrain_writes_epoch_checkpoints_and_log(tiny_config, paired_small, tmp_path):
    ckpt = pretrain(tiny_config, paired_small, tmp_path)

    assert ckpt.stage == "pretrain"
    assert ckpt.epoch == 2
    assert (tmp_path / "ckpt_epoch_0001.ckpt").exists()
    assert (tmp_path / "ckpt_epoch_0002.ckpt").exists()
    assert (tmp_path / BEST_NAME).exists()

    best = read_checkpoint(tmp_path / BEST_NAME)
    assert best.meta["best_val"] == min(
        read_checkpoint(tmp_path / f"ckpt_epoch_{e:04d}.ckpt").meta["last_val"] for e in (1, 2)
    )

    log = read_log(tmp_path / LOG_NAME)
    train_size = len(split_validation(paired_small, tiny_config.validation_fraction, tiny_config.seed)[0])
    assert log.height == 2 * math.ceil(train_size / tiny_config.batch_size)
    assert set(log["phase"].to_list()) == {"paired"}
    assert log["step"].to_list() == list(range(1, log.height + 1))


def test_pretrain_zero_epochs_returns_the_initial_state(tiny_config, paired_small):
    cfg = replace(tiny_config, pretrain_epochs=0)
    ckpt = pretrain(cfg, paired_small)
    initial = ModelBundle.create(cfg).to_checkpoint(cfg)

    assert ckpt.epoch == 0
    for name, value in initial.tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[name], value)


def test_pretrain_is_deterministic(tiny_config, paired_small):
    cfg = replace(tiny_config, pretrain_epochs=1)
    _same_tensors(pretrain(cfg, paired_small), pretrain(cfg, paired_small))


def test_loss_reports_repeat_for_a_fixed_seed(tiny_config, paired_small, unpaired_small):
    def run():
        log = TrainLog()
        start = pretrain(tiny_config, paired_small, log=log)
        finetune(tiny_config, paired_small, unpaired_small, start, log=log)
        return log.records

    first, second = run(), run()
    assert len(first) > 0
    assert first == second


def test_pretrain_runs_at_the_configured_precision(tiny_config, paired_small, monkeypatch):
    seen = []
    step = training.train_step_paired

    def recording_step(bundle, batch, cfg):
        seen.append(bundle.generator.params["g.head.w"].value.dtype)
        return step(bundle, batch, cfg)

    monkeypatch.setattr(training, "train_step_paired", recording_step)
    pretrain(replace(tiny_config, precision="float64", pretrain_epochs=1), paired_small)

    assert seen and all(dtype == np.float64 for dtype in seen)
    assert get_precision() is Precision.float32


def test_resume_matches_an_uninterrupted_run(tiny_config, paired_small, tmp_path):
    straight = pretrain(tiny_config, paired_small)

    first = pretrain(replace(tiny_config, pretrain_epochs=1), paired_small, tmp_path)
    resumed = pretrain(tiny_config, paired_small, start=first)

    assert resumed.epoch == 2
    _same_tensors(resumed, straight)
    assert resumed.meta["rng_state"] == straight.meta["rng_state"]
    assert resumed.meta["best_val"] == straight.meta["best_val"]


def test_pretrain_refuses_bad_inputs(tiny_config, paired_small):
    with pytest.raises(DataError):
        pretrain(replace(tiny_config, volume_side=32), paired_small)
    with pytest.raises(DataError):
        pretrain(tiny_config, paired_small.subset([]))


def test_architecture_comes_from_the_checkpoint(tiny_config, paired_small):
    ckpt = pretrain(replace(tiny_config, pretrain_epochs=0), paired_small)
    other = replace(tiny_config, model=ModelConfig(encoder_channels=(4, 4, 4), discriminator_channels=(2, 4)))

    with pytest.raises(ConfigError, match="architecture"):
        ModelBundle.from_checkpoint(ckpt, other)
    assert load_generator(ckpt).channels == (4, 8, 8)


def test_baseline_runs_for_baseline_epochs(tiny_config, paired_small):
    assert train_baseline(tiny_config, paired_small).epoch == tiny_config.baseline_epochs


def test_finetune_alternates_per_batch(tiny_config, paired_small, unpaired_small):
    start = pretrain(replace(tiny_config, pretrain_epochs=1), paired_small)
    log = TrainLog()

    ckpt = finetune(tiny_config, paired_small, unpaired_small, start, log=log)

    train_size = len(split_validation(paired_small, tiny_config.validation_fraction, tiny_config.seed)[0])
    rounds = math.ceil(max(train_size, len(unpaired_small)) / tiny_config.batch_size)
    assert log.phases("finetune") == ["unpaired", "paired"] * rounds
    assert ckpt.stage == "finetune"
    assert ckpt.epoch == 1
    assert unpaired_small.access_count == 0


def test_finetune_on_an_empty_unpaired_set(tiny_config, paired_small, caplog):
    start = pretrain(replace(tiny_config, pretrain_epochs=0), paired_small)
    log = TrainLog()

    finetune(tiny_config, paired_small, UnpairedXraySet([], [], [], master_seed=0), start, log=log)

    assert set(log.phases()) == {"paired"}
    assert "empty" in caplog.text


def test_finetune_checkpoints_resume_finetuning_only(tiny_config, paired_small, unpaired_small, tmp_path):
    start = pretrain(replace(tiny_config, pretrain_epochs=0), paired_small)
    ckpt = finetune(tiny_config, paired_small, unpaired_small, start, tmp_path)

    assert (tmp_path / "ckpt_epoch_0001.ckpt").exists()
    assert (tmp_path / BEST_NAME).exists()
    with pytest.raises(ConfigError):
        pretrain(tiny_config, paired_small, start=ckpt)


def test_validation_l_re_weights_samples_equally(tiny_config, paired_small):
    g = ModelBundle.create(tiny_config).generator
    whole = validation_l_re(g, paired_small, batch_size=4)
    single = [validation_l_re(g, paired_small.subset([i])) for i in range(len(paired_small))]
    assert whole == pytest.approx(sum(single) / len(single), rel=1e-5)


# ----------------------------
# Desk-scale checks
# ----------------------------


@pytest.mark.slow
def test_single_sample_overfit():
    cfg = replace(
        TrainConfig(), weights=LossWeights(lambda1=0.0, lambda2=1.0, lambda3=0.0), lr_g=1e-3, batch_size=1
    )
    sample = sample_paired_dataset(1, cfg.volume_side, (1.0, 0.0, 0.0), master_seed=5)[0]
    bundle = ModelBundle.create(cfg)

    losses = [train_step_paired(bundle, [sample], cfg).l_re for _ in range(200)]

    assert losses[-1] <= 0.1 * losses[0]


@pytest.mark.slow
def test_shape_induction_alone_is_satisfiable():
    cfg = replace(TrainConfig(), lr_g=1e-3).with_lambda4(10.0)
    shift = StyleShiftParams(gamma=1.4, contrast=1.1, noise_sigma=0.02)
    x = sample_unpaired_set(1, cfg.volume_side, (0.0, 0.0, 1.0), shift, master_seed=6).xrays[0]
    bundle = ModelBundle.create(cfg)

    losses = [train_step_unpaired(bundle, [x], cfg).l_sind for _ in range(300)]

    assert losses[-1] <= 0.2 * losses[0]


@pytest.mark.slow
def test_desk_pretraining_halves_validation_error(tmp_path):
    cfg = TrainConfig()
    paired = sample_paired_dataset(200, cfg.volume_side, (0.4, 0.3, 0.3), master_seed=1)

    pretrain(cfg, paired, tmp_path)

    first = read_checkpoint(tmp_path / "ckpt_epoch_0001.ckpt").meta["last_val"]
    last = read_checkpoint(tmp_path / f"ckpt_epoch_{cfg.pretrain_epochs:04d}.ckpt").meta["last_val"]
    assert last <= 0.5 * first


@pytest.mark.slow
def test_finetune_without_shape_induction_keeps_validation_error():
    cfg = replace(TrainConfig(), pretrain_epochs=10, finetune_epochs=3).with_lambda4(0.0)
    paired = sample_paired_dataset(60, cfg.volume_side, (0.4, 0.3, 0.3), master_seed=1)
    shift = StyleShiftParams(gamma=1.4, contrast=1.1, noise_sigma=0.02)
    unpaired = sample_unpaired_set(60, cfg.volume_side, (0.4, 0.3, 0.3), shift, master_seed=2)

    start = pretrain(cfg, paired)
    tuned = finetune(cfg, paired, unpaired, start)

    assert tuned.meta["last_val"] == pytest.approx(start.meta["last_val"], rel=0.05)
