import numpy as np
import pytest

from pvcrack import arch, dataset, nn, trainer

from conftest import make_separable_dataset


def _small_model(side=32, seed=0):
    return arch.build_model(arch.reference_model1_spec(side), seed=seed)


def _quick_cfg(**kw):
    defaults = dict(epochs=2, batch_size=16,
                    optimizer=nn.OptimConfig(kind="adam", learning_rate=1e-3),
                    seed=5, early_stop_patience=None)
    defaults.update(kw)
    return trainer.TrainConfig(**defaults)


@pytest.fixture(scope="module")
def sep_ds():
    return make_separable_dataset(40)


@pytest.fixture(scope="module")
def sep_plan(sep_ds):
    return dataset.make_folds(sep_ds, 2, seed=0)


def test_zero_epochs_identity(sep_ds, sep_plan):
    model = _small_model()
    before = [p.copy() for p in model.param_tensors()]
    trained, history = trainer.train(model, sep_ds, sep_plan, 0, _quick_cfg(epochs=0))
    assert not history.train_loss
    for b, p in zip(before, trained.param_tensors()):
        assert b.tobytes() == p.tobytes()
    # the input model is never mutated either
    for b, p in zip(before, model.param_tensors()):
        assert b.tobytes() == p.tobytes()


def test_training_is_deterministic(sep_ds, sep_plan):
    a, ha = trainer.train(_small_model(), sep_ds, sep_plan, 0, _quick_cfg())
    b, hb = trainer.train(_small_model(), sep_ds, sep_plan, 0, _quick_cfg())
    assert ha.train_loss == hb.train_loss
    assert ha.val_acc == hb.val_acc
    for pa, pb in zip(a.param_tensors(), b.param_tensors()):
        assert pa.tobytes() == pb.tobytes()


def test_history_lengths_match_epochs(sep_ds, sep_plan):
    _, history = trainer.train(_small_model(), sep_ds, sep_plan, 0, _quick_cfg(epochs=3))
    assert len(history.train_loss) == len(history.train_acc) == len(history.val_acc) == 3


def test_freeze_prefix_bytes_identical(sep_ds, sep_plan):
    model = _small_model()
    pidx = model.parameterized_indices()
    frozen_layers = pidx[:4]
    before = {li: [p.copy() for p in model.layers[li].params] for li in pidx}
    tuned, _ = trainer.fine_tune(model, sep_ds, sep_plan, 0,
                                 _quick_cfg(freeze_prefix=4, epochs=1))
    changed = 0
    for li in pidx:
        for old, new in zip(before[li], tuned.layers[li].params):
            if li in frozen_layers:
                assert old.tobytes() == new.tobytes()
            elif old.tobytes() != new.tobytes():
                changed += 1
    assert changed > 0


def test_freeze_all_features_trains_head_only(sep_ds, sep_plan):
    model = _small_model()
    prefix = trainer.config_freeze_prefix(model, 1)
    pidx = model.parameterized_indices()
    assert prefix == 6      # six feature convolutions in the reference model
    before = [p.copy() for p in model.param_tensors()]
    tuned, _ = trainer.fine_tune(model, sep_ds, sep_plan, 0,
                                 _quick_cfg(freeze_prefix=prefix, epochs=1))
    feature_params = [p for li in pidx[:prefix] for p in tuned.layers[li].params]
    head_params = [p for li in pidx[prefix:] for p in tuned.layers[li].params]
    n_feature = len(feature_params)
    for old, new in zip(before[:2 * prefix], feature_params):
        assert old.tobytes() == new.tobytes()
    assert any(old.tobytes() != new.tobytes()
               for old, new in zip(before[2 * prefix:], head_params))


def test_config_ladder_prefixes():
    m1 = _small_model()
    assert trainer.config_freeze_prefix(m1, 1) == 6
    assert trainer.config_freeze_prefix(m1, 2) == 4
    assert trainer.config_freeze_prefix(m1, 3) == 4
    m2 = arch.build_model(arch.reference_model2_spec(32), seed=0)
    assert trainer.config_freeze_prefix(m2, 1) == 5
    assert trainer.config_freeze_prefix(m2, 2) == 3
    with pytest.raises(ValueError):
        trainer.config_freeze_prefix(m1, 4)


def test_identity_augment_equals_none(sep_ds, sep_plan):
    identity = dataset.AugmentPolicy()
    a, _ = trainer.train(_small_model(), sep_ds, sep_plan, 0,
                         _quick_cfg(augment=None))
    b, _ = trainer.train(_small_model(), sep_ds, sep_plan, 0,
                         _quick_cfg(augment=identity))
    for pa, pb in zip(a.param_tensors(), b.param_tensors()):
        assert pa.tobytes() == pb.tobytes()


def test_augmented_training_runs(sep_ds, sep_plan):
    policy = dataset.AugmentPolicy(rotate_degrees_max=10, translate_px_max=2,
                                   horizontal_flip=True, contrast_range=(0.9, 1.1))
    _, history = trainer.train(_small_model(), sep_ds, sep_plan, 0,
                               _quick_cfg(augment=policy, epochs=1))
    assert len(history.train_loss) == 1


def test_val_fold_out_of_range(sep_ds, sep_plan):
    with pytest.raises(ValueError):
        trainer.train(_small_model(), sep_ds, sep_plan, 5, _quick_cfg())


def test_freeze_prefix_out_of_range(sep_ds, sep_plan):
    with pytest.raises(ValueError):
        trainer.train(_small_model(), sep_ds, sep_plan, 0, _quick_cfg(freeze_prefix=99))


def test_overfit_oracle_reaches_full_accuracy(sep_ds, sep_plan):
    model = arch.build_model(arch.reference_model1_spec(), seed=1)
    cfg = trainer.TrainConfig(epochs=30, batch_size=32,
                              optimizer=nn.OptimConfig(kind="adam", learning_rate=1e-3),
                              seed=1, early_stop_patience=None)
    trained, history = trainer.train(model, sep_ds, sep_plan, 1, cfg)
    assert max(history.train_acc) == 1.0


def test_loss_nonincreasing_full_batch_sgd(sep_ds, sep_plan):
    model = _small_model(seed=2)
    cfg = trainer.TrainConfig(epochs=10, batch_size=40,
                              optimizer=nn.OptimConfig(kind="sgd", learning_rate=0.05),
                              seed=2, early_stop_patience=None)
    _, history = trainer.train(model, sep_ds, sep_plan, 1, cfg)
    for prev, cur in zip(history.train_loss, history.train_loss[1:]):
        assert cur <= prev + 1e-9


def test_early_stopping_cuts_run(sep_ds, sep_plan):
    _, history = trainer.train(_small_model(), sep_ds, sep_plan, 0,
                               _quick_cfg(epochs=40, early_stop_patience=2))
    assert len(history.train_loss) < 40


def test_evaluate_constant_predictor(sep_ds, sep_plan):
    model = _small_model()
    for layer in model.layers:
        for p in layer.params:
            p[:] = 0
    model.layers[-1].b[:] = [10.0, 0.0]     # always predicts class 0
    report = trainer.evaluate_model(model, sep_ds, sep_plan, 0)
    idx = np.flatnonzero(sep_plan.fold_assignment == 0)
    share = np.mean([sep_ds.samples[i][1] == 0 for i in idx])
    assert report.accuracy == pytest.approx(share)


def test_evaluate_forced_test(small_cells):
    ds = dataset.build_variant(small_cells, dataset.VARIANTS["V04"], seed=0)
    plan = dataset.make_folds(ds, 2, seed=0)
    model = _small_model()
    report = trainer.evaluate_model(model, ds, plan, 0, use_forced_test=True)
    assert report.sample_count == len(ds.forced_test)
    with pytest.raises(ValueError):
        ds_no_forced = dataset.build_variant(small_cells, dataset.VARIANTS["V06"], seed=0)
        plan6 = dataset.make_folds(ds_no_forced, 2, seed=0)
        trainer.evaluate_model(model, ds_no_forced, plan6, 0, use_forced_test=True)


def test_cross_variant_finetune_smoke(small_cells):
    v08 = dataset.build_variant(small_cells, dataset.VARIANTS["V08"], seed=0)
    v02 = dataset.build_variant(small_cells, dataset.VARIANTS["V02"], seed=0)
    plan8 = dataset.make_folds(v08, 2, seed=0)
    plan2 = dataset.make_folds(v02, 2, seed=0)
    base, _ = trainer.train(_small_model(), v08, plan8, 0, _quick_cfg(epochs=1))
    cfg = trainer.apply_config(_quick_cfg(epochs=1), base, 2)
    tuned, history = trainer.fine_tune(base, v02, plan2, 0, cfg)
    assert len(history.val_acc) == 1
    assert np.isfinite(history.train_loss[0])


def test_checkpoint_round_trip(tmp_path, sep_ds, sep_plan):
    model, history = trainer.train(_small_model(), sep_ds, sep_plan, 0,
                                   _quick_cfg(epochs=1))
    path = tmp_path / "ckpt.pvtm"
    trainer.save_checkpoint(model, path, {"seed": 5, "epochs": 1})
    loaded, info = trainer.load_checkpoint(path)
    assert info["seed"] == 5
    for a, b in zip(model.param_tensors(), loaded.param_tensors()):
        assert np.array_equal(a, b)
