import math

import numpy as np
import pytest
from numpy.random import default_rng

from costdet import detector, losses, syndata, trainer
from costdet.errors import ConfigError, DataError


def _dataset(n=16, pf=0.5, seed=3, ratios=(0.75, 0.125, 0.125)):
    cfg = syndata.GenConfig(n_slices=n, positive_fraction=pf, seed=seed, split_ratios=ratios)
    return syndata.generate(cfg)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_config_defaults_valid():
    cfg = trainer.TrainConfig()
    cfg.validate()
    assert cfg.epochs == 30
    assert cfg.lr == 0.001
    assert cfg.augment is False


def test_config_rejects_zero_epochs():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(epochs=0).validate()


def test_config_rejects_negative_lr():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(lr=-0.1).validate()


def test_config_rejects_bad_checkpoint_every():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(checkpoint_every=-1).validate()


def test_config_rejects_bad_cost():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(cost=losses.CostConfig(alpha_lesion=-2.0)).validate()


def test_train_rejects_empty_train_split():
    slices = _dataset(n=8)
    for slc in slices:
        slc.split = "test"
    with pytest.raises(DataError, match="empty train split"):
        trainer.train(slices, trainer.TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# update bookkeeping
# ---------------------------------------------------------------------------


def test_single_slice_single_epoch_is_one_update():
    slices = _dataset(n=1, pf=1.0, seed=2)
    slices[0].split = "train"
    params, log = trainer.train(slices, trainer.TrainConfig(epochs=1))
    assert log.n_updates == 1
    assert len(log.rows) == 1


def test_row_count_equals_epochs():
    slices = _dataset()
    params, log = trainer.train(slices, trainer.TrainConfig(epochs=3))
    assert len(log.rows) == 3
    assert [row["epoch"] for row in log.rows] == [1, 2, 3]
    assert log.n_updates == 3 * len(syndata.split_of(slices, "train"))


def test_zero_lr_keeps_params_bit_exact():
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=2, lr=0.0, seed=9)
    params, _ = trainer.train(slices, cfg)
    fresh = detector.HeadParams(channels=3, seed=9)
    assert params.store.flat_data().tobytes() == fresh.store.flat_data().tobytes()


def test_nonzero_lr_changes_params():
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=1, lr=0.001, seed=9)
    params, _ = trainer.train(slices, cfg)
    fresh = detector.HeadParams(channels=3, seed=9)
    assert params.store.flat_data().tobytes() != fresh.store.flat_data().tobytes()


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


def test_identical_config_identical_checkpoint(tmp_path):
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=2, seed=4)
    a, _ = trainer.train(slices, cfg)
    b, _ = trainer.train(slices, cfg)
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    detector.save_checkpoint(a, pa, cost=cfg.cost.as_dict())
    detector.save_checkpoint(b, pb, cost=cfg.cost.as_dict())
    assert pa.read_bytes() == pb.read_bytes()


def test_identical_config_identical_log_rows():
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=2, seed=4)
    _, la = trainer.train(slices, cfg)
    _, lb = trainer.train(slices, cfg)
    for ra, rb in zip(la.rows, lb.rows):
        for key in trainer.LOG_COLUMNS:
            if key == "wall_time_s":
                continue
            va, vb = ra[key], rb[key]
            if isinstance(va, float) and math.isnan(va):
                assert math.isnan(vb)
            else:
                assert va == vb, key


def test_different_seed_different_params():
    slices = _dataset()
    a, _ = trainer.train(slices, trainer.TrainConfig(epochs=1, seed=0))
    b, _ = trainer.train(slices, trainer.TrainConfig(epochs=1, seed=1))
    assert a.store.flat_data().tobytes() != b.store.flat_data().tobytes()


def test_augment_training_is_deterministic():
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=2, seed=6, augment=True)
    a, la = trainer.train(slices, cfg)
    b, lb = trainer.train(slices, cfg)
    assert a.store.flat_data().tobytes() == b.store.flat_data().tobytes()
    assert la.rows[-1]["total"] == lb.rows[-1]["total"]


def test_augment_changes_the_run():
    slices = _dataset()
    plain, _ = trainer.train(slices, trainer.TrainConfig(epochs=1, seed=6))
    aug, _ = trainer.train(slices, trainer.TrainConfig(epochs=1, seed=6, augment=True))
    assert plain.store.flat_data().tobytes() != aug.store.flat_data().tobytes()


# ---------------------------------------------------------------------------
# loss routing through a whole epoch
# ---------------------------------------------------------------------------

FROZEN_ON_NEGATIVES = (
    "rpn.reg.w",
    "rpn.reg.b",
    "roi.box.hidden.w",
    "roi.box.hidden.b",
    "roi.box.out.w",
    "roi.box.out.b",
    "roi.mask.hidden.w",
    "roi.mask.hidden.b",
    "roi.mask.out.w",
    "roi.mask.out.b",
)


def test_all_negative_epoch_freezes_localization_heads():
    slices = _dataset(n=12, pf=0.0, seed=11)
    cost = losses.CostConfig(alpha_slice=2.0, use_slice_loss=True)
    cfg = trainer.TrainConfig(epochs=1, seed=11, cost=cost)
    params, log = trainer.train(slices, cfg)
    fresh = detector.HeadParams(channels=3, seed=11)
    for name in FROZEN_ON_NEGATIVES:
        assert (
            params.store[name].data.tobytes() == fresh.store[name].data.tobytes()
        ), name
    # the classification paths must still learn
    assert params.store["rpn.cls.w"].data.tobytes() != fresh.store["rpn.cls.w"].data.tobytes()
    assert params.store["roi.cls.out.w"].data.tobytes() != fresh.store["roi.cls.out.w"].data.tobytes()
    # and those epochs carry no localization loss at all
    assert log.rows[0]["rpn_reg"] == 0.0
    assert log.rows[0]["box"] == 0.0
    assert log.rows[0]["mask"] == 0.0


def test_positive_epoch_moves_localization_heads():
    slices = _dataset(n=8, pf=1.0, seed=12)
    params, _ = trainer.train(slices, trainer.TrainConfig(epochs=2, seed=12))
    fresh = detector.HeadParams(channels=3, seed=12)
    assert params.store["rpn.reg.w"].data.tobytes() != fresh.store["rpn.reg.w"].data.tobytes()


# ---------------------------------------------------------------------------
# divergence guard
# ---------------------------------------------------------------------------


def test_non_finite_loss_aborts_with_slice_id():
    slices = _dataset(n=4, pf=0.5, seed=13)
    bad = syndata.SyntheticSlice(
        channels=np.full((3, 64, 64), np.nan, dtype=np.float32),
        lesions=[],
        slice_id="sbroken",
        split="train",
    )
    slices.append(bad)
    with pytest.raises(DataError, match="sbroken"):
        trainer.train(slices, trainer.TrainConfig(epochs=1, seed=13))


# ---------------------------------------------------------------------------
# per-epoch evaluation
# ---------------------------------------------------------------------------


def test_evaluate_epoch_zero_init_high_threshold():
    slices = _dataset(n=10, pf=0.6, seed=14)
    params = detector.HeadParams(channels=3, seed=0)
    rep = trainer.evaluate_epoch(params, slices, threshold=0.7)
    # untrained probabilities are exactly 0.5: nothing detected anywhere
    assert rep.slice_fnr == 1.0
    assert rep.lesion_fnr == 1.0


def test_evaluate_epoch_zero_init_low_threshold():
    slices = _dataset(n=10, pf=0.6, seed=14)
    params = detector.HeadParams(channels=3, seed=0)
    rep = trainer.evaluate_epoch(params, slices, threshold=0.4)
    # at 0.4 every slice gets detections, so no slice-level misses
    assert rep.slice_fnr == 0.0


def test_evaluate_epoch_empty_split():
    params = detector.HeadParams(channels=3, seed=0)
    with pytest.raises(DataError, match="empty split"):
        trainer.evaluate_epoch(params, [])


# ---------------------------------------------------------------------------
# log serialization and checkpointing
# ---------------------------------------------------------------------------


def test_train_log_csv(tmp_path):
    slices = _dataset()
    _, log = trainer.train(slices, trainer.TrainConfig(epochs=2, seed=1))
    path = tmp_path / "log.csv"
    log.write_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == ",".join(trainer.LOG_COLUMNS)
    assert len(lines) == 3
    first = dict(zip(trainer.LOG_COLUMNS, lines[1].split(",")))
    assert first["epoch"] == "1"
    assert float(first["total"]) > 0


def test_checkpoint_every_writes_files(tmp_path):
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=4, seed=1, checkpoint_every=2)
    params, _ = trainer.train(slices, cfg, out_dir=tmp_path)
    assert (tmp_path / "epoch002.ckpt").exists()
    assert (tmp_path / "epoch004.ckpt").exists()
    assert not (tmp_path / "epoch001.ckpt").exists()
    loaded, meta = detector.load_checkpoint(tmp_path / "epoch004.ckpt")
    assert meta["extra"]["epoch"] == 4
    assert loaded.store.flat_data().tobytes() == params.store.flat_data().tobytes()


def test_no_out_dir_no_checkpoints(tmp_path):
    slices = _dataset()
    cfg = trainer.TrainConfig(epochs=2, seed=1, checkpoint_every=1)
    trainer.train(slices, cfg)
    assert list(tmp_path.iterdir()) == []


# ---------------------------------------------------------------------------
# learning smoke test
# ---------------------------------------------------------------------------


def test_loss_decreases_over_first_epochs():
    slices = _dataset(n=24, pf=0.5, seed=21, ratios=(1.0, 0.0, 0.0))
    improved = 0
    for seed in range(3):
        _, log = trainer.train(slices, trainer.TrainConfig(epochs=4, seed=seed))
        if log.rows[-1]["total"] < log.rows[0]["total"]:
            improved += 1
    assert improved >= 2
