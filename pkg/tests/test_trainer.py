import math

import numpy as np
import pytest
import torch

from hfrae.datasets import SampleRecord, load_mvtec_category
from hfrae.decoder import DecoderSpec, build_decoder
from hfrae.encoder import BackboneSpec, build_encoder
from hfrae.errors import ConfigError, DataError, TrainingDivergedError
from hfrae.trainer import (
    InferenceConfig,
    TrainConfig,
    check_compatible,
    evaluate,
    load_checkpoint,
    loss_ratio,
    predict,
    save_checkpoint,
    stack_images,
    train,
    write_loss_csv,
)

RES = 32


@pytest.fixture(scope="module")
def encoder():
    return build_encoder(BackboneSpec("resnet18", "random"))


@pytest.fixture(scope="module")
def data(small_fixture):
    return (
        load_mvtec_category(small_fixture, "tiny", "train", RES),
        load_mvtec_category(small_fixture, "tiny", "test", RES),
    )


def fresh_decoder(encoder, seed=0):
    return build_decoder(DecoderSpec(encoder.channels), encoder.output_shapes(RES, RES), seed=seed)


def quick(**kw):
    base = dict(epochs=3, batch_size=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.weight_decay) == (0.4, 0.9, 1e-4)
    assert cfg.lr_schedule == "constant" and cfg.grad_clip is None


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(learning_rate=0.0), dict(batch_size=0), dict(lr_schedule="step")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_encoder_hash_unchanged(encoder, data):
    before = encoder.weight_hash()
    ckpt = train(encoder, fresh_decoder(encoder), data[0], quick())
    assert encoder.weight_hash() == before == ckpt.encoder_hash


def test_loss_history_rows(encoder, data):
    ckpt = train(encoder, fresh_decoder(encoder), data[0], quick())
    assert [r["epoch"] for r in ckpt.loss_history] == [1, 2, 3]
    for r in ckpt.loss_history:
        assert r["loss"] >= 0
        assert r["loss"] == pytest.approx(np.mean([r["loss_level1"], r["loss_level2"], r["loss_level3"]]))
    assert ckpt.epoch == 3 and ckpt.final_loss == ckpt.loss_history[-1]["loss"]


def test_seeded_runs_identical_loss_csv(encoder, data, tmp_path):
    a = train(encoder, fresh_decoder(encoder), data[0], quick())
    b = train(encoder, fresh_decoder(encoder), data[0], quick())
    pa = write_loss_csv(a.loss_history, tmp_path / "a.csv")
    pb = write_loss_csv(b.loss_history, tmp_path / "b.csv")
    assert pa.read_bytes() == pb.read_bytes()
    c = train(encoder, fresh_decoder(encoder), data[0], quick(seed=2))
    assert c.loss_history != a.loss_history


def test_cached_features_match_uncached(encoder, data):
    a = train(encoder, fresh_decoder(encoder), data[0], quick(epochs=2))
    b = train(encoder, fresh_decoder(encoder), data[0], quick(epochs=2, cache_features=False))
    for ra, rb in zip(a.loss_history, b.loss_history):
        assert ra["loss"] == pytest.approx(rb["loss"], rel=1e-6)


def test_cosine_schedule_and_holdout(encoder, data):
    ckpt = train(encoder, fresh_decoder(encoder), data[0][:4], quick(lr_schedule="cosine"), holdout_data=data[0][4:])
    lrs = [r["lr"] for r in ckpt.loss_history]
    assert lrs[0] == 0.4 and lrs[1] < lrs[0]
    assert all(math.isfinite(r["holdout_loss"]) for r in ckpt.loss_history)


def test_train_rejects_anomalous_samples(encoder, data):
    with pytest.raises(DataError):
        train(encoder, fresh_decoder(encoder), data[1], quick())


def test_divergence_reports_batch(encoder, data):
    dec = fresh_decoder(encoder)
    with torch.no_grad():
        dec.stages[0].head.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        train(encoder, dec, data[0], quick())
    assert err.value.epoch == 1 and err.value.batch_index == 0
    assert any(math.isnan(v) for v in err.value.level_losses)


def test_huge_learning_rate_diverges(encoder, data):
    with pytest.raises(TrainingDivergedError):
        train(encoder, fresh_decoder(encoder), data[0], quick(epochs=20, learning_rate=1e12))


def test_untrained_decoder_is_flagged(encoder, data):
    report = evaluate(encoder, fresh_decoder(encoder), data[1])
    assert report.untrained
    assert 0 <= report.image_auroc <= 1 and report.aupro is not None


def test_evaluate_twice_identical(encoder, data):
    dec = fresh_decoder(encoder)
    train(encoder, dec, data[0], quick(epochs=1))
    a, b = evaluate(encoder, dec, data[1]), evaluate(encoder, dec, data[1])
    assert a == b and not a.untrained


def test_masks_absent_gives_not_applicable(encoder, data):
    recs = [SampleRecord(r.image, r.label, None, r.source_path, r.category) for r in data[1]]
    report = evaluate(encoder, fresh_decoder(encoder), recs)
    assert report.pixel_auroc is None and report.aupro is None
    assert report.row()["localization_auroc"] == report.row()["aupro"] == "n/a"


def test_checkpoint_round_trip_bit_identical(encoder, data, tmp_path):
    dec = fresh_decoder(encoder)
    ckpt = train(encoder, dec, data[0], quick())
    images = stack_images(data[1])
    maps_before, scores_before = predict(encoder, dec, images)
    path = save_checkpoint(ckpt, tmp_path / "ck.pt")
    loaded = load_checkpoint(path)
    check_compatible(loaded, encoder)
    restored = loaded.restore_decoder()
    maps_after, scores_after = predict(encoder, restored, images)
    np.testing.assert_array_equal(maps_before, maps_after)
    np.testing.assert_array_equal(scores_before, scores_after)
    assert loaded.loss_history == ckpt.loss_history
    assert int(restored.epochs_trained) == 3
    assert evaluate(encoder, dec, data[1]) == evaluate(encoder, restored, data[1])


def test_checkpoint_refuses_other_backbone(encoder, data, tmp_path):
    ckpt = load_checkpoint(save_checkpoint(train(encoder, fresh_decoder(encoder), data[0], quick(epochs=1)), tmp_path / "c.pt"))
    other = build_encoder(BackboneSpec("resnet18", "random:9"))
    with pytest.raises(ConfigError, match="hash"):
        check_compatible(ckpt, other)


def test_bad_checkpoint_file(tmp_path):
    p = tmp_path / "junk.pt"
    p.write_bytes(b"junk")
    with pytest.raises(DataError):
        load_checkpoint(p)
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "other.pt")


def test_predict_shapes_and_blank_image(encoder):
    dec = fresh_decoder(encoder)
    maps, scores = predict(encoder, dec, torch.zeros(2, 3, RES, RES), InferenceConfig(sigma=2.0))
    assert maps.shape == (2, RES, RES)
    assert np.isfinite(scores).all() and scores[0] == scores[1]


def test_loss_ratio():
    assert loss_ratio([{"loss": 2.0}, {"loss": 0.5}]) == 0.25
