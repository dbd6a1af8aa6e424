import json
import math

import numpy as np
import pytest

from sddkit.anchors import kmeans_anchors
from sddkit.augment import AugmentConfig
from sddkit.geometry import iou_matrix
from sddkit.head import predict
from sddkit.model import build_toy_detector, init_weights, load_checkpoint, save_checkpoint
from sddkit.nn.checkpoint import CheckpointError
from sddkit.synthgen import generate, preset
from sddkit.train import (
    PAPER_SCHEDULE,
    TrainConfig,
    TrainingError,
    effective_size,
    lr_at,
    prepare_model,
    scaled_schedule,
    tl_b_split,
    tl_harness,
    train,
    train_loop,
)

SMALL = dict(sizes=(96,), eval_size=96, val_every=0, checkpoint_stages=False)


@pytest.fixture(scope="module")
def tiny():
    return generate(preset("target", 6, 96, seed=21))


@pytest.fixture(scope="module")
def anchors():
    return kmeans_anchors(generate(preset("target", 40, 96, seed=22)), 9, (96,))


def test_paper_schedule_boundaries():
    lrs = {e: lr_at(e, PAPER_SCHEDULE) for e in (1, 25, 26, 50, 51, 65, 66, 80)}
    assert lrs == {1: 1e-3, 25: 1e-3, 26: 1e-4, 50: 1e-4, 51: 1e-5, 65: 1e-5, 66: 1e-6, 80: 1e-6}
    with pytest.raises(ValueError):
        lr_at(0, PAPER_SCHEDULE)


def test_scaled_schedule():
    assert scaled_schedule(80) == PAPER_SCHEDULE
    for epochs in (1, 7, 16, 30, 113):
        s = scaled_schedule(epochs)
        assert sum(n for _, n in s) == epochs
        assert [lr for lr, _ in s] == [1e-3, 1e-4, 1e-5, 1e-6]


def test_tl_b_split():
    assert tl_b_split(80) == (30, 50)
    assert sum(tl_b_split(17)) == 17


def test_config_validation():
    with pytest.raises(ValueError, match="schedule covers"):
        TrainConfig(epochs=10, schedule=[(1e-3, 5)])
    with pytest.raises(ValueError, match="divisible by 32"):
        TrainConfig(epochs=80, sizes=(540,))
    assert TrainConfig(epochs=80, sizes=(540, 572), strict_sizes=False).sizes == (512, 544)
    assert effective_size(608) == 608
    with pytest.raises(ValueError):
        TrainConfig(norm="ln")
    cfg = TrainConfig(epochs=4, schedule=None)
    assert json.loads(json.dumps(cfg.to_json()))["schedule"] == [[1e-3, 1], [1e-4, 1], [1e-5, 1], [1e-6, 1]]


def test_xavier_bound():
    from sddkit.nn import Conv2d
    from sddkit.model import xavier_uniform

    conv = Conv2d(8, 8, 3)
    w = xavier_uniform(conv.weight.value.shape, conv.fan_in, conv.fan_out, np.random.default_rng(0))
    bound = math.sqrt(6 / 144)
    assert bound == pytest.approx(0.2041, abs=1e-4)
    assert np.abs(w).max() <= bound
    assert abs(w.mean()) < 0.02


def test_detector_architecture(anchors):
    a = build_toy_detector(4, 1, "br", anchors=anchors)
    b = build_toy_detector(4, 1, "br", anchors=anchors)
    assert [p.value.shape for p in a.parameters()] == [p.value.shape for p in b.parameters()]
    assert a.param_count() > 0
    assert a.grid_shapes(128) == [(16, 16, 3, 9), (8, 8, 3, 9), (4, 4, 3, 9)]
    with pytest.raises(ValueError):
        build_toy_detector(4, 0)


def _forward(model, seed=0):
    x = np.random.default_rng(seed).uniform(0, 1, (2, 96, 96, 3)).astype(np.float32)
    return model.forward(x, train=False)


def test_full_and_partial_restore(anchors):
    donor = init_weights(build_toy_detector(4, 1, "br", anchors=anchors), seed=1)
    donor_state = {k: v.copy() for k, v in donor.state_tensors().items()}
    full = init_weights(build_toy_detector(4, 1, "br", anchors=anchors), "full", donor_state)
    assert all(np.array_equal(a, b) for a, b in zip(_forward(donor), _forward(full)))
    part = init_weights(build_toy_detector(4, 1, "br", anchors=anchors), "partial", donor_state, seed=5)
    for name, value in part.state_tensors().items():
        same = np.array_equal(value, donor_state[name])
        if name.startswith("backbone."):
            assert same, name
        elif name.endswith("weight"):
            assert not same, name


def test_restore_shape_mismatch_names_tensor(anchors):
    donor = build_toy_detector(2, 1, "br", anchors=anchors)
    with pytest.raises(CheckpointError, match="heads"):
        init_weights(build_toy_detector(4, 1, "br", anchors=anchors), "full", donor.state_tensors())


def test_checkpoint_preserves_inference_bitwise(tmp_path, tiny, anchors):
    cfg = TrainConfig(epochs=1, schedule=[(1e-3, 1)], **SMALL)
    model = train(tiny, cfg, anchors=anchors).model
    save_checkpoint(model, tmp_path / "m.ckpt", {"epoch": 1})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["epoch"] == 1
    for a, b in zip(_forward(model), _forward(back)):
        assert a.tobytes() == b.tobytes()


def test_same_seed_same_trajectory(tiny, anchors):
    cfg = TrainConfig(epochs=2, schedule=[(1e-3, 2)], batch_size=2, **SMALL)
    a, b = train(tiny, cfg, anchors=anchors), train(tiny, cfg, anchors=anchors)
    strip = lambda log: [{k: v for k, v in e.items() if k != "seconds"} for e in log]
    assert strip(a.log) == strip(b.log)
    for (n, x), (_, y) in zip(a.model.named_params(), b.model.named_params()):
        assert np.array_equal(x.value, y.value), n


def test_bn_to_br_switch_is_neutral_when_stats_match(anchors):
    model = init_weights(build_toy_detector(4, 1, "bn", anchors=anchors), seed=3)
    x = np.random.default_rng(4).uniform(0, 1, (2, 96, 96, 3)).astype(np.float32)
    for norm in model.norms():
        norm.momentum = 1.0  # moving stats become this batch's stats
    ref = model.forward(x, train=True)
    model.set_norm_mode("br")
    for norm in model.norms():
        norm.update_stats = False
    out = model.forward(x, train=True)
    assert all(np.array_equal(a, b) for a, b in zip(ref, out))


def test_single_image_overfit(anchors):
    ds = generate(preset("target", 1, 96, seed=0))
    cfg = TrainConfig(epochs=500, schedule=[(1e-3, 500)], batch_size=1, augment=AugmentConfig().disabled(), **SMALL)
    result = train(ds, cfg, anchors=anchors)
    losses = [e["loss"] for e in result.log]
    assert losses[0] / losses[199] >= 10
    dets = predict(result.model, ds.load_raster(0), 0.3, 0.45, 96)
    gt = ds.records[0].boxes
    assert dets
    assert (iou_matrix(gt, np.array([tuple(d.box) for d in dets])).max(axis=1) > 0.9).all()


def test_metrics_log_and_stage_checkpoints(tmp_path, tiny, anchors):
    cfg = TrainConfig(epochs=4, schedule=None, sizes=(96,), eval_size=96, val_every=2)
    train(tiny, cfg, val=tiny, anchors=anchors, out_dir=tmp_path)
    lines = [json.loads(s) for s in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [1, 2, 3, 4]
    assert [e["lr"] for e in lines] == [1e-3, 1e-4, 1e-5, 1e-6]
    assert "map50" in lines[1] and "map50" not in lines[0]
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["final.ckpt"] + [f"train_epoch{e:03d}.ckpt" for e in (1, 2, 3, 4)]


def test_non_finite_loss_aborts_with_diagnostic(tmp_path, tiny, anchors):
    cfg = TrainConfig(epochs=1, schedule=[(1e-3, 1)], **SMALL)
    model = prepare_model(tiny, cfg, anchors)
    model.heads[0].layers[-1].bias.value[...] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_loop(model, tiny, cfg, out_dir=tmp_path)
    assert (tmp_path / "diagnostic.ckpt").exists()


def test_tl_b_phases_and_global_lr(tmp_path, tiny, anchors):
    source = generate(preset("source", 4, 96, seed=23))
    cfg = TrainConfig(epochs=8, schedule=None, **SMALL)
    result = tl_harness(tiny, "b", cfg, source=source, test=tiny, anchors=anchors, out_dir=tmp_path)
    phases = [(e["phase"], e["epoch"]) for e in result.log]
    assert phases == [("source", e) for e in (1, 2, 3)] + [("target", e) for e in (4, 5, 6, 7, 8)]
    assert [e["lr"] for e in result.log] == [lr_at(e, cfg.schedule) for e in range(1, 9)]
    assert result.report["phases"] == {"source": 3, "target": 5}
    assert result.anchors is anchors
    assert (tmp_path / "source_pretrained.ckpt").exists() and (tmp_path / "final.ckpt").exists()
    assert 0.0 <= result.report["map50"] <= 1.0


def test_tl_a_and_errors(tmp_path, tiny, anchors):
    donor = init_weights(build_toy_detector(4, 1, "br", anchors=anchors), seed=9)
    save_checkpoint(donor, tmp_path / "donor.ckpt")
    cfg = TrainConfig(epochs=1, schedule=[(1e-3, 1)], **SMALL)
    result = tl_harness(tiny, "a", cfg, donor=tmp_path / "donor.ckpt", anchors=anchors)
    assert result.report["phases"] == {"target": 1}
    with pytest.raises(ValueError, match="donor"):
        tl_harness(tiny, "a", cfg, anchors=anchors)
    with pytest.raises(ValueError, match="source"):
        tl_harness(tiny, "b", cfg, anchors=anchors)
    with pytest.raises(ValueError, match="transfer mode"):
        tl_harness(tiny, "c", cfg, anchors=anchors)
