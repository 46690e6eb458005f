import numpy as np
import pytest
import torch

from blinddip.images import add_gaussian_noise, save_png, synthetic_scene
from blinddip.quality import (
    BackboneMismatchError,
    BiqanModel,
    ModelFormatError,
    QualityNet,
    TrainingExample,
    TrainSchedule,
    new_model,
    predict_batch,
    predict_distribution,
    save_backbone,
    split_by_source,
    train_biqan,
)
from blinddip.scores import ScoreDistribution

SMALL = dict(input_resize=64, train_crop=56, batch_size=8)


@pytest.fixture
def backbone_file(tmp_path):
    m = new_model(0.25, seed=1)
    return save_backbone(m.net.backbone, tmp_path / "bb.pt", 0.25)


@pytest.fixture
def examples(tmp_path, rng):
    out = []
    for src in range(4):
        clean = synthetic_scene(32, seed=src)
        for k in range(6):
            sigma = 0.02 * k
            path = save_png(add_gaussian_noise(clean, sigma, seed=k), tmp_path / f"s{src}_{k}.png")
            target = np.zeros(10)
            target[9 - k] = 1.0
            out.append(TrainingExample(f"s{src}", str(path), target))
    return out


def test_head_shape_and_softmax():
    net = QualityNet(0.25)
    out = net(torch.randn(2, 3, 64, 64))
    assert out.shape == (2, 10)
    assert torch.allclose(out.sum(1), torch.ones(2), atol=1e-6)


def test_predict_valid_and_deterministic(rng):
    model = new_model(0.25, seed=0)
    img = rng.random((40, 30, 3))
    a = predict_distribution(img, model)
    b = predict_distribution(img, model)
    assert isinstance(a, ScoreDistribution)
    assert abs(a.probs.sum() - 1) < 1e-6
    assert a == b
    batch = predict_batch([img, img * 0.5], model)
    assert np.allclose(batch[0].probs, a.probs, atol=1e-6)


def test_save_load_round_trip(tmp_path, rng):
    model = new_model(0.25, seed=0)
    model.metadata["min_psnr"] = 20.0
    path = model.save(tmp_path / "m.pt")
    back = BiqanModel.load(path)
    img = rng.random((32, 32, 3))
    assert predict_distribution(img, back) == predict_distribution(img, model)
    assert back.metadata["min_psnr"] == 20.0


def test_load_rejects_format_mismatch(tmp_path):
    path = new_model(0.25).save(tmp_path / "m.pt")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(sidecar.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ModelFormatError):
        BiqanModel.load(path)


def test_backbone_mismatch(tmp_path):
    path = save_backbone(new_model(0.5).net.backbone, tmp_path / "wide.pt", 0.5)
    with pytest.raises(BackboneMismatchError):
        new_model(0.25, backbone=path)


def test_backbone_loaded(backbone_file):
    a = new_model(0.25, seed=5, backbone=backbone_file)
    b = new_model(0.25, seed=1)
    for (k, v), w in zip(a.net.backbone.state_dict().items(), b.net.backbone.state_dict().values()):
        assert torch.equal(v, w), k


def test_split_by_source_keeps_sources_whole(examples):
    train, val = split_by_source(examples, 0.1, seed=0)
    assert len({e.source_id for e in val}) == 1
    assert not {e.source_id for e in train} & {e.source_id for e in val}
    assert len(train) + len(val) == len(examples)


def test_freeze_contract(examples, backbone_file):
    snaps = {}

    def hook(stage, event, net):
        snaps[(stage, event)] = {k: v.detach().clone() for k, v in net.state_dict().items()}

    train_biqan(examples, TrainSchedule(stage1_epochs=2, stage2_epochs=2, **SMALL), backbone_file,
                seed=0, width=0.25, stage_hook=hook)
    final_prefix = "backbone.features.13."
    for stage in (1, 2):
        start, end = snaps[(stage, "start")], snaps[(stage, "end")]
        for k in start:
            if k.startswith("head."):
                continue
            if stage == 2 and k.startswith(final_prefix):
                continue
            assert torch.equal(start[k], end[k]), f"stage {stage} changed frozen {k}"
    # stage 2 starts exactly where stage 1 ended
    for k, v in snaps[(1, "end")].items():
        assert torch.equal(v, snaps[(2, "start")][k])
    # and the unfrozen pieces actually move
    assert not torch.equal(snaps[(1, "start")]["head.weight"], snaps[(1, "end")]["head.weight"])
    moved = [k for k in snaps[(2, "start")] if k.startswith(final_prefix) and k.endswith("weight")
             and not torch.equal(snaps[(2, "start")][k], snaps[(2, "end")][k])]
    assert moved


def test_training_records_history(examples, backbone_file):
    model = train_biqan(examples, TrainSchedule(stage1_epochs=3, stage2_epochs=1, **SMALL), backbone_file,
                        seed=0, width=0.25)
    hist = model.metadata["history"]
    assert [(h["stage"], h["epoch"]) for h in hist] == [(1, 1), (1, 2), (1, 3), (2, 1)]
    assert all(h["val_emd"] is not None for h in hist)
    assert model.metadata["schedule"]["stage1_epochs"] == 3
    assert hist[-1]["train_emd"] < hist[0]["train_emd"]


def test_training_deterministic(examples, backbone_file, rng):
    sched = TrainSchedule(stage1_epochs=1, stage2_epochs=1, **SMALL)
    a = train_biqan(examples, sched, backbone_file, seed=3, width=0.25)
    b = train_biqan(examples, sched, backbone_file, seed=3, width=0.25)
    img = rng.random((32, 32, 3))
    assert predict_distribution(img, a) == predict_distribution(img, b)


def test_training_rejects_empty(backbone_file):
    with pytest.raises(ValueError):
        train_biqan([], TrainSchedule(), backbone_file)


def test_default_schedule_matches_protocol():
    s = TrainSchedule()
    assert (s.stage1_epochs, s.stage2_epochs, s.learning_rate) == (10, 20, 0.001)
    assert (s.input_resize, s.train_crop, s.hflip) == (256, 224, True)
