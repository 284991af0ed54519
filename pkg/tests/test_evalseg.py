import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cp2.errors import InvalidConfig, InvalidInput
from cp2.evalseg import (IGNORE_VALUE, FinetuneConfig, SegDataset, SegSample, confusion_matrix,
                         evaluate, finetune, gen_shapes_dataset, load_dataset, miou, save_dataset)
from cp2.model import ModelConfig, build_model, load_checkpoint, save_checkpoint

TINY_MODEL = ModelConfig(backbone_widths=(8, 8, 16, 16), head_width=16, proj_dim=8, fcn_rate=1)


# -- metric --------------------------------------------------------------------

def test_perfect_prediction():
    lab = np.random.default_rng(0).integers(0, 4, (2, 16, 16))
    assert miou(lab, lab, 4).miou == 1.0


def test_constant_predictor_hand_computed():
    # labels half 0 / half 1, prediction all 0:
    # class 0: TP = 8, FP = 8, FN = 0 -> 0.5 ; class 1: TP = 0 -> 0.0 ; mean 0.25
    lab = np.zeros((4, 4), np.uint8)
    lab[2:] = 1
    rep = miou(np.zeros_like(lab), lab, 2)
    np.testing.assert_allclose(rep.per_class_iou, [0.5, 0.0])
    assert rep.miou == pytest.approx(0.25)


def test_all_ignore_is_rejected():
    lab = np.full((4, 4), IGNORE_VALUE, np.uint8)
    with pytest.raises(InvalidInput):
        miou(np.zeros_like(lab), lab, 3)


def test_absent_classes_excluded():
    lab = np.array([[0, 0], [1, 1]])
    rep = miou(lab, lab, 5)
    assert rep.miou == 1.0
    assert np.isnan(rep.per_class_iou[2:]).all()


def test_ignore_pixels_excluded():
    lab = np.array([[0, 1], [IGNORE_VALUE, IGNORE_VALUE]])
    pred = np.array([[0, 1], [1, 0]])
    assert miou(pred, lab, 2).miou == 1.0


def test_confusion_errors():
    with pytest.raises(InvalidInput):
        confusion_matrix(np.zeros((2, 2)), np.zeros((3, 3)), 2)
    with pytest.raises(InvalidInput):
        confusion_matrix(np.zeros((2, 2)), np.full((2, 2), 7), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_confusion_counting_identities(seed, k):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, k, (8, 8))
    lab[rng.random((8, 8)) < 0.1] = IGNORE_VALUE
    pred = rng.integers(0, k, (8, 8))
    conf = confusion_matrix(pred, lab, k)
    valid = lab != IGNORE_VALUE
    np.testing.assert_array_equal(conf.sum(1), np.bincount(lab[valid], minlength=k))
    np.testing.assert_array_equal(conf.sum(0), np.bincount(pred[valid], minlength=k))
    if valid.any():
        rep = miou(pred, lab, k)
        assert 0.0 <= rep.miou <= 1.0


# -- dataset -----------------------------------------------------------------------

def test_dataset_samples_have_two_classes():
    ds = gen_shapes_dataset(np.random.default_rng(0), 200, 64, 7)
    for s in ds.samples:
        assert len(np.unique(s.label)) >= 2
        assert s.image.shape == (64, 64, 3) and s.image.min() >= 0 and s.image.max() <= 1
        assert s.label.max() < 7


def test_dataset_deterministic():
    a = gen_shapes_dataset(np.random.default_rng(5), 4)
    b = gen_shapes_dataset(np.random.default_rng(5), 4)
    for x, y in zip(a.samples, b.samples):
        assert x.image.tobytes() == y.image.tobytes() and np.array_equal(x.label, y.label)


def test_class_frequency_stable_across_seeds():
    hists = []
    for seed in range(3):
        ds = gen_shapes_dataset(np.random.default_rng(seed), 1000, 32, 4)
        counts = np.bincount(np.concatenate([s.label.ravel() for s in ds.samples]), minlength=4)
        hists.append(counts / counts.sum())
    # total-variation distance between any two seeds' histograms within 0.05
    for i in range(3):
        for j in range(i):
            assert 0.5 * np.abs(hists[i] - hists[j]).sum() <= 0.05


def test_num_classes_range():
    with pytest.raises(InvalidConfig):
        gen_shapes_dataset(np.random.default_rng(0), 1, 32, 1)
    with pytest.raises(InvalidConfig):
        gen_shapes_dataset(np.random.default_rng(0), 1, 32, 8)


def test_dataset_round_trip(tmp_path):
    ds = gen_shapes_dataset(np.random.default_rng(1), 3, 32, 4)
    ds.samples[0].label[0, :4] = IGNORE_VALUE
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.num_classes == 4 and len(back) == 3
    for a, b in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(a.label, b.label)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-9  # 8-bit PNG
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["num_classes"] == 4


# -- finetune / evaluate -------------------------------------------------------------

@pytest.fixture(scope="module")
def small_sets():
    train = gen_shapes_dataset(np.random.default_rng(10), 16, 32, 3)
    val = gen_shapes_dataset(np.random.default_rng(11), 8, 32, 3)
    return train, val


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finetune_loss_decreases(small_sets, seed):
    ft = FinetuneConfig(steps=100, batch_size=8, lr=0.1)
    _, losses = finetune("random", small_sets[0], ft, TINY_MODEL, seed=seed)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_finetune_checkpoint_and_weight_decay_rule(tmp_path, small_sets):
    ft = FinetuneConfig(steps=2, batch_size=4)
    finetune("random", small_sets[0], ft, TINY_MODEL, run_dir=tmp_path / "r")
    p = load_checkpoint(tmp_path / "r" / "checkpoints" / "finetune.pt")
    assert p["phase"] == "finetune" and p["num_classes"] == 3
    assert p["extra"]["weight_decay"] == ft.weight_decay and not p["extra"]["head_pretrained"]
    ck = save_checkpoint(tmp_path / "pre.pt", phase="pretrain", model=build_model(TINY_MODEL), config={})
    finetune(ck, small_sets[0], ft, run_dir=tmp_path / "c")
    p = load_checkpoint(tmp_path / "c" / "checkpoints" / "finetune.pt")
    assert p["extra"]["weight_decay"] == 0.0 and p["extra"]["head_pretrained"]
    assert (tmp_path / "c" / "finetune_metrics.csv").exists()


def test_finetune_class_mismatch(tmp_path, small_sets):
    ck = save_checkpoint(tmp_path / "f.pt", phase="finetune", model=build_model(TINY_MODEL, 5), config={})
    with pytest.raises(InvalidConfig):
        finetune(ck, small_sets[0], FinetuneConfig(steps=1))


def test_evaluate_deterministic_and_writes(tmp_path, small_sets):
    model = build_model(TINY_MODEL, num_classes=3, seed=0)
    a = evaluate(model, small_sets[1])
    b = evaluate(model, small_sets[1], out_dir=tmp_path)
    assert a.miou == b.miou and np.array_equal(a.confusion, b.confusion)
    assert 0.0 <= a.miou <= 1.0
    total = sum(int((s.label != IGNORE_VALUE).sum()) for s in small_sets[1].samples)
    assert a.confusion.sum() == total
    assert json.loads((tmp_path / "report.json").read_text())["miou"] == a.miou
    assert (tmp_path / "per_class_iou.png").stat().st_size > 0
    with pytest.raises(InvalidInput):
        evaluate(model, SegDataset([], 3))
