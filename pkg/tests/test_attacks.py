import csv
import json

import numpy as np
import pytest
import torch
from torch import nn

from dfmkit.attacks import (
    AttackConfig,
    AttackError,
    accuracy,
    evaluate_clean,
    evaluate_robustness,
    pgd_attack,
    write_eval_report,
)
from dfmkit.data import DataSplit, LabeledDataset
from dfmkit.models import Checkpoint, ModelSpec, build_model


def _boundary_model(slope=4.0, boundary=0.4):
    """1-D binary classifier with decision boundary at ``boundary``:
    logits = [ slope (x - b), -slope (x - b) ]."""
    spec = ModelSpec("linear", (1,), 2)
    model = nn.Sequential(nn.Flatten(), nn.Linear(1, 2))
    with torch.no_grad():
        model[1].weight.copy_(torch.tensor([[slope], [-slope]]))
        model[1].bias.copy_(torch.tensor([-slope * boundary, slope * boundary]))
    return Checkpoint(spec=spec, model=model)


class TestPgdAttack:
    def test_zero_epsilon_identity(self, rng):
        ckpt = build_model(ModelSpec("tinyconv", (1, 8, 8), 3), 0)
        x = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
        out = pgd_attack(ckpt, x, np.array([0, 1, 2, 0]), epsilon=0.0)
        assert out.tobytes() == x.tobytes()

    def test_norm_bound_per_sample(self, trained_lenet, tiny_mnist):
        x = tiny_mnist.val.images[:32]
        y = tiny_mnist.val.labels[:32]
        adv = pgd_attack(trained_lenet, x, y, epsilon=1.5, steps=10)
        deltas = np.linalg.norm((adv - x).reshape(32, -1), axis=1)
        assert (deltas <= 1.5 + 1e-5).all()
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_margin_oracle(self):
        # closed form: the attack succeeds exactly when the distance to the
        # decision boundary is below epsilon
        boundary = 0.4
        ckpt = _boundary_model(boundary=boundary)
        x0 = np.array([[0.55], [0.62], [0.75], [0.93]], dtype=np.float32)
        y = np.zeros(4, dtype=np.int64)  # all on the positive side
        for eps in (0.05, 0.1, 0.2, 0.3, 0.5):
            adv = pgd_attack(ckpt, x0, y, epsilon=eps, steps=20)
            preds = (ckpt.model(torch.as_tensor(adv)).argmax(1)).numpy()
            margin = x0[:, 0] - boundary
            expected_flip = margin < eps - 1e-6
            assert np.array_equal(preds == 1, expected_flip), f"eps={eps}"

    def test_invalid_config_rejected(self, rng):
        ckpt = _boundary_model()
        x = rng.uniform(size=(2, 1)).astype(np.float32)
        with pytest.raises(AttackError):
            pgd_attack(ckpt, x, np.array([0, 1]), epsilon=-1.0)
        with pytest.raises(AttackError):
            pgd_attack(ckpt, x, np.array([0, 1]), epsilon=1.0, steps=0)

    def test_attack_config_step_size_rule(self):
        cfg = AttackConfig(epsilon=2.0, steps=20)
        assert cfg.step_size == pytest.approx(2.5 * 2.0 / 20)


def _balanced_dataset(k=10, per_class=10):
    labels = np.repeat(np.arange(k), per_class)
    images = np.random.default_rng(0).uniform(size=(k * per_class, 1, 8, 8)).astype(np.float32)
    split = DataSplit(images, labels)
    return LabeledDataset("toy", k, split, split)


class TestEvaluate:
    def test_constant_predictor_chance(self):
        ds = _balanced_dataset()
        ckpt = build_model(ModelSpec("tinyconv", (1, 8, 8), 10), 0)
        with torch.no_grad():
            ckpt.model.net[-1].weight.zero_()
            ckpt.model.net[-1].bias.zero_()
        assert evaluate_clean(ckpt, ds) == pytest.approx(10.0)

    def test_brute_force_recount(self, trained_lenet, tiny_mnist):
        from dfmkit.models import forward_logits

        images = tiny_mnist.val.images[:100]
        labels = tiny_mnist.val.labels[:100]
        reported = accuracy(trained_lenet, images, labels)
        hits = 0
        for i in range(100):  # per-sample scan, no vectorization
            logits = forward_logits(trained_lenet, images[i : i + 1])[0]
            if int(np.argmax(logits)) == int(labels[i]):
                hits += 1
        assert reported == pytest.approx(100.0 * hits / 100)

    def test_empty_dataset_rejected(self):
        ds = _balanced_dataset()
        empty = LabeledDataset(
            "toy", 10, ds.train, DataSplit(ds.val.images[:0], ds.val.labels[:0])
        )
        ckpt = build_model(ModelSpec("tinyconv", (1, 8, 8), 10), 0)
        with pytest.raises(AttackError, match="empty"):
            evaluate_clean(ckpt, empty)


class TestEvalReport:
    def test_eps0_equals_clean_exactly(self, trained_lenet, tiny_mnist):
        report = evaluate_robustness(trained_lenet, tiny_mnist, [0.0, 1.0],
                                     steps=5, max_samples=64)
        clean = accuracy(trained_lenet, tiny_mnist.val.images[:64],
                         tiny_mnist.val.labels[:64])
        assert report.accuracy_by_eps[0.0] == clean

    def test_attack_reduces_accuracy(self, trained_lenet, tiny_mnist):
        report = evaluate_robustness(trained_lenet, tiny_mnist, [0.0, 2.0],
                                     steps=10, max_samples=128)
        assert report.accuracy_by_eps[0.0] >= report.accuracy_by_eps[2.0]

    def test_eps_grid_validation(self, trained_lenet, tiny_mnist):
        with pytest.raises(AttackError, match="non-empty"):
            evaluate_robustness(trained_lenet, tiny_mnist, [])
        with pytest.raises(AttackError, match="contain 0"):
            evaluate_robustness(trained_lenet, tiny_mnist, [1.0])

    def test_csv_json_equivalence(self, trained_lenet, tiny_mnist, tmp_path):
        report = evaluate_robustness(trained_lenet, tiny_mnist, [0.0, 1.0],
                                     steps=3, max_samples=32)
        write_eval_report(report, tmp_path)
        with open(tmp_path / "robustness.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(tmp_path / "robustness.json") as fh:
            mirror = json.load(fh)
        assert len(rows) == 2
        for row in rows:
            json_acc = mirror["accuracy_by_eps"][str(float(row["epsilon"]))]
            assert float(row["accuracy"]) == pytest.approx(json_acc, abs=1e-4)
        assert mirror["provenance"] == report.provenance

    def test_reproducible_bitwise(self, trained_lenet, tiny_mnist, tmp_path):
        for run in range(2):
            report = evaluate_robustness(trained_lenet, tiny_mnist, [0.0, 1.0],
                                         steps=5, max_samples=64)
            write_eval_report(report, tmp_path / f"r{run}")
        assert (tmp_path / "r0" / "robustness.csv").read_bytes() == \
               (tmp_path / "r1" / "robustness.csv").read_bytes()
