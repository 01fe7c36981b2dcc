import numpy as np
import pytest
import torch

from ggnas.arch_space import OpKind, CellGenotype, Genotype, build_network_layout
from ggnas.bench import (AugmentParams, EvalReport, IGNORE_LABEL, ToyDataset,
                         apply_augment, augment, bootstrapped_ce, confusion_matrix,
                         finetune, format_report_table, make_toy_dataset,
                         measure_fps, miou)
from ggnas.config import FinetuneConfig, SearchConfig
from ggnas.supernet import DerivedNetwork


def tiny_layout():
    return build_network_layout(
        SearchConfig(num_cells=1, reductions=[], image_size=16, num_classes=3))


def skip_genotype(layout):
    cells = tuple(
        CellGenotype(index=k, edges=tuple(
            (e, OpKind.SKIP_CONNECT) for e in range(spec.num_edges)))
        for k, spec in enumerate(layout.cells))
    return Genotype(fingerprint=layout.fingerprint(), cells=cells)


class TestToyDataset:
    def test_seed_determinism(self):
        a = make_toy_dataset(0, 20, 16, 3, total_stride=4)
        b = make_toy_dataset(0, 20, 16, 3, total_stride=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.masks, b.masks)
        for k in a.splits:
            assert np.array_equal(a.splits[k], b.splits[k])

    def test_mask_alphabet(self):
        ds = make_toy_dataset(1, 30, 16, 3, total_stride=4)
        assert set(np.unique(ds.masks)) <= {0, 1, 2}

    def test_rejects_indivisible_size(self):
        with pytest.raises(ValueError):
            make_toy_dataset(0, 10, 30, 3, total_stride=8)

    def test_splits_disjoint_and_cover(self):
        ds = make_toy_dataset(2, 40, 16, 3, total_stride=4)
        all_idx = np.concatenate(list(ds.splits.values()))
        assert len(all_idx) == 40
        assert len(np.unique(all_idx)) == 40

    def test_class_pixel_frequencies_in_bounds(self):
        # documented generator bounds: background 40-95%, shapes >= 0.5% each
        ds = make_toy_dataset(3, 100, 32, 3, total_stride=4)
        fracs = [(ds.masks == c).mean() for c in range(3)]
        assert 0.40 <= fracs[0] <= 0.95
        assert all(f >= 0.005 for f in fracs[1:])

    def test_save_load_round_trip(self, tmp_path):
        ds = make_toy_dataset(4, 20, 16, 3, total_stride=4)
        path = tmp_path / "toy.npz"
        ds.save(path)
        loaded = ToyDataset.load(path)
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.masks, ds.masks)
        assert loaded.num_classes == 3 and loaded.seed == 4


class TestAugment:
    def test_forced_identity(self):
        ds = make_toy_dataset(0, 4, 16, 3, total_stride=4)
        params = AugmentParams(flip=False, scale=1.0, offset_y=0, offset_x=0)
        img, msk = apply_augment(ds.images[0], ds.masks[0], params, crop_size=16)
        assert np.allclose(img, ds.images[0], atol=1e-6)
        assert np.array_equal(msk, ds.masks[0])

    def test_flip_involution(self):
        ds = make_toy_dataset(0, 4, 16, 3, total_stride=4)
        params = AugmentParams(flip=True, scale=1.0, offset_y=0, offset_x=0)
        img1, msk1 = apply_augment(ds.images[0], ds.masks[0], params, crop_size=16)
        img2, msk2 = apply_augment(img1, msk1, params, crop_size=16)
        assert np.allclose(img2, ds.images[0], atol=1e-6)
        assert np.array_equal(msk2, ds.masks[0])

    def test_mask_labels_never_interpolated(self):
        ds = make_toy_dataset(1, 4, 16, 3, total_stride=4)
        rng = np.random.default_rng(0)
        for _ in range(25):
            _, msk = augment(ds.images[0], ds.masks[0], rng, crop_size=16)
            assert set(np.unique(msk)) <= {0, 1, 2, IGNORE_LABEL}

    def test_downscale_pads_with_ignore(self):
        ds = make_toy_dataset(1, 4, 16, 3, total_stride=4)
        params = AugmentParams(flip=False, scale=0.5, offset_y=0, offset_x=0)
        img, msk = apply_augment(ds.images[0], ds.masks[0], params, crop_size=16)
        assert msk.shape == (16, 16)
        assert (msk[8:] == IGNORE_LABEL).all()
        assert np.allclose(img[8:], 0.0)

    def test_output_size_fixed(self):
        ds = make_toy_dataset(1, 4, 16, 3, total_stride=4)
        rng = np.random.default_rng(3)
        for _ in range(20):
            img, msk = augment(ds.images[0], ds.masks[0], rng, crop_size=16)
            assert img.shape == (16, 16, 3) and msk.shape == (16, 16)


class TestMiou:
    def test_perfect_diagonal(self):
        conf = np.diag([10, 20, 30])
        assert miou(conf).miou == 1.0

    def test_constant_prediction_example(self):
        # prediction always class 0, truth half 0 half 1:
        # IoU_0 = 50/100, IoU_1 = 0 -> mIoU 0.25
        pred = np.zeros(100, dtype=np.int64)
        truth = np.array([0] * 50 + [1] * 50)
        conf = confusion_matrix(pred, truth, 2)
        result = miou(conf)
        assert result.per_class == [0.5, 0.0]
        assert result.miou == 0.25

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 3, size=500)
        truth = rng.integers(0, 3, size=500)
        base = miou(confusion_matrix(pred, truth, 3)).miou
        perm = rng.permutation(500)
        assert miou(confusion_matrix(pred[perm], truth[perm], 3)).miou == base

    def test_ignore_label_excluded(self):
        pred = np.array([0, 1, 2, 2])
        truth = np.array([0, 1, IGNORE_LABEL, IGNORE_LABEL])
        conf = confusion_matrix(pred, truth, 3)
        assert conf.sum() == 2
        assert miou(conf).miou == 1.0

    def test_absent_class_excluded_from_mean(self):
        pred = np.array([0, 0, 1, 1])
        truth = np.array([0, 0, 1, 1])
        result = miou(confusion_matrix(pred, truth, 3))
        assert result.per_class[2] is None
        assert result.present == [0, 1]
        assert result.miou == 1.0

    def test_empty_confusion_is_error(self):
        with pytest.raises(ValueError):
            miou(np.zeros((3, 3), dtype=np.int64))


class TestBootstrappedCe:
    def test_full_fraction_is_mean_ce(self):
        torch.manual_seed(0)
        logits = torch.randn(2, 3, 8, 8)
        target = torch.randint(0, 3, (2, 8, 8))
        full = bootstrapped_ce(logits, target, 1.0)
        ref = torch.nn.functional.cross_entropy(logits, target)
        assert torch.allclose(full, ref, atol=1e-6)

    def test_hard_fraction_is_at_least_mean(self):
        torch.manual_seed(1)
        logits = torch.randn(2, 3, 8, 8)
        target = torch.randint(0, 3, (2, 8, 8))
        hard = bootstrapped_ce(logits, target, 0.25)
        ref = torch.nn.functional.cross_entropy(logits, target)
        assert float(hard) >= float(ref)


class TestFinetune:
    def make_setup(self):
        layout = tiny_layout()
        ds = make_toy_dataset(0, 40, 16, 3, total_stride=4)
        return layout, ds, skip_genotype(layout)

    def test_zero_epochs_near_chance(self):
        layout, ds, g = self.make_setup()
        _, report, traj = finetune(g, layout, ds, FinetuneConfig(epochs=0, seed=0))
        assert traj == []
        assert 0.0 <= report.miou <= 0.6

    def test_seed_determinism(self):
        layout, ds, g = self.make_setup()
        cfg = FinetuneConfig(epochs=1, batch_size=8, seed=3)
        _, r1, t1 = finetune(g, layout, ds, cfg)
        _, r2, t2 = finetune(g, layout, ds, cfg)
        assert r1.miou == r2.miou
        assert [t["loss"] for t in t1] == [t["loss"] for t in t2]

    def test_loss_decreases_smoothed(self):
        layout, ds, g = self.make_setup()
        _, _, traj = finetune(g, layout, ds,
                              FinetuneConfig(epochs=8, batch_size=8, seed=0))
        losses = [t["loss"] for t in traj]
        head = np.mean(losses[: len(losses) // 4])
        tail = np.mean(losses[-len(losses) // 4:])
        assert tail < head

    def test_report_fields(self):
        layout, ds, g = self.make_setup()
        _, report, _ = finetune(g, layout, ds, FinetuneConfig(epochs=1, seed=0))
        assert report.fps == pytest.approx(1000.0 / report.latency_ms)
        assert report.num_parameters > 0
        table = format_report_table(report)
        assert "paper-reported, not reproduced" in table
        assert "GAS" in table and "73.50" in table and "108.4" in table


class TestMeasureFps:
    def test_definition_and_trials_guard(self):
        torch.manual_seed(0)
        layout = tiny_layout()
        net = DerivedNetwork(skip_genotype(layout), layout)
        latency_ms, fps = measure_fps(net, 16, trials=10)
        assert fps == pytest.approx(1000.0 / latency_ms)
        with pytest.raises(ValueError):
            measure_fps(net, 16, trials=5)

    def test_larger_input_not_faster(self):
        torch.manual_seed(0)
        layout = tiny_layout()
        net = DerivedNetwork(skip_genotype(layout), layout)
        lat_small, _ = measure_fps(net, 16, trials=15)
        lat_big, _ = measure_fps(net, 64, trials=15)
        assert lat_big >= lat_small
