import math

import numpy as np
import pytest

from feedbacknet import harness
from feedbacknet.checkpoint import capture, checkpoint_to_bytes, load_checkpoint
from feedbacknet.data import SyntheticSpec, generate_dataset, save_dataset
from feedbacknet.errors import CheckpointError, ContractError, NumericError
from feedbacknet.harness import (
    _epoch_order,
    centroid_separation,
    evaluate,
    export_representations,
    load_data,
    read_representations,
    train,
)
from feedbacknet.network import FeedbackNet, FeedbackNetSpec
from feedbacknet.taxonomy import Taxonomy
from feedbacknet.tensor import Rng, no_grad


def fresh_default_net(seed=0):
    """Untrained default network with populated normalization statistics."""
    net = FeedbackNet(FeedbackNetSpec.default(num_classes=12), Rng(seed))
    warm, _, _ = generate_dataset(SyntheticSpec(train_per_class=3, test_per_class=1, seed=seed))
    with no_grad():
        net(warm.inputs(), "train")
    return net


class TestTrain:
    def test_zero_lr_leaves_parameters(self, tiny_config):
        config = tiny_config.replace(lr=0.0, epochs=3)
        data = harness.load_data(config)
        before = FeedbackNet(config.net_spec(12, 12), Rng(config.seed).child(1))
        result = train(config, data=data)
        for name, p in before.parameters().items():
            assert result.net.parameters()[name].data.tobytes() == p.data.tobytes(), name
        accs = [h.fine_accuracy for h in result.history]
        assert all(a == accs[0] for a in accs)
        losses = result.loss_history
        assert max(losses) - min(losses) < 1e-2 * losses[0]

    def test_same_seed_same_history(self, tiny_config):
        a, b = train(tiny_config), train(tiny_config)
        assert a.step_losses == b.step_losses
        assert a.loss_history == b.loss_history
        assert checkpoint_to_bytes(a.checkpoint) == checkpoint_to_bytes(b.checkpoint)

    def test_different_seed_differs(self, tiny_config):
        assert train(tiny_config).step_losses != train(tiny_config.replace(seed=1)).step_losses

    def test_loss_decreases(self, tiny_config):
        result = train(tiny_config.replace(epochs=4, train_per_class=8))
        assert result.loss_history[-1] < result.loss_history[0]

    def test_eval_every(self, tiny_config):
        assert len(train(tiny_config.replace(epochs=3, eval_every=0)).history) == 1
        assert len(train(tiny_config.replace(epochs=3, eval_every=2)).history) == 2
        assert len(train(tiny_config.replace(epochs=3)).history) == 3

    def test_outputs_written(self, tiny_config, tmp_path):
        log_path = tmp_path / "train.log"
        lines = []
        result = train(tiny_config.replace(checkpoint_every=1), checkpoint_dir=tmp_path, log=lines.append,
                       log_path=log_path)
        assert sorted(p.name for p in tmp_path.glob("*.fbnc")) == ["epoch-0001.fbnc", "epoch-0002.fbnc", "final.fbnc"]
        assert load_checkpoint(tmp_path / "epoch-0002.fbnc").epoch == 2
        assert checkpoint_to_bytes(load_checkpoint(tmp_path / "final.fbnc")) == checkpoint_to_bytes(result.checkpoint)
        assert len(lines) == 2 and lines[0].startswith("epoch 1/2")
        assert log_path.read_text().splitlines()[1].endswith(lines[1])

    def test_saved_checkpoint_gives_same_metrics(self, tiny_config, tmp_path):
        result = train(tiny_config, checkpoint_dir=tmp_path)
        _, test, tax = load_data(tiny_config)
        live = evaluate(result.net, test, tax)
        loaded = evaluate(load_checkpoint(tmp_path / "final.fbnc"), test, tax)
        assert live.fine_accuracy == loaded.fine_accuracy
        assert live.test_loss == loaded.test_loss

    def test_non_finite_loss_carries_last_good_state(self, tiny_config, monkeypatch):
        real = harness._step_loss
        calls = []

        def poisoned(*args):
            calls.append(1)
            loss = real(*args)
            if len(calls) == 4:  # first step of the second epoch
                loss.data = np.array(np.nan, dtype=loss.dtype)
            return loss

        monkeypatch.setattr(harness, "_step_loss", poisoned)
        with pytest.raises(NumericError) as info:
            train(tiny_config.replace(epochs=3))
        good = info.value.checkpoint
        assert good.epoch == 1
        assert all(np.isfinite(v).all() for v in good.tensors.values())

    def test_variants_run(self, tiny_config):
        for changes in (dict(curriculum=True), dict(curriculum=True, curriculum_direction="literal_eq6"),
                        dict(last_loss_only=True), dict(skip=False), dict(order="coarse_sorted"),
                        dict(flip=True, crop=True), dict(skip_placement="recurrent")):
            result = train(tiny_config.replace(epochs=1, **changes))
            assert all(math.isfinite(v) for v in result.step_losses), changes

    def test_fbds_source(self, tiny_config, tmp_path):
        train_set, test_set, _ = generate_dataset(tiny_config.synthetic_spec())
        save_dataset(train_set, tmp_path / "train.fbds")
        save_dataset(test_set, tmp_path / "test.fbds")
        config = tiny_config.replace(data_source="fbds", data_path=str(tmp_path / "train.fbds"),
                                     data_test_path=str(tmp_path / "test.fbds"))
        assert train(config).step_losses == train(tiny_config).step_losses

    def test_fbds_needs_test_path(self, tiny_config, tmp_path):
        train_set, _, _ = generate_dataset(tiny_config.synthetic_spec())
        save_dataset(train_set, tmp_path / "train.fbds")
        with pytest.raises(ContractError, match="test_path"):
            load_data(tiny_config.replace(data_source="fbds", data_path=str(tmp_path / "train.fbds")))


class TestEpochOrder:
    def test_covers_every_sample_once(self, tiny_config):
        train_set, _, _ = load_data(tiny_config)
        batches = _epoch_order(train_set, tiny_config, Rng(0))
        assert sorted(np.concatenate(batches).tolist()) == list(range(len(train_set)))
        assert all(len(b) >= 2 for b in batches)

    def test_coarse_sorted(self, tiny_config):
        config = tiny_config.replace(order="coarse_sorted")
        train_set, _, _ = load_data(config)
        order = np.concatenate(_epoch_order(train_set, config, Rng(0)))
        assert np.all(np.diff(train_set.coarse[order]) >= 0)

    def test_single_leftover_merged(self, tiny_config):
        train_set, _, _ = load_data(tiny_config)  # 48 samples
        batches = _epoch_order(train_set, tiny_config.replace(batch_size=47), Rng(0))
        assert [len(b) for b in batches] == [48]


class TestEvaluate:
    def test_untrained_is_chance(self):
        net = fresh_default_net()
        _, test, tax = generate_dataset(SyntheticSpec(seed=5))
        report = evaluate(net, test, tax)
        sigma = math.sqrt((1 / 12) * (11 / 12) / len(test))
        assert report.iterations == 4
        for acc in report.fine_accuracy:
            assert abs(acc - 1 / 12) <= 4 * sigma

    def test_report_fields(self, tiny_config):
        result = train(tiny_config)
        report = result.final
        assert report.top1 == report.fine_accuracy[-1]
        assert report.top1 <= report.top5 <= 1.0
        for fine, parent in zip(report.fine_accuracy, report.parent_accuracy):
            assert parent >= fine

    def test_fingerprint_mismatch(self, tiny_config):
        result = train(tiny_config)
        _, test, tax = load_data(tiny_config)
        with pytest.raises(CheckpointError):
            evaluate(result.checkpoint, test, tax, spec=tiny_config.replace(skip=False).net_spec(12, 12))

    def test_class_count_mismatch(self, tiny_config):
        result = train(tiny_config)
        _, test, _ = load_data(tiny_config)
        with pytest.raises(ContractError):
            evaluate(result.net, test, Taxonomy.balanced(2, 3))


class TestExport:
    def test_shape(self, tmp_path):
        net = fresh_default_net()
        _, test, _ = generate_dataset(SyntheticSpec(test_per_class=9, train_per_class=1))
        data = test.subset(slice(0, 100))
        path = tmp_path / "reprs.txt"
        export_representations(net, data, path)
        rows = path.read_text().splitlines()
        assert len(rows) == 400
        assert {len(r.split()) for r in rows} == {68}
        ids, its, fine, coarse, feats = read_representations(path)
        assert ids.tolist() == np.repeat(np.arange(100), 4).tolist()
        assert its.tolist() == [1, 2, 3, 4] * 100
        np.testing.assert_array_equal(fine[::4], data.fine)
        np.testing.assert_array_equal(coarse[::4], data.coarse)
        assert feats.shape == (400, 64)

    def test_deterministic_and_exact(self, tmp_path):
        net = fresh_default_net()
        _, test, _ = generate_dataset(SyntheticSpec(test_per_class=2, train_per_class=1))
        ckpt = capture(net, {}, 0, Rng(0))
        export_representations(net, test, tmp_path / "a.txt")
        export_representations(ckpt, test, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        _, feats = harness.iteration_logits(net, test.inputs(), with_features=True)
        _, its, _, _, back = read_representations(tmp_path / "a.txt")
        np.testing.assert_array_equal(back[its == 2].astype(np.float32), feats[1])

    def test_unwritable_path(self, tmp_path):
        net = fresh_default_net()
        _, test, _ = generate_dataset(SyntheticSpec(test_per_class=1, train_per_class=1))
        with pytest.raises(OSError):
            export_representations(net, test, tmp_path / "missing" / "reprs.txt")


class TestCentroidSeparation:
    def test_separated_beats_mixed(self):
        g = np.random.default_rng(0)
        labels = np.repeat(np.arange(3), 50)
        centers = np.array([[0, 0], [5, 0], [0, 5]])
        tight = centers[labels] + g.normal(scale=0.5, size=(150, 2))
        loose = centers[labels] + g.normal(scale=3.0, size=(150, 2))
        assert centroid_separation(tight, labels) > centroid_separation(loose, labels)

    def test_scale_invariant(self):
        g = np.random.default_rng(1)
        x, labels = g.normal(size=(40, 3)), np.repeat([0, 1], 20)
        assert centroid_separation(x, labels) == pytest.approx(centroid_separation(7.0 * x, labels))
