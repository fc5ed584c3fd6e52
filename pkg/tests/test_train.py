import csv
import math

import numpy as np
import pytest
import torch

from semiseg.augment import AffineRecord, StrongPolicy, invert_affine, warp
from semiseg.dataset import ImageSample, generate_synthetic, make_label_split, split_holdout
from semiseg.losses import iic_loss
from semiseg.model import SoftPrediction
from semiseg.train import (
    Checkpoint,
    ConfigError,
    PipelineConfig,
    TrainState,
    build_network,
    consistency_loss,
    predict_samples,
    select_checkpoint,
    self_train,
    semi_train,
)
from semiseg.train import _paired_views

TINY = dict(base_width=2, epochs=1, batch_size=1, lr_step_period=None)


def tiny_data(n=12, size=(16, 16), seed=0, kind="blobs"):
    samples = generate_synthetic(kind, n, size, seed=seed)
    return split_holdout(samples, 0.15, seed)


def scripted_state(val_sup, val_final):
    state = TrainState()
    for e, (s, f) in enumerate(zip(val_sup, val_final), start=1):
        state.record({"epoch": e, "val_sup": s, "val_final": f})
    return state


class TestConfig:
    def test_pipelines(self):
        assert PipelineConfig.from_pipeline("P1").pipeline == "P1"
        cfg = PipelineConfig.from_pipeline("P4")
        assert (cfg.unsup_loss, cfg.checkpoint_policy) == ("iid", "best_final")
        with pytest.raises(ConfigError):
            PipelineConfig.from_pipeline("P9")

    def test_defaults(self):
        semi = PipelineConfig.semi()
        assert (semi.optimizer, semi.lr, semi.epochs, semi.batch_size) == ("adam", 1e-3, 100, 1)
        selfc = PipelineConfig.self_supervised(n_classes=3)
        assert (selfc.optimizer, selfc.lr, selfc.epochs, selfc.batch_size) == ("rmsprop", 0.01, 10, 10)
        assert selfc.n_aux_classes == 6

    @pytest.mark.parametrize("bad", [dict(optimizer="sgd"), dict(label_ratio=0.0), dict(lr=0), dict(epochs=0)])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)


class TestSubsetLooping:
    def test_25_labeled_75_unlabeled(self):
        train = generate_synthetic("blobs", 100, (16, 16), seed=1)
        val = generate_synthetic("blobs", 2, (16, 16), seed=2)
        split = make_label_split(train, 0.25, seed=0)
        assert (len(split.labeled), len(split.unlabeled)) == (25, 75)
        cfg = PipelineConfig.from_pipeline("P1", **TINY)
        state = semi_train(build_network(cfg), train, split, cfg, val)
        assert state.step_counts == [{"supervised": 75, "unsupervised": 75, "batch_size": 1}]

    def test_batched_step_count(self):
        train, val = tiny_data(20)
        split = make_label_split(train, 0.25, seed=0)
        cfg = PipelineConfig.from_pipeline("P3", **{**TINY, "batch_size": 4})
        state = semi_train(build_network(cfg), train, split, cfg, val)
        n_unlab = len(split.unlabeled)
        assert state.step_counts[0]["supervised"] == math.ceil(n_unlab / 4)

    def test_all_labeled_is_supervised_only(self):
        train, val = tiny_data(8)
        split = make_label_split(train, 1.0, seed=0)
        cfg = PipelineConfig.from_pipeline("P1", **TINY)
        with pytest.warns(UserWarning, match="purely supervised"):
            state = semi_train(build_network(cfg), train, split, cfg, val)
        assert state.step_counts[0] == {"supervised": len(train), "unsupervised": 0, "batch_size": 1}
        assert math.isnan(state.traces["unsup_loss"][0])


class TestDeterminism:
    def test_same_seed_same_traces(self):
        train, val = tiny_data(8)
        split = make_label_split(train, 0.5, seed=0)
        cfg = PipelineConfig.from_pipeline("P1", **{**TINY, "epochs": 2})
        a = semi_train(build_network(cfg), train, split, cfg, val)
        b = semi_train(build_network(cfg), train, split, cfg, val)
        assert a.initial == b.initial
        assert a.traces == b.traces

    def test_labels_of_unlabeled_samples_never_matter(self):
        train, val = tiny_data(8)
        split = make_label_split(train, 0.5, seed=0)
        poisoned = [
            s if s.id in split.labeled else ImageSample(s.image, 1 - s.diagnostic_mask, s.id) for s in train
        ]
        cfg = PipelineConfig.from_pipeline("P3", **TINY)
        a = semi_train(build_network(cfg), train, split, cfg, val)
        b = semi_train(build_network(cfg), poisoned, split, cfg, val)
        assert a.traces == b.traces


class TestCheckpointSelection:
    def test_argmin(self):
        state = scripted_state([0.5, 0.3, 0.4], [0.9, 0.8, 0.7])
        assert select_checkpoint(state, "best_supervised").epoch == 2
        assert select_checkpoint(state, "best_final").epoch == 3

    def test_monotone_and_ties(self):
        assert select_checkpoint(scripted_state([3, 2, 1], [1, 1, 1]), "best_supervised").epoch == 3
        assert select_checkpoint(scripted_state([3, 2, 1], [1, 1, 1]), "best_final").epoch == 1

    def test_empty_trace(self):
        with pytest.raises(ValueError):
            select_checkpoint(TrainState(), "best_final")

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            select_checkpoint(scripted_state([1], [1]), "latest")

    def test_both_policies_from_one_run(self, tmp_path):
        train, val = tiny_data(8)
        split = make_label_split(train, 0.5, seed=0)
        cfg = PipelineConfig.from_pipeline("P1", **{**TINY, "epochs": 3})
        net = build_network(cfg)
        state = semi_train(net, train, split, cfg, val, run_dir=tmp_path)
        for policy, key in (("best_supervised", "val_sup"), ("best_final", "val_final")):
            ckpt = select_checkpoint(state, policy)
            assert ckpt.epoch == state.traces["epoch"][int(np.argmin(state.traces[key]))]
            assert ckpt.path.exists()
            ckpt.load_into(build_network(cfg))
        rows = list(csv.DictReader(open(tmp_path / "traces.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1", "2", "3"]

    def test_checkpoint_without_weights(self):
        with pytest.raises(ValueError):
            Checkpoint("best_final", 1).load_into(build_network(PipelineConfig(base_width=2)))


class TestConsistency:
    @pytest.mark.parametrize("order", ["strong_first", "weak_first"])
    def test_alignment_undoes_spatial_part(self, order):
        # with only rotations drawn, the realigned strong view matches the weak view on valid pixels
        cfg = PipelineConfig(augment_order=order, strong=StrongPolicy(n_ops=1, op_pool=("Rotate",)))
        yy, xx = np.mgrid[0:32, 0:32]
        img = torch.as_tensor(0.5 + 0.4 * np.sin(xx / 5.0) * np.cos(yy / 6.0), dtype=torch.float64)[None, None]
        x1, x2, v1, v2, align = _paired_views(img, cfg, np.random.default_rng(0))
        back = invert_affine(SoftPrediction(torch.cat([x2, 1 - x2], 1), v2), align[0])
        ok = back.validity[0] & v1[0]
        assert ok.sum() > 200
        assert float((back.probs[0, 0][ok] - x1[0, 0][ok]).abs().mean()) < 0.05

    def test_target_receives_no_gradient(self):
        cfg = PipelineConfig(base_width=2)
        net = build_network(cfg)
        imgs = torch.rand(1, 1, 16, 16)
        consistency_loss(net, imgs, cfg, np.random.default_rng(0)).value.backward()
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in net.parameters())


class TestSelfSupervised:
    def test_needs_aux_head(self):
        cfg = PipelineConfig.self_supervised(**{**TINY, "batch_size": 2})
        net = build_network(cfg.replace(mode="semi"))
        train, val = tiny_data(6)
        with pytest.raises(ValueError, match="auxiliary head"):
            self_train(net, train, cfg, val)

    def test_constant_output_is_degenerate(self):
        cfg = PipelineConfig.self_supervised(**{**TINY, "batch_size": 2, "lr": 1e-12})
        net = build_network(cfg)
        with torch.no_grad():
            for head in (net.main_head, net.aux_head):
                head.weight.zero_()
                head.bias.zero_()
                head.bias[0] = 50.0
        train, val = tiny_data(6, (32, 32), kind="two-intensity")
        probs = torch.as_tensor(np.stack(predict_samples(net, val)))
        assert float(iic_loss(probs, probs)) == pytest.approx(0.0, abs=1e-4)
        state = self_train(net, train, cfg, val)
        assert state.initial["degenerate_flag"] is True
        assert state.traces["degenerate_flag"][0] is True

    def test_runs_and_keeps_best_final(self, tmp_path):
        cfg = PipelineConfig.self_supervised(**{**TINY, "batch_size": 3, "epochs": 2})
        train, val = tiny_data(8, (32, 32), kind="two-intensity")
        state = self_train(build_network(cfg), train, cfg, val, run_dir=tmp_path)
        assert set(state.best_checkpoints) == {"best_final"}
        assert (tmp_path / "checkpoints" / "best_final.pt").exists()
        assert state.step_counts == [{"unsupervised": 3, "batch_size": 3}] * 2


def test_predict_samples_heads():
    cfg = PipelineConfig.self_supervised(base_width=2)
    net = build_network(cfg)
    data = generate_synthetic("blobs", 3, (16, 16))
    main = predict_samples(net, data)
    aux = predict_samples(net, data, head="aux")
    assert main[0].shape == (2, 16, 16) and aux[0].shape == (4, 16, 16)
    with pytest.raises(ValueError):
        predict_samples(build_network(PipelineConfig(base_width=2)), data, head="aux")


def test_rotation_records_use_exact_path_for_quarter_turns():
    img = torch.rand(1, 16, 16)
    assert torch.equal(warp(img, AffineRecord(270.0)), torch.rot90(img, 3, dims=(-2, -1)))
