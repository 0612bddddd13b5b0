import math
import zlib

import numpy as np
import pytest
import torch

from vpraug.backbone import Backbone, BackboneConfig, DeskVprNet
from vpraug.dataset import DatasetView, PlaceRecord
from vpraug.geometry import Intrinsics, Pose
from vpraug.training import (AccessLoggingLoader, MetricsLogger,
                             NormalizationStats, StateError, TrainConfig,
                             OptimizerConfig, TrainingError, early_stop,
                             evaluate_ue_nll, make_vpr_optimizer, nll_grad,
                             nll_loss, nll_loss_torch, normalize_descriptor,
                             train_ue, train_vpr_epoch, triplet_loss,
                             triplet_loss_torch)
from vpraug.ue_net import UEConfig, UENet, build_reference_set

INTR = Intrinsics(25.0, 25.0, 16.0, 16.0, 32, 32)


def rec(rid, xyz, split="train", synthetic=False):
    return PlaceRecord(id=rid, image_path=f"{rid}.png",
                       pose=Pose(np.eye(3), xyz), intrinsics=INTR,
                       is_synthetic=synthetic, scene_id="s", split=split,
                       epoch_added=0)


def fake_loader(record):
    """Deterministic pseudo-image keyed by the record id."""
    rng = np.random.default_rng(zlib.crc32(record.id.encode()))
    return rng.random((32, 32, 3))


class TestNllLoss:
    def test_worked_midpoint(self):
        # y = 0.5, mu = 0, var = 1: 0.5*log 1 + log 0.25 + 0 = -1.386294
        assert nll_loss([0.5], [0.0], [1.0]) == pytest.approx(-1.386294, abs=1e-6)

    def test_worked_wide_variance(self):
        # var = e^2 adds 1.0 to the midpoint case
        assert nll_loss([0.5], [0.0], [math.e ** 2]) == pytest.approx(
            -0.386294, abs=1e-6)

    def test_independent_gaussian_oracle(self):
        # nll == -log N(logit y; mu, var) - 0.5*log(2*pi) + log(y(1-y)),
        # with the Gaussian log-density evaluated by torch.distributions
        rng = np.random.default_rng(0)
        for _ in range(200):
            y = rng.uniform(0.01, 0.99)
            mu = rng.normal()
            var = rng.uniform(0.1, 5.0)
            x = math.log(y / (1 - y))
            normal = torch.distributions.Normal(
                torch.tensor(mu, dtype=torch.float64),
                torch.tensor(math.sqrt(var), dtype=torch.float64))
            expected = (-float(normal.log_prob(torch.tensor(x, dtype=torch.float64)))
                        - 0.5 * math.log(2 * math.pi) + math.log(y * (1 - y)))
            assert abs(nll_loss([y], [mu], [var]) - expected) < 1e-9

    def test_sums_over_dimensions(self):
        y, mu, var = [0.3, 0.6], [0.1, -0.2], [0.5, 2.0]
        total = nll_loss(y, mu, var)
        parts = sum(nll_loss([yi], [mi], [vi]) for yi, mi, vi in zip(y, mu, var))
        assert total == pytest.approx(parts, abs=1e-12)

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(1)
        y = rng.uniform(0.05, 0.95, 8)
        mu = rng.normal(size=8)
        var = rng.uniform(0.2, 3.0, 8)
        t = nll_loss_torch(torch.tensor(y), torch.tensor(mu), torch.tensor(var))
        assert float(t) == pytest.approx(nll_loss(y, mu, var), abs=1e-9)

    def test_domain_validation(self):
        with pytest.raises(TrainingError):
            nll_loss([0.0], [0.0], [1.0])
        with pytest.raises(TrainingError):
            nll_loss([1.0], [0.0], [1.0])
        with pytest.raises(TrainingError):
            nll_loss([0.5], [0.0], [0.0])
        with pytest.raises(TrainingError):
            nll_loss([0.5, 0.5], [0.0], [1.0])


class TestNllGrad:
    def test_matches_finite_difference(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            y = rng.uniform(0.05, 0.95, 4)
            mu = rng.normal(size=4)
            var = rng.uniform(0.3, 3.0, 4)
            d_mu, d_var = nll_grad(y, mu, var)
            eps = 1e-6
            for k in range(4):
                up, down = mu.copy(), mu.copy()
                up[k] += eps
                down[k] -= eps
                fd = (nll_loss(y, up, var) - nll_loss(y, down, var)) / (2 * eps)
                assert abs(fd - d_mu[k]) < 1e-5
                up, down = var.copy(), var.copy()
                up[k] += eps
                down[k] -= eps
                fd = (nll_loss(y, mu, up) - nll_loss(y, mu, down)) / (2 * eps)
                assert abs(fd - d_var[k]) < 1e-5

    def test_stationary_in_mu_at_logit(self):
        y = np.array([0.2, 0.7])
        mu = np.log(y / (1 - y))
        d_mu, _ = nll_grad(y, mu, np.ones(2))
        assert np.allclose(d_mu, 0.0, atol=1e-12)

    def test_stationary_in_var_at_squared_residual(self):
        y = np.array([0.8])
        mu = np.array([0.0])
        resid2 = (np.log(y / (1 - y)) - mu) ** 2
        _, d_var = nll_grad(y, mu, resid2)
        assert np.allclose(d_var, 0.0, atol=1e-12)


class TestTripletLoss:
    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            dim = int(rng.integers(2, 8))
            a, p = rng.normal(size=dim), rng.normal(size=dim)
            negs = [rng.normal(size=dim) for _ in range(int(rng.integers(1, 5)))]
            margin = float(rng.uniform(0.05, 1.0))
            expected = 0.0
            for n in negs:
                d_ap = np.sum((a - p) ** 2)
                d_an = np.sum((a - n) ** 2)
                expected += max(0.0, margin + d_ap - d_an)
            got = triplet_loss(a, p, negs, margin)
            assert got == pytest.approx(expected, abs=1e-9)
            t = triplet_loss_torch(torch.tensor(a), torch.tensor(p),
                                   torch.tensor(np.stack(negs)), margin)
            assert float(t) == pytest.approx(expected, abs=1e-9)

    def test_zero_when_negative_far(self):
        a = np.zeros(3)
        assert triplet_loss(a, a, [np.full(3, 10.0)], 0.1) == 0.0

    def test_margin_when_distances_equal(self):
        a = np.zeros(3)
        x = np.ones(3)
        assert triplet_loss(a, x, [x], 0.25) == pytest.approx(0.25)

    def test_bad_margin(self):
        with pytest.raises(TrainingError):
            triplet_loss(np.zeros(2), np.zeros(2), [np.zeros(2)], 0.0)


class TestNormalizationStats:
    def test_midpoint_and_roundtrip(self):
        stats = NormalizationStats().fit([np.array([0.0, -1.0]),
                                          np.array([2.0, 3.0])])
        y = stats.normalize(np.array([1.0, 1.0]))
        assert np.allclose(y, 0.5)
        mid = stats.denormalize(y)
        assert np.allclose(mid, [1.0, 1.0])

    def test_epsilon_clamp(self):
        stats = NormalizationStats(epsilon=1e-3).fit(
            [np.array([0.0]), np.array([1.0])])
        assert stats.normalize(np.array([-5.0]))[0] == pytest.approx(1e-3)
        assert stats.normalize(np.array([5.0]))[0] == pytest.approx(1 - 1e-3)

    def test_degenerate_dimension_widened(self):
        stats = NormalizationStats().fit([np.array([2.0]), np.array([2.0])])
        y = stats.normalize(np.array([2.0]))
        assert 0.0 < y[0] < 1.0

    def test_unfitted_raises(self):
        with pytest.raises(StateError):
            NormalizationStats().normalize(np.zeros(2))

    def test_save_load_roundtrip(self, tmp_path):
        stats = NormalizationStats().fit([np.array([0.0, 1.0]),
                                          np.array([4.0, 9.0])])
        stats.save(tmp_path / "stats.json")
        loaded = NormalizationStats.load(tmp_path / "stats.json")
        x = np.array([1.3, 2.2])
        assert np.allclose(stats.normalize(x), loaded.normalize(x))


class TestEarlyStop:
    def test_improving_never_stops(self):
        assert not early_stop([1.0, 2.0, 3.0, 4.0], patience=2)

    def test_stops_after_patience_exceeded(self):
        history = [5.0] + [1.0] * 3
        assert early_stop(history, patience=2)

    def test_exactly_at_patience_continues(self):
        history = [5.0] + [1.0] * 2
        assert not early_stop(history, patience=2)

    def test_empty_history(self):
        assert not early_stop([], patience=3)

    def test_bad_patience(self):
        with pytest.raises(TrainingError):
            early_stop([1.0], patience=0)


BB_CFG = BackboneConfig(input_size=32, channels=8, descriptor_dim=16)


def make_view():
    queries = [rec(f"q{i}", [i, 0, 0], split="val") for i in range(4)]
    db = ([rec(f"p{i}", [i, 0.1, 0], split="train") for i in range(4)]
          + [rec(f"n{i}", [i + 40, 0, 0], split="train") for i in range(8)])
    return DatasetView(queries, db, positive_threshold=0.5)


class TestTrainVprEpoch:
    def test_lr_decay_applied(self):
        net = DeskVprNet(BB_CFG, seed=0)
        config = TrainConfig()
        optimizer = make_vpr_optimizer(net, config)
        stats = train_vpr_epoch(net, optimizer, make_view(), config, epoch=0,
                                image_loader=fake_loader)
        assert stats["lr"] == pytest.approx(1e-5 * 0.99)
        assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-5 * 0.99)

    def test_step_count_matches_batching(self):
        # 16 anchors (queries), batch size 8 -> 2 optimizer steps
        queries = [rec(f"q{i}", [i, 0, 0], split="val") for i in range(16)]
        db = ([rec(f"p{i}", [i, 0.1, 0]) for i in range(16)]
              + [rec(f"n{i}", [i + 90, 0, 0]) for i in range(6)])
        view = DatasetView(queries, db, positive_threshold=0.5)
        net = DeskVprNet(BB_CFG, seed=0)
        config = TrainConfig()
        stats = train_vpr_epoch(net, make_vpr_optimizer(net, config), view,
                                config, epoch=0, image_loader=fake_loader)
        assert stats["triplets"] == 16
        assert stats["steps"] == 2

    def test_parameters_change(self):
        net = DeskVprNet(BB_CFG, seed=0)
        before = [p.detach().clone() for p in net.parameters()]
        config = TrainConfig(vpr=OptimizerConfig(lr=1e-3, lr_decay=0.99,
                                                 weight_decay=1e-3, batch_size=8))
        train_vpr_epoch(net, make_vpr_optimizer(net, config), make_view(),
                        config, epoch=0, image_loader=fake_loader)
        assert any(not torch.equal(a, b)
                   for a, b in zip(before, net.parameters()))

    def test_no_triplets_raises(self):
        queries = [rec("q0", [0, 0, 0], split="val")]
        db = [rec("d0", [50, 0, 0]), rec("d1", [60, 0, 0])]
        view = DatasetView(queries, db, positive_threshold=0.5)
        net = DeskVprNet(BB_CFG, seed=0)
        config = TrainConfig()
        with pytest.raises(TrainingError, match="triplet"):
            train_vpr_epoch(net, make_vpr_optimizer(net, config), view, config,
                            epoch=0, image_loader=fake_loader)


UE_CFG = UEConfig(descriptor_dim=16, fused_dim=16, feature_channels=8, bands=2,
                  n_references=3, feat_hidden=16, out_hidden=16)


def ue_records():
    rng = np.random.default_rng(4)
    train = [rec(f"t{i}", rng.uniform(-1, 1, 3)) for i in range(8)]
    val = [rec(f"v{i}", rng.uniform(-1, 1, 3), split="val") for i in range(3)]
    return train, val


def ue_train_config(**kw):
    base = dict(ue=OptimizerConfig(lr=1e-3, lr_decay=0.999), ue_epochs=6,
                patience=10, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainUe:
    def test_training_reduces_validation_nll(self):
        backbone = Backbone(DeskVprNet(BB_CFG, seed=0))
        train, val = ue_records()
        untrained = UENet(UE_CFG, seed=1)
        cache = {}
        val_samples = []
        desc_net = backbone.net
        from vpraug.training import compute_descriptors
        desc = compute_descriptors(desc_net, train + val, fake_loader)
        stats0 = NormalizationStats().fit([desc[r.id] for r in train])
        for r in val:
            refs = build_reference_set(r.pose, train, UE_CFG.n_references,
                                       backbone, feature_cache=cache,
                                       image_loader=fake_loader)
            y = torch.as_tensor(stats0.normalize(desc[r.id]),
                                dtype=untrained.dtype)
            val_samples.append((r, refs, y))
        before = evaluate_ue_nll(untrained, val_samples)

        net = UENet(UE_CFG, seed=1)
        _, stats, history = train_ue(backbone, net, train, val,
                                     ue_train_config(), image_loader=fake_loader)
        after = evaluate_ue_nll(net, val_samples)
        assert after < before
        assert len(history) >= 1
        assert stats.fitted

    def test_seed_reproducibility(self):
        backbone = Backbone(DeskVprNet(BB_CFG, seed=0))
        train, val = ue_records()
        net_a = UENet(UE_CFG, seed=1)
        net_b = UENet(UE_CFG, seed=1)
        _, _, hist_a = train_ue(backbone, net_a, train, val,
                                ue_train_config(ue_epochs=3),
                                image_loader=fake_loader)
        _, _, hist_b = train_ue(backbone, net_b, train, val,
                                ue_train_config(ue_epochs=3),
                                image_loader=fake_loader)
        assert hist_a == hist_b

    def test_backbone_stays_frozen(self):
        backbone = Backbone(DeskVprNet(BB_CFG, seed=0))
        before = [p.detach().clone() for p in backbone.net.parameters()]
        train, val = ue_records()
        train_ue(backbone, UENet(UE_CFG, seed=1), train, val,
                 ue_train_config(ue_epochs=2), image_loader=fake_loader)
        assert all(torch.equal(a, b)
                   for a, b in zip(before, backbone.net.parameters()))

    def test_too_few_records(self):
        backbone = Backbone(DeskVprNet(BB_CFG, seed=0))
        with pytest.raises(TrainingError, match="at least"):
            train_ue(backbone, UENet(UE_CFG, seed=1),
                     [rec("a", [0, 0, 0]), rec("b", [1, 0, 0])], [],
                     ue_train_config(), image_loader=fake_loader)


class TestLoggersAndLoaders:
    def test_metrics_logger_jsonl(self, tmp_path):
        logger = MetricsLogger(tmp_path / "m.jsonl")
        logger.log(epoch=0, loss=1.5)
        logger.log(epoch=1, loss=1.2)
        lines = (tmp_path / "m.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        import json
        assert json.loads(lines[1]) == {"epoch": 1, "loss": 1.2}

    def test_access_logging_loader(self):
        loader = AccessLoggingLoader(fake_loader)
        loader(rec("a", [0, 0, 0]))
        loader(rec("b", [0, 0, 0]))
        assert loader.accessed == {"a", "b"}

    def test_normalize_descriptor_accepts_descriptor(self):
        from vpraug.backbone import Descriptor
        stats = NormalizationStats().fit([np.zeros(2), np.ones(2)])
        y = normalize_descriptor(Descriptor(np.full(2, 0.5)), stats)
        assert np.allclose(y, 0.5)
