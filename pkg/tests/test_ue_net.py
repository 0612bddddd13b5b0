import numpy as np
import pytest
import torch

from vpraug.backbone import FeatureMap
from vpraug.dataset import PlaceRecord
from vpraug.geometry import Intrinsics, Pose, pose_feature
from vpraug.ue_net import (UEConfig, UENet, UENetError, UEPrediction,
                           ReferenceSet, aggregate, decode, fuse,
                           load_checkpoint, predict, save_checkpoint,
                           warp_references)

INTR = Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)

TINY = UEConfig(descriptor_dim=6, fused_dim=8, feature_channels=4, bands=2,
                n_references=3, feat_hidden=8, out_hidden=8)


def make_record(rid, pose):
    return PlaceRecord(id=rid, image_path=f"{rid}.png", pose=pose,
                       intrinsics=INTR, is_synthetic=False, scene_id="s",
                       split="train", epoch_added=0)


def make_refs(rng, n=3, channels=4, grid=8):
    records, maps, poses = [], [], []
    for i in range(n):
        pose = Pose(np.eye(3), [0.1 * i, 0.0, 0.0])
        records.append(make_record(f"r{i}", pose))
        maps.append(FeatureMap(values=rng.normal(size=(grid, grid, channels))))
        poses.append(pose)
    return ReferenceSet(records=records, feature_maps=maps, poses=poses)


class TestAggregate:
    def test_worked_example_uniform_weights(self):
        # f = [[1],[3]], w = 1: mean = 2, var = (1-2)^2 + (3-2)^2 = 2
        mean, var = aggregate(np.array([[1.0], [3.0]]), np.ones((2, 1)))
        assert mean[0] == pytest.approx(2.0)
        assert var[0] == pytest.approx(2.0)

    def test_worked_example_zero_weight(self):
        # f = [[2],[2]], w = [[1],[0]]: fw = [2, 0], mean = 1, var = 1+1 = 2
        mean, var = aggregate(np.array([[2.0], [2.0]]), np.array([[1.0], [0.0]]))
        assert mean[0] == pytest.approx(1.0)
        assert var[0] == pytest.approx(2.0)

    def test_brute_force_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(1, 17))
            f = rng.normal(size=(n, d))
            w = rng.random((n, d))
            mean, var = aggregate(f, w)
            for k in range(d):
                m = sum(f[i, k] * w[i, k] for i in range(n)) / n
                v = sum((f[i, k] * w[i, k] - m) ** 2 for i in range(n)) / (n - 1)
                assert abs(mean[k] - m) < 1e-6
                assert abs(var[k] - v) < 1e-6

    def test_identical_rows_zero_variance(self):
        f = np.tile(np.array([[1.5, -2.0]]), (4, 1))
        mean, var = aggregate(f, np.ones_like(f))
        assert np.allclose(mean, [1.5, -2.0])
        assert np.allclose(var, 0.0)

    def test_single_reference_rejected(self):
        with pytest.raises(UENetError):
            aggregate(np.ones((1, 3)), np.ones((1, 3)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(UENetError):
            aggregate(np.ones((3, 2)), np.ones((3, 3)))


class TestWarpReferences:
    def test_identity_warp_recovers_features(self):
        # candidate pose equal to a reference pose: that reference warps to
        # itself and its relative-pose encoding is the zero-input encoding
        rng = np.random.default_rng(1)
        refs = make_refs(rng)
        cand = refs.poses[0]
        warped, masks, pfs = warp_references(refs, cand, TINY)
        assert masks[0].all()
        assert np.allclose(warped[0], refs.feature_maps[0].values, atol=1e-9)
        expected = pose_feature(Pose.identity(), bands=TINY.bands,
                                rotation_rep=TINY.rotation_rep)
        assert np.allclose(pfs[0].values, expected.values, atol=1e-12)

    def test_shapes(self):
        rng = np.random.default_rng(2)
        refs = make_refs(rng, n=4)
        warped, masks, pfs = warp_references(refs, Pose(np.eye(3), [0, 0, 0.2]),
                                             TINY)
        assert len(warped) == len(masks) == len(pfs) == 4
        for wv, mk in zip(warped, masks):
            assert wv.shape == (8, 8, 4)
            assert mk.shape == (8, 8)


class TestUENetForward:
    def test_prediction_shapes_and_floor(self):
        net = UENet(TINY, seed=0)
        rng = np.random.default_rng(3)
        refs = make_refs(rng)
        pred = predict(net, Pose(np.eye(3), [0.05, 0, 0]), refs)
        assert pred.mu.shape == (6,)
        assert pred.var.shape == (6,)
        assert np.all(pred.var >= 1e-6)
        assert pred.scalar_uncertainty == pytest.approx(float(pred.var.mean()))

    def test_deterministic_and_pure(self):
        net = UENet(TINY, seed=0)
        rng = np.random.default_rng(4)
        refs = make_refs(rng)
        before = [fm.values.copy() for fm in refs.feature_maps]
        cand = Pose(np.eye(3), [0.0, 0.1, 0.0])
        a = predict(net, cand, refs)
        b = predict(net, cand, refs)
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.var, b.var)
        for fm, orig in zip(refs.feature_maps, before):
            assert np.array_equal(fm.values, orig)

    def test_seed_controls_init(self):
        a = UENet(TINY, seed=0)
        b = UENet(TINY, seed=0)
        c = UENet(TINY, seed=1)
        pa = list(a.parameters())
        pb = list(b.parameters())
        pc = list(c.parameters())
        assert all(torch.equal(x, y) for x, y in zip(pa, pb))
        assert any(not torch.equal(x, y) for x, y in zip(pa, pc))

    def test_fuse_matches_aggregate(self):
        net = UENet(TINY, seed=2)
        rng = np.random.default_rng(5)
        refs = make_refs(rng)
        warped, masks, pfs = warp_references(refs, refs.poses[1], TINY)
        fused = fuse(net, warped, masks, pfs)
        mean, var = aggregate(fused.per_reference, fused.weights)
        assert np.allclose(fused.mean, mean, atol=1e-5)
        assert np.allclose(fused.var, var, atol=1e-5)
        assert np.all(fused.weights > 0)

    def test_single_reference_rejected(self):
        net = UENet(TINY, seed=0)
        with pytest.raises(UENetError):
            net.fuse_tensors(torch.zeros(1, 8, 8, 4), torch.ones(1, 8, 8).bool(),
                             torch.zeros(1, TINY.pose_feature_dim))

    def test_prediction_validation(self):
        with pytest.raises(UENetError):
            UEPrediction(mu=np.zeros(2), var=np.array([1.0, 0.0]),
                         scalar_uncertainty=0.5)


class TestGradients:
    def test_autograd_matches_finite_difference(self):
        net = UENet(TINY, seed=3, dtype=torch.float64)
        rng = np.random.default_rng(6)
        warped = torch.tensor(rng.normal(size=(3, 8, 8, 4)))
        mask = torch.ones(3, 8, 8, dtype=torch.bool)
        pfs = torch.tensor(rng.normal(size=(3, TINY.pose_feature_dim)))
        target = torch.tensor(rng.normal(size=6))

        def loss_fn():
            mu, var = net(warped, mask, pfs)
            return (0.5 * torch.log(var)
                    + (target - mu) ** 2 / (2 * var)).sum()

        loss = loss_fn()
        net.zero_grad()
        loss.backward()
        idx_rng = np.random.default_rng(7)
        for p in net.parameters():
            flat = p.detach().reshape(-1)
            for _ in range(2):
                i = int(idx_rng.integers(len(flat)))
                eps = 1e-6
                with torch.no_grad():
                    p.reshape(-1)[i] += eps
                    up = loss_fn().item()
                    p.reshape(-1)[i] -= 2 * eps
                    down = loss_fn().item()
                    p.reshape(-1)[i] += eps
                fd = (up - down) / (2 * eps)
                an = p.grad.reshape(-1)[i].item()
                denom = max(abs(fd), abs(an), 1e-6)
                assert abs(fd - an) / denom < 1e-3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = UENet(TINY, seed=4)
        save_checkpoint(net, tmp_path / "ue.pt", extra_meta={"note": "x"})
        loaded, meta = load_checkpoint(tmp_path / "ue.pt")
        assert loaded.config == TINY
        assert meta["note"] == "x"
        rng = np.random.default_rng(8)
        refs = make_refs(rng)
        cand = Pose(np.eye(3), [0.0, 0.0, 0.1])
        a, b = predict(net, cand, refs), predict(loaded, cand, refs)
        assert np.allclose(a.mu, b.mu) and np.allclose(a.var, b.var)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.pt")
