import json

import numpy as np
import pytest

from vpraug.dataset import (ConfigurationError, DatasetError, DatasetView,
                            PlaceRecord, RecordStore, insert_synthetic,
                            import_transforms, load_manifest, mine_triplets,
                            organize, positives_for, save_manifest)
from vpraug.geometry import Intrinsics, Pose

INTR = Intrinsics(50.0, 50.0, 32.0, 32.0, 64, 64)


def rec(rid, xyz, split="train", synthetic=False, epoch=0):
    return PlaceRecord(id=rid, image_path=f"{rid}.png",
                       pose=Pose(np.eye(3), xyz), intrinsics=INTR,
                       is_synthetic=synthetic, scene_id="s", split=split,
                       epoch_added=epoch)


class FakeResult:
    def __init__(self, xyz):
        self.pose = Pose(np.eye(3), xyz)
        self.image = np.full((64, 64, 3), 0.5)
        self.intrinsics = INTR


class TestManifest:
    def manifest_doc(self):
        return {"scene_id": "s", "records": [
            {"id": f"r{i}", "image_path": f"r{i}.png",
             "pose": list(np.eye(4).reshape(-1)),
             "intrinsics": INTR.to_dict(), "is_synthetic": False,
             "split": "train", "epoch_added": 0}
            for i in range(3)]}

    def write(self, tmp_path, doc):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc))
        return path

    def test_happy_path(self, tmp_path):
        path = self.write(tmp_path, self.manifest_doc())
        records = load_manifest(path, check_images=False)
        assert len(records) == 3
        assert all(np.allclose(r.pose.matrix(), np.eye(4)) for r in records)

    def test_duplicate_id_named(self, tmp_path):
        doc = self.manifest_doc()
        doc["records"][1]["id"] = "r0"
        path = self.write(tmp_path, doc)
        with pytest.raises(DatasetError, match="r0"):
            load_manifest(path, check_images=False)

    def test_non_orthonormal_rotation(self, tmp_path):
        doc = self.manifest_doc()
        bad = np.eye(4)
        bad[0, 0] = 2.0
        doc["records"][2]["pose"] = list(bad.reshape(-1))
        path = self.write(tmp_path, doc)
        with pytest.raises(DatasetError, match="orthonormal|determinant"):
            load_manifest(path, check_images=False)

    def test_missing_field_named(self, tmp_path):
        doc = self.manifest_doc()
        del doc["records"][1]["pose"]
        path = self.write(tmp_path, doc)
        with pytest.raises(DatasetError, match="r1"):
            load_manifest(path, check_images=False)

    def test_save_load_roundtrip(self, tmp_path):
        records = [rec("a", [0, 0, 0]), rec("b", [1, 2, 3], split="val")]
        save_manifest(tmp_path / "m.json", "s", records)
        loaded = load_manifest(tmp_path / "m.json", check_images=False)
        assert [r.id for r in loaded] == ["a", "b"]
        assert np.allclose(loaded[1].pose.translation, [1, 2, 3])
        assert loaded[1].split == "val"


class TestImportTransforms:
    def test_nerfstudio_style(self, tmp_path):
        doc = {"fl_x": 50.0, "fl_y": 50.0, "cx": 32.0, "cy": 32.0,
               "w": 64, "h": 64,
               "frames": [{"file_path": "images/0.png",
                           "transform_matrix": np.eye(4).tolist()}]}
        path = tmp_path / "transforms.json"
        path.write_text(json.dumps(doc))
        records = import_transforms(path, "scene")
        assert len(records) == 1
        assert records[0].intrinsics.fx == 50.0
        assert np.allclose(records[0].pose.matrix(), np.eye(4))


class TestPositivesFor:
    def test_threshold_and_order(self):
        q = rec("q", [0, 0, 0])
        db = [rec("far", [9, 0, 0]), rec("mid", [0.4, 0, 0]),
              rec("near", [0.1, 0, 0])]
        assert positives_for(q, db, 0.5) == ["near", "mid"]

    def test_none_within(self):
        q = rec("q", [0, 0, 0])
        db = [rec("a", [2, 0, 0])]
        assert positives_for(q, db, 0.5) == []

    def test_empty_database(self):
        assert positives_for(rec("q", [0, 0, 0]), [], 1.0) == []

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        db = [rec(f"r{i}", rng.uniform(-5, 5, 3)) for i in range(1000)]
        q = rec("q", rng.uniform(-5, 5, 3))
        tau = 2.0
        got = positives_for(q, db, tau)
        expected = sorted(
            (np.linalg.norm(r.pose.translation - q.pose.translation), r.id)
            for r in db
            if np.linalg.norm(r.pose.translation - q.pose.translation) <= tau)
        assert got == [rid for _, rid in expected]


class TestOrganize:
    def test_real_query_synth_db_counts(self):
        real = [rec(f"r{i}", [i, 0, 0]) for i in range(10)]
        synth = [rec(f"s{i}", [i, 1, 0], synthetic=True) for i in range(30)]
        view = organize(real, synth, "real_query_synth_db", tau_pos=1.0)
        assert len(view.queries) == 10 and len(view.database) == 30
        assert all(not q.is_synthetic for q in view.queries)
        assert all(d.is_synthetic for d in view.database)

    def test_regular_counts(self):
        real = ([rec(f"d{i}", [i, 0, 0], split="train") for i in range(6)]
                + [rec(f"q{i}", [i, 1, 0], split="val") for i in range(4)])
        synth = [rec(f"s{i}", [i, 2, 0], synthetic=True) for i in range(30)]
        view = organize(real, synth, "regular", tau_pos=1.0)
        assert len(view.database) == 36 and len(view.queries) == 4

    def test_empty_synthetic_rejected(self):
        real = [rec("r0", [0, 0, 0])]
        with pytest.raises(ConfigurationError, match="augmentation"):
            organize(real, [], "real_query_synth_db", tau_pos=1.0)


class TestInsertSynthetic:
    def make_store(self, tmp_path, with_epoch1=True):
        records = [rec("r0", [0, 0, 0])]
        if with_epoch1:
            records += [rec(f"s/{i}", [i, 0, 0], synthetic=True, epoch=1)
                        for i in range(3)]
        return RecordStore("s", records, tmp_path / "synth")

    def test_keep_all(self, tmp_path):
        store = self.make_store(tmp_path)
        n = insert_synthetic(store, [FakeResult([0, 0, i]) for i in range(3)],
                             epoch=2, retention="keep_all")
        assert n == 3
        assert len(store.synthetic_records()) == 6

    def test_current_epoch_only(self, tmp_path):
        store = self.make_store(tmp_path)
        insert_synthetic(store, [FakeResult([0, 0, i]) for i in range(3)],
                         epoch=2, retention="current_epoch_only")
        synth = store.synthetic_records()
        assert len(synth) == 3
        assert all(r.epoch_added == 2 for r in synth)

    def test_empty_results(self, tmp_path):
        store = self.make_store(tmp_path)
        assert insert_synthetic(store, [], epoch=2) == 0
        assert len(store) == 4

    def test_id_scheme_and_files(self, tmp_path):
        store = self.make_store(tmp_path, with_epoch1=False)
        insert_synthetic(store, [FakeResult([0, 0, 0])], epoch=5)
        (record,) = store.synthetic_records()
        assert record.id == "s/synth/5/0"
        assert record.epoch_added == 5
        from pathlib import Path
        assert Path(record.image_path).exists()


class TestMineTriplets:
    def make_view(self):
        queries = [rec("q0", [0, 0, 0], split="val")]
        db = [rec("p1", [0.1, 0, 0], synthetic=True),
              rec("p2", [0.3, 0, 0], synthetic=True),
              rec("n1", [5, 0, 0], synthetic=True),
              rec("n2", [6, 0, 0], synthetic=True),
              rec("n3", [7, 0, 0], synthetic=True)]
        return DatasetView(queries, db, positive_threshold=0.5)

    def test_nearest_positive(self):
        triplets, skipped = mine_triplets(self.make_view(), 2, tau_neg=1.0, seed=0)
        assert skipped == 0
        assert triplets[0].positive == "p1"

    def test_deterministic_under_seed(self):
        a, _ = mine_triplets(self.make_view(), 2, tau_neg=1.0, seed=7)
        b, _ = mine_triplets(self.make_view(), 2, tau_neg=1.0, seed=7)
        assert a == b

    def test_limited_negatives(self):
        queries = [rec("q0", [0, 0, 0], split="val")]
        db = [rec("p", [0.1, 0, 0], synthetic=True),
              rec("n", [5, 0, 0], synthetic=True)]
        view = DatasetView(queries, db, positive_threshold=0.5)
        triplets, _ = mine_triplets(view, 5, tau_neg=1.0, seed=0)
        assert len(triplets[0].negatives) == 1

    def test_skip_statistic(self):
        queries = [rec("q0", [0, 0, 0], split="val"),
                   rec("q1", [50, 0, 0], split="val")]
        db = [rec("p", [0.1, 0, 0], synthetic=True),
              rec("n", [5, 0, 0], synthetic=True)]
        view = DatasetView(queries, db, positive_threshold=0.5)
        triplets, skipped = mine_triplets(view, 1, tau_neg=1.0, seed=0)
        assert len(triplets) == 1 and skipped == 1

    def test_distance_invariants(self):
        rng = np.random.default_rng(1)
        queries = [rec(f"q{i}", rng.uniform(-5, 5, 3), split="val") for i in range(20)]
        db = [rec(f"d{i}", rng.uniform(-5, 5, 3), synthetic=True) for i in range(200)]
        view = DatasetView(queries, db, positive_threshold=1.0)
        triplets, _ = mine_triplets(view, 4, tau_neg=2.0, seed=3)
        by_id = {r.id: r for r in queries + db}
        for t in triplets:
            anchor = by_id[t.anchor]
            assert anchor.pose.distance_to(by_id[t.positive].pose) <= 1.0
            for n in t.negatives:
                assert anchor.pose.distance_to(by_id[n].pose) > 2.0

    def test_tau_neg_must_exceed_tau_pos(self):
        with pytest.raises(DatasetError):
            mine_triplets(self.make_view(), 1, tau_neg=0.4, seed=0)
