import numpy as np
import pytest
import torch

from umts.backbone import BackboneConfig, build_backbone
from umts.data import anchored_group
from umts.distillation import DistillHeads
from umts.evaluation import (distance_matrix, dump_uncertainty, evaluate, extract_features,
                             write_uncertainty_table)
from umts.evaluation import metrics

from oracles import ap_cmc_oracle


def random_instance(rng, nq=None, ng=None, num_ids=4, num_cams=3, tie_prone=False):
    nq = nq or int(rng.integers(1, 7))
    ng = ng or int(rng.integers(1, 11))
    if tie_prone:
        dists = rng.integers(0, 4, size=(nq, ng)).astype(float)
    else:
        dists = rng.random((nq, ng))
    return (dists, rng.integers(0, num_ids, nq), rng.integers(0, num_cams, nq),
            rng.integers(0, num_ids, ng), rng.integers(0, num_cams, ng))


class TestDistanceMatrix:
    def test_equal_rows_zero(self, rng):
        G = rng.normal(size=(5, 8))
        Q = G[[2, 4]]
        d = distance_matrix(Q, G)
        assert d[0, 2] == 0.0 and d[1, 4] == 0.0

    def test_orthonormal(self):
        E = np.eye(4)
        d = distance_matrix(E, E)
        off = d[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, np.sqrt(2), atol=1e-12)

    def test_matches_loop(self, rng):
        Q, G = rng.normal(size=(6, 5)), rng.normal(size=(9, 5))
        d = distance_matrix(Q, G)
        for i in range(6):
            for j in range(9):
                assert abs(d[i, j] - sum((Q[i] - G[j]) ** 2) ** 0.5) < 1e-5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


@pytest.mark.parametrize("backend", sorted(metrics.BACKENDS))
class TestEvaluate:
    def test_hand_ap(self, backend):
        # relevant items at sorted ranks 1 and 3
        res = evaluate(np.array([[0.1, 0.5, 0.9]]), [7], [0], [7, 1, 7], [1, 1, 2], 3, backend)
        assert abs(res.map - 5 / 6) < 1e-12
        assert res.cmc.tolist() == [1.0, 1.0, 1.0]

    def test_same_camera_excluded(self, backend):
        # nearest item shares id and camera, so it is ignored
        res = evaluate(np.array([[0.0, 0.5, 0.9]]), [3], [1], [3, 2, 3], [1, 0, 0], 3, backend)
        assert res.cmc.tolist() == [0.0, 1.0, 1.0]
        assert abs(res.map - 0.5) < 1e-12

    def test_query_without_valid_match_is_excluded(self, backend):
        d = np.array([[0.2, 0.4], [0.3, 0.1]])
        res = evaluate(d, [0, 1], [0, 0], [0, 1], [0, 1], 2, backend)
        assert res.num_valid_queries == 1 and res.num_excluded_queries == 1
        assert res.map == 1.0

    def test_random_against_oracle(self, backend):
        rng = np.random.default_rng(11)
        for trial in range(200):
            inst = random_instance(rng, tie_prone=trial % 2 == 1)
            res = evaluate(*inst, max_rank=10, backend=backend)
            cmc, mAP, excluded = ap_cmc_oracle(*[a.tolist() for a in inst], 10)
            assert abs(res.map - mAP) <= 1e-9
            np.testing.assert_allclose(res.cmc, cmc, atol=1e-9)
            assert res.num_excluded_queries == excluded

    def test_gallery_permutation_invariance(self, backend):
        rng = np.random.default_rng(5)
        for _ in range(50):
            d, qi, qc, gi, gc = random_instance(rng, 4, 10)
            perm = rng.permutation(10)
            a = evaluate(d, qi, qc, gi, gc, 10, backend)
            b = evaluate(d[:, perm], qi, qc, gi[perm], gc[perm], 10, backend)
            assert abs(a.map - b.map) < 1e-12
            np.testing.assert_allclose(a.cmc, b.cmc)

    def test_far_irrelevant_item_changes_nothing(self, backend):
        rng = np.random.default_rng(6)
        for _ in range(50):
            d, qi, qc, gi, gc = random_instance(rng, 4, 8)
            a = evaluate(d, qi, qc, gi, gc, 8, backend)
            d2 = np.hstack([d, np.full((4, 1), d.max() + 1.0)])
            b = evaluate(d2, qi, qc, np.append(gi, 99), np.append(gc, 0), 8, backend)
            assert a.map == b.map and a.num_valid_queries == b.num_valid_queries
            np.testing.assert_array_equal(a.cmc, b.cmc)

    def test_metric_ranges(self, backend):
        rng = np.random.default_rng(8)
        for _ in range(50):
            res = evaluate(*random_instance(rng), max_rank=12, backend=backend)
            assert np.all(np.diff(res.cmc) >= 0)
            assert 0.0 <= res.map <= 1.0 and res.cmc[-1] <= 1.0

    def test_shape_mismatch(self, backend):
        with pytest.raises(ValueError):
            evaluate(np.zeros((2, 3)), [0, 1], [0, 0], [0, 1], [0, 0], 3, backend)


def test_backends_agree():
    if "cython" not in metrics.BACKENDS:
        pytest.skip("compiled ranking kernel not built")
    rng = np.random.default_rng(9)
    for _ in range(20):
        inst = random_instance(rng, 30, 80, num_ids=10)
        a = evaluate(*inst, 20, "python")
        b = evaluate(*inst, 20, "cython")
        assert abs(a.map - b.map) < 1e-12
        np.testing.assert_array_equal(a.cmc, b.cmc)


def small_model(channels=3, seed=0):
    cfg = BackboneConfig(channels, [8, 16, 16, 32], 24, 32, 16, num_classes=5)
    return build_backbone(cfg, seed)


class TestExtractFeatures:
    def test_duplicates_identical(self, rng):
        model = small_model()
        im = rng.random((1, 32, 16, 3), dtype=np.float32)
        f = extract_features(model, np.concatenate([im, im]))
        np.testing.assert_array_equal(f[0], f[1])
        assert f.shape == (2, 24)

    def test_batch_independent(self, rng):
        model = small_model()
        ims = rng.random((7, 32, 16, 3), dtype=np.float32)
        many = extract_features(model, ims)
        for i in range(7):
            one = extract_features(model, ims[i:i + 1])
            np.testing.assert_allclose(one[0], many[i], rtol=1e-5, atol=1e-6)

    def test_restores_training_mode(self, rng):
        model = small_model().train()
        extract_features(model, rng.random((2, 32, 16, 3), dtype=np.float32))
        assert model.training

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            extract_features(small_model(), np.zeros((2, 32, 16, 6), np.float32))


class TestDumpUncertainty:
    def setup_method(self):
        self.student = small_model(3, 1)
        self.teacher = small_model(12, 2)
        self.heads = DistillHeads(self.student.config.stage_dims(), (4, 4, 4, 4, 4))
        self.heads.reset_parameters(3)

    def groups(self, dataset):
        rng = np.random.default_rng(0)
        idx = dataset.split_indices("query")[:4]
        return [anchored_group(dataset, int(i), 4, rng, ("query", "gallery")) for i in idx]

    def test_zero_weights_give_unit_variance(self, tiny_dataset):
        for u in self.heads.uncertainty.values():
            torch.nn.init.zeros_(u.fc.weight)
        rows = dump_uncertainty(self.teacher, self.student, self.heads, self.groups(tiny_dataset))
        assert len(rows) == 4 * 4 * 5
        assert all(r.sigma2 == 1.0 and r.upsilon == 0.0 for r in rows)

    def test_variance_at_least_one_and_deterministic(self, tiny_dataset, tmp_path):
        for u in self.heads.uncertainty.values():
            torch.nn.init.normal_(u.fc.weight, std=1.0)
        g = self.groups(tiny_dataset)
        rows = dump_uncertainty(self.teacher, self.student, self.heads, g, tiny_dataset.occluded)
        again = dump_uncertainty(self.teacher, self.student, self.heads, g, tiny_dataset.occluded)
        assert rows == again
        assert all(r.sigma2 >= 1.0 for r in rows)
        path = tmp_path / "u.tsv"
        write_uncertainty_table(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0].split("\t")[:5] == ["identity", "shot", "stage", "upsilon", "sigma2"]
        assert len(lines) == len(rows) + 1

    def test_head_mismatch(self, tiny_dataset):
        heads = DistillHeads([8, 16, 16, 32, 48], (4, 4, 4, 4, 4))
        with pytest.raises(ValueError, match="stage 5"):
            dump_uncertainty(self.teacher, self.student, heads, self.groups(tiny_dataset))
