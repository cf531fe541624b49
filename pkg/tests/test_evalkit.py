import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radapter import checkpoint as ck
from radapter.errors import CheckpointError, DataError, ShapeError
from radapter.evalkit import (
    REPORT_HEADER,
    EvalReport,
    alpha_sweep,
    class_prototypes,
    evaluate_checkpoint,
    predict,
    recall_at_k,
)
from radapter.model import AdapterBank, DualEncoder
from radapter.numerics import SeededRng, gaussian_sample, l2_normalize_rows
from radapter.synthdata import RecordSet, TaskSpec, TaskWorld, gen_split
from radapter.trainer import TrainConfig, encoder_configs

SPEC = TaskSpec(n_classes_pretrain=16, n_classes_task=4, n_pretrain=64, n_id_train=32, n_id_test=24,
                n_ood_test=24, img_seq_len=6, txt_seq_len=8, img_vocab=16, txt_vocab=24)
CFG = TrainConfig(d=8, k=2, layers=1, embed_dim=4)


@pytest.fixture(scope="module")
def setup():
    world = TaskWorld(SPEC)
    data = {k: RecordSet(v) for k, v in gen_split(SPEC).items()}
    model = DualEncoder.init(*encoder_configs(SPEC, CFG), seed=0)
    bank = AdapterBank.attach(model, drop_p=0.2)
    rng = SeededRng(1)
    for t in ("image", "text"):
        for site, aw in bank.adapters[t].items():
            aw.w[:] = 0.3 * rng.normals(64).reshape(8, 8)
            bank.emas[t][site].shadow = 0.5 * rng.normals(64).reshape(8, 8)
    prov = {"seed": 7, "config_hash": "deadbeefdeadbeef"}
    return world, data, ck.checkpoint_from_model(model, None, prov), ck.checkpoint_from_model(model, bank, prov)


def _recall_loop(q, g, pos, k):
    hits = 0
    for i in range(q.shape[0]):
        scores = [(-float(q[i] @ g[j]), j) for j in range(g.shape[0])]
        top = [j for _, j in sorted(scores)[:k]]
        hits += any(pos[i, j] for j in top)
    return hits / q.shape[0]


class TestRecall:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 8), st.integers(1, 4))
    def test_matches_loop(self, seed, nq, ng, k):
        k = min(k, ng)
        rng = SeededRng(seed)
        q = l2_normalize_rows(gaussian_sample(rng, nq, 3))
        g = l2_normalize_rows(gaussian_sample(rng, ng, 3))
        pos = gaussian_sample(rng, nq, ng) > 0.5
        assert recall_at_k(q, g, pos, k) == _recall_loop(q, g, pos, k)

    def test_ties_break_by_index(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert recall_at_k(q, g, np.array([[True, False]]), 1) == 1.0
        assert recall_at_k(q, g, np.array([[False, True]]), 1) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_query_permutation_invariant(self, seed):
        rng = SeededRng(seed)
        q, g = l2_normalize_rows(gaussian_sample(rng, 6, 4)), l2_normalize_rows(gaussian_sample(rng, 5, 4))
        pos = gaussian_sample(rng, 6, 5) > 0.3
        perm = rng.permutation(6)
        assert recall_at_k(q[perm], g, pos[perm], 2) == recall_at_k(q, g, pos, 2)

    def test_recall_at_gallery_size_is_any_positive(self):
        q, g = np.eye(3), np.eye(3)
        pos = np.array([[1, 0, 0], [0, 0, 0], [0, 0, 1]], dtype=bool)
        assert recall_at_k(q, g, pos, 3) == pytest.approx(2 / 3)

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            recall_at_k(np.eye(3), np.eye(3), np.eye(3, dtype=bool), k)

    def test_bad_positive_shape(self):
        with pytest.raises(ShapeError):
            recall_at_k(np.eye(3), np.eye(3), np.eye(2, dtype=bool), 1)


class TestClassify:
    def test_predict_argmax_lowest_index_tie(self):
        protos = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(predict(np.array([[1.0, 0.0], [0.1, 0.9]]), protos), [0, 2])

    def test_prototypes_unit(self, setup):
        world, _, base, _ = setup
        model, _ = ck.model_from_checkpoint(base)
        p = class_prototypes(model, world, world.task_classes)
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-12)
        assert p.shape == (4, CFG.embed_dim)


class TestReport:
    def test_rows_and_csv(self, setup):
        world, data, base, _ = setup
        rep = evaluate_checkpoint(base, world, data)
        assert len(rep.rows) == 4
        lines = rep.sorted().to_csv().splitlines()
        assert lines[0] == ",".join(REPORT_HEADER)
        assert all(line.startswith("0.000000,") and line.endswith(",7,deadbeefdeadbeef") for line in lines[1:])
        assert [line.split(",")[1:3] for line in lines[1:]] == [
            ["id_test", "accuracy"], ["id_test", "recall@1"], ["ood_test", "accuracy"], ["ood_test", "recall@1"]]
        back = EvalReport.from_csv(rep.to_csv())
        for a, s, m, v, _, _ in back.rows:
            assert abs(v - rep.value(a, s, m)) <= 5e-7

    def test_accuracy_in_unit_interval(self, setup):
        world, data, base, _ = setup
        rep = evaluate_checkpoint(base, world, data, metrics=("accuracy", "recall@2"))
        assert all(0.0 <= r[3] <= 1.0 for r in rep.rows)

    def test_refuses_adapter_checkpoint(self, setup):
        world, data, _, ft = setup
        with pytest.raises(CheckpointError):
            evaluate_checkpoint(ft, world, data)

    def test_unknown_split_and_metric(self, setup):
        world, data, base, _ = setup
        with pytest.raises(DataError):
            evaluate_checkpoint(base, world, data, splits=("nope",))
        with pytest.raises(ValueError):
            evaluate_checkpoint(base, world, data, metrics=("f1",))

    def test_bad_csv_header(self):
        with pytest.raises(DataError):
            EvalReport.from_csv("a,b\n")


class TestSweep:
    def test_complete_and_sorted(self, setup):
        world, data, base, ft = setup
        rep = alpha_sweep(base, ft, [1.0, 0.0, 0.5], world, data)
        assert len(rep.rows) == 3 * 2 * 2
        assert [r[0] for r in rep.rows] == sorted(r[0] for r in rep.rows)

    def test_alpha_zero_equals_base(self, setup):
        world, data, base, ft = setup
        sweep = alpha_sweep(base, ft, [0.0], world, data)
        ref = evaluate_checkpoint(base, world, data)
        assert [r[1:4] for r in sweep.rows] == [r[1:4] for r in ref.sorted().rows]

    def test_matches_eval_of_merge(self, setup):
        world, data, base, ft = setup
        sweep = alpha_sweep(base, ft, [0.25, 0.75], world, data)
        for alpha in (0.25, 0.75):
            direct = evaluate_checkpoint(ck.merge_checkpoint(ft, alpha), world, data)
            for _, s, m, v, _, _ in direct.rows:
                assert sweep.value(alpha, s, m) == v

    def test_requires_adapters(self, setup):
        world, data, base, _ = setup
        with pytest.raises(CheckpointError):
            alpha_sweep(None, base, [0.5], world, data)

    def test_architecture_mismatch(self, setup):
        world, data, _, ft = setup
        other = DualEncoder.init(*encoder_configs(SPEC, TrainConfig(d=16, k=2, layers=1, embed_dim=4)), seed=0)
        with pytest.raises(CheckpointError):
            alpha_sweep(ck.checkpoint_from_model(other, None), ft, [0.5], world, data)
