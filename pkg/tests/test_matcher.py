import numpy as np
import pytest

from siamzero import nnkernel as nk
from siamzero.matcher import (
    TemplateMatrix,
    build_template_matrix,
    classify,
    classify_direct,
    classify_restricted,
    score_matrix,
)
from siamzero.siamese import SimilarityHead, build_model, embed, train_step


@pytest.fixture(scope="module")
def templates():
    return np.random.default_rng(5).random((3, 64, 64)).astype(np.float32)


class TestTemplateMatrix:
    def test_single(self, spec, fresh_params, templates):
        F = build_template_matrix(fresh_params, templates[:1], [4], spec)
        assert F.features.shape == (1, 128)
        assert F.class_ids.tolist() == [4]

    def test_deterministic_and_rows_standalone(self, spec, fresh_params, templates):
        F1 = build_template_matrix(fresh_params, templates, [2, 0, 1], spec)
        F2 = build_template_matrix(fresh_params, templates, [2, 0, 1], spec)
        assert F1.features.tobytes() == F2.features.tobytes()
        assert F1.class_ids.tolist() == [0, 1, 2]
        for row, k in enumerate([1, 2, 0]):
            np.testing.assert_array_equal(F1.features[row], embed(fresh_params, templates[k][None], "infer", spec)[0])

    def test_duplicate_class(self, spec, fresh_params, templates):
        with pytest.raises(ValueError, match="duplicate"):
            build_template_matrix(fresh_params, templates[:2], [1, 1], spec)

    def test_immutable(self, spec, fresh_params, templates):
        F = build_template_matrix(fresh_params, templates, [0, 1, 2], spec)
        with pytest.raises(ValueError):
            F.features[0, 0] = 1.0


class TestClassify:
    def test_single_class(self, rng):
        F = TemplateMatrix(rng.standard_normal((1, 128)), [7])
        head = SimilarityHead(rng.standard_normal(128).astype(np.float32), 0.0)
        assert classify(rng.standard_normal(128), F, head)[0] == 7

    def test_exact_row_wins_under_negative_head(self, rng):
        F = TemplateMatrix(rng.standard_normal((5, 128)), [0, 1, 2, 3, 4])
        head = SimilarityHead(-np.ones(128, np.float32), 0.0)
        for k in range(5):
            cls, prob = classify(F.features[k], F, head)
            assert cls == k and prob == 0.5

    def test_ties_go_to_lowest_id(self, rng):
        row = rng.standard_normal(128)
        F = TemplateMatrix(np.stack([row, row, row + 5]), [9, 3, 4])
        head = SimilarityHead(-np.ones(128, np.float32), 0.0)
        assert classify(row, F, head)[0] == 3

    def test_logit_and_probability_argmax_agree(self, rng):
        F = TemplateMatrix(rng.standard_normal((6, 128)), np.arange(6))
        head = SimilarityHead((rng.standard_normal(128) * 0.05).astype(np.float32), 0.1)
        for q in rng.standard_normal((100, 128)).astype(np.float32):
            logits = score_matrix(q, F, head)[0]
            probs = nk.sigmoid(logits)
            assert classify(q, F, head)[0] == F.class_ids[np.argmax(logits)] == F.class_ids[np.argmax(probs)]

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            TemplateMatrix(np.zeros((0, 128), np.float32), [])


class TestRestricted:
    def test_full_set_equals_classify(self, rng):
        F = TemplateMatrix(rng.standard_normal((6, 128)), np.arange(6))
        head = SimilarityHead(-np.abs(rng.standard_normal(128)).astype(np.float32), 0.3)
        for q in rng.standard_normal((20, 128)):
            assert classify_restricted(q, F, head, range(6)) == classify(q, F, head)

    def test_singleton(self, rng):
        F = TemplateMatrix(rng.standard_normal((6, 128)), np.arange(6))
        head = SimilarityHead(-np.ones(128, np.float32), 0.0)
        assert all(classify_restricted(q, F, head, {4})[0] == 4 for q in rng.standard_normal((10, 128)))

    def test_superset_monotone(self, rng):
        F = TemplateMatrix(rng.standard_normal((8, 128)), np.arange(8))
        head = SimilarityHead(-np.abs(rng.standard_normal(128)).astype(np.float32), 0.0)
        for q in rng.standard_normal((50, 128)):
            full = classify(q, F, head)[0]
            subset = {full, 1, 2}
            assert classify_restricted(q, F, head, subset)[0] == full

    def test_errors(self, rng):
        F = TemplateMatrix(rng.standard_normal((2, 128)), [0, 1])
        head = SimilarityHead(np.zeros(128, np.float32), 0.0)
        with pytest.raises(ValueError, match="empty"):
            classify_restricted(F.features[0], F, head, [])
        with pytest.raises(ValueError, match="without templates"):
            classify_restricted(F.features[0], F, head, [0, 5])


class TestDirect:
    def _check(self, params, spec, templates, ids, queries):
        F = build_template_matrix(params, templates, ids, spec)
        head = SimilarityHead.from_params(params)
        for q in queries:
            cached = classify(embed(params, q[None], "infer", spec)[0], F, head)
            direct = classify_direct(q, templates, ids, params, head, spec)
            assert cached[0] == direct[0]
            assert cached[1] == direct[1]

    def test_seeded_model(self, spec, templates, rng):
        params = build_model(spec, 8)
        params["head.w"] = (-np.abs(rng.standard_normal(128)) * 0.02).astype(np.float32)
        self._check(params, spec, templates, [0, 1, 2], rng.random((10, 64, 64)).astype(np.float32))

    def test_single_template(self, spec, fresh_params, templates, rng):
        self._check(fresh_params, spec, templates[:1], [0], rng.random((2, 64, 64)).astype(np.float32))

    def test_after_training_step(self, spec, templates, rng):
        params = build_model(spec, 8)
        train_step(params, spec, templates, templates[::-1], np.array([1.0, 1.0, 0.0]), nk.SgdState(0.1))
        self._check(params, spec, templates, [0, 1, 2], rng.random((5, 64, 64)).astype(np.float32))
