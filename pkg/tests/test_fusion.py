import itertools

import numpy as np
import pytest

from ragncd.fusion import FusionError, fuse, fuse_dataset, image_only, mean_pool
from ragncd.retrieval import RetrievalResult, batch_retrieve
from ragncd.synth import MixtureSpec, generate_mixture

from conftest import tiny_bundle


class TestMeanPool:
    def test_identical(self):
        assert mean_pool([(1, 0), (1, 0)]).tolist() == [1.0, 0.0]

    def test_average(self):
        assert mean_pool([(1, 0), (0, 1)]).tolist() == [0.5, 0.5]

    def test_empty(self):
        with pytest.raises(FusionError, match="empty text view"):
            mean_pool([])

    def test_mismatch(self):
        with pytest.raises(FusionError, match="dimension mismatch"):
            mean_pool([(1, 0), (1, 0, 0)])


class TestFuse:
    def test_axis_vectors(self):
        assert fuse((1, 0), [(0, 2)]).vector.tolist() == [1.0, 0.0, 0.0, 1.0]

    def test_three_four(self):
        fv = fuse((3, 4), [(1, 0), (0, 1)])
        np.testing.assert_allclose(fv.vector, [0.6, 0.8, 0.70710678, 0.70710678], atol=1e-6)

    def test_clip_sized(self, rng):
        fv = fuse(rng.standard_normal(512), rng.standard_normal((3, 512)))
        assert fv.vector.shape == (1024,) and (fv.d_img, fv.d_txt) == (512, 512)
        assert np.linalg.norm(fv.vector) == pytest.approx(np.sqrt(2), abs=1e-4)

    def test_zero_inputs(self):
        with pytest.raises(ValueError):
            fuse((0, 0), [(1, 0)])
        with pytest.raises(FusionError):
            fuse((1, 0), [(0, 0)])
        with pytest.raises(FusionError, match="empty"):
            fuse((1, 0), [])

    def test_caption_order_irrelevant(self, rng):
        img, caps = rng.standard_normal(5), rng.standard_normal((4, 5))
        ref = fuse(img, caps).vector
        for perm in itertools.permutations(range(4)):
            np.testing.assert_allclose(fuse(img, caps[list(perm)]).vector, ref, rtol=0, atol=1e-15)

    def test_renormalize_joint(self):
        fv = fuse((3, 4), [(1, 0)], renormalize_joint=True)
        assert np.linalg.norm(fv.vector) == pytest.approx(1.0, abs=1e-12)


def _hits(qid, *cids):
    return RetrievalResult(qid, tuple((c, 0.0) for c in cids), len(cids))


class TestFuseDataset:
    def test_two_images_keep_labels(self):
        images = tiny_bundle([[1, 0], [0, 1]], labels=["a", None], truth=["a", "b"], prefix="i")
        corpus = tiny_bundle([[0, 3], [5, 0]], prefix="c", modality="text")
        out = fuse_dataset(images, [_hits("i0", "c0"), _hits("i1", "c1")], corpus)
        assert (out.count, out.dim, out.normalized) == (2, 4, False)
        assert out.records == images.records
        assert out.data.tolist() == [[1, 0, 0, 1], [0, 1, 1, 0]]

    def test_missing_retrieval_names_id(self):
        images = tiny_bundle([[1, 0], [0, 1]], prefix="i")
        corpus = tiny_bundle([[0, 1]], prefix="c", modality="text")
        with pytest.raises(FusionError, match="'i1'"):
            fuse_dataset(images, [_hits("i0", "c0")], corpus)

    def test_unknown_caption_names_sample(self):
        images = tiny_bundle([[1, 0]], prefix="i")
        corpus = tiny_bundle([[0, 1]], prefix="c", modality="text")
        with pytest.raises(FusionError, match="'i0'.*'zz'"):
            fuse_dataset(images, [_hits("i0", "zz")], corpus)

    def test_matches_per_sample_fuse(self):
        images, corpus, _ = generate_mixture(MixtureSpec(num_classes=4, samples_per_class=25, dim_img=8, dim_txt=8))
        rets = batch_retrieve(images, corpus, 3)
        out = fuse_dataset(images, rets, corpus)
        idx = corpus.id_index()
        for r, res in zip(images.records, rets):
            caps = [corpus.data[idx[c]].astype(np.float64) for c in res.caption_ids]
            expected = fuse(images.data[r.row].astype(np.float64), caps).vector.astype(np.float32)
            assert out.data[r.row].tobytes() == expected.tobytes()
            seg_img, seg_txt = np.linalg.norm(out.data[r.row, :8]), np.linalg.norm(out.data[r.row, 8:])
            assert abs(seg_img - 1) < 1e-4 and abs(seg_txt - 1) < 1e-4
        assert [(r.label, r.class_truth) for r in out.records] == [(r.label, r.class_truth) for r in images.records]


def test_image_only():
    out = image_only(tiny_bundle([[3, 4], [0, 2]], labels=["x", None]))
    np.testing.assert_allclose(out.data, [[0.6, 0.8], [0, 1]], atol=1e-7)
    assert out.dim == 2 and out.records[0].label == "x"
