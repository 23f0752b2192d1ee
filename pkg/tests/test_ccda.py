from __future__ import annotations

import numpy as np
import pytest

from hoseg import ccda, dataio, toy
from hoseg.dataio import Sample
from hoseg.maskcore import LabelMap


def _fg(rng, size=12):
    c = np.zeros((size, size), np.uint8)
    c[2:6, 2:6] = 1
    c[6:9, 4:8] = 3
    return Sample("fg", rng.integers(0, 256, (size, size, 3), dtype=np.uint8), LabelMap(c))


# --- inpainting ------------------------------------------------------------------

def test_mean_fill_full_frame_border_mean():
    img = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    out = ccda.make_query_background(img, LabelMap(np.ones((4, 4), np.uint8)), ccda.mean_fill)
    # border pixels are all but the central 2x2; their per-channel means by hand
    border = [(y, x) for y in range(4) for x in range(4) if y in (0, 3) or x in (0, 3)]
    expected = np.rint(np.mean([img[y, x] for y, x in border], axis=0))
    assert (out == expected.astype(np.uint8)).all()


def test_query_background_unchanged_without_labels(rng):
    img = rng.integers(0, 256, (5, 6, 3), dtype=np.uint8)
    out = ccda.make_query_background(img, LabelMap.empty(5, 6), ccda.DiffusionInpainter())
    assert np.array_equal(out, img)


def test_inpainting_only_changes_masked_pixels(rng):
    s = _fg(rng)
    for inp in (ccda.mean_fill, ccda.DiffusionInpainter(), ccda.DiffusionInpainter(sweeps=3)):
        out = ccda.make_query_background(s.image, s.labels, inp)
        mask = ccda.removal_mask(s.labels)
        assert out.shape == s.image.shape
        assert np.array_equal(out[~mask], s.image[~mask])


def test_diffusion_fill_of_constant_surround_is_constant():
    img = np.full((10, 10, 3), 77, np.uint8)
    mask = np.zeros((10, 10), bool)
    mask[3:7, 3:7] = True
    img[mask] = 0
    assert (ccda.DiffusionInpainter()(img, mask) == 77).all()


def test_bad_inpainter_names_item(rng):
    s = _fg(rng)
    with pytest.raises(ccda.CCDAError, match="fg"):
        ccda.build_background_pool([], ccda.no_hands, lambda im, m: im[:2], [s], ccda.HistogramEmbedder())


# --- embedding and pool ----------------------------------------------------------

def test_embedder_dim_and_norm(rng):
    e = ccda.HistogramEmbedder()
    f = e(rng.integers(0, 256, (20, 17, 3), dtype=np.uint8))
    assert f.shape == (e.dim,) == (640,)
    assert np.linalg.norm(f) == pytest.approx(1.0)


def test_pool_construction_examples(rng):
    e = ccda.HistogramEmbedder()
    frames = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8) for _ in range(3)]
    reject_second = lambda im: im is frames[1]  # noqa: E731
    pool = ccda.build_background_pool(frames, reject_second, ccda.mean_fill, None, e)
    assert len(pool) == 2 and pool.provenance == [ccda.CLASSIFIED_CLEAN] * 2
    s = _fg(rng)
    pool = ccda.build_background_pool([], ccda.no_hands, ccda.mean_fill, [s], e)
    assert len(pool) == 1 and pool.provenance == [ccda.INPAINTED_CLEAN]
    mask = ccda.removal_mask(s.labels)
    assert np.array_equal(pool.images[0][~mask], s.image[~mask])
    empty = ccda.build_background_pool([], ccda.no_hands, ccda.mean_fill, None, e)
    assert len(empty) == 0


def test_pool_save_load(tmp_path, rng):
    e = ccda.HistogramEmbedder()
    frames = [(f"f{i}", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)) for i in range(3)]
    pool = ccda.build_background_pool(frames, ccda.no_hands, ccda.mean_fill, None, e)
    back = ccda.BackgroundPool.load(pool.save(tmp_path / "p.npz"))
    assert back.source_ids == ["f0", "f1", "f2"] and np.array_equal(back.features, pool.features)
    assert all(np.array_equal(a, b) for a, b in zip(back.images, pool.images))
    with pytest.raises(ValueError):
        pool.add(frames[0][1], "x", np.ones(3), ccda.CLASSIFIED_CLEAN)


def test_color_filter_and_handles():
    f = ccda.resolve_handle("hand_filter", "color-fraction", colors=[(255, 0, 0)], min_fraction=0.5)
    img = np.zeros((2, 2, 3), np.uint8)
    img[0] = (250, 5, 5)
    assert f(img)
    img[0] = 0
    assert not f(img)
    assert isinstance(ccda.resolve_handle("inpainter", "hoseg.ccda:DiffusionInpainter"), ccda.DiffusionInpainter)
    with pytest.raises(ValueError):
        ccda.resolve_handle("embedder", "nope")


# --- retrieval ---------------------------------------------------------------------

def _feature_pool(feats):
    n = len(feats)
    return ccda.BackgroundPool([np.zeros((2, 2, 3), np.uint8)] * n, [str(i) for i in range(n)],
                               np.asarray(feats, float), ["x"] * n)


def test_retrieval_examples():
    pool = _feature_pool([[1, 0, 0], [0, 1, 0], [0.6, 0.8, 0]])
    assert ccda.retrieve_topk(pool, [0.6, 0.8, 0])[0] == 2
    assert ccda.cosine_similarities(pool, [0.6, 0.8, 0])[2] == pytest.approx(1.0)
    assert ccda.retrieve_topk(pool, [0, 0, 1], k=10) == [0, 1, 2]
    assert len(ccda.retrieve_topk(pool, [1, 1, 0], k=10)) == 3
    with pytest.raises(ValueError):
        ccda.retrieve_topk(pool, [1, 0])
    with pytest.raises(ValueError):
        ccda.retrieve_topk(pool, [1, 0, 0], k=0)


# --- compositing ---------------------------------------------------------------------

def test_composite_small_patch_example():
    fg = np.full((4, 4, 3), 200, np.uint8)
    c = np.zeros((4, 4), np.uint8)
    c[1:3, 1:3] = 2
    bg = np.full((4, 4, 3), 10, np.uint8)
    rec = ccda.composite(fg, LabelMap(c), bg)
    assert (rec.image != bg).any(axis=2).sum() == 4
    assert rec.labels == LabelMap(c)


def test_composite_partition_and_resize(rng):
    s = _fg(rng)
    bg = rng.integers(0, 256, (30, 20, 3), dtype=np.uint8)
    rec = ccda.composite(s.image, s.labels, bg)
    mask = s.labels.foreground()
    assert np.array_equal(rec.image[mask], s.image[mask])
    assert rec.image.shape == s.image.shape


def test_composite_onto_own_background(rng):
    s = _fg(rng)
    clean = ccda.make_query_background(s.image, s.labels, ccda.DiffusionInpainter())
    rec = ccda.composite(s.image, s.labels, clean)
    mask = s.labels.foreground()
    assert np.array_equal(rec.image[mask], s.image[mask])
    assert np.array_equal(rec.image[~mask], clean[~mask])


def test_composite_jitter_and_feather(rng):
    s = _fg(rng, 16)
    bg = np.zeros((16, 16, 3), np.uint8)
    rec = ccda.composite(s.image, s.labels, bg, placement="jitter", seed=3)
    for k in range(1, 6):
        assert (rec.labels.classes == k).sum() == (s.labels.classes == k).sum()
    fe = ccda.composite(s.image, s.labels, bg, feather=True)
    assert not np.array_equal(fe.image, ccda.composite(s.image, s.labels, bg).image)
    with pytest.raises(ValueError):
        ccda.composite(s.image, LabelMap.empty(16, 16), bg)
    with pytest.raises(ValueError):
        ccda.composite(s.image, s.labels, bg, placement="random")


# --- augmented set ---------------------------------------------------------------------

def _setup(n_fg=2):
    data = toy.make_samples(n_fg, 0, size=16)
    e = ccda.HistogramEmbedder()
    pool = ccda.build_background_pool(toy.make_backgrounds(6, 1, size=16), ccda.no_hands,
                                      ccda.mean_fill, data, e)
    return data, pool, e


def test_augment_cycling_usage():
    data, pool, e = _setup()
    data = [s for s in data if s.labels.foreground().any()]
    res = ccda.generate_augmented_set(data, pool, e, ccda.mean_fill, k=3, n_total=5, seed=0)
    assert len(res.records) == 5
    assert sorted(res.usage.values(), reverse=True) == [3, 2]
    assert all(1 <= r.rank <= 3 for r in res.records)


def test_augment_zero_and_determinism(tmp_path):
    data, pool, e = _setup()
    res = ccda.generate_augmented_set(data, pool, e, ccda.mean_fill, n_total=0, out_root=tmp_path / "z")
    assert res.records == [] and not (tmp_path / "z").exists()
    for run in ("a", "b"):
        ccda.generate_augmented_set(data, pool, e, ccda.mean_fill, k=3, n_total=4, seed=7,
                                    out_root=tmp_path / run)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    m = dataio.open_manifest(tmp_path / "a" / ccda.AUG_DIR)
    assert len(m) == 4 and len(m.entries[0].extra) == 4
    assert dataio.validate_dataset(m).ok


def test_augment_errors():
    data, pool, e = _setup()
    with pytest.raises(ValueError):
        ccda.generate_augmented_set(data, ccda.BackgroundPool(), e, ccda.mean_fill, n_total=2)
    with pytest.raises(ValueError):
        ccda.generate_augmented_set([Sample("x", data[0].image, LabelMap.empty(16, 16))], pool, e,
                                    ccda.mean_fill, n_total=2)
