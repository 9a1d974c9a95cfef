import json

import numpy as np
import pytest

from confadv import dataforge as D
from confadv import imgops


SMALL = dict(patch_size=16, splits={"train": 60, "val": 20, "test": 20}, extent=96, per_image_cap=20)


def test_synth_corpus_deterministic_and_on_grid():
    a = D.synth_corpus(3, 4, 64, "A")
    b = D.synth_corpus(3, 4, 64, "A")
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.image.min() >= 0 and x.image.max() <= 1
        assert imgops.on_grid8(x.image)
    assert [s.source_id for s in a] == [0, 1, 2, 3]
    assert all(s.origin == "synthetic" for s in a)


def test_styles_differ():
    a = D.synth_corpus(5, 3, 64, "A")
    b = D.synth_corpus(5, 3, 64, "B")
    for x, y in zip(a, b):
        assert (x.image != y.image).mean() > 0.5


def test_patch_offsets_non_overlapping():
    rng = np.random.default_rng(0)
    offs = D.patch_offsets((100, 90), 16, 100, rng)
    assert len(offs) == (100 // 16) * (90 // 16)
    mask = np.zeros((100, 90), int)
    for y, x in offs:
        assert y + 16 <= 100 and x + 16 <= 90
        mask[y:y + 16, x:x + 16] += 1
    assert mask.max() == 1


def test_build_dataset_counts_and_disjoint():
    m = D.Manifest(**SMALL, seed=4)
    ds = D.generate(m)
    for split, need in m.splits.items():
        sp = ds.splits[split]
        assert (sp.labels == 0).sum() == need and (sp.labels == 1).sum() == need
        assert sp.patches.shape[1:] == (16, 16)
    D.check_disjoint(ds)
    sets = [set(ds.splits[s].source_ids.tolist()) for s in D.SPLITS]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])


@pytest.mark.parametrize("seed", range(5))
def test_disjoint_for_any_seed(seed):
    D.check_disjoint(D.generate(D.Manifest(**SMALL, seed=seed)))


def test_paired_patches_are_manipulated_versions():
    m = D.Manifest(**SMALL, seed=2)
    corpus = D.synth_corpus(2, D.required_images(m), m.extent, "A")
    ds = D.build_dataset(corpus, m)
    by_id = {s.source_id: s.image for s in corpus}
    sp = ds.splits["train"]
    pristine = sp.labels == 0
    for i in np.flatnonzero(pristine)[:10]:
        sid, idx = sp.source_ids[i], sp.patch_idx[i]
        j = np.flatnonzero(~pristine & (sp.source_ids == sid) & (sp.patch_idx == idx))[0]
        full = by_id[sid]
        med = imgops.median_filter(full, 5)
        # locate the pristine patch in the source and check the pair shares the offset
        hits = [(y, x) for y in range(full.shape[0] - 15) for x in range(full.shape[1] - 15)
                if np.array_equal(full[y:y + 16, x:x + 16], sp.patches[i])]
        assert any(np.array_equal(med[y:y + 16, x:x + 16], sp.patches[j]) for y, x in hits)


def test_constant_corpus_median_is_degenerate():
    corpus = [D.SourceImage(np.full((64, 64), 0.5, np.float32), i, "synthetic") for i in range(6)]
    m = D.Manifest(patch_size=16, splits={"train": 16, "val": 4, "test": 4}, extent=64)
    ds = D.build_dataset(corpus, m)
    sp = ds.splits["train"]
    np.testing.assert_array_equal(sp.patches[sp.labels == 0], sp.patches[sp.labels == 1])
    assert ds.degenerate and ds.manifest_json()["degenerate"]


def test_per_image_cap_exact():
    corpus = D.synth_corpus(0, 2, 352, "A")
    m = D.Manifest(patch_size=32, splits={"train": 200, "val": 0, "test": 0}, per_image_cap=100, extent=352)
    ds = D.build_dataset(corpus, m)
    sp = ds.splits["train"]
    for sid in np.unique(sp.source_ids):
        for label in (0, 1):
            assert ((sp.source_ids == sid) & (sp.labels == label)).sum() == 100


def test_resize_patches_fit_resized_image():
    corpus = D.synth_corpus(1, 3, 100, "A")
    m = D.Manifest(patch_size=16, splits={"train": 40, "val": 0, "test": 0}, extent=100,
                   manipulation={"kind": "resize", "factor": 0.8})
    ds = D.build_dataset(corpus, m)
    resized = {s.source_id: D.manipulate(s.image, m.manipulation) for s in corpus}
    sp = ds.splits["train"]
    for i in np.flatnonzero(sp.labels == 1)[:8]:
        img = resized[sp.source_ids[i]]
        assert img.shape == (80, 80)
        found = any(np.array_equal(img[y:y + 16, x:x + 16], sp.patches[i])
                    for y in range(65) for x in range(65))
        assert found


def test_insufficient_corpus():
    corpus = D.synth_corpus(0, 1, 64, "A")
    with pytest.raises(D.DatasetError, match="exhausted"):
        D.build_dataset(corpus, D.Manifest(patch_size=16, splits={"train": 100, "val": 10, "test": 10}))


def test_write_read_round_trip_and_digest(tmp_path):
    m = D.Manifest(**SMALL, seed=9)
    ds = D.generate(m)
    D.write_dataset(ds, tmp_path / "a")
    D.write_dataset(D.generate(m), tmp_path / "b")
    assert D.dataset_digest(tmp_path / "a") == D.dataset_digest(tmp_path / "b")
    back = D.read_dataset(tmp_path / "a")
    for s in D.SPLITS:
        np.testing.assert_array_equal(back.splits[s].patches, ds.splits[s].patches)
        np.testing.assert_array_equal(back.splits[s].labels, ds.splits[s].labels)
    meta = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for key in ("patch_size", "manipulation", "seed", "splits", "style"):
        assert key in meta
    assert (tmp_path / "a" / "train" / "1").is_dir()


def test_load_corpus(tmp_path, caplog):
    assert D.load_corpus(tmp_path) == []
    assert "empty" in caplog.text
    rng = np.random.default_rng(0)
    for name in ("c.pgm", "a.pgm", "b.pgm"):
        imgops.save_pgm((rng.integers(0, 256, (20, 20)) / 255).astype(np.float32), tmp_path / name)
    corpus = D.load_corpus(tmp_path)
    assert [s.source_id for s in corpus] == [0, 1, 2]
    np.testing.assert_array_equal(corpus[0].image, imgops.load_pgm(tmp_path / "a.pgm"))
    (tmp_path / "bad.pgm").write_bytes(b"P5 2 2 255\n\x00")
    with pytest.raises(D.DatasetError, match="bad.pgm"):
        D.load_corpus(tmp_path)
