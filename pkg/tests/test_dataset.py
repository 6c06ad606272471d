import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferkit import dataset as D
from transferkit.errors import DataError, DecodeError, UsageError


def random_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3)) / 255.0


# ---------------------------------------------------------------- PPM


def test_decode_single_red_pixel():
    img = D.decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00")
    assert img.shape == (1, 1, 3)
    assert img[0, 0].tolist() == [1.0, 0.0, 0.0]


def test_decode_rejects_other_maxval():
    with pytest.raises(DecodeError, match="maxval"):
        D.decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")


def test_decode_reports_offsets():
    with pytest.raises(DecodeError) as e:
        D.decode_ppm(b"P3\n1 1\n255\n0 0 0")
    assert e.value.offset == 0
    with pytest.raises(DecodeError) as e:
        D.decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00")
    assert e.value.offset == len(b"P6\n2 1\n255\n") + 3
    with pytest.raises(DecodeError):
        D.decode_ppm(b"P6\n2")


def test_decode_skips_comments():
    img = D.decode_ppm(b"P6 # made by hand\n# another\n1 1 255\n\x00\x80\xff")
    assert img[0, 0].tolist() == [0.0, 128 / 255, 1.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.binary(min_size=432, max_size=432))
def test_ppm_round_trip(w, h, raw):
    data = f"P6\n{w} {h}\n255\n".encode() + raw[: w * h * 3]
    assert D.encode_ppm(D.decode_ppm(data)) == data


# ---------------------------------------------------------------- resize


def test_resize_same_dims_identity():
    img = np.random.default_rng(0).uniform(size=(7, 5, 3))
    assert np.abs(D.resize_bilinear(img, 5, 7) - img).max() < 1e-12


def test_resize_uniform_color():
    img = np.full((6, 9, 3), [0.2, 0.4, 0.6])
    out = D.resize_bilinear(img, 13, 4)
    assert out.shape == (4, 13, 3)
    np.testing.assert_allclose(out, np.broadcast_to([0.2, 0.4, 0.6], out.shape), rtol=0, atol=1e-15)


def test_resize_upsample_ramp():
    img = np.zeros((1, 2, 3))
    img[0, 1] = 1.0
    row = D.resize_bilinear(img, 4, 1)[0, :, 0]
    # half-pixel centers: samples at -0.25, 0.25, 0.75, 1.25 -> clamp -> 0, .25, .75, 1
    np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)
    assert np.all(np.diff(row) >= 0)


def test_resize_rejects_zero():
    with pytest.raises(UsageError):
        D.resize_bilinear(np.zeros((2, 2, 3)), 0, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20), st.integers(1, 20))
def test_resize_stays_in_range(seed, ow, oh):
    img = np.random.default_rng(seed).uniform(size=(5, 6, 3))
    out = D.resize_bilinear(img, ow, oh)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- ingestion


def make_tree(root, per_class, classes, size=4, seed=0):
    rng = np.random.default_rng(seed)
    for c in classes:
        for i in range(per_class):
            D.write_ppm(root / c / f"img{i:03d}.ppm", random_image(rng, size, size))


def test_ingest_600(tmp_path):
    make_tree(tmp_path, 120, ["e", "d", "c", "b", "a"], size=2)
    ds = D.ingest_directory(tmp_path)
    assert len(ds) == 600
    assert ds.class_names == ("a", "b", "c", "d", "e")
    assert np.bincount(ds.labels).tolist() == [120] * 5


def test_ingest_empty_root(tmp_path):
    with pytest.raises(UsageError):
        D.ingest_directory(tmp_path)


def test_ingest_is_deterministic_and_skips_bad_files(tmp_path):
    make_tree(tmp_path, 3, ["zeta", "alpha"])
    (tmp_path / "alpha" / "broken.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    (tmp_path / "alpha" / "notes.txt").write_text("ignored")
    a = D.ingest_directory(tmp_path)
    b = D.ingest_directory(tmp_path)
    assert a.skipped == ("alpha/broken.ppm",)
    assert a.ids == b.ids and a.labels.tolist() == b.labels.tolist()
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    assert a.class_names == ("alpha", "zeta")


def test_ingest_resizes(tmp_path):
    make_tree(tmp_path, 2, ["a"], size=8)
    ds = D.ingest_directory(tmp_path, image_size=5)
    assert {it.image.shape for it in ds} == {(5, 5, 3)}


def test_manifest_csv(tmp_path):
    ds = D.synth_shapes(2, 16, 0)
    D.write_dataset(ds, tmp_path)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "path,class_name,label_index"
    assert lines[1] == "circle/circle_0000.ppm,circle,0"
    assert len(lines) == 11
    back = D.ingest_directory(tmp_path)
    assert back.ids == ds.ids
    assert all(np.array_equal(x.image, y.image) for x, y in zip(back, ds))


def test_dataset_invariants():
    img = np.zeros((2, 2, 3))
    with pytest.raises(DataError):
        D.Dataset((D.LabeledImage("a", img, 0), D.LabeledImage("a", img, 0)), ("x",))
    with pytest.raises(DataError):
        D.Dataset((D.LabeledImage("a", img, 1),), ("x",))
    with pytest.raises(DataError):
        D.Dataset((), ("x", "x"))


# ---------------------------------------------------------------- split


def labeled(per_class, k):
    img = np.zeros((2, 2, 3))
    items = [D.LabeledImage(f"c{c}/i{i:03d}", img, c) for c in range(k) for i in range(per_class)]
    return D.Dataset(tuple(items), tuple(f"c{c}" for c in range(k)))


def test_split_20_per_class():
    train, test = D.stratified_split(labeled(120, 5), D.SplitSpec(1 / 6, seed=1))
    assert len(test) == 100 and len(train) == 500
    assert np.bincount(test.labels).tolist() == [20] * 5


def test_split_deterministic_and_disjoint():
    ds = labeled(30, 3)
    a = D.stratified_split(ds, D.SplitSpec(0.3, seed=5))
    b = D.stratified_split(ds, D.SplitSpec(0.3, seed=5))
    c = D.stratified_split(ds, D.SplitSpec(0.3, seed=6))
    assert a[1].ids == b[1].ids
    assert a[1].ids != c[1].ids
    assert not set(a[0].ids) & set(a[1].ids)
    assert sorted(a[0].ids + a[1].ids) == ds.ids


def test_split_two_items_half():
    train, test = D.stratified_split(labeled(2, 4), D.SplitSpec(0.5, seed=0))
    assert np.bincount(train.labels).tolist() == [1] * 4
    assert np.bincount(test.labels).tolist() == [1] * 4


def test_split_rejects_singleton_class():
    with pytest.raises(UsageError):
        D.stratified_split(labeled(1, 2), D.SplitSpec(0.5))


def test_split_keeps_groups_together():
    img = np.zeros((2, 2, 3))
    items = [
        D.LabeledImage(f"a/x{i}__{v}.ppm", img, 0) for i in range(6) for v in ("orig", "flip", "light")
    ]
    ds = D.Dataset(tuple(items), ("a",))
    train, test = D.stratified_split(ds, D.SplitSpec(0.5, seed=2), group=D.source_id)
    assert len(test) == 9
    assert not {D.source_id(i) for i in train.ids} & {D.source_id(i) for i in test.ids}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=6), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_partition_law(counts, frac, seed):
    img = np.zeros((1, 1, 3))
    items = [D.LabeledImage(f"{c}/{i}", img, c) for c, n in enumerate(counts) for i in range(n)]
    ds = D.Dataset(tuple(items), tuple(str(c) for c in range(len(counts))))
    train, test = D.stratified_split(ds, D.SplitSpec(frac, seed))
    assert sorted(train.ids + test.ids) == ds.ids
    per_test = np.bincount(test.labels, minlength=len(counts))
    for c, n in enumerate(counts):
        assert 1 <= per_test[c] <= n - 1
        assert abs(per_test[c] - frac * n) <= 1 or per_test[c] in (1, n - 1)


# ---------------------------------------------------------------- synthetic shapes


def test_synth_scale():
    ds = D.synth_shapes(120, 32, 42)
    assert len(ds) == 600
    assert ds.class_names == tuple(sorted(D.SHAPE_CLASSES))
    assert np.bincount(ds.labels).tolist() == [120] * 5
    assert {it.image.shape for it in ds} == {(32, 32, 3)}


def test_synth_deterministic():
    a, b = D.synth_shapes(4, 16, 7), D.synth_shapes(4, 16, 7)
    assert a.volumes().tobytes() == b.volumes().tobytes()
    assert D.synth_shapes(4, 16, 8).volumes().tobytes() != a.volumes().tobytes()


def test_synth_validates_arguments():
    with pytest.raises(UsageError):
        D.synth_shapes(0, 32)
    with pytest.raises(UsageError):
        D.synth_shapes(1, 15)


def test_select_classes_relabels():
    ds = D.synth_shapes(2, 16, 0).select_classes(["square", "circle"])
    assert ds.class_names == ("square", "circle")
    assert {(it.id.split("/")[0], it.label) for it in ds} == {("square", 0), ("circle", 1)}
