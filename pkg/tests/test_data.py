import hashlib
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vninet.core_math import normalize_cloud
from vninet.data import (DB_HEADER, FRAME_BYTES, DatasetIndex, DescriptorDB, FrameRecord,
                         SyntheticConfig, gen_synthetic, load_db, load_frame, load_index,
                         positives_negatives, save_db, save_frame, write_index)
from vninet.errors import FormatError, ValidationError

SMALL_GEN = SyntheticConfig(scenes=3, frames_per_scene=3, test_scenes=2, seed=7)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def index_of(*coords):
    return DatasetIndex([FrameRecord(i, f"f{i}.bin", n, e) for i, (n, e) in enumerate(coords)])


# --- frames ----------------------------------------------------------------

def test_zero_frame(tmp_path):
    (tmp_path / "z.bin").write_bytes(bytes(FRAME_BYTES))
    pts = load_frame(tmp_path / "z.bin")
    assert pts.shape == (4096, 3) and not pts.any()


def test_frame_round_trip_is_bitwise(tmp_path, rng):
    cloud = normalize_cloud(rng.standard_normal((4096, 3)))
    save_frame(cloud, tmp_path / "c.bin")
    assert (tmp_path / "c.bin").stat().st_size == FRAME_BYTES
    assert np.array_equal(load_frame(tmp_path / "c.bin"), cloud)


def test_truncated_frame_names_sizes(tmp_path):
    (tmp_path / "t.bin").write_bytes(bytes(FRAME_BYTES - 1))
    with pytest.raises(FormatError, match="98304.*98303"):
        load_frame(tmp_path / "t.bin")


@pytest.mark.parametrize("value", [1.5, -1.002, np.nan, np.inf])
def test_frame_value_validation(tmp_path, value):
    pts = np.zeros((4096, 3))
    pts[17, 1] = value
    (tmp_path / "v.bin").write_bytes(pts.astype("<f8").tobytes())
    with pytest.raises(ValidationError):
        load_frame(tmp_path / "v.bin")


def test_frame_shape_check(tmp_path):
    with pytest.raises(ValueError):
        save_frame(np.zeros((10, 3)), tmp_path / "x.bin")


# --- index -----------------------------------------------------------------

def test_index_three_lines(tmp_path):
    (tmp_path / "i.csv").write_text("a.bin,1,2\nsub/b.bin,3.5,-4\n/abs/c.bin,0,0\n")
    idx = load_index(tmp_path / "i.csv")
    assert [r.id for r in idx.records] == [0, 1, 2]
    assert idx.records[1].path == tmp_path / "sub" / "b.bin"
    assert str(idx.records[2].path) == "/abs/c.bin"
    assert idx.coords().tolist() == [[1, 2], [3.5, -4], [0, 0]]


def test_index_header_and_comments(tmp_path):
    (tmp_path / "i.csv").write_text("file,northing,easting\n# note\n\na.bin,1,2\n")
    assert len(load_index(tmp_path / "i.csv")) == 1


@pytest.mark.parametrize("text,line", [("a.bin,1,2\nb.bin,3\n", 2), ("a.bin,x,2\n", 1),
                                       ("a.bin,1,2,3\n", 1), ("a.bin,nan,0\n", 1)])
def test_index_malformed_line_numbers(tmp_path, text, line):
    (tmp_path / "i.csv").write_text(text)
    with pytest.raises(FormatError, match=f"i.csv:{line}:"):
        load_index(tmp_path / "i.csv")


def test_index_empty_and_missing(tmp_path, caplog):
    (tmp_path / "e.csv").write_text("")
    with caplog.at_level(logging.WARNING):
        assert len(load_index(tmp_path / "e.csv")) == 0
    assert "empty" in caplog.text
    with pytest.raises(FormatError):
        load_index(tmp_path / "missing.csv")


def test_index_invariants():
    with pytest.raises(ValidationError):
        DatasetIndex([FrameRecord(0, "a", 0, 0), FrameRecord(0, "b", 1, 1)])
    with pytest.raises(ValidationError):
        DatasetIndex([], pos_radius=30.0)


def test_index_write_read_round_trip(tmp_path):
    idx = DatasetIndex([FrameRecord(0, tmp_path / "a.bin", 0.1, 1e7 / 3),
                        FrameRecord(1, tmp_path / "d" / "b.bin", -5.0, 2.0)])
    write_index(idx, tmp_path / "i.csv")
    back = load_index(tmp_path / "i.csv")
    assert back.records == idx.records


# --- positives and negatives -----------------------------------------------

def test_positives_negatives_example():
    idx = index_of((0, 0), (0, 6), (0, 30), (0, 60))
    assert positives_negatives(idx, 0) == ({1}, {3})
    assert positives_negatives(index_of((5, 5)), 0) == (set(), set())


def test_threshold_edges_are_inclusive_then_strict():
    idx = index_of((0, 0), (0, 10), (0, 50), (0, 50.000001))
    assert positives_negatives(idx, 0) == ({1}, {3})


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=12))
def test_positive_relation_symmetric_and_disjoint(coords):
    idx = index_of(*coords)
    sets = [positives_negatives(idx, i) for i in range(len(coords))]
    pos_mask, neg_mask = idx.masks()
    for i, (pos, neg) in enumerate(sets):
        assert not pos & neg and i not in pos | neg
        assert pos == set(np.flatnonzero(pos_mask[i]).tolist())
        assert neg == set(np.flatnonzero(neg_mask[i]).tolist())
        for j in pos:
            assert i in sets[j][0]


# --- synthetic data --------------------------------------------------------

def test_gen_is_deterministic(tmp_path):
    gen_synthetic(tmp_path / "a", SMALL_GEN)
    gen_synthetic(tmp_path / "b", SMALL_GEN)
    gen_synthetic(tmp_path / "c", SyntheticConfig(scenes=3, frames_per_scene=3, test_scenes=2,
                                                  seed=8))
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_gen_layout_and_labels(tmp_path):
    paths = gen_synthetic(tmp_path, SyntheticConfig(scenes=4, frames_per_scene=3,
                                                    test_scenes=2, rotate_test=True, seed=2))
    train = load_index(paths["train"])
    db, query = load_index(paths["database"]), load_index(paths["query"])
    assert (len(train), len(db), len(query)) == (12, 2, 4)
    assert (tmp_path / "gen.cfg").read_text() == SyntheticConfig(
        scenes=4, frames_per_scene=3, test_scenes=2, rotate_test=True, seed=2).to_text()
    for rec in train.records + db.records + query.records:
        load_frame(rec.path)
    # brute force: same scene <=> positive, different scene <=> negative
    scene = [r.path.name.split("_")[0] for r in train.records]
    pos, neg = train.masks()
    for i in range(12):
        for j in range(12):
            if i != j:
                assert pos[i, j] == (scene[i] == scene[j])
                assert neg[i, j] == (scene[i] != scene[j])
    both = DatasetIndex(db.records + [FrameRecord(r.id + 2, r.path, r.northing, r.easting)
                                      for r in query.records])
    d = both.planar_distances()
    test_scene = [r.path.name.split("_")[0] for r in both.records]
    for i in range(6):
        for j in range(6):
            assert (d[i, j] <= 25.0) == (test_scene[i] == test_scene[j])


def test_gen_frames_share_point_order(tmp_path):
    paths = gen_synthetic(tmp_path, SMALL_GEN)
    recs = load_index(paths["train"]).records
    a, b, other = load_frame(recs[0].path), load_frame(recs[1].path), load_frame(recs[3].path)
    same = np.linalg.norm(a - b, axis=1)
    diff = np.linalg.norm(a - other, axis=1)
    assert np.median(same) < 0.1 < np.median(diff)


def test_gen_rejects_unsafe_layout(tmp_path):
    with pytest.raises(ValueError):
        gen_synthetic(tmp_path, SyntheticConfig(scene_spacing=50.0))
    with pytest.raises(ValueError):
        gen_synthetic(tmp_path, SyntheticConfig(frame_spread=6.0))


# --- descriptor databases --------------------------------------------------

def test_db_round_trip(tmp_path, rng):
    db = DescriptorDB(np.array([3, 0, 7]), rng.standard_normal((3, 2)) * 1e5,
                      rng.standard_normal((3, 5)).astype(np.float32))
    save_db(db, tmp_path / "d.vndb")
    back = load_db(tmp_path / "d.vndb")
    assert np.array_equal(back.ids, db.ids) and np.array_equal(back.coords, db.coords)
    assert np.array_equal(back.descriptors, db.descriptors)
    assert [e[:3] for e in back.entries()] == [e[:3] for e in db.entries()]
    assert (tmp_path / "d.vndb").stat().st_size == 12 + 3 * (4 + 16 + 20)


def test_db_empty(tmp_path):
    save_db(DescriptorDB(), tmp_path / "e.vndb")
    raw = (tmp_path / "e.vndb").read_bytes()
    assert len(raw) == 12 == DB_HEADER.size
    assert len(load_db(tmp_path / "e.vndb")) == 0


def test_db_errors(tmp_path, rng):
    db = DescriptorDB(np.arange(2), np.zeros((2, 2)), np.ones((2, 3), dtype=np.float32))
    save_db(db, tmp_path / "d.vndb")
    raw = (tmp_path / "d.vndb").read_bytes()
    cases = {"magic": b"VNDX" + raw[4:], "version": raw[:4] + b"\x02\x00" + raw[6:],
             "expected": raw[:-1], "header": raw[:5]}
    for word, data in cases.items():
        (tmp_path / "bad.vndb").write_bytes(data)
        with pytest.raises(FormatError, match=word if word != "header" else "truncated"):
            load_db(tmp_path / "bad.vndb")
    with pytest.raises(ValueError):
        DescriptorDB(np.array([1, 1]), np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        DescriptorDB(np.array([1, 2]), np.zeros((3, 2)), np.zeros((2, 3)))
