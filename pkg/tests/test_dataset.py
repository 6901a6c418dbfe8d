from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import TABLE1_COUNTS, make_record, table1_manifest
from texfv import dataset
from texfv.dataset import COLUMNS, Manifest, Tension
from texfv.errors import BadLabelId, DuplicateImageId, EmptyClass, IoError, MissingColumn, UnparsableNumber, UnsupportedFormat

HEADER = ",".join(COLUMNS)


def _row(image_id, label, path="img.png", **kw):
    vals = dict(
        image_id=image_id, label_id=label, distance_cm=5, inclination_deg=90, azimuth_deg=45,
        scale_ppcm=128, lighting=200, tension="taut", notes="", colors="blue;white", image_path=path,
    )
    vals.update(kw)
    return ",".join(str(vals[c]) for c in COLUMNS)


def _write(tmp_path, rows, header=HEADER):
    p = tmp_path / "m.csv"
    p.write_text("\n".join([header] + rows) + "\n")
    return p


# --- labels ------------------------------------------------------------------


def test_label_names():
    assert dataset.label_name(0) == "Checked"
    assert dataset.label_name(8) == "Zigzagged"
    expected = ["Checked", "Denim", "Floral", "Knitted", "Lacelike", "None", "Polka-dotted", "Striped", "Zigzagged"]
    assert [dataset.label_name(i) for i in range(9)] == expected
    with pytest.raises(BadLabelId):
        dataset.label_name(9)
    with pytest.raises(BadLabelId):
        dataset.label_name(-1)


def test_label_bijection():
    names = {dataset.label_name(i) for i in range(9)}
    assert len(names) == 9
    assert all(dataset.label_id(dataset.label_name(i)) == i for i in range(9))


# --- parse_manifest --------------------------------------------------------------


def test_table1_totals(write_table1):
    path, _ = write_table1()
    m = dataset.parse_manifest(path)
    assert len(m) == 520
    assert m.class_counts == {0: 88, 1: 40, 2: 88, 3: 32, 4: 48, 5: 48, 6: 48, 7: 64, 8: 64}


def test_header_only(tmp_path):
    m = dataset.parse_manifest(_write(tmp_path, []))
    assert len(m) == 0
    assert set(m.class_counts.values()) == {0}


def test_bad_label_names_row(tmp_path):
    p = _write(tmp_path, [_row(1, 0), _row(2, 9)])
    with pytest.raises(BadLabelId, match="row 3"):
        dataset.parse_manifest(p)


def test_missing_column(tmp_path):
    header = HEADER.replace(",lighting", "")
    with pytest.raises(MissingColumn, match="lighting"):
        dataset.parse_manifest(_write(tmp_path, [], header=header))


def test_duplicate_id(tmp_path):
    with pytest.raises(DuplicateImageId, match="row 3"):
        dataset.parse_manifest(_write(tmp_path, [_row(4, 0), _row(4, 1)]))


def test_unparsable_number(tmp_path):
    with pytest.raises(UnparsableNumber, match="row 2"):
        dataset.parse_manifest(_write(tmp_path, [_row(1, 0, distance_cm="far")]))


@pytest.mark.parametrize("field,value", [("distance_cm", 0), ("scale_ppcm", -3), ("lighting", 256)])
def test_out_of_range_fields(tmp_path, field, value):
    with pytest.raises(UnparsableNumber):
        dataset.parse_manifest(_write(tmp_path, [_row(1, 0, **{field: value})]))


def test_fields_and_missing_flag(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "here.png")
    p = _write(tmp_path, [_row(1, 7, "here.png", tension="Hanging"), _row(2, 7, "gone.png", colors="")])
    m = dataset.parse_manifest(p)
    a, b = m.records
    assert a.tension is Tension.HANGING
    assert a.colors == ("blue", "white")
    assert a.texture == "Striped"
    assert not a.missing and b.missing
    assert b.colors == ()
    assert m.num_missing == 1
    assert [r.image_id for r in m.usable] == [1]


def test_round_trip(tmp_path):
    recs = [
        make_record(3, 2, tmp_path / "a.png", notes='odd, "quoted" note', colors=("red", "pink"), missing=True),
        make_record(9, 5, tmp_path / "sub" / "b.png", distance_cm=12.0, azimuth_deg=45.5, tension=Tension.HANGING,
                    missing=True),
    ]
    m = Manifest.from_records(recs)
    path = dataset.write_manifest(m, tmp_path / "out" / "m.csv")
    back = dataset.parse_manifest(path)
    assert back.records == m.records
    assert back.class_counts == m.class_counts


@settings(max_examples=20, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(0, 8),
            st.floats(0.1, 100),
            st.floats(0.1, 90),
            st.integers(0, 255),
            st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=12),
            st.lists(st.sampled_from(["red", "blue", "white", "gray"]), max_size=3),
        ),
        max_size=12,
    )
)
def test_round_trip_property(tmp_path_factory, rows):
    tmp = tmp_path_factory.mktemp("rt")
    recs = [
        make_record(i, lab, tmp / f"{i}.png", distance_cm=d, inclination_deg=inc, lighting=light,
                    notes=note.strip(), colors=tuple(cols), missing=True)
        for i, (lab, d, inc, light, note, cols) in enumerate(rows)
    ]
    m = Manifest.from_records(recs)
    back = dataset.parse_manifest(dataset.write_manifest(m, tmp / "m.csv"))
    assert back.records == m.records


# --- images --------------------------------------------------------------------


def test_white_and_red_images(tmp_path):
    Image.new("RGB", (5, 3), (255, 255, 255)).save(tmp_path / "w.png")
    Image.new("RGB", (5, 3), (255, 0, 0)).save(tmp_path / "r.jpg", quality=100)
    Image.new("RGB", (5, 3), (255, 0, 0)).save(tmp_path / "r.png")
    gray, rgb = dataset.load_image(tmp_path / "w.png")
    assert gray.shape == (3, 5) and rgb.shape == (3, 5, 3)
    np.testing.assert_allclose(gray, 1.0, atol=1e-12)
    gray, _ = dataset.load_image(tmp_path / "r.png")
    np.testing.assert_allclose(gray, 0.299, atol=1e-6)
    gray, _ = dataset.load_image(tmp_path / "r.jpg")
    assert gray.shape == (3, 5)


def test_truncated_file(tmp_path):
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)).save(tmp_path / "a.png")
    raw = (tmp_path / "a.png").read_bytes()
    (tmp_path / "t.png").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(IoError):
        dataset.load_image(tmp_path / "t.png")
    with pytest.raises(IoError):
        dataset.load_image(tmp_path / "absent.png")


def test_unsupported_format(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "a.bmp")
    with pytest.raises(UnsupportedFormat):
        dataset.load_image(tmp_path / "a.bmp")
    (tmp_path / "junk.png").write_bytes(b"not an image at all")
    with pytest.raises(UnsupportedFormat):
        dataset.load_image(tmp_path / "junk.png")


# --- splits --------------------------------------------------------------------


def test_round_half_up():
    assert dataset.train_count(0.2, 88) == 18  # 17.6
    assert dataset.train_count(0.25, 10) == 3  # 2.5 goes up
    assert dataset.train_count(0.35, 10) == 4  # 3.5 goes up despite 0.35 being 0.34999...
    assert dataset.train_count(0.45, 10) == 5


def test_table1_split_counts(table1):
    split = dataset.stratified_split(table1, 0.20, seed=0)
    counts = {lab: 0 for lab in range(9)}
    lookup = {r.image_id: r.label_id for r in table1.records}
    for i in split.train_ids:
        counts[lookup[i]] += 1
    assert counts == {0: 18, 1: 8, 2: 18, 3: 6, 4: 10, 5: 10, 6: 10, 7: 13, 8: 13}


def _toy(per_class=10, classes=(0, 7)):
    recs = [make_record(c * 100 + i, c, "/x.png") for c in classes for i in range(per_class)]
    return Manifest.from_records(recs)


def test_eighty_percent_toy():
    m = _toy()
    s = dataset.stratified_split(m, 0.8, seed=3)
    assert len(s.train_ids) == 16 and len(s.test_ids) == 4
    assert sum(i < 100 for i in s.train_ids) == 8


def test_split_deterministic_and_seed_sensitive(table1):
    a = dataset.stratified_split(table1, 0.5, seed=11)
    b = dataset.stratified_split(table1, 0.5, seed=11)
    c = dataset.stratified_split(table1, 0.5, seed=12)
    assert a == b
    assert a.train_ids != c.train_ids


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 2**63 - 1))
def test_split_invariants(fraction, seed):
    m = table1_manifest()
    s = dataset.stratified_split(m, fraction, seed)
    assert not (s.train_ids & s.test_ids)
    assert s.train_ids | s.test_ids == {r.image_id for r in m.records}
    lookup = {r.image_id: r.label_id for r in m.records}
    for lab, n in TABLE1_COUNTS.items():
        got = sum(lookup[i] == lab for i in s.train_ids)
        assert got == dataset.train_count(fraction, n)


def test_split_skips_missing_and_rejects_empty_class():
    recs = [make_record(i, 0, "/x.png", missing=(i == 0)) for i in range(5)]
    recs.append(make_record(10, 3, "/x.png", missing=True))
    m = Manifest.from_records(recs)
    with pytest.raises(EmptyClass):
        dataset.stratified_split(m, 0.5, 0)
    m2 = Manifest.from_records(recs[:5])
    s = dataset.stratified_split(m2, 0.5, 0)
    assert 0 not in s.train_ids | s.test_ids
    assert len(s.train_ids) == 2


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        dataset.stratified_split(_toy(), 1.0, 0)
