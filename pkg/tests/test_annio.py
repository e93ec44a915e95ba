import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull

from coroseg.annio import (
    CLASS_NAMES,
    binarize_mask,
    build_class_mask,
    coco_document,
    parse_coco,
    rasterize_polygon,
    read_mask,
    read_probmap,
    write_mask,
    write_probmap,
)
from coroseg.errors import (
    DataError,
    DegeneratePolygonError,
    DomainError,
    FormatError,
    LookupFailure,
    ParseError,
    ReferentialError,
    SizeMismatchError,
    UnsupportedDepthError,
    UnsupportedFormatError,
    ValidityError,
)
from oracles import raster_oracle


def doc(images, anns, cats=range(1, 27)):
    return json.dumps({
        "images": [{"id": i, "width": w, "height": h, "file_name": f"{i}.png"} for i, w, h in images],
        "annotations": [
            {"id": a, "image_id": im, "category_id": c, "segmentation": seg} for a, im, c, seg in anns
        ],
        "categories": [{"id": c, "name": str(c)} for c in cats],
    })


SQUARE = [0, 0, 4, 0, 4, 4, 0, 4]


def test_class_names_follow_table_order():
    assert len(CLASS_NAMES) == 27
    assert CLASS_NAMES[0] == "Background" and CLASS_NAMES[10] == "9a" and CLASS_NAMES[26] == "Stenosis"


# --- parse_coco -----------------------------------------------------------

def test_single_record():
    aset = parse_coco(doc([(1, 512, 512)], [(7, 1, 5, [SQUARE])]))
    assert len(aset.images) == 1 and len(aset.annotations) == 1
    rec = aset.annotations[0]
    assert (rec.annotation_id, rec.image_id, rec.category_id) == (7, 1, 5)
    assert rec.polygons[0] == ((0, 0), (4, 0), (4, 4), (0, 4))


def test_empty_annotations():
    assert parse_coco(doc([(1, 8, 8)], [])).annotations == []


def test_missing_image_names_ids():
    with pytest.raises(ReferentialError, match=r"annotation 3 .*image 99"):
        parse_coco(doc([(1, 8, 8)], [(3, 99, 1, [SQUARE])]))


def test_category_out_of_range():
    with pytest.raises(DomainError):
        parse_coco(doc([(1, 8, 8)], [(3, 1, 27, [SQUARE])]))
    with pytest.raises(DomainError):
        parse_coco(doc([(1, 8, 8)], [(3, 1, 0, [SQUARE])]))


def test_malformed_json_reports_byte_offset():
    text = '{"images": [], "annotations": [,]}'
    with pytest.raises(ParseError) as info:
        parse_coco(text)
    assert info.value.offset == text.index(",]")
    assert "byte offset" in str(info.value)


def test_byte_offset_counts_utf8_bytes():
    text = '{"note": "é", "images": [}'
    with pytest.raises(ParseError) as info:
        parse_coco(text)
    assert info.value.offset == len(text[:text.index("}")].encode("utf-8"))


def test_rle_rejected():
    with pytest.raises(UnsupportedFormatError):
        parse_coco(doc([(1, 8, 8)], [(1, 1, 1, {"counts": [1, 2], "size": [8, 8]})]))


def test_degenerate_polygon_in_document():
    with pytest.raises(DegeneratePolygonError):
        parse_coco(doc([(1, 8, 8)], [(1, 1, 1, [[0, 0, 4, 4]])]))


def test_extra_fields_ignored_and_order_kept():
    d = json.loads(doc([(1, 8, 8)], [(9, 1, 2, [SQUARE]), (4, 1, 3, [SQUARE]), (6, 1, 1, [SQUARE])]))
    d["info"] = {"year": 2023}
    d["annotations"][0]["iscrowd"] = 0
    aset = parse_coco(json.dumps(d))
    assert [a.annotation_id for a in aset.annotations] == [9, 4, 6]


def test_missing_array_is_parse_error():
    with pytest.raises(ParseError):
        parse_coco('{"images": [], "annotations": []}')


def test_all_errors_are_data_errors():
    assert issubclass(ReferentialError, DataError) and issubclass(ParseError, DataError)


# --- rasterization --------------------------------------------------------

def test_square_has_16_pixels():
    m = rasterize_polygon([(0, 0), (4, 0), (4, 4), (0, 4)], 8, 8)
    assert int((m == 255).sum()) == 16
    assert m[:4, :4].all() and not m[4:, :].any() and not m[:, 4:].any()


def test_right_triangle_matches_oracle():
    tri = [(0, 0), (6, 0), (0, 6)]
    m = rasterize_polygon(tri, 8, 8)
    ref = raster_oracle(tri, 8, 8)
    np.testing.assert_array_equal(m, ref)
    assert int((m > 0).sum()) == int((ref > 0).sum())


def test_two_vertices_rejected():
    with pytest.raises(DegeneratePolygonError):
        rasterize_polygon([(0, 0), (3, 3)], 8, 8)


def test_clipped_outside_image():
    m = rasterize_polygon([(-5, -5), (20, -5), (20, 3), (-5, 3)], 8, 8)
    assert m.shape == (8, 8) and int((m > 0).sum()) == 24


def _star(rng, n, size):
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(2, size / 2, n)
    c = size / 2
    return [(float(c + r * np.cos(a)), float(c + r * np.sin(a))) for a, r in zip(ang, rad)]


def test_random_polygons_match_pnpoly_oracle():
    rng = np.random.default_rng(1)
    for k in range(100):
        if k % 2:
            poly = _star(rng, int(rng.integers(3, 12)), 32)  # concave in general
        else:
            pts = rng.uniform(0, 32, (8, 2))
            poly = [tuple(map(float, pts[i])) for i in ConvexHull(pts).vertices]
        np.testing.assert_array_equal(rasterize_polygon(poly, 32, 32), raster_oracle(poly, 32, 32))


def test_self_intersecting_even_odd():
    # pentagram: the inner pentagon is covered twice and must be background
    pts = [(16 + 14 * np.cos(np.pi / 2 + k * 4 * np.pi / 5), 16 + 14 * np.sin(np.pi / 2 + k * 4 * np.pi / 5))
           for k in range(5)]
    m = rasterize_polygon(pts, 32, 32)
    assert m[16, 16] == 0
    np.testing.assert_array_equal(m, raster_oracle(pts, 32, 32))


# --- class masks ----------------------------------------------------------

def test_disjoint_squares_values():
    a = [0, 0, 3, 0, 3, 3, 0, 3]
    b = [5, 5, 8, 5, 8, 8, 5, 8]
    aset = parse_coco(doc([(1, 8, 8)], [(1, 1, 1, [a]), (2, 1, 2, [b])]))
    m = build_class_mask(aset, 1)
    assert set(np.unique(m)) == {0, 1, 2}
    np.testing.assert_array_equal(m == 1, raster_oracle([(0, 0), (3, 0), (3, 3), (0, 3)], 8, 8) > 0)


def test_overlap_policies():
    a = [0, 0, 5, 0, 5, 5, 0, 5]
    b = [3, 3, 8, 3, 8, 8, 3, 8]
    aset = parse_coco(doc([(1, 8, 8)], [(1, 1, 3, [a]), (2, 1, 7, [b])]))
    last = build_class_mask(aset, 1, "last-wins")
    first = build_class_mask(aset, 1, "first-wins")
    assert last[4, 4] == 7 and first[4, 4] == 3
    both = (raster_oracle([(0, 0), (5, 0), (5, 5), (0, 5)], 8, 8) > 0) & \
           (raster_oracle([(3, 3), (8, 3), (8, 8), (3, 8)], 8, 8) > 0)
    np.testing.assert_array_equal(last != first, both)


def test_empty_image_mask():
    aset = parse_coco(doc([(1, 6, 4)], []))
    m = build_class_mask(aset, 1)
    assert m.shape == (4, 6) and not m.any()


def test_unknown_image_lookup():
    with pytest.raises(LookupFailure):
        build_class_mask(parse_coco(doc([(1, 6, 4)], [])), 5)


@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(1, 6), st.integers(1, 26)),
                min_size=1, max_size=6))
def test_policies_differ_only_on_overlaps(boxes):
    anns = []
    for k, (x, y, s, c) in enumerate(boxes, 1):
        anns.append((k, 1, c, [[x, y, x + s, y, x + s, y + s, x, y + s]]))
    aset = parse_coco(doc([(1, 16, 16)], anns))
    cover = np.zeros((16, 16), dtype=int)
    for rec in aset.annotations:
        cover += rasterize_polygon(rec.polygons[0], 16, 16) > 0
    diff = build_class_mask(aset, 1, "last-wins") != build_class_mask(aset, 1, "first-wins")
    assert not (diff & (cover < 2)).any()


def test_binarize():
    m = np.array([[0, 3], [7, 0]], dtype=np.uint8)
    np.testing.assert_array_equal(binarize_mask(m), [[0, 255], [255, 0]])
    assert not binarize_mask(np.zeros((3, 3), np.uint8)).any()


@given(st.lists(st.integers(0, 26), min_size=1, max_size=64))
def test_binarize_idempotent(vals):
    x = np.array(vals, dtype=np.uint8).reshape(1, -1)
    np.testing.assert_array_equal(binarize_mask(binarize_mask(x)), binarize_mask(x))


# --- file formats ---------------------------------------------------------

def test_mask_file_layout(tmp_path):
    p = tmp_path / "m.pgm"
    write_mask(np.full((4, 4), 5, np.uint8), p)
    assert p.read_bytes() == b"P5\n4 4\n255\n" + bytes([5] * 16)


def test_mask_roundtrip(tmp_path):
    m = np.random.default_rng(0).integers(0, 27, (32, 32)).astype(np.uint8)
    write_mask(m, tmp_path / "m.pgm")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), m)


def test_mask_header_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_mask(p), [[1, 2]])


def test_mask_bad_magic(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(FormatError, match="P6"):
        read_mask(p)


def test_mask_bad_depth(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(UnsupportedDepthError):
        read_mask(p)


def test_mask_truncated(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(SizeMismatchError) as info:
        read_mask(p)
    assert (info.value.expected, info.value.actual) == (16, 10)


def test_probmap_layout(tmp_path):
    p = tmp_path / "a.prob"
    write_probmap(np.array([0.25, 0.75], np.float32).reshape(2, 1, 1), p)
    data = p.read_bytes()
    assert len(data) == 28
    assert data[:8] == b"ARTPROB1" and struct.unpack("<III", data[8:20]) == (2, 1, 1)
    assert struct.unpack("<2f", data[20:]) == (0.25, 0.75)
    np.testing.assert_array_equal(read_probmap(p).ravel(), [0.25, 0.75])


def test_probmap_roundtrip_bits(tmp_path):
    m = np.random.default_rng(3).dirichlet(np.ones(5), size=(6, 7)).transpose(2, 0, 1).astype(np.float32)
    write_probmap(m, tmp_path / "x.prob")
    back = read_probmap(tmp_path / "x.prob")
    assert back.tobytes() == m.astype("<f4").tobytes()


def test_probmap_nan_writes_nothing(tmp_path):
    p = tmp_path / "n.prob"
    with pytest.raises(ValidityError):
        write_probmap(np.array([np.nan, 1.0]).reshape(2, 1, 1), p)
    assert not p.exists()


def test_probmap_size_error(tmp_path):
    p = tmp_path / "s.prob"
    p.write_bytes(b"ARTPROB1" + struct.pack("<III", 2, 2, 2) + bytes(12))
    with pytest.raises(SizeMismatchError) as info:
        read_probmap(p)
    assert (info.value.expected, info.value.actual) == (32, 12)
    assert "expected 32 bytes, got 12" in str(info.value)


def test_probmap_bad_magic(tmp_path):
    p = tmp_path / "s.prob"
    p.write_bytes(b"ARTPROB2" + bytes(12))
    with pytest.raises(FormatError):
        read_probmap(p)


def test_coco_document_roundtrip():
    text = coco_document([(1, 8, 8, "a.png")], [(3, 1, 2, [((0.5, 0), (4, 0), (4, 4.25))])], [1, 2])
    aset = parse_coco(text)
    assert aset.annotations[0].polygons[0] == ((0.5, 0), (4, 0), (4, 4.25))
