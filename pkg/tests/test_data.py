import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from greedyfool.data import (
    CIFAR_RECORD,
    ImageFormatError,
    LabeledImageSet,
    ParseError,
    export_image,
    export_map,
    load_cifar_binary,
    load_digits,
    load_idx,
    parse_idx,
    perturbation_image,
    read_image,
    read_jsonl,
    write_cifar_binary,
    write_idx,
    write_jsonl,
)


def idx_bytes(magic_type, dims, payload):
    return struct.pack(">HBB", 0, 0x08, magic_type) + struct.pack(">" + "I" * len(dims), *dims) + payload


@pytest.fixture
def idx_pair(tmp_path):
    pixels = bytes([0, 1, 2, 3, 250, 251, 254, 255])
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_bytes(3, (2, 2, 2), pixels))
    lab.write_bytes(idx_bytes(1, (2,), bytes([7, 3])))
    return img, lab


def test_handcrafted_idx(idx_pair):
    data = load_idx(*idx_pair)
    assert data.images.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(data.images[0, 0], [[0, 1], [2, 3]])
    np.testing.assert_array_equal(data.images[1, 0], [[250, 251], [254, 255]])
    assert data.labels.tolist() == [7, 3]


def test_gzipped_idx(tmp_path, idx_pair):
    img, lab = idx_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    np.testing.assert_array_equal(load_idx(gz, lab).images, load_idx(img, lab).images)


@pytest.mark.parametrize("raw,offset", [
    (b"\x00\x00", 2),                                      # shorter than the magic
    (b"\x00\x00\x0d\x03" + b"\x00" * 12, 0),               # float payload type
    (b"\x01\x00\x08\x03" + b"\x00" * 12, 0),               # non-zero leading bytes
    (idx_bytes(3, (2, 2, 2), b"\x00" * 5), 21),            # truncated payload
    (idx_bytes(3, (1, 2, 2), b"\x00" * 6), 20),            # trailing bytes
    (b"\x00\x00\x08\x03\x00\x00", 6),                      # truncated dims
])
def test_malformed_idx(raw, offset):
    with pytest.raises(ParseError) as info:
        parse_idx(raw)
    assert info.value.offset == offset


def test_idx_count_mismatch(tmp_path, idx_pair):
    img, _ = idx_pair
    lab = tmp_path / "lab3.idx"
    lab.write_bytes(idx_bytes(1, (3,), bytes([1, 2, 3])))
    with pytest.raises(ParseError, match="count mismatch"):
        load_idx(img, lab)


def test_idx_wrong_roles(idx_pair):
    img, lab = idx_pair
    with pytest.raises(ParseError):
        load_idx(lab, img)


def test_corrupt_gzip(tmp_path):
    p = tmp_path / "bad.gz"
    p.write_bytes(b"\x1f\x8b" + b"junk")
    with pytest.raises(ParseError):
        load_idx(p, p)


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))))
def test_idx_round_trip(tmp_path_factory, images):
    d = tmp_path_factory.mktemp("idx")
    labels = np.arange(len(images), dtype=np.uint8) % 10
    write_idx(d / "i", images)
    write_idx(d / "l", labels)
    data = load_idx(d / "i", d / "l")
    np.testing.assert_array_equal(data.images[:, 0], images)
    np.testing.assert_array_equal(data.labels, labels)


def test_cifar_single_record(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (1, 3, 32, 32))
    write_cifar_binary(tmp_path / "b.bin", img, [4])
    data = load_cifar_binary(tmp_path / "b.bin")
    assert data.images.shape == (1, 3, 32, 32)
    np.testing.assert_array_equal(data.images, img)  # channel-planar order preserved
    assert data.labels.tolist() == [4]


def test_cifar_malformed(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"")
    with pytest.raises(ParseError, match="empty"):
        load_cifar_binary(p)
    p.write_bytes(b"\x00" * (CIFAR_RECORD + 5))
    with pytest.raises(ParseError) as info:
        load_cifar_binary(p)
    assert info.value.offset == CIFAR_RECORD
    p.write_bytes(b"\x0c" + b"\x00" * (CIFAR_RECORD - 1))
    with pytest.raises(ParseError, match="label 12"):
        load_cifar_binary(p)


def test_labeled_image_set_validation():
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((2, 1, 2, 2)), [0])
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((1, 1, 2, 2)), [10])
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((1, 2, 2)), [0])


def test_digits_split():
    train, test = load_digits("train"), load_digits("test")
    assert len(test) == 600 and len(train) + len(test) == 1797
    assert train.shape == (1, 28, 28)
    assert test.images.min() >= 0 and test.images.max() <= 255
    share = np.bincount(load_digits().labels) / 1797 * 600
    assert np.all(np.abs(np.bincount(test.labels) - share) <= 1)  # stratified
    assert np.array_equal(load_digits("test").images, test.images)
    with pytest.raises(ValueError):
        load_digits("val")


@pytest.mark.parametrize("fmt,channels", [("pgm", 1), ("ppm", 3), ("png", 1), ("png", 3)])
def test_image_round_trip(tmp_path, fmt, channels):
    x = np.random.default_rng(1).uniform(0, 255, (channels, 6, 5))
    path = export_image(x, tmp_path / f"a.{fmt}")
    np.testing.assert_array_equal(read_image(path), np.rint(x))


def test_gray_ppm_is_replicated(tmp_path):
    x = np.arange(12.0).reshape(1, 3, 4)
    back = read_image(export_image(x, tmp_path / "g.ppm"))
    assert back.shape == (3, 3, 4) and np.all(back == x)


def test_all_zero_image_is_black(tmp_path):
    assert read_image(export_image(np.zeros((1, 4, 4)), tmp_path / "z.png")).max() == 0


def test_image_errors(tmp_path):
    with pytest.raises(ImageFormatError):
        export_image(np.zeros((1, 2, 2)), tmp_path / "a.jpg")
    with pytest.raises(ImageFormatError):
        export_image(np.zeros((3, 2, 2)), tmp_path / "a.pgm")
    with pytest.raises(ImageFormatError):
        export_image(np.zeros((2, 2, 2)), tmp_path / "a.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG not really")
    with pytest.raises(ImageFormatError):
        read_image(bad)
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.png")
    truncated = tmp_path / "short.pgm"
    truncated.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ImageFormatError):
        read_image(truncated)
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError, match="file"):
        export_image(np.zeros((1, 2, 2)), tmp_path / "file" / "sub.png")


def test_perturbation_image_full_range():
    r = np.zeros((3, 2, 2))
    r[0, 0, 0], r[1, 1, 1], r[2, 1, 1] = -4.0, 1.0, 1.0
    out = perturbation_image(r)
    assert out.shape == (1, 2, 2)
    np.testing.assert_allclose(out[0], [[255, 0], [0, 127.5]])
    assert perturbation_image(np.zeros((1, 2, 2))).max() == 0


def test_export_map(tmp_path):
    m = np.array([[0.0, 0.5], [1.0, 0.25]])
    np.testing.assert_array_equal(read_image(export_map(m, tmp_path / "m.pgm"))[0], np.rint(m * 255))


def test_jsonl_round_trip(tmp_path):
    recs = [{"a": np.int64(3), "b": np.float32(0.5), "c": np.arange(3)}, {"a": None}]
    back = list(read_jsonl(write_jsonl(recs, tmp_path / "r.jsonl")))
    assert back == [{"a": 3, "b": 0.5, "c": [0, 1, 2]}, {"a": None}]
    (tmp_path / "bad.jsonl").write_text('{"a": 1}\n{oops\n')
    with pytest.raises(ParseError, match="line 2"):
        list(read_jsonl(tmp_path / "bad.jsonl"))
