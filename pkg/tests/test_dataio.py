import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from minicnn.dataio import (
    Dataset,
    decode_checkpoint,
    encode_checkpoint,
    encode_idx,
    encode_ppm,
    load_checkpoint,
    load_dataset,
    load_idx,
    load_ppm,
    parse_idx,
    parse_ppm,
    save_checkpoint,
    save_dataset,
    save_idx,
    save_ppm,
    to_uint8,
)
from minicnn.errors import (
    BadMagicError,
    CorruptFileError,
    FormatError,
    HashMismatchError,
    ShapeError,
    TruncatedFileError,
    UnsupportedFormatError,
    VersionMismatchError,
)
from minicnn.params import ParamStore
from minicnn.svm import KernelDesc, svm_train

HASH = bytes(range(32))


class TestIdx:
    def test_label_bytes(self):
        data = encode_idx(np.array([7, 2, 1], dtype=np.uint8))
        assert data.hex() == "00000801" "00000003" "070201"

    def test_image_bytes(self):
        data = encode_idx(np.arange(4, dtype=np.uint8).reshape(1, 2, 2))
        assert data.hex() == "00000803" "00000001" "00000002" "00000002" "00010203"

    def test_round_trip(self, tmp_path, np_rng):
        imgs = np_rng.integers(0, 256, (5, 4, 3)).astype(np.float64) / 255.0
        save_idx(tmp_path / "i.idx", imgs)
        back = load_idx(tmp_path / "i.idx")
        assert back.shape == (5, 1, 4, 3)
        np.testing.assert_array_equal(back[:, 0], imgs)

    def test_errors_carry_offsets(self):
        good = encode_idx(np.zeros((2, 3, 3), dtype=np.uint8))
        with pytest.raises(BadMagicError, match="offset 0"):
            parse_idx(b"\x00\x00\x08\x02" + good[4:])
        with pytest.raises(TruncatedFileError, match="offset 16"):
            parse_idx(good[:-1])
        with pytest.raises(TruncatedFileError):
            parse_idx(good[:10])
        with pytest.raises(CorruptFileError, match="extra"):
            parse_idx(good + b"\x00")

    def test_huge_dims_do_not_allocate(self):
        data = bytes.fromhex("00000803" "ffffffff" "ffffffff" "ffffffff") + b"\x00" * 8
        with pytest.raises(TruncatedFileError):
            parse_idx(data)

    def test_to_uint8(self):
        assert to_uint8([0.0, 0.5, 1.0]).tolist() == [0, 128, 255]
        with pytest.raises(ValueError):
            to_uint8([1.5])

    def test_dataset_pair(self, tmp_path):
        ds = Dataset(np.full((3, 1, 2, 2), 1.0), [0, 1, 2])
        save_dataset(ds, tmp_path / "a", tmp_path / "b")
        back = load_dataset(tmp_path / "a", tmp_path / "b")
        np.testing.assert_array_equal(back.images, ds.images)
        assert back.labels.tolist() == [0, 1, 2]
        with pytest.raises(ShapeError):
            load_dataset(tmp_path / "b", tmp_path / "a")


class TestPpm:
    def test_canonical_bytes(self):
        img = np.zeros((3, 1, 2))
        img[0, 0, 0] = 1.0
        assert encode_ppm(img) == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 0])

    def test_comments_and_whitespace(self):
        data = b"P6 # made by hand\n 1\t1 # size\n255\n" + bytes([10, 20, 30])
        np.testing.assert_allclose(parse_ppm(data)[:, 0, 0], np.array([10, 20, 30]) / 255)

    def test_round_trip(self, tmp_path, np_rng):
        img = np_rng.integers(0, 256, (3, 4, 5)) / 255.0
        save_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(load_ppm(tmp_path / "x.ppm"), img)

    def test_gray_is_replicated(self):
        data = encode_ppm(np.full((1, 1), 1.0))
        assert data.endswith(b"\xff\xff\xff")

    @pytest.mark.parametrize(
        "data,err",
        [
            (b"P3\n1 1\n255\n1 2 3", UnsupportedFormatError),
            (b"P6\n1 1\n65535\n" + b"\x00" * 6, UnsupportedFormatError),
            (b"P5\n1 1\n255\n\x00", BadMagicError),
            (b"P6\n1 1\n255\n\x00", TruncatedFileError),
            (b"P6\n1 1\n255\n\x00\x00\x00\x00", CorruptFileError),
            (b"P6\n1 x\n255\n\x00\x00\x00", CorruptFileError),
            (b"P6\n1 1", TruncatedFileError),
            (b"P6\n0 1\n255\n", CorruptFileError),
        ],
    )
    def test_errors(self, data, err):
        with pytest.raises(err):
            parse_ppm(data)


def _store(rng):
    p = ParamStore({"c1.w": rng.normal(size=(2, 1, 3, 3)), "c1.b": rng.normal(size=2)})
    p.velocity["c1.w"] = rng.normal(size=(2, 1, 3, 3))
    return p


class TestCheckpoint:
    def test_header_bytes(self):
        data = encode_checkpoint(ParamStore({"a": np.array([1.0])}), HASH)
        assert data[:8].hex() == "434e4e42" "01000000"
        assert data[8:40] == HASH
        assert data[40:44].hex() == "01000000"
        assert data[44:48] == b"TENS"
        assert data[48:56].hex() == "1500000000000000"  # 4 + 1 + 4 + 4 + 8 = 21 bytes
        assert data[56:].hex() == "01000000" "61" "01000000" "01000000" "000000000000f03f"

    def test_round_trip_with_velocity_and_svm(self, tmp_path, np_rng):
        params = _store(np_rng)
        x = np_rng.normal(size=(10, 3))
        svm = svm_train(x, np.where(x[:, 0] > 0, 1, -1), 2.0, KernelDesc("rbf", 0.3), scale=True)
        save_checkpoint(tmp_path / "m.cnnb", params, HASH, svm)
        ck = load_checkpoint(tmp_path / "m.cnnb", HASH)
        assert ck.params.equal(params)
        np.testing.assert_array_equal(ck.params.velocity["c1.w"], params.velocity["c1.w"])
        np.testing.assert_array_equal(ck.svm.decision_function(x), svm.decision_function(x))
        assert not (tmp_path / "m.cnnb.tmp").exists()

    def test_hash_mismatch(self, tmp_path, np_rng):
        save_checkpoint(tmp_path / "m.cnnb", _store(np_rng), HASH)
        other = bytes(32)
        with pytest.raises(HashMismatchError):
            load_checkpoint(tmp_path / "m.cnnb", other)
        assert load_checkpoint(tmp_path / "m.cnnb", other, force=True).spec_hash == HASH

    def test_structured_errors(self, np_rng):
        good = encode_checkpoint(_store(np_rng), HASH)
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"XNNB" + good[4:])
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(good[:4] + b"\x02\x00\x00\x00" + good[8:])
        with pytest.raises(TruncatedFileError, match="offset"):
            decode_checkpoint(good[:30])
        with pytest.raises(CorruptFileError, match="claims"):
            decode_checkpoint(good[:-3])
        with pytest.raises(CorruptFileError, match="trailing"):
            decode_checkpoint(good + b"\x00")
        with pytest.raises(CorruptFileError, match="unknown section"):
            decode_checkpoint(good[:44] + b"JUNK" + good[48:])

    @settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(data=st.data())
    def test_mutations_never_crash(self, data, np_rng):
        good = encode_checkpoint(_store(np_rng), HASH)
        cut = data.draw(st.integers(0, len(good)))
        blob = bytearray(good[:cut])
        for _ in range(data.draw(st.integers(0, 4))):
            if blob:
                i = data.draw(st.integers(0, len(blob) - 1))
                blob[i] = data.draw(st.integers(0, 255))
        try:
            decode_checkpoint(bytes(blob))
        except FormatError:
            pass


@settings(max_examples=200, deadline=None)
@given(blob=st.binary(max_size=64))
def test_random_bytes_give_format_errors(blob):
    for parse in (parse_idx, parse_ppm, decode_checkpoint):
        try:
            parse(blob)
        except FormatError:
            pass


class TestDataset:
    def test_select_and_per_class(self):
        ds = Dataset(np.arange(12.0).reshape(6, 1, 1, 2), [0, 1, 2, 0, 1, 2], class_names=("a", "b", "c"))
        sub = ds.select_classes([2, 0])
        assert sub.labels.tolist() == [1, 0, 1, 0]
        assert sub.class_names == ("c", "a")
        keep = ds.select_classes([2, 0], relabel=False)
        assert keep.labels.tolist() == [0, 2, 0, 2]
        assert ds.per_class(1).labels.tolist() == [0, 1, 2]
        with pytest.raises(ShapeError):
            ds.per_class(3)

    def test_to_rgb(self):
        ds = Dataset(np.zeros((2, 1, 3, 3)), [0, 1])
        assert ds.to_rgb().shape == (3, 3, 3)
        with pytest.raises(ShapeError):
            Dataset(np.zeros((2, 1, 3, 3)), [0])
