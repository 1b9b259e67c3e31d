import gzip
import struct

import numpy as np
import pytest

from pvseg.nifti import read_nifti, read_nifti_header, write_nifti
from pvseg.volume import LabelMap, Volume

# header byte offsets from the NIfTI-1 layout
OFF_DIM = 40
OFF_DATATYPE = 70
OFF_SCL = 112


def _rand_volume(seed=0, dims=(5, 6, 7), spacing=(0.9, 1.0, 1.25)):
    rng = np.random.default_rng(seed)
    affine = np.eye(4)
    affine[:3, 3] = [-10.0, 4.0, 2.5]
    affine[0, 0], affine[1, 1], affine[2, 2] = spacing
    return Volume(rng.normal(size=dims).astype(np.float32), spacing, affine)


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["vol.nii", "vol.nii.gz"])
    def test_volume(self, tmp_path, name):
        v = _rand_volume()
        p = tmp_path / name
        write_nifti(v, p)
        out = read_nifti(p)
        assert isinstance(out, Volume)
        np.testing.assert_array_equal(out.data, v.data)
        assert out.spacing == v.spacing
        np.testing.assert_allclose(out.affine[:3], v.affine[:3], atol=1e-6)

    def test_labels_uint8(self, tmp_path):
        rng = np.random.default_rng(1)
        lm = LabelMap(rng.integers(0, 3, size=(4, 5, 6), dtype=np.uint8), (1, 1, 1))
        p = tmp_path / "lbl.nii.gz"
        write_nifti(lm, p)
        out = read_nifti(p)
        assert isinstance(out, LabelMap)  # uint8 auto-detects as labels
        np.testing.assert_array_equal(out.data, lm.data)

    def test_wide_labels_round_trip(self, tmp_path):
        # parcellation atlas ids exceed a byte; written as int16
        lm = LabelMap(np.full((3, 3, 3), 4021, dtype=np.int32), (1, 1, 1))
        p = tmp_path / "parc.nii"
        write_nifti(lm, p)
        out = read_nifti(p, kind="labels")
        np.testing.assert_array_equal(out.data, lm.data)

    def test_fortran_order_payload(self, tmp_path):
        # voxel (1,0,0) must be the second payload element, not (0,0,1)
        v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1, 1, 1))
        p = tmp_path / "f.nii"
        write_nifti(v, p)
        payload = p.read_bytes()[352:]
        first_two = np.frombuffer(payload[:8], dtype="<f4")
        np.testing.assert_array_equal(first_two, [v.data[0, 0, 0], v.data[1, 0, 0]])

    def test_gzip_output_is_reproducible(self, tmp_path):
        v = _rand_volume(2)
        a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_nifti(v, a)
        write_nifti(v, b)
        assert a.read_bytes() == b.read_bytes()

    def test_gzip_detected_by_prefix_not_suffix(self, tmp_path):
        v = _rand_volume(3)
        plain = tmp_path / "x.nii"
        write_nifti(v, plain)
        disguised = tmp_path / "y.nii"  # gzipped content, plain suffix
        disguised.write_bytes(gzip.compress(plain.read_bytes()))
        out = read_nifti(disguised)
        np.testing.assert_array_equal(out.data, v.data)

    def test_header_only_read(self, tmp_path):
        v = _rand_volume(4, dims=(9, 8, 7), spacing=(0.5, 0.5, 2.0))
        p = tmp_path / "h.nii.gz"
        write_nifti(v, p)
        dims, spacing = read_nifti_header(p)
        assert dims == (9, 8, 7)
        assert spacing == v.spacing


class TestScaling:
    def _with_patched(self, tmp_path, offset, payload_bytes):
        v = _rand_volume(5)
        p = tmp_path / "s.nii"
        write_nifti(v, p)
        raw = bytearray(p.read_bytes())
        raw[offset : offset + len(payload_bytes)] = payload_bytes
        p.write_bytes(bytes(raw))
        return v, p

    def test_slope_inter_applied(self, tmp_path):
        v, p = self._with_patched(tmp_path, OFF_SCL, struct.pack("<2f", 2.0, 1.0))
        out = read_nifti(p)
        np.testing.assert_allclose(out.data, v.data * 2.0 + 1.0, atol=1e-5)

    def test_zero_slope_means_unscaled(self, tmp_path):
        v, p = self._with_patched(tmp_path, OFF_SCL, struct.pack("<2f", 0.0, 5.0))
        out = read_nifti(p)
        np.testing.assert_array_equal(out.data, v.data)

    def test_scaled_labels_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        lm = LabelMap(rng.integers(0, 3, size=(3, 3, 3), dtype=np.uint8), (1, 1, 1))
        p = tmp_path / "sl.nii"
        write_nifti(lm, p)
        raw = bytearray(p.read_bytes())
        raw[OFF_SCL : OFF_SCL + 8] = struct.pack("<2f", 2.0, 0.0)
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            read_nifti(p, kind="labels")
        # scaled uint8 auto-detects as an image, not labels
        assert isinstance(read_nifti(p), Volume)


class TestByteOrder:
    def test_big_endian_read(self, tmp_path):
        from pvseg.nifti import _STRUCT, HEADER_SIZE

        v = _rand_volume(7, dims=(3, 4, 5))
        little = tmp_path / "le.nii"
        write_nifti(v, little)
        raw = little.read_bytes()
        fields = struct.unpack("<" + _STRUCT.format[1:], raw[:HEADER_SIZE])
        big_header = struct.pack(">" + _STRUCT.format[1:], *fields)
        payload = v.data.astype(">f4").tobytes(order="F")
        big = tmp_path / "be.nii"
        big.write_bytes(big_header + b"\x00" * 4 + payload)
        out = read_nifti(big)
        np.testing.assert_array_equal(out.data, v.data)


class TestRejection:
    def test_truncated_file(self, tmp_path):
        p = tmp_path / "t.nii"
        p.write_bytes(b"\x00" * 100)
        with pytest.raises(ValueError):
            read_nifti(p)

    def test_bad_magic(self, tmp_path):
        v = _rand_volume(8)
        p = tmp_path / "m.nii"
        write_nifti(v, p)
        raw = bytearray(p.read_bytes())
        raw[344:348] = b"xxxx"
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            read_nifti(p)

    def test_true_4d_rejected_but_singleton_4th_ok(self, tmp_path):
        v = _rand_volume(9, dims=(3, 3, 4))
        p = tmp_path / "d.nii"
        write_nifti(v, p)
        raw = bytearray(p.read_bytes())
        raw[OFF_DIM : OFF_DIM + 2] = struct.pack("<h", 4)  # dim[0] = 4
        # dim[4] stays 1: tolerated as effectively 3D
        p.write_bytes(bytes(raw))
        np.testing.assert_array_equal(read_nifti(p).data, v.data)
        raw[OFF_DIM + 8 : OFF_DIM + 10] = struct.pack("<h", 2)  # dim[4] = 2
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            read_nifti(p)

    def test_unknown_datatype_code(self, tmp_path):
        v = _rand_volume(10)
        p = tmp_path / "dt.nii"
        write_nifti(v, p)
        raw = bytearray(p.read_bytes())
        raw[OFF_DATATYPE : OFF_DATATYPE + 2] = struct.pack("<h", 1536)
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            read_nifti(p)

    def test_payload_shorter_than_dims(self, tmp_path):
        v = _rand_volume(11)
        p = tmp_path / "short.nii"
        write_nifti(v, p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-10])
        with pytest.raises(ValueError):
            read_nifti(p)

    def test_unknown_kind(self, tmp_path):
        v = _rand_volume(12)
        p = tmp_path / "k.nii"
        write_nifti(v, p)
        with pytest.raises(ValueError):
            read_nifti(p, kind="volume")

    def test_float_as_labels_rejected(self, tmp_path):
        v = _rand_volume(13)
        p = tmp_path / "fl.nii"
        write_nifti(v, p)
        with pytest.raises(ValueError):
            read_nifti(p, kind="labels")
