import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgmfuse import kitti_io
from pgmfuse.geometry import PgmFrame
from pgmfuse.kitti_io import CalibrationSet, ConsistencyError, FormatError

from conftest import realdata, real_root

IDENT = np.hstack([np.eye(3), np.zeros((3, 1))])


def _calib_text(keys=("P2", "Tr"), mat=IDENT):
    return "".join(f"{k}: " + " ".join(str(v) for v in mat.ravel()) + "\n" for k in keys)


def test_read_scan_single_point(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    cloud = kitti_io.read_scan(p)
    assert cloud.points.tolist() == [[1.0, 2.0, 3.0, 0.5]]


def test_read_scan_empty(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(kitti_io.read_scan(p).points) == 0


def test_read_scan_truncated_reports_offset(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(b"\0" * 20)
    with pytest.raises(FormatError, match="offset 16"):
        kitti_io.read_scan(p)


def test_read_scan_missing_path(tmp_path):
    with pytest.raises(OSError):
        kitti_io.read_scan(tmp_path / "nope.bin")


def test_nonfinite_points_dropped_and_intensity_clamped(tmp_path):
    pts = np.array([[1, 0, 0, 0.5], [np.nan, 0, 0, 0.1], [2, 0, 0, 1.7], [3, np.inf, 0, 0]], np.float32)
    p = tmp_path / "s.bin"
    kitti_io.write_scan(p, pts)
    cloud = kitti_io.read_scan(p)
    assert cloud.dropped == 2 and cloud.clamped == 1 and cloud.n_raw == 4
    assert cloud.index.tolist() == [0, 2]
    assert cloud.points[:, 3].tolist() == [0.5, 1.0]


def test_label_bit_split(tmp_path):
    p = tmp_path / "l.label"
    p.write_bytes(struct.pack("<I", 0x00010009))
    sem, inst = kitti_io.read_labels(p)
    assert (sem[0], inst[0]) == (9, 1)


def test_label_empty(tmp_path):
    p = tmp_path / "l.label"
    p.write_bytes(b"")
    sem, inst = kitti_io.read_labels(p)
    assert sem.size == 0 and inst.size == 0


def test_label_count_mismatch_names_both_counts(tmp_path):
    kitti_io.write_scan(tmp_path / "s.bin", np.zeros((3, 4)))
    kitti_io.write_labels(tmp_path / "s.label", np.zeros(2))
    with pytest.raises(ConsistencyError, match="2 labels but scan has 3"):
        kitti_io.load_scan(tmp_path / "s.bin", tmp_path / "s.label")


def test_labels_follow_dropped_points(tmp_path):
    pts = np.array([[1, 0, 0, 0], [np.nan, 0, 0, 0], [2, 0, 0, 0]], np.float32)
    kitti_io.write_scan(tmp_path / "s.bin", pts)
    kitti_io.write_labels(tmp_path / "s.label", [10, 40, 50], [1, 2, 3])
    cloud = kitti_io.load_scan(tmp_path / "s.bin", tmp_path / "s.label")
    assert cloud.labels.tolist() == [10, 50] and cloud.instances.tolist() == [1, 3]


def test_calib_identity(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text(_calib_text())
    cal = kitti_io.read_calib(p)
    assert np.array_equal(cal.proj, IDENT) and np.array_equal(cal.tr_velo_to_cam, IDENT)


def test_calib_missing_key(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text(_calib_text(keys=("P2",)))
    with pytest.raises(FormatError, match="missing calibration key Tr"):
        kitti_io.read_calib(p)


def test_calib_parse_error_has_line_number(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text(_calib_text() + "P3: 1 2 x\n")
    with pytest.raises(FormatError, match=":3:"):
        kitti_io.read_calib(p)


def test_calib_configurable_keys(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text(_calib_text(keys=("P3", "Tr_velo")))
    cal = kitti_io.read_calib(p, proj_key="P3", tr_key="Tr_velo")
    assert cal.proj.shape == (3, 4)


def test_calib_validation():
    bad_focal = IDENT.copy()
    bad_focal[0, 0] = 0
    with pytest.raises(FormatError):
        CalibrationSet(bad_focal, IDENT).validate()
    mirrored = IDENT.copy()
    mirrored[2, 2] = -1
    with pytest.raises(FormatError, match="determinant"):
        CalibrationSet(IDENT, mirrored).validate()


def test_calib_round_trip(tmp_path, rng):
    from pgmfuse.synthetic import kitti_like_calib

    cal = kitti_like_calib()
    kitti_io.write_calib(tmp_path / "c.txt", cal)
    back = kitti_io.read_calib(tmp_path / "c.txt")
    assert np.allclose(back.proj, cal.proj, rtol=1e-12) and np.allclose(back.tr_velo_to_cam, cal.tr_velo_to_cam)


def test_read_image_red_pixel(tmp_path):
    kitti_io.write_image(tmp_path / "r.png", np.array([[[255, 0, 0]]], np.uint8))
    assert kitti_io.read_image(tmp_path / "r.png").tolist() == [[[1.0, 0.0, 0.0]]]


def test_read_image_black(tmp_path):
    kitti_io.write_image(tmp_path / "b.png", np.zeros((2, 2, 3), np.uint8))
    assert not kitti_io.read_image(tmp_path / "b.png").any()


def test_read_image_rejects_grayscale(tmp_path):
    kitti_io.write_label_image(tmp_path / "g.png", np.zeros((2, 2)))
    with pytest.raises(FormatError, match="RGB"):
        kitti_io.read_image(tmp_path / "g.png")


def test_read_image_rejects_garbage(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not an image")
    with pytest.raises(FormatError):
        kitti_io.read_image(tmp_path / "x.png")


def test_manifest_defaults_and_disjointness():
    man = kitti_io.SplitManifest()
    assert man.train == ("00", "01", "02", "03", "04", "05", "06", "09", "10")
    assert man.val == ("07",) and man.test == ("08",)
    with pytest.raises(ValueError):
        kitti_io.SplitManifest(train=("00", "07"))


def test_manifest_counts_local_files(synth_root):
    man = kitti_io.build_manifest(synth_root)
    assert man.counts["07"] == 3 and man.total("val") == 3 and man.total("train") == 0


def test_full_split_totals_match_paper():
    assert kitti_io.FULL_SPLIT_TOTALS == {"train": 18029, "val": 1101, "test": 4071}


def random_frame(rng, h, w, c, index=True):
    f = PgmFrame.empty(h, w, c, with_index=index)
    mask = rng.random((h, w)) < 0.5
    f.mask[:] = mask
    f.data[mask] = rng.normal(size=(mask.sum(), c)).astype(np.float32)
    f.data[mask, 4] = rng.uniform(0.5, 80, mask.sum())
    f.labels[mask] = rng.integers(0, 16, mask.sum())
    if index:
        f.point_index[mask] = rng.permutation(10 * h * w)[: mask.sum()]
    return f


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 17), c=st.sampled_from([5, 8, 10]), index=st.booleans(),
       seed=st.integers(0, 2**31))
def test_pgm_round_trip_bitwise(h, w, c, index, seed):
    f = random_frame(np.random.default_rng(seed), h, w, c, index)
    assert kitti_io.parse_pgm(kitti_io.pgm_bytes(f)).bitwise_equal(f)


def test_pgm_all_invalid_mask(tmp_path):
    f = PgmFrame.empty(4, 8, 5)
    kitti_io.write_pgm(f, tmp_path / "z.pgm")
    back = kitti_io.read_pgm(tmp_path / "z.pgm")
    assert back.bitwise_equal(f) and not back.mask.any()


def test_pgm_file_size_arithmetic():
    f = PgmFrame.empty(64, 512, 8, with_index=False)
    header, crc = 22, 4
    assert len(kitti_io.pgm_bytes(f)) == header + 64 * 512 * 8 * 4 + 64 * 512 + 64 * 512 * 4 + crc


def test_pgm_corruption_detected(rng):
    raw = bytearray(kitti_io.pgm_bytes(random_frame(rng, 4, 8, 5)))
    raw[40] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        kitti_io.parse_pgm(bytes(raw))


def test_pgm_bad_magic_and_dims(rng):
    raw = kitti_io.pgm_bytes(random_frame(rng, 2, 2, 5))
    with pytest.raises(FormatError, match="magic"):
        kitti_io.parse_pgm(b"XXXX" + raw[4:])
    big = struct.pack("<4sHIIII", b"PGMF", 1, 1 << 20, 1, 5, 0) + b"\0" * 8
    with pytest.raises(FormatError, match="dimension"):
        kitti_io.parse_pgm(big)


def test_pgm_header_layout(rng):
    raw = kitti_io.pgm_bytes(random_frame(rng, 3, 5, 8, index=False))
    assert struct.unpack_from("<4sHIIII", raw) == (b"PGMF", 1, 3, 5, 8, 0)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[22:-4])


@realdata
def test_real_scan_and_labels():
    root = real_root()
    sid = kitti_io.scan_ids(root, "08")[0]
    raw = kitti_io.scan_path(root, "08", sid).read_bytes()
    cloud = kitti_io.read_scan(kitti_io.scan_path(root, "08", sid))
    assert cloud.n_raw == len(raw) // 16 > 100_000
    assert np.linalg.norm(cloud.points[:, :3], axis=1).max() < 120
    lp = kitti_io.label_path(root, "07", "000000")
    assert lp.stat().st_size // 4 == kitti_io.scan_path(root, "07", "000000").stat().st_size // 16


@realdata
def test_real_calib_determinant():
    cal = kitti_io.read_calib(kitti_io.calib_path(real_root(), "08"))
    r = cal.tr_velo_to_cam[:, :3]
    det = (r[0, 0] * (r[1, 1] * r[2, 2] - r[1, 2] * r[2, 1]) - r[0, 1] * (r[1, 0] * r[2, 2] - r[1, 2] * r[2, 0])
           + r[0, 2] * (r[1, 0] * r[2, 1] - r[1, 1] * r[2, 0]))
    assert abs(det - 1) < 1e-3


@realdata
def test_real_image_size():
    img = kitti_io.read_image(kitti_io.image_path(real_root(), "08", "000000"))
    assert img.shape[1] in (1226, 1241) and img.shape[0] in (370, 376)


@realdata
def test_real_manifest_totals():
    man = kitti_io.build_manifest(real_root())
    assert {s: man.total(s) for s in ("train", "val", "test")} == kitti_io.FULL_SPLIT_TOTALS
