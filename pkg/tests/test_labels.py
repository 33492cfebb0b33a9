import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgmfuse import kitti_io, labels
from pgmfuse.labels import CLASS_ID, CLASSES

from conftest import realdata, real_root

KITTI = {v: k for k, v in labels.SEMANTICKITTI_NAMES.items()}
CITY = {v: k for k, v in labels.CITYSCAPES_NAMES.items()}


def test_class_list():
    assert CLASSES[0] == "unlabeled" and len(CLASSES) == 16
    assert CLASSES[1:] == ("car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "rider", "road",
                           "sidewalk", "building", "fence", "vegetation", "terrain", "pole", "traffic-sign")


@pytest.mark.parametrize("raw,reduced", [
    ("bicyclist", "rider"), ("motorcyclist", "rider"), ("trunk", "vegetation"),
    ("parking", "unlabeled"), ("other-ground", "unlabeled"),
])
def test_semantickitti_table1_rows(raw, reduced):
    assert labels.remap([KITTI[raw]], "semantickitti")[0] == CLASS_ID[reduced]


@pytest.mark.parametrize("raw,reduced", [
    ("sky", "unlabeled"), ("train", "other-vehicle"), ("wall", "building"), ("traffic light", "pole"),
])
def test_cityscapes_table1_rows(raw, reduced):
    assert labels.remap([CITY[raw]], "cityscapes")[0] == CLASS_ID[reduced]


def test_unknown_id_maps_to_zero_and_is_counted():
    out, unknown = labels.remap([65535, 10], "semantickitti", return_unknown=True)
    assert out.tolist() == [0, CLASS_ID["car"]] and unknown == 1


def test_name_for_name_rows():
    for name in CLASSES[1:]:
        if name in KITTI:
            assert labels.remap([KITTI[name]])[0] == CLASS_ID[name]
    assert labels.remap([KITTI["moving-car"]])[0] == CLASS_ID["car"]


def test_tables_cover_documented_ids():
    spec = labels.default_spec()
    assert set(spec.kitti_map) == set(labels.SEMANTICKITTI_NAMES)
    assert set(spec.cityscapes_map) == set(labels.CITYSCAPES_NAMES)


def test_identity_table_is_idempotent():
    ident = labels.ClassSpec({i: i for i in range(16)}, {})
    ids = np.arange(16)
    once = labels.remap(ids, spec=ident)
    assert np.array_equal(labels.remap(once, spec=ident), once)


def test_class_map_parsing(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("# comment\n10\tcar\n\n40\troad\n")
    assert labels.read_class_map(p) == {10: 1, 40: 8}
    p.write_text("10\tspaceship\n")
    with pytest.raises(ValueError, match="line 1"):
        labels.read_class_map(p)


def _write_seq(root, seq, scans):
    for i, sem in enumerate(scans):
        sid = f"{i:06d}"
        kitti_io.write_scan(kitti_io.scan_path(root, seq, sid), np.zeros((len(sem), 4)))
        kitti_io.write_labels(kitti_io.label_path(root, seq, sid), sem)


def test_frequencies_all_car(tmp_path):
    _write_seq(tmp_path, "00", [[10] * 7])
    f = labels.class_frequencies(tmp_path, kitti_io.SplitManifest(train=("00",)))
    assert f[CLASS_ID["car"]] == 1.0 and f.sum() == 1.0


def test_frequencies_half_road_half_car(tmp_path):
    _write_seq(tmp_path, "00", [[10, 10, 40], [40]])
    f = labels.class_frequencies(tmp_path, kitti_io.SplitManifest(train=("00",)), threads=2)
    assert f[CLASS_ID["road"]] == f[CLASS_ID["car"]] == 0.5


def test_frequencies_missing_label_file(tmp_path):
    _write_seq(tmp_path, "00", [[10]])
    kitti_io.label_path(tmp_path, "00", "000000").unlink()
    with pytest.raises(FileNotFoundError, match="00/000000"):
        labels.class_frequencies(tmp_path, kitti_io.SplitManifest(train=("00",)))


def test_weight_of_zero_frequency():
    w = labels.loss_weights(np.zeros(16), 1.02)
    assert w[1] == pytest.approx(1 / math.log(1.02), rel=1e-12)
    assert w[1] == pytest.approx(50.497, abs=2e-3)
    assert w[0] == 0.0


def test_weight_equals_one_at_e():
    f = np.zeros(16)
    f[3] = math.e - 1.02
    assert labels.loss_weights(f, 1.02)[3] == pytest.approx(1.0, rel=1e-12)


def test_weight_eps_too_small():
    with pytest.raises(ValueError):
        labels.loss_weights(np.zeros(16), 1.0)
    with pytest.raises(ValueError):
        labels.loss_weights(np.full(16, -0.1))


@given(st.lists(st.floats(0, 1), min_size=16, max_size=16))
def test_weights_decrease_with_frequency(f):
    f = np.array(f)
    w = labels.loss_weights(f)
    assert np.all(w[1:] > 0) and np.all(np.isfinite(w))
    order = np.argsort(f[1:], kind="stable")
    fs, ws = f[1:][order], w[1:][order]
    strictly = fs[1:] > fs[:-1] + 1e-9
    assert np.all(ws[1:] <= ws[:-1])
    assert np.all(ws[1:][strictly] < ws[:-1][strictly])


def test_fixture_round_trip(tmp_path):
    vals = np.linspace(0, 1, 16)
    labels.write_fixture(tmp_path / "f.txt", vals)
    assert np.array_equal(labels.read_fixture(tmp_path / "f.txt"), vals)


@realdata
def test_real_frequencies_road_dominates_bicycle():
    f = labels.class_frequencies(real_root(), kitti_io.SplitManifest(), threads=4)
    assert abs(f.sum() - 1) < 1e-9
    assert f[CLASS_ID["road"]] > 20 * f[CLASS_ID["bicycle"]]
