import struct

import numpy as np
import pytest

from xct.errors import DataError, EvaluationError, FormatError
from xct.phantom import ClassLabel
from xct.volume import (
    PairedDataset,
    PairedSample,
    Plane,
    StyleTag,
    UnpairedXraySet,
    Volume,
    XrayImage,
    export_slices,
    load_volume,
    load_xray,
    save_volume,
    save_xray,
    write_pgm,
)


@pytest.fixture
def volume(rng):
    return Volume(rng.random((4, 5, 6)))


def test_volume_is_float32_by_default_and_read_only(volume):
    assert volume.voxels.dtype == np.float32
    assert volume.dims == (4, 5, 6)
    assert volume.coronal_face == (5, 6)
    with pytest.raises(ValueError):
        volume.voxels[0, 0, 0] = 0.5


def test_arrays_follow_the_working_precision(float64, rng):
    voxels = rng.random((4, 5, 6))
    volume = Volume(voxels)
    assert volume.voxels.dtype == np.float64
    np.testing.assert_array_equal(volume.voxels, voxels)
    assert XrayImage(voxels[0]).pixels.dtype == np.float64


def test_float64_volume_file_stores_float32(float64, rng, tmp_path):
    volume = Volume(rng.random((4, 5, 6)))
    loaded = load_volume(save_volume(volume, tmp_path / "v.vol"))
    assert loaded.voxels.dtype == np.float64
    np.testing.assert_array_equal(loaded.voxels, volume.voxels.astype(np.float32))


@pytest.mark.parametrize(
    "voxels",
    [
        np.full((3, 3, 3), 1.5),
        np.full((3, 3, 3), np.nan),
        np.zeros((3, 3)),
        np.zeros((1, 3, 3)),
    ],
)
def test_volume_rejects_bad_voxels(voxels):
    with pytest.raises(ValueError):
        Volume(voxels)


def test_plane_axes():
    assert Plane.coronal.axis == 0
    assert Plane.axial.axis == 1
    assert Plane.sagittal.axis == 2


def test_volume_file_roundtrip_is_bit_exact(volume, tmp_path):
    path = save_volume(volume, tmp_path / "v.vol")
    loaded = load_volume(path)

    assert loaded.voxels.tobytes() == volume.voxels.tobytes()
    assert path.stat().st_size == 4 + 16 + 4 * 4 * 5 * 6


def test_xray_file_roundtrip_keeps_style(rng, tmp_path):
    image = XrayImage(rng.random((5, 7)), StyleTag.shifted)
    loaded = load_xray(save_xray(image, tmp_path / "x.xry"))

    assert loaded.style_tag is StyleTag.shifted
    assert loaded.pixels.tobytes() == image.pixels.tobytes()


def test_bad_magic_names_the_field(volume, tmp_path):
    path = tmp_path / "v.vol"
    save_volume(volume, path)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])

    with pytest.raises(FormatError) as err:
        load_volume(path)
    assert err.value.field == "magic"
    assert err.value.exit_code == 3


def test_unsupported_version(volume, tmp_path):
    path = tmp_path / "v.vol"
    path.write_bytes(b"XCTV" + struct.pack("<4I", 2, *volume.dims) + volume.voxels.tobytes())

    with pytest.raises(FormatError) as err:
        load_volume(path)
    assert err.value.field == "version"


def test_truncated_header(volume, tmp_path):
    path = tmp_path / "v.vol"
    save_volume(volume, path)
    path.write_bytes(path.read_bytes()[:8])

    with pytest.raises(FormatError) as err:
        load_volume(path)
    assert err.value.field == "D"


def test_truncated_payload_and_trailing_bytes(volume, tmp_path):
    path = tmp_path / "v.vol"
    save_volume(volume, path)
    data = path.read_bytes()

    path.write_bytes(data[:-4])
    with pytest.raises(FormatError, match="truncated payload") as err:
        load_volume(path)
    assert err.value.field == "voxels"

    path.write_bytes(data + b"\0\0\0\0")
    with pytest.raises(FormatError, match="trailing bytes"):
        load_volume(path)


def test_unknown_style_tag(rng, tmp_path):
    path = tmp_path / "x.xry"
    save_xray(XrayImage(rng.random((3, 3))), path)
    data = bytearray(path.read_bytes())
    data[16] = 9
    path.write_bytes(bytes(data))

    with pytest.raises(FormatError) as err:
        load_xray(path)
    assert err.value.field == "style_tag"


def test_out_of_range_payload_is_a_format_error(tmp_path):
    path = tmp_path / "v.vol"
    path.write_bytes(b"XCTV" + struct.pack("<4I", 1, 2, 2, 2) + np.full(8, 2.0, dtype="<f4").tobytes())

    with pytest.raises(FormatError) as err:
        load_volume(path)
    assert err.value.field == "voxels"


def test_paired_dataset_subset(volume):
    samples = [
        (XrayImage(np.full((5, 6), i / 10)), volume, label)
        for i, label in enumerate([ClassLabel.healthy, ClassLabel.sick, ClassLabel.tb])
    ]
    dataset = PairedDataset(tuple(PairedSample(*s) for s in samples), master_seed=3)
    sub = dataset.subset([2, 0])

    assert len(sub) == 2
    assert [s.label for s in sub] == [ClassLabel.tb, ClassLabel.healthy]
    assert sub.master_seed == 3


def test_unpaired_set_counts_unseal(volume):
    xrays = [XrayImage(np.zeros((5, 6)))]
    unpaired = UnpairedXraySet(xrays, [volume], [ClassLabel.tb], master_seed=0)

    assert unpaired.access_count == 0
    assert len(unpaired.xrays) == 1
    assert unpaired.access_count == 0

    volumes, labels = unpaired.unseal()
    assert volumes[0] is volume
    assert labels == (ClassLabel.tb,)
    assert unpaired.access_count == 1


def test_unpaired_set_without_hidden_part(volume):
    unpaired = UnpairedXraySet([XrayImage(np.zeros((5, 6)))], None, None, master_seed=0)

    assert not unpaired.has_hidden
    with pytest.raises(EvaluationError):
        unpaired.unseal()


def test_unpaired_set_must_be_aligned(volume):
    xrays = [XrayImage(np.zeros((5, 6)))] * 2
    with pytest.raises(DataError):
        UnpairedXraySet(xrays, [volume], [ClassLabel.tb], master_seed=0)
    with pytest.raises(DataError):
        UnpairedXraySet(xrays, [volume, volume], None, master_seed=0)


def test_write_pgm_header(tmp_path):
    path = write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.0, 0.5]]))
    assert path.read_bytes() == b"P5\n3 1\n255\n" + bytes([0, 255, 128])


@pytest.mark.parametrize("plane,count", [("coronal", 4), ("axial", 5), (Plane.sagittal, 6)])
def test_export_slices(volume, plane, count, tmp_path):
    paths = export_slices(volume, plane, tmp_path / "slices")

    assert len(paths) == count
    assert paths[0].name == "slice_0000.pgm"
    assert paths[0].read_bytes().startswith(b"P5\n")


def test_export_slices_rejects_unknown_plane(volume, tmp_path):
    with pytest.raises(ValueError, match="Valid values"):
        export_slices(volume, "oblique", tmp_path)
