import logging

import pytest

from xct.datasets import DatasetKind, DatasetManifest, load_dataset, read_dataset, write_paired, write_unpaired
from xct.errors import DataError
from xct.phantom import StyleShiftParams
from xct.runlog import RunManifest
from xct.volume import PairedDataset, UnpairedXraySet

MIX = (0.4, 0.3, 0.3)
SHIFT = StyleShiftParams(gamma=1.4, contrast=1.1, noise_sigma=0.02)


def _store(manifest: DatasetManifest, root):
    RunManifest(command="phantom", datasets={"dataset": manifest.to_dict()}).write(root)


def test_paired_roundtrip(paired_small, tmp_path):
    manifest = write_paired(paired_small, tmp_path, MIX)
    _store(manifest, tmp_path)

    loaded = load_dataset(tmp_path)

    assert isinstance(loaded, PairedDataset)
    assert manifest.kind is DatasetKind.paired
    assert manifest.dims == (16, 16, 16)
    assert loaded.master_seed == paired_small.master_seed
    for a, b in zip(loaded, paired_small):
        assert a.label is b.label
        assert a.ct.voxels.tobytes() == b.ct.voxels.tobytes()
        assert a.xray.pixels.tobytes() == b.xray.pixels.tobytes()


def test_unpaired_roundtrip_keeps_hidden_part_sealed(unpaired_small, tmp_path):
    manifest = write_unpaired(unpaired_small, tmp_path, MIX, SHIFT)
    _store(manifest, tmp_path)

    loaded = load_dataset(tmp_path)

    assert isinstance(loaded, UnpairedXraySet)
    assert (tmp_path / "hidden" / "sample_0000.vol").exists()
    assert loaded.access_count == 0
    assert loaded.has_hidden
    volumes, labels = loaded.unseal()
    expected, expected_labels = unpaired_small.unseal()
    assert labels == expected_labels
    assert volumes[0].voxels.tobytes() == expected[0].voxels.tobytes()


def test_manifest_dict_roundtrip(unpaired_small, tmp_path):
    manifest = write_unpaired(unpaired_small, tmp_path, MIX, SHIFT)
    again = DatasetManifest.from_dict(manifest.to_dict())

    assert again.shift == SHIFT
    assert again.files == manifest.files
    assert len(again) == len(unpaired_small)


def test_unpaired_without_hidden_volumes_loads_for_training(unpaired_small, tmp_path, caplog):
    manifest = write_unpaired(unpaired_small, tmp_path, MIX, SHIFT)
    (tmp_path / "hidden" / "sample_0001.vol").unlink()

    with caplog.at_level(logging.WARNING):
        loaded = read_dataset(tmp_path, manifest)

    assert not loaded.has_hidden
    assert len(loaded.xrays) == len(unpaired_small)
    assert "hidden" in caplog.text


def test_missing_xray_is_a_data_error(paired_small, tmp_path):
    manifest = write_paired(paired_small, tmp_path, MIX)
    (tmp_path / "sample_0002.xry").unlink()

    with pytest.raises(DataError, match="missing"):
        read_dataset(tmp_path, manifest)


def test_bad_label_is_a_data_error(paired_small, tmp_path):
    manifest = write_paired(paired_small, tmp_path, MIX)
    manifest.files[0]["label"] = "flu"

    with pytest.raises(DataError):
        read_dataset(tmp_path, manifest)


def test_malformed_manifest():
    with pytest.raises(DataError, match="malformed"):
        DatasetManifest.from_dict({"kind": "paired"})
    with pytest.raises(DataError):
        DatasetManifest.from_dict({"kind": "mixed", "master_seed": 0, "dims": [2, 2, 2], "class_mix": [1, 0, 0], "files": []})


def test_directory_without_manifest(tmp_path):
    with pytest.raises(DataError, match="manifest.json"):
        load_dataset(tmp_path)
    RunManifest(command="train").write(tmp_path)
    with pytest.raises(DataError, match="no dataset"):
        load_dataset(tmp_path)
