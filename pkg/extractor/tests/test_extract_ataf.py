import numpy as np
import pytest

import ata.ataf as primary_ataf
from ata_extract.ataf import atomic_write_text, write_tensor
from ata_extract.errors import ExtractError


def test_round_trip_through_primary_reader(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((17, 9)).astype(np.float32)
    path = tmp_path / "t.ataf"
    write_tensor(path, arr)
    back = primary_ataf.read_tensor(path)
    assert back.dtype == np.float32
    assert arr.tobytes() == back.tobytes()


def test_two_by_three_file_is_56_bytes(tmp_path):
    path = tmp_path / "m.ataf"
    write_tensor(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    assert path.stat().st_size == 16 + 2 * 8 + 6 * 4


def test_rank_one_and_three(tmp_path):
    for shape in [(5,), (2, 3, 4)]:
        path = tmp_path / f"r{len(shape)}.ataf"
        write_tensor(path, np.ones(shape, dtype=np.float32))
        back = primary_ataf.read_tensor(path)
        assert back.shape == shape


def test_rejects_empty_and_non_finite(tmp_path):
    with pytest.raises(ExtractError):
        write_tensor(tmp_path / "e.ataf", np.empty((0, 4), dtype=np.float32))
    with pytest.raises(ExtractError):
        write_tensor(tmp_path / "n.ataf", np.array([1.0, np.nan], dtype=np.float32))


def test_no_temp_files_left_behind(tmp_path):
    write_tensor(tmp_path / "a.ataf", np.ones((3, 3), dtype=np.float32))
    atomic_write_text(tmp_path / "a.json", "{}")
    leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
    assert leftovers == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ataf", "a.json"]


def test_failed_write_cleans_up_and_keeps_old_file(tmp_path):
    path = tmp_path / "a.ataf"
    write_tensor(path, np.ones((2, 2), dtype=np.float32))
    before = path.read_bytes()
    with pytest.raises(ExtractError):
        write_tensor(path, np.array([np.inf], dtype=np.float32))
    assert path.read_bytes() == before
    assert [p for p in tmp_path.iterdir()] == [path]


def test_overwrite_replaces_content(tmp_path):
    path = tmp_path / "a.ataf"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32))
    write_tensor(path, np.ones((4, 4), dtype=np.float32))
    assert primary_ataf.read_tensor(path).shape == (4, 4)
