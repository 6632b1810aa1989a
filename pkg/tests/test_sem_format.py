import numpy as np
import numpy.testing as npt
import pytest

from semattn.errors import FormatError
from semattn.score_tensor import densify, sparsify
from semattn.sem_format import MAGIC, read_sem, write_sem


def random_sparse(rng, h=6, w=5, L=11):
    return sparsify(rng.random((h, w, L)).astype(np.float32))


def test_round_trip_bits(tmp_path, seed=3):
    rng = np.random.default_rng(seed)
    sp = random_sparse(rng)
    path = tmp_path / "x.sem"
    write_sem(path, sp)
    back = read_sem(path)
    npt.assert_array_equal(back.labels, sp.labels)
    npt.assert_array_equal(back.scores, sp.scores)
    assert back.num_classes == sp.num_classes


def test_header_layout(tmp_path):
    sp = random_sparse(np.random.default_rng(0), h=2, w=3, L=7)
    path = tmp_path / "x.sem"
    write_sem(path, sp)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    h, w, L = np.frombuffer(raw[4:16], dtype="<u4")
    assert (h, w, L) == (2, 3, 7)
    assert len(raw) == 16 + 2 * 3 * 18  # 18 bytes per pixel record


def test_truncated_file_rejected(tmp_path):
    sp = random_sparse(np.random.default_rng(1))
    path = tmp_path / "x.sem"
    write_sem(path, sp)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        read_sem(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.sem"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError):
        read_sem(path)


def test_out_of_range_label_rejected(tmp_path):
    sp = random_sparse(np.random.default_rng(2), L=5)
    path = tmp_path / "x.sem"
    write_sem(path, sp)
    raw = bytearray(path.read_bytes())
    # L lives at bytes 12..16; shrink it below the stored labels
    raw[12:16] = np.array([1], dtype="<u4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_sem(path)


def test_write_read_densify_mass(tmp_path):
    """100 random tensors: the full disk round trip reproduces top-3 mass."""
    rng = np.random.default_rng(42)
    for i in range(100):
        h, w, L = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(3, 16))
        dense = rng.random((h, w, L)).astype(np.float32)
        sp = sparsify(dense)
        path = tmp_path / f"t{i}.sem"
        write_sem(path, sp)
        npt.assert_array_equal(densify(read_sem(path)), densify(sp))
