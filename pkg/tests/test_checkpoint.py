import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mabicap.checkpoint import (
    VERSION,
    Checkpoint,
    from_bytes,
    load_checkpoint,
    restore,
    save_checkpoint,
    snapshot,
    to_bytes,
)
from mabicap.errors import IncompatibleCheckpointError, IntegrityError
from mabicap.tensor import Tensor


def sample(rng):
    gen = np.random.default_rng(3)
    gen.random(5)
    return Checkpoint(
        {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)},
        {"hidden": 4, "lam": 0.01},
        17,
        gen.bit_generator.state,
        {"note": "x"},
    )


def test_round_trip_is_bit_exact(tmp_path, rng):
    ck = sample(rng)
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    for k in ck.params:
        assert back.params[k].tobytes() == np.asarray(ck.params[k]).tobytes()
    assert back.step == 17 and back.config == ck.config and back.meta == ck.meta
    gen = np.random.default_rng()
    gen.bit_generator.state = back.rng_state
    ref = np.random.default_rng(3)
    ref.random(5)
    assert gen.random() == ref.random()


def test_save_load_save_is_byte_identical(tmp_path, rng):
    save_checkpoint(sample(rng), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 4))))
def test_any_float_values_survive(values):
    back = from_bytes(to_bytes(Checkpoint({"p": values})))
    assert back.params["p"].tobytes() == values.tobytes()


@pytest.mark.parametrize("cut", [1, 10, 40, 100])
def test_truncated_file_is_integrity_error(rng, cut):
    blob = to_bytes(sample(rng))
    with pytest.raises(IntegrityError):
        from_bytes(blob[:-cut])


def test_flipped_byte_is_integrity_error(rng):
    blob = bytearray(to_bytes(sample(rng)))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(IntegrityError):
        from_bytes(bytes(blob))


def test_version_mismatch(rng):
    ck = sample(rng)
    ck.version = VERSION + 1
    with pytest.raises(IncompatibleCheckpointError):
        from_bytes(to_bytes(ck))


def test_not_a_checkpoint():
    with pytest.raises(IntegrityError):
        from_bytes(b"hello world" * 10)


def test_snapshot_and_restore(rng):
    params = {"a": Tensor(rng.normal(size=3), requires_grad=True)}
    saved = snapshot(params, "m.")
    params["a"].data += 1
    restore(params, saved, "m.")
    assert np.array_equal(params["a"].data, saved["m.a"])
    with pytest.raises(IntegrityError):
        restore(params, {"m.a": np.zeros(4)}, "m.")
