"""Serialization round-trips and corruption handling for the array store."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinas.errors import ContractError, IngestionError
from pinas.store import MAGIC, ParameterStore


def _sample_store(rng):
    return ParameterStore(
        {
            "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
            "a.bias": rng.normal(size=(4,)).astype(np.float64),
            "counts": np.arange(6, dtype=np.int64).reshape(2, 3),
            "flags": np.array([1, 0, 2], dtype=np.int32),
        }
    )


def test_round_trip_preserves_values_dtypes_order(rng):
    store = _sample_store(rng)
    back = ParameterStore.from_bytes(store.to_bytes())
    assert back.names() == store.names()
    for name, arr in store.items():
        got = back.get(name)
        assert got.dtype == arr.dtype
        np.testing.assert_array_equal(got, arr)


def test_serialization_is_byte_deterministic(rng):
    store = _sample_store(rng)
    assert store.to_bytes() == store.to_bytes()
    assert store.checksum() == ParameterStore.from_bytes(store.to_bytes()).checksum()


def test_save_load_file(tmp_path, rng):
    store = _sample_store(rng)
    store.save(tmp_path / "s.pnstore")
    assert ParameterStore.load(tmp_path / "s.pnstore").checksum() == store.checksum()


def test_copy_is_deep(rng):
    store = _sample_store(rng)
    dup = store.copy()
    dup.get("a.weight")[:] = 0.0
    assert store.get("a.weight").any()


def test_rejects_unsupported_dtype():
    with pytest.raises(ContractError, match="dtype"):
        ParameterStore({"x": np.zeros(2, dtype=np.float16)})


def test_missing_entry_is_contract_error(rng):
    with pytest.raises(ContractError, match="no entry"):
        _sample_store(rng).get("nope")


def test_bad_magic_reports_offset():
    with pytest.raises(IngestionError, match="byte 0"):
        ParameterStore.from_bytes(b"XXSTORE1" + b"\x00" * 20)


def test_truncated_header_reports_offset():
    with pytest.raises(IngestionError, match="byte 8"):
        ParameterStore.from_bytes(MAGIC + b"\x01")


def test_truncated_manifest_reports_offset(rng):
    data = _sample_store(rng).to_bytes()
    with pytest.raises(IngestionError, match="byte 12"):
        ParameterStore.from_bytes(data[:14])


def test_truncated_payload_names_entry(rng):
    # chopping 40 bytes lands mid-"counts" (flags is 12 bytes, counts 48)
    data = _sample_store(rng).to_bytes()
    with pytest.raises(IngestionError, match="counts"):
        ParameterStore.from_bytes(data[:-40])


def test_trailing_bytes_rejected(rng):
    data = _sample_store(rng).to_bytes()
    with pytest.raises(IngestionError, match="trailing"):
        ParameterStore.from_bytes(data + b"\x00")


def test_checksum_tracks_content(rng):
    store = _sample_store(rng)
    ref = store.checksum()
    store.get("a.weight")[0, 0] += 1.0
    assert store.checksum() != ref


@settings(max_examples=30, deadline=None)
@given(
    shapes=st.lists(
        st.lists(st.integers(0, 4), min_size=1, max_size=3), min_size=1, max_size=5
    ),
    dtype=st.sampled_from(["float32", "float64", "int32", "int64"]),
    data=st.data(),
)
def test_round_trip_property(shapes, dtype, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    store = ParameterStore()
    for i, shape in enumerate(shapes):
        arr = rng.integers(-100, 100, size=tuple(shape)).astype(dtype)
        store.set(f"e{i}", arr)
    back = ParameterStore.from_bytes(store.to_bytes())
    assert back.names() == store.names()
    for name, arr in store.items():
        np.testing.assert_array_equal(back.get(name), arr)
        assert back.get(name).dtype == arr.dtype
