"""Model checkpoint round-trips and fault injection on the binary container."""

from __future__ import annotations

import numpy as np
import pytest

from skewsim.errors import FormatError
from skewsim.nn.io import load_model, save_model
from skewsim.nn.model import Model, ModelSpec


def _trained_ish_model(seed=0):
    model = Model(ModelSpec("mlp", input_dim=6, num_classes=3, norm="batch", hidden=8),
                  np.float32, init_seed=seed)
    x = np.random.default_rng(seed).standard_normal((16, 6)).astype(np.float32)
    model.forward(x, train=True)  # move the running statistics off init
    return model


def test_model_round_trip_preserves_params_and_stats(tmp_path):
    model = _trained_ish_model()
    path = tmp_path / "m.ckpt"
    save_model(model, str(path))
    loaded = load_model(str(path))
    assert np.array_equal(loaded.params.data, model.params.data)
    for (ka, a), (kb, b) in zip(model.state_arrays(), loaded.state_arrays()):
        assert ka == kb
        assert np.array_equal(a, b)


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(_trained_ish_model(), str(path))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="bad magic"):
        load_model(str(path))


def test_truncated_file_reports_eof(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(_trained_ish_model(), str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError, match="unexpected EOF"):
        load_model(str(path))


def test_unknown_version_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(_trained_ish_model(), str(path))
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_model(str(path))


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(_trained_ish_model(), str(path))
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_model(str(path))


def test_segment_table_mismatch_is_rejected(tmp_path):
    # a checkpoint for one architecture must not load into another
    small = Model(ModelSpec("logreg", input_dim=6, num_classes=3), np.float32)
    path = tmp_path / "m.ckpt"
    save_model(small, str(path))
    blob = path.read_bytes()
    other = Model(ModelSpec("logreg", input_dim=8, num_classes=3), np.float32)
    spec_json = small.spec.to_json().encode()
    patched = blob.replace(spec_json, other.spec.to_json().encode())
    assert len(patched) == len(blob)  # same-length swap keeps the container intact
    path.write_bytes(patched)
    with pytest.raises(FormatError, match="segment table"):
        load_model(str(path))
