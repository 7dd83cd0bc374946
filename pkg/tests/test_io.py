import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bifsmn.errors import LoadError
from bifsmn.fsmn import forward_batch, init_model
from bifsmn.io import (
    dumps_features, dumps_model, load_features, load_model, loads_features, loads_model,
    save_features, save_model,
)


def _model(seed=0, **kw):
    args = dict(n_blocks=4, hidden_dim=12, proj_dim=8, delta_set=(1, 2, 4), seed=seed)
    args.update(kw)
    return init_model(6, 3, **args)


def test_round_trip_bytes_and_outputs(tmp_path, rng):
    m = _model()
    path = tmp_path / "m.bfsm"
    save_model(m, path)
    back = load_model(path)
    assert dumps_model(back) == path.read_bytes()
    X = rng.standard_normal((2, 16, 6)).astype(np.float32)
    for d in (1, 2, 4):
        a, _ = forward_batch(m, X, d)
        b, _ = forward_batch(back, X, d)
        assert a.logits.tobytes() == b.logits.tobytes()
        assert m.forward(X[0], d).logits.tobytes() == back.forward(X[0], d).logits.tobytes()


def test_fp_model_round_trip():
    m = _model(binarized=False, delta_set=(1,))
    data = dumps_model(m)
    assert b".bits" not in data
    assert dumps_model(loads_model(data)) == data


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 10**9))
def test_any_single_byte_corruption_is_detected(seed, where):
    data = bytearray(dumps_model(_model(seed % 7, n_blocks=2, hidden_dim=4, proj_dim=3, delta_set=(1, 2))))
    pos = where % len(data)
    data[pos] ^= 1 + seed % 255
    with pytest.raises(LoadError):
        loads_model(bytes(data))


def test_delta_not_dividing_depth_rejected_on_load():
    data = dumps_model(_model(n_blocks=4, delta_set=(1, 2, 4)))
    # rename every delta-4 entry to delta 3 and fix up checksums
    magic, ver, hlen, _ = struct.unpack_from("<4sIII", data)
    header = data[16 : 16 + hlen].replace(b'"delta_set":[1,2,4]', b'"delta_set":[1,2,3]')
    header = header.replace(b".bn.4.", b".bn.3.")
    pre = struct.pack("<4sIII", magic, ver, len(header), zlib.crc32(header))
    with pytest.raises(LoadError) as exc:
        loads_model(pre + header + data[16 + hlen :])
    assert exc.value.reason == "structure"


@pytest.mark.parametrize(
    "mutate, reason",
    [
        (lambda d: d[:10], "truncated"),
        (lambda d: d[:-3], "truncated"),
        (lambda d: b"XFSM" + d[4:], "magic"),
        (lambda d: d[:4] + struct.pack("<I", 2) + d[8:], "version"),
        (lambda d: d + b"\0", "trailing"),
    ],
)
def test_load_error_reasons(mutate, reason):
    with pytest.raises(LoadError) as exc:
        loads_model(mutate(dumps_model(_model(n_blocks=2, delta_set=(1, 2)))))
    assert exc.value.reason == reason
    assert exc.value.category == "load"


def test_packed_section_must_match_latents():
    m = _model(n_blocks=2, delta_set=(1, 2))
    data = dumps_model(m)
    m.blocks[0].V[0, 0] *= -1
    flipped = dumps_model(m)
    # splice the flipped latent blob with the original packed blob
    hlen = struct.unpack_from("<I", data, 8)[0]
    table = {e["name"]: e for e in json.loads(data[16 : 16 + hlen])["blobs"]}
    base = 16 + hlen
    e = table["blocks.0.V.bits"]
    mixed = bytearray(flipped)
    mixed[base + e["offset"] : base + e["offset"] + e["nbytes"]] = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
    with pytest.raises(LoadError):
        loads_model(bytes(mixed))


def test_features_round_trip(tmp_path, rng):
    x = rng.standard_normal((7, 5)).astype(np.float32)
    p = tmp_path / "x.bftr"
    save_features(x, p)
    raw = p.read_bytes()
    assert raw[:4] == b"BFTR" and struct.unpack_from("<II", raw, 4) == (7, 5)
    assert raw[12:16] == b"f32\0" and len(raw) == 16 + 7 * 5 * 4
    assert np.array_equal(load_features(p), x)


@pytest.mark.parametrize(
    "data, reason",
    [
        (b"BFTR", "truncated"),
        (b"BFTX" + struct.pack("<II", 1, 1) + b"f32\0" + b"\0" * 4, "magic"),
        (b"BFTR" + struct.pack("<II", 1, 1) + b"f64\0" + b"\0" * 8, "header"),
        (b"BFTR" + struct.pack("<II", 2, 2) + b"f32\0" + b"\0" * 12, "truncated"),
        (b"BFTR" + struct.pack("<II", 1, 1) + b"f32\0" + struct.pack("<f", float("nan")), "header"),
    ],
)
def test_feature_errors(data, reason):
    with pytest.raises(LoadError) as exc:
        loads_features(data)
    assert exc.value.reason == reason


def test_features_must_be_matrix():
    with pytest.raises(ValueError):
        dumps_features(np.zeros(3))
