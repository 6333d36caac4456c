import struct

import numpy as np
import pytest

from lcnmt.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from lcnmt.errors import ConfigError, CorruptionError, FormatError
from lcnmt.model import ModelConfig, init_params


def config(memory_block=1):
    return ModelConfig(src_vocab=9, tgt_vocab=7, d_model=8, n_blocks=2, n_heads=2, ffn_width=8, memory_block=memory_block)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_bitwise(tmp_path, dtype):
    params = init_params(config(), seed=5, dtype=dtype)
    save_checkpoint(tmp_path / "m.ckpt", params, config(), {"step": 3, "seed": 5})
    loaded, cfg, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == config()
    assert meta["step"] == 3
    assert set(loaded) == set(params)
    for name, t in params.items():
        assert loaded[name].dtype == dtype
        assert loaded[name].data.tobytes() == t.data.tobytes()


def test_encoding_is_deterministic():
    params = init_params(config(), seed=1)
    assert encode_checkpoint(params, config()) == encode_checkpoint(init_params(config(), seed=1), config())


def test_layout_header():
    blob = encode_checkpoint(init_params(config(), 0), config())
    assert blob[:4] == MAGIC
    assert struct.unpack("<I", blob[4:8]) == (1,)


def test_truncated_file_is_corruption(tmp_path):
    blob = encode_checkpoint(init_params(config(), 0), config())
    for cut in (10, len(blob) // 2, len(blob) - 1):
        (tmp_path / "t.ckpt").write_bytes(blob[:cut])
        with pytest.raises(CorruptionError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_flipped_byte_fails_crc():
    blob = bytearray(encode_checkpoint(init_params(config(), 0), config()))
    blob[-10] ^= 0xFF
    with pytest.raises(CorruptionError, match="CRC"):
        decode_checkpoint(bytes(blob))


def test_bad_magic_and_version():
    blob = encode_checkpoint(init_params(config(), 0), config())
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="version 9"):
        decode_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])


def test_memory_checkpoint_for_base_decode_names_tensors(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", init_params(config(1), 0), config(1))
    with pytest.raises(ConfigError) as err:
        load_checkpoint(tmp_path / "m.ckpt", expect_memory=False)
    msg = str(err.value)
    for name in ("enc.1.mem.wq", "memory.k_none", "memory.v_none"):
        assert name in msg
    save_checkpoint(tmp_path / "b.ckpt", init_params(config(None), 0), config(None))
    with pytest.raises(ConfigError, match="memory.v_none"):
        load_checkpoint(tmp_path / "b.ckpt", expect_memory=True)


def test_schema_mismatch_rejected(tmp_path):
    params = init_params(config(), 0)
    del params["out.b"]
    save_checkpoint(tmp_path / "x.ckpt", params, config())
    with pytest.raises(ConfigError, match="out.b"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_loaded_model_decodes_identically(tmp_path):
    from lcnmt.model import encode

    params = init_params(config(None), 2)
    save_checkpoint(tmp_path / "m.ckpt", params, config(None))
    loaded, cfg, _ = load_checkpoint(tmp_path / "m.ckpt")
    a = encode(params, cfg, [4, 5]).hidden.data
    b = encode(loaded, cfg, [4, 5]).hidden.data
    assert a.tobytes() == b.tobytes()
