import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interdistill.encoder import (EncoderModel, backward_scores, encode, fnv1a_64, load_model,
                                  save_model, score_candidates, score_pair, tokenize)
from interdistill.errors import (DimensionMismatchError, EmptyInputError, FormatError,
                                 InvalidArgumentError, TruncatedFileError, VersionMismatchError)
from interdistill.numkit import finite_diff_check


def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit test values
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_tokenize_repeats_and_truncation():
    ids = tokenize("The The")
    assert len(ids) == 2 and ids[0] == ids[1]
    assert len(tokenize("a b", max_len=1)) == 1


def test_tokenize_normalizes():
    assert np.array_equal(tokenize("Paris, France!"), tokenize("paris france"))


@pytest.mark.parametrize("text", ["", "   ", "?!"])
def test_tokenize_empty(text):
    with pytest.raises(EmptyInputError):
        tokenize(text)


def test_tokenize_ids_in_range():
    ids = tokenize("alpha beta gamma", vocab_buckets=64)
    assert ids.min() >= 0 and ids.max() < 64


def test_encode_single_and_repeated(small_model):
    m = small_model
    assert np.array_equal(encode(m, [5]), m.table[5])
    assert np.allclose(encode(m, [5, 5, 5]), m.table[5], atol=1e-15)
    assert np.allclose(encode(m, [1, 2]), (m.table[1] + m.table[2]) / 2, atol=1e-15)


def test_encode_empty(small_model):
    with pytest.raises(EmptyInputError):
        encode(small_model, [])


@given(st.lists(st.integers(0, 31), min_size=1, max_size=10), st.randoms(use_true_random=False))
def test_encode_order_invariant(tokens, rnd):
    m = EncoderModel(np.random.default_rng(0).uniform(-1, 1, (32, 4)))
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    assert np.allclose(encode(m, tokens), encode(m, shuffled), atol=1e-14)


@given(st.lists(st.integers(0, 31), min_size=1, max_size=8),
       st.lists(st.integers(0, 31), min_size=1, max_size=8))
def test_score_symmetric(a, b):
    m = EncoderModel(np.random.default_rng(1).uniform(-1, 1, (32, 4)))
    assert score_pair(m, a, b) == pytest.approx(score_pair(m, b, a), abs=1e-14)


def test_score_self_is_squared_norm(small_model):
    v = encode(small_model, [3, 4])
    assert score_pair(small_model, [3, 4], [4, 3]) == pytest.approx(float(v @ v), abs=1e-15)


def test_zero_model_scores_zero():
    m = EncoderModel.zeros(dim=4, vocab_buckets=16)
    assert score_pair(m, [1], [2]) == 0.0


def test_orthogonal_rows_score_zero():
    table = np.zeros((16, 4))
    table[1] = [1, 0, 0, 0]
    table[2] = [0, 1, 0, 0]
    assert score_pair(EncoderModel(table), [1], [2]) == 0.0


def test_init_distribution_and_determinism():
    a = EncoderModel.init(3, dim=8, vocab_buckets=64)
    b = EncoderModel.init(3, dim=8, vocab_buckets=64)
    assert np.array_equal(a.table, b.table)
    assert np.abs(a.table).max() <= 0.05
    assert a.table.shape == (64, 8)


def test_backward_zero_upstream(small_model):
    g = backward_scores(small_model, [1, 2], [[3], [4, 5]], [0.0, 0.0])
    assert not g.any()


def test_backward_hand_chain_rule(small_model):
    m = small_model
    g = backward_scores(m, [1], [[2]], [1.0])
    assert np.array_equal(g[1], m.table[2])
    assert np.array_equal(g[2], m.table[1])
    assert not np.delete(g, [1, 2], axis=0).any()


def test_backward_finite_differences():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        table = rng.uniform(-1, 1, size=(16, 3))
        q = list(rng.integers(0, 16, size=int(rng.integers(1, 5))))
        cands = [list(rng.integers(0, 16, size=int(rng.integers(1, 6)))) for _ in range(4)]
        up = rng.normal(size=4)

        def loss(flat):
            return float(up @ score_candidates(EncoderModel(flat.reshape(16, 3)), q, cands))

        def grad(flat):
            return backward_scores(EncoderModel(flat.reshape(16, 3)), q, cands, up).ravel()

        assert finite_diff_check(loss, grad, table.ravel()) < 1e-4


def test_backward_shape_errors(small_model):
    with pytest.raises(InvalidArgumentError):
        backward_scores(small_model, [1], [[2], [3]], [1.0])
    with pytest.raises(InvalidArgumentError):
        backward_scores(small_model, [1], [[2]], [1.0], out=np.zeros((3, 3)))


# checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_model):
    p = tmp_path / "m.ckpt"
    save_model(small_model, p)
    back = load_model(p)
    assert back.table.tobytes() == small_model.table.tobytes()
    assert back.role == small_model.role
    save_model(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_layout(tmp_path, small_model):
    p = tmp_path / "m.ckpt"
    save_model(small_model, p)
    data = p.read_bytes()
    magic, version, role, dim, buckets = struct.unpack_from("<4sIBII", data)
    assert (magic, dim, buckets) == (b"IDST", 4, 32)
    payload = data[struct.calcsize("<4sIBII"):-4]
    assert np.array_equal(np.frombuffer(payload, "<f8").reshape(32, 4), small_model.table)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(payload)


def _corrupt(tmp_path, model, mutate):
    p = tmp_path / "m.ckpt"
    save_model(model, p)
    p.write_bytes(mutate(bytearray(p.read_bytes())))
    return p


def test_checkpoint_bad_magic(tmp_path, small_model):
    def bad(b):
        b[0:4] = b"XXXX"
        return bytes(b)
    with pytest.raises(FormatError):
        load_model(_corrupt(tmp_path, small_model, bad))


def test_checkpoint_version(tmp_path, small_model):
    def bump(b):
        b[4:8] = struct.pack("<I", 99)
        return bytes(b)
    with pytest.raises(VersionMismatchError):
        load_model(_corrupt(tmp_path, small_model, bump))


def test_checkpoint_truncated(tmp_path, small_model):
    with pytest.raises(TruncatedFileError):
        load_model(_corrupt(tmp_path, small_model, lambda b: bytes(b[:-20])))


def test_checkpoint_dimension_mismatch(tmp_path, small_model):
    header = struct.calcsize("<4sIBII")

    def shrink_dim(b):
        b[9:13] = struct.pack("<I", 3)   # payload still holds 32x4 values
        return bytes(b)
    assert header == 17
    with pytest.raises(DimensionMismatchError):
        load_model(_corrupt(tmp_path, small_model, shrink_dim))


def test_checkpoint_bit_flip(tmp_path, small_model):
    def flip(b):
        b[40] ^= 0x01
        return bytes(b)
    with pytest.raises(FormatError):
        load_model(_corrupt(tmp_path, small_model, flip))
