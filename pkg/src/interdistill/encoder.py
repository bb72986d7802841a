"""Hashed embedding-bag dual encoder.

Queries and documents share one embedding table. A text is tokenized into
hash buckets, and its representation is the mean of the corresponding rows;
relevance is the dot product of the two means.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (DimensionMismatchError, EmptyInputError, FormatError,
                     InvalidArgumentError, TruncatedFileError, VersionMismatchError)

DEFAULT_DIM = 64
DEFAULT_BUCKETS = 2 ** 15
DEFAULT_MAX_LEN = 128
INIT_SCALE = 0.05

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_WORD_RE = re.compile(r"[^\W_]+")

MAGIC = b"IDST"
FORMAT_VERSION = 1
ROLES = ("ranker", "retriever")
# magic, version u32, role u8, dim u32, buckets u32
_HEADER = struct.Struct("<4sIBII")


@lru_cache(maxsize=1 << 16)
def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def words(text: str) -> list[str]:
    """Lowercased alphanumeric runs; the shared word splitter for the package."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, max_len: int = DEFAULT_MAX_LEN,
             vocab_buckets: int = DEFAULT_BUCKETS) -> np.ndarray:
    """Map text to bucket ids: FNV-1a 64 of each UTF-8 word, modulo ``vocab_buckets``."""
    if vocab_buckets < 16:
        raise InvalidArgumentError("vocab_buckets must be >= 16")
    if max_len < 1:
        raise InvalidArgumentError("max_len must be >= 1")
    toks = words(text)
    if not toks:
        raise EmptyInputError("text has no tokens")
    toks = toks[:max_len]
    return np.array([fnv1a_64(t.encode("utf-8")) % vocab_buckets for t in toks],
                    dtype=np.int64)


@dataclass
class EncoderModel:
    table: np.ndarray
    role: str = "retriever"

    def __post_init__(self):
        self.table = np.ascontiguousarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise InvalidArgumentError("embedding table must be 2-d")
        if self.dim < 2 or self.vocab_buckets < 16:
            raise InvalidArgumentError("need dim >= 2 and vocab_buckets >= 16")
        if self.role not in ROLES:
            raise InvalidArgumentError(f"unknown role {self.role!r}")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def vocab_buckets(self) -> int:
        return self.table.shape[0]

    @classmethod
    def init(cls, seed: int, dim: int = DEFAULT_DIM, vocab_buckets: int = DEFAULT_BUCKETS,
             role: str = "retriever") -> "EncoderModel":
        rng = np.random.default_rng(seed)
        table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(vocab_buckets, dim))
        return cls(table, role)

    @classmethod
    def zeros(cls, dim: int = DEFAULT_DIM, vocab_buckets: int = DEFAULT_BUCKETS,
              role: str = "retriever") -> "EncoderModel":
        return cls(np.zeros((vocab_buckets, dim)), role)

    def copy(self, role: str | None = None) -> "EncoderModel":
        return EncoderModel(self.table.copy(), role or self.role)

    def tokenize(self, text: str, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
        return tokenize(text, max_len, self.vocab_buckets)


def _check_tokens(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise EmptyInputError("empty token sequence")
    return ids


def encode(model: EncoderModel, tokens) -> np.ndarray:
    ids = _check_tokens(tokens)
    return model.table[ids].mean(axis=0)


def encode_many(model: EncoderModel, token_lists: Sequence) -> np.ndarray:
    """Stack of :func:`encode` outputs, one row per token sequence."""
    out = np.empty((len(token_lists), model.dim))
    for i, toks in enumerate(token_lists):
        out[i] = encode(model, toks)
    return out


def score_pair(model: EncoderModel, query_tokens, doc_tokens) -> float:
    return float(encode(model, query_tokens) @ encode(model, doc_tokens))


def score_candidates(model: EncoderModel, query_tokens, candidates: Sequence) -> np.ndarray:
    q = encode(model, query_tokens)
    return encode_many(model, candidates) @ q


def backward_scores(model: EncoderModel, query_tokens, candidates: Sequence, upstream,
                    out: np.ndarray | None = None) -> np.ndarray:
    """Accumulate d(sum_i upstream[i] * score_i) / d(table) into ``out``.

    ``out`` defaults to a fresh zero array shaped like the table. Repeated
    token ids receive one contribution per occurrence.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 1 or upstream.size != len(candidates):
        raise InvalidArgumentError(
            f"upstream has {upstream.size} entries for {len(candidates)} candidates")
    if out is None:
        out = np.zeros_like(model.table)
    elif out.shape != model.table.shape:
        raise InvalidArgumentError("gradient buffer shape does not match the table")
    q_ids = _check_tokens(query_tokens)
    q = model.table[q_ids].mean(axis=0)
    docs = encode_many(model, candidates)
    g_q = upstream @ docs
    np.add.at(out, q_ids, g_q / q_ids.size)
    for u, toks in zip(upstream, candidates):
        if u == 0.0:
            continue
        d_ids = _check_tokens(toks)
        np.add.at(out, d_ids, (u / d_ids.size) * q)
    return out


def save_model(model: EncoderModel, path) -> None:
    """Write the ``IDST`` checkpoint: header, little-endian float64 rows, CRC32."""
    payload = np.ascontiguousarray(model.table, dtype="<f8").tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, ROLES.index(model.role),
                          model.dim, model.vocab_buckets)
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(header + payload + crc)


def load_model(path) -> EncoderModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the checkpoint header")
    magic, version, role, dim, buckets = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if role >= len(ROLES):
        raise FormatError(f"{path}: unknown role byte {role}")
    body = data[_HEADER.size:]
    if len(body) < 4:
        raise TruncatedFileError(f"{path}: missing payload checksum")
    payload, crc = body[:-4], struct.unpack("<I", body[-4:])[0]
    expected = dim * buckets * 8
    if len(payload) != expected:
        if len(payload) % 8 == 0 and len(payload) > 0 and zlib.crc32(payload) & 0xFFFFFFFF == crc:
            raise DimensionMismatchError(
                f"{path}: header says {buckets}x{dim}, payload holds {len(payload) // 8} values")
        raise TruncatedFileError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: payload checksum mismatch")
    table = np.frombuffer(payload, dtype="<f8").reshape(buckets, dim).astype(np.float64)
    return EncoderModel(table, ROLES[role])
