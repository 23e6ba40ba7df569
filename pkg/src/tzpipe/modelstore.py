"""Encrypted model container.

Layout (all integers little-endian)::

    header      magic "TZLM" | version u16 | cipher id u16 | tensor count u32
    table       per tensor: name len u16 | name | group u32 | length u64
                            | chunk size u32 | chunk count u32 | offset u64
    wrapped key nonce 12 | key ciphertext 32 | tag 16
    checkpoint  length u64 | chunk size u32 | chunk count u32 | offset u64
    chunks      per chunk: nonce 12 | ciphertext | tag 16

Every chunk is sealed on its own with AES-256-GCM, so any chunk can be
opened without touching its neighbours. The associated data binds each
chunk to its tensor, position and length, which stops an untrusted loader
from swapping or truncating chunks. The key wrap takes the header, table and
checkpoint descriptor as associated data, so unwrapping the key also
authenticates the metadata.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

MAGIC = b"TZLM"
FORMAT_VERSION = 1
CIPHER_AES_256_GCM = 1
NONCE_SIZE = 12
TAG_SIZE = 16
KEY_SIZE = 32
DEFAULT_CHUNK_SIZE = 4_000_000
CHECKPOINT_INDEX = 0xFFFF_FFFF
ROOT_KEY_ENV = "TZPIPE_ROOT_KEY"

_HEADER = struct.Struct("<4sHHI")
_ENTRY_TAIL = struct.Struct("<IQIIQ")
_DESCRIPTOR = struct.Struct("<QIIQ")
_AAD = struct.Struct("<4sIIQ")
_WRAPPED_SIZE = NONCE_SIZE + KEY_SIZE + TAG_SIZE
_KEY_AAD = MAGIC + b"/model-key"


class ContainerError(Exception):
    pass


class ContainerFormatError(ContainerError):
    """Malformed or truncated container bytes."""


class DuplicateName(ContainerError):
    pass


class TamperDetected(ContainerError):
    pass


class BadIndex(ContainerError, IndexError):
    pass


class KeyUnwrapFailure(ContainerError):
    pass


@dataclass(frozen=True)
class ChunkedRecord:
    """Location and framing of one chunked plaintext stream."""

    length: int
    chunk_size: int
    chunk_count: int
    offset: int

    def plain_size(self, i: int) -> int:
        if i < self.chunk_count - 1:
            return self.chunk_size
        return self.length - self.chunk_size * (self.chunk_count - 1) if self.chunk_count else 0

    def record_offset(self, i: int) -> int:
        # every chunk before i is full-sized
        return self.offset + i * (NONCE_SIZE + self.chunk_size + TAG_SIZE)

    @property
    def end(self) -> int:
        return self.offset + self.chunk_count * (NONCE_SIZE + TAG_SIZE) + self.length


@dataclass(frozen=True)
class TensorEntry:
    name: str
    group: int
    record: ChunkedRecord


@dataclass
class ModelContainer:
    version: int
    cipher_id: int
    tensors: list[TensorEntry]
    wrapped_key: bytes
    checkpoint: ChunkedRecord
    data: bytes = field(repr=False)
    metadata: bytes = field(repr=False, default=b"")  # header, table and checkpoint descriptor

    def index_of(self, name: str) -> int:
        for i, t in enumerate(self.tensors):
            if t.name == name:
                return i
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]


class NonceSource:
    """4-byte prefix plus a 64-bit counter; never repeats within one container."""

    def __init__(self, seed: bytes | None = None):
        self.prefix = seed[:4].ljust(4, b"\0") if seed is not None else os.urandom(4)
        self.counter = 0

    def next(self) -> bytes:
        n = self.prefix + self.counter.to_bytes(8, "little")
        self.counter += 1
        return n


def chunk_count(length: int, chunk_size: int) -> int:
    return -(-length // chunk_size)


def _aad(index: int, chunk: int, length: int, name: bytes) -> bytes:
    return _AAD.pack(MAGIC, index, chunk, length) + name


def _seal(aead: AESGCM, nonces: NonceSource, data: bytes, chunk_size: int,
          index: int, name: bytes) -> bytes:
    out = bytearray()
    for c in range(chunk_count(len(data), chunk_size)):
        nonce = nonces.next()
        piece = data[c * chunk_size:(c + 1) * chunk_size]
        out += nonce + aead.encrypt(nonce, piece, _aad(index, c, len(piece), name))
    return bytes(out)


def pack(tensors: Iterable, model_key: bytes, root_key: bytes,
         chunk_size: int = DEFAULT_CHUNK_SIZE, checkpoint: bytes = b"",
         nonce_seed: bytes | None = None) -> bytes:
    """Build a container from (name, group, bytes) triples.

    Pass `nonce_seed` for reproducible output; leave it out in production.
    """
    if chunk_size <= 0 or chunk_size > 0xFFFF_FFFF:
        raise ValueError(f"chunk_size must be in 1..2**32-1, got {chunk_size}")
    for k, what in ((model_key, "model_key"), (root_key, "root_key")):
        if len(k) != KEY_SIZE:
            raise ValueError(f"{what} must be {KEY_SIZE} bytes, got {len(k)}")
    tensors = [(str(n), int(g), bytes(b)) for n, g, b in tensors]
    seen = set()
    for name, _, _ in tensors:
        if name in seen:
            raise DuplicateName(name)
        seen.add(name)

    table_size = sum(2 + len(n.encode()) + _ENTRY_TAIL.size for n, _, _ in tensors)
    offset = _HEADER.size + table_size + _WRAPPED_SIZE + _DESCRIPTOR.size
    nonces = NonceSource(nonce_seed)
    aead = AESGCM(model_key)

    table, body = bytearray(), bytearray()
    for i, (name, group, data) in enumerate(tensors):
        raw = name.encode()
        rec = ChunkedRecord(len(data), chunk_size, chunk_count(len(data), chunk_size), offset)
        table += struct.pack("<H", len(raw)) + raw
        table += _ENTRY_TAIL.pack(group, rec.length, rec.chunk_size, rec.chunk_count, rec.offset)
        body += _seal(aead, nonces, data, chunk_size, i, raw)
        offset = rec.end
    ck = ChunkedRecord(len(checkpoint), chunk_size, chunk_count(len(checkpoint), chunk_size), offset)
    body += _seal(aead, nonces, checkpoint, chunk_size, CHECKPOINT_INDEX, b"")

    header = _HEADER.pack(MAGIC, FORMAT_VERSION, CIPHER_AES_256_GCM, len(tensors))
    descriptor = _DESCRIPTOR.pack(ck.length, ck.chunk_size, ck.chunk_count, ck.offset)
    # the key wrap also authenticates every metadata byte
    metadata = header + bytes(table) + descriptor
    key_nonce = nonces.next()
    wrapped = key_nonce + AESGCM(root_key).encrypt(key_nonce, model_key, _KEY_AAD + metadata)
    return header + bytes(table) + wrapped + descriptor + bytes(body)


def _record(fields: tuple, what: str, size: int) -> ChunkedRecord:
    length, chunk_size, count, offset = fields
    rec = ChunkedRecord(length, chunk_size, count, offset)
    if chunk_size == 0 and (count or length):
        raise ContainerFormatError(f"{what}: zero chunk size")
    if chunk_size and count != chunk_count(length, chunk_size):
        raise ContainerFormatError(f"{what}: {count} chunks cannot hold {length} bytes")
    if rec.end > size:
        raise ContainerFormatError(f"{what}: record ends at {rec.end}, file has {size} bytes")
    return rec


def parse(data: bytes) -> ModelContainer:
    """Parse and bounds-check the header, table and descriptors."""
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise ContainerFormatError("truncated header")
    magic, version, cipher, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported format version {version}")
    if cipher != CIPHER_AES_256_GCM:
        raise ContainerFormatError(f"unknown cipher id {cipher}")
    pos, tensors = _HEADER.size, []
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            raw = data[pos + 2:pos + 2 + n]
            if len(raw) != n:
                raise ContainerFormatError(f"tensor {i}: truncated name")
            pos += 2 + n
            group, *rest = _ENTRY_TAIL.unpack_from(data, pos)
            pos += _ENTRY_TAIL.size
            name = raw.decode("utf-8")
            tensors.append(TensorEntry(name, group, _record(tuple(rest), f"tensor {name!r}", len(data))))
        table_end = pos
        wrapped = data[pos:pos + _WRAPPED_SIZE]
        if len(wrapped) != _WRAPPED_SIZE:
            raise ContainerFormatError("truncated wrapped-key record")
        pos += _WRAPPED_SIZE
        checkpoint = _record(_DESCRIPTOR.unpack_from(data, pos), "checkpoint", len(data))
        metadata = data[:table_end] + data[pos:pos + _DESCRIPTOR.size]
        pos += _DESCRIPTOR.size
    except (struct.error, UnicodeDecodeError) as e:
        raise ContainerFormatError(f"malformed table: {e}") from None

    spans = sorted([(t.record.offset, t.record.end) for t in tensors]
                   + [(checkpoint.offset, checkpoint.end)])
    prev = pos
    for start, end in spans:
        if start < prev:
            raise ContainerFormatError(f"overlapping records at offset {start}")
        prev = max(prev, end)
    return ModelContainer(version, cipher, tensors, wrapped, checkpoint, data, metadata)


def _as_container(container) -> ModelContainer:
    return container if isinstance(container, ModelContainer) else parse(container)


def _open(data: bytes, rec: ChunkedRecord, i: int, index: int, name: bytes,
          model_key: bytes) -> bytes:
    if not 0 <= i < rec.chunk_count:
        raise BadIndex(f"chunk {i} out of range 0..{rec.chunk_count - 1}")
    start = rec.record_offset(i)
    n = rec.plain_size(i)
    blob = data[start:start + NONCE_SIZE + n + TAG_SIZE]
    try:
        return AESGCM(model_key).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:],
                                         _aad(index, i, n, name))
    except InvalidTag:
        raise TamperDetected(f"chunk {i} of {name.decode() or 'checkpoint'} failed authentication") from None


def unpack_chunk(container, name: str, chunk: int, model_key: bytes) -> bytes:
    """Decrypt and authenticate one chunk of one tensor."""
    c = _as_container(container)
    try:
        idx = c.index_of(name)
    except KeyError:
        raise BadIndex(f"no tensor named {name!r}") from None
    return _open(c.data, c.tensors[idx].record, chunk, idx, name.encode(), model_key)


def unpack_tensor(container, name: str, model_key: bytes) -> bytes:
    c = _as_container(container)
    rec = c.tensors[c.index_of(name)].record
    return b"".join(unpack_chunk(c, name, i, model_key) for i in range(rec.chunk_count))


def unpack_all(container, model_key: bytes) -> dict[str, bytes]:
    c = _as_container(container)
    return {t.name: unpack_tensor(c, t.name, model_key) for t in c.tensors}


def unwrap_model_key(container, root_key: bytes) -> bytes:
    c = _as_container(container)
    w = c.wrapped_key
    try:
        return AESGCM(root_key).decrypt(w[:NONCE_SIZE], w[NONCE_SIZE:], _KEY_AAD + c.metadata)
    except (InvalidTag, ValueError):
        raise KeyUnwrapFailure("wrong root key, or the container metadata was modified") from None


def read_checkpoint(container, model_key: bytes) -> bytes:
    c = _as_container(container)
    rec = c.checkpoint
    return b"".join(_open(c.data, rec, i, CHECKPOINT_INDEX, b"", model_key)
                    for i in range(rec.chunk_count))


def seal_checkpoint(state: bytes, model_key: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE,
                    nonce_seed: bytes | None = None) -> bytes:
    """A tensor-less container holding just the init-state checkpoint."""
    # the checkpoint does not need a wrapped key of its own; wrap under itself
    return pack([], model_key, model_key, chunk_size, checkpoint=state, nonce_seed=nonce_seed)


def checkpoint_roundtrip(state: bytes, model_key: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE,
                         tamper=None) -> bytes:
    """Seal `state`, optionally pass the blob through `tamper`, and restore it."""
    blob = seal_checkpoint(state, model_key, chunk_size)
    if tamper is not None:
        blob = tamper(blob)
    return read_checkpoint(blob, model_key)


def verify(container, root_key: bytes) -> dict:
    """Authenticate every chunk; returns per-tensor chunk counts."""
    c = _as_container(container)
    key = unwrap_model_key(c, root_key)
    report = {}
    for t in c.tensors:
        for i in range(t.record.chunk_count):
            unpack_chunk(c, t.name, i, key)
        report[t.name] = t.record.chunk_count
    read_checkpoint(c, key)
    return report


def load_root_key(path: str | os.PathLike | None = None, env=None) -> bytes:
    """The device root key: hex in $TZPIPE_ROOT_KEY, or a key file (raw or hex)."""
    env = os.environ if env is None else env
    if path is None and env.get(ROOT_KEY_ENV):
        raw = env[ROOT_KEY_ENV].strip()
        try:
            key = bytes.fromhex(raw)
        except ValueError:
            raise ValueError(f"{ROOT_KEY_ENV} is not valid hex") from None
    elif path is not None:
        key = Path(path).read_bytes()
        if len(key) != KEY_SIZE:
            try:
                key = bytes.fromhex(key.decode().strip())
            except (UnicodeDecodeError, ValueError):
                pass
    else:
        raise LookupError(f"no root key: set {ROOT_KEY_ENV} or pass a key file")
    if len(key) != KEY_SIZE:
        raise ValueError(f"root key must be {KEY_SIZE} bytes, got {len(key)}")
    return key
