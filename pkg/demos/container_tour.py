"""Pack a toy model, open one chunk, then break things on purpose."""
import os

from tzpipe.modelstore import (KEY_SIZE, KeyUnwrapFailure, TamperDetected, pack, parse, read_checkpoint,
                               unpack_chunk, unwrap_model_key, verify)


def main():
    root, model_key = os.urandom(KEY_SIZE), os.urandom(KEY_SIZE)
    tensors = [(f"layers.{i}.weight", i, os.urandom(10_000)) for i in range(3)]
    blob = pack(tensors, model_key, root, chunk_size=4096, checkpoint=b"framework state")
    c = parse(blob)
    print(f"{len(blob)} bytes, tensors {c.names}")
    for t in c.tensors:
        print(f"  {t.name}: group {t.group}, {t.record.chunk_count} chunks at offset {t.record.offset}")

    key = unwrap_model_key(c, root)
    piece = unpack_chunk(c, "layers.1.weight", 2, key)
    assert piece == tensors[1][2][8192:]
    print(f"chunk 2 of layers.1.weight opened alone: {len(piece)} bytes")
    print(f"checkpoint: {read_checkpoint(c, key)!r}")
    print(f"verify: {verify(c, root)}")

    bad = bytearray(blob)
    bad[c.tensors[0].record.record_offset(1) + 20] ^= 0x04
    try:
        unpack_chunk(bytes(bad), "layers.0.weight", 1, key)
    except TamperDetected as e:
        print(f"flipped one bit: {e}")
    try:
        unwrap_model_key(c, os.urandom(KEY_SIZE))
    except KeyUnwrapFailure as e:
        print(f"wrong root key: {e}")


if __name__ == "__main__":
    main()
