"""Bit-exact scene files (.gsq), shared codebook packs (.gsc), storage accounting, PLY I/O."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodeStream
from .gauss import Scene
from .grid import block_index_bits, ceil_log2
from .rvq import Codebook, CorruptStreamError, RvqCodec

SCENE_MAGIC = b"GSQ1"
PACK_MAGIC = b"GSC1"
VERSION = 1
_HEADER = struct.Struct("<4sHHBHBIIQ")  # magic, version, G, K, B, D, N, M, pack hash
HEADER_BYTES = _HEADER.size


class WrongCodebookError(ValueError):
    pass


class FormatError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class BitWriter:
    """MSB-first bit packing."""

    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0
        self.total = 0

    def write(self, value: int, width: int) -> None:
        if width == 0:
            return
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        self.acc = (self.acc << width) | value
        self.nbits += width
        self.total += width
        while self.nbits >= 8:
            self.nbits -= 8
            self.buf.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def getvalue(self) -> bytes:
        out = bytearray(self.buf)
        if self.nbits:
            out.append((self.acc << (8 - self.nbits)) & 0xFF)
        return bytes(out)


class BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, width: int) -> int:
        if width == 0:
            return 0
        if self.pos + width > 8 * len(self.data):
            raise CorruptStreamError("truncated payload")
        v = 0
        for _ in range(width):
            byte = self.data[self.pos >> 3]
            v = (v << 1) | ((byte >> (7 - (self.pos & 7))) & 1)
            self.pos += 1
        return v


def storage_bits(mode: str = "icgs", *, G: int, K: int = 4, D: int = 4, N: int = 1024, M: int = 0,
                 cells: int = 0, sh_dim: int = 3, B: int | None = None) -> int:
    """Payload bits: "icgs" counts block codes + block indices; "grid3dgs" counts
    a cell index plus 32-bit floats for every attribute of every occupied cell."""
    if mode == "icgs":
        B = B if B is not None else G // K
        return M * (2 * D * ceil_log2(N) + block_index_bits(B))
    if mode == "grid3dgs":
        return cells * (ceil_log2(G**3) + 32 * (sh_dim + 4 + 3 + 1))
    raise ValueError(f"unknown storage mode {mode!r}")


def stream_bits(codes: CodeStream) -> int:
    return storage_bits("icgs", G=codes.G, K=codes.K, D=codes.D, N=codes.N, M=codes.M)


def write_scene(codes: CodeStream, pack_hash: int) -> bytes:
    codes.validate()
    B = codes.B
    header = _HEADER.pack(SCENE_MAGIC, VERSION, codes.G, codes.K, B, codes.D, codes.N, codes.M, pack_hash)
    bw = BitWriter()
    ib, cb = block_index_bits(B), ceil_log2(codes.N)
    for m in range(codes.M):
        bw.write(int(codes.block_index[m]), ib)
        for c in codes.geo[m]:
            bw.write(int(c), cb)
        for c in codes.tex[m]:
            bw.write(int(c), cb)
    return header + bw.getvalue()


def read_scene(data: bytes) -> tuple[CodeStream, int]:
    if len(data) < HEADER_BYTES:
        raise CorruptStreamError("file shorter than the header")
    magic, version, G, K, B, D, N, M, h = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise CorruptStreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptStreamError(f"unsupported version {version}")
    if K == 0 or G % K or B != G // K or N == 0:
        raise CorruptStreamError("inconsistent header parameters")
    payload = data[HEADER_BYTES:]
    bits = storage_bits("icgs", G=G, K=K, D=D, N=N, M=M)
    if len(payload) != (bits + 7) // 8:
        raise CorruptStreamError(f"payload is {len(payload)} bytes, expected {(bits + 7) // 8}")
    br = BitReader(payload)
    ib, cb = block_index_bits(B), ceil_log2(N)
    idx = np.empty(M, dtype=np.int64)
    geo = np.empty((M, D), dtype=np.int64)
    tex = np.empty((M, D), dtype=np.int64)
    for m in range(M):
        idx[m] = br.read(ib)
        geo[m] = [br.read(cb) for _ in range(D)]
        tex[m] = [br.read(cb) for _ in range(D)]
    codes = CodeStream(G, K, D, N, idx, geo, tex)
    codes.validate()
    return codes, h


@dataclass
class CodebookPack:
    geo: RvqCodec
    tex: RvqCodec

    def __post_init__(self):
        if self.geo.dim != self.tex.dim:
            raise ValueError("geometry and texture codebooks must share d_e")
        self._bytes = None

    def to_bytes(self) -> bytes:
        if self._bytes is None:
            d_e = self.geo.dim
            parts = [PACK_MAGIC, struct.pack("<I", d_e)]
            for codec in (self.geo, self.tex):
                sizes = {cb.size for cb in codec.codebooks}
                if len(sizes) != 1:
                    raise ValueError("all stages of a head must share N")
                parts.append(struct.pack("<II", codec.depth, sizes.pop()))
            for codec in (self.geo, self.tex):
                for cb in codec.codebooks:
                    parts.append(np.ascontiguousarray(cb.entries, dtype="<f4").tobytes())
            self._bytes = b"".join(parts)
        return self._bytes

    @property
    def hash(self) -> int:
        return fnv1a64(self.to_bytes()[len(PACK_MAGIC):])

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodebookPack":
        if data[:4] != PACK_MAGIC:
            raise FormatError("not a GSC1 codebook pack")
        try:
            (d_e,) = struct.unpack_from("<I", data, 4)
            gD, gN, tD, tN = struct.unpack_from("<IIII", data, 8)
        except struct.error as e:
            raise FormatError("truncated codebook pack") from e
        off = 24
        heads = []
        for name, D, N in (("geometry", gD, gN), ("texture", tD, tN)):
            books = []
            for d in range(D):
                n = N * d_e
                if off + 4 * n > len(data):
                    raise FormatError("truncated codebook pack")
                e = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(N, d_e).astype(np.float64)
                off += 4 * n
                books.append(Codebook(e, id=f"{name}/{d}", frozen=True))
            heads.append(RvqCodec(books))
        if off != len(data):
            raise FormatError("trailing bytes in codebook pack")
        return cls(*heads)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodebookPack":
        return cls.from_bytes(Path(path).read_bytes())


def check_pack(codes_hash: int, pack: CodebookPack) -> None:
    if codes_hash != pack.hash:
        raise WrongCodebookError(
            f"scene was written against codebook pack {codes_hash:016x}, model has {pack.hash:016x}"
        )


# -- PLY ---------------------------------------------------------------------------

PLY_FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
              "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8", "uchar": "u1",
              "uint8": "u1", "char": "i1", "int8": "i1", "short": "<i2", "ushort": "<u2",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


def write_ply(path, scene: Scene) -> None:
    """Standard 3DGS layout: log scales, logit opacity, (w, x, y, z) quaternion."""
    n = len(scene)
    cols = np.concatenate([scene.mu, scene.sh[:, :3], scene.opacity_logit[:, None],
                           np.log(scene.scale), scene.rot], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(cols.tobytes())


def read_ply(path) -> Scene:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    count, props, in_vertex = 0, [], False
    for line in lines:
        p = line.split()
        if p[:1] == ["element"]:
            in_vertex = p[1] == "vertex"
            if in_vertex:
                count = int(p[2])
        elif p[:1] == ["property"] and in_vertex:
            if p[1] == "list":
                raise FormatError(f"{path}: list properties are not supported on vertices")
            props.append((p[2], _PLY_TYPES[p[1]]))
    names = [n for n, _ in props]
    for req in PLY_FIELDS:
        if req not in names:
            raise FormatError(f"{path}: missing required field {req!r}")
    if any(n.startswith("f_rest_") for n in names):
        warnings.warn(f"{path}: higher SH bands (f_rest_*) dropped", stacklevel=2)
    arr = np.frombuffer(data, dtype=np.dtype(props), count=count, offset=end + len(b"end_header\n"))
    col = lambda *ks: np.stack([arr[k].astype(np.float64) for k in ks], axis=1)  # noqa: E731
    return Scene(
        mu=col("x", "y", "z"),
        sh=col("f_dc_0", "f_dc_1", "f_dc_2"),
        rot=col("rot_0", "rot_1", "rot_2", "rot_3"),
        scale=np.exp(col("scale_0", "scale_1", "scale_2")),
        opacity_logit=arr["opacity"].astype(np.float64),
    )
