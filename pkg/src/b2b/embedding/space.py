"""Embedding space container and its on-disk formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from ..catalog import UnknownProductError

BINARY_MAGIC = b"B2BEMB"
BINARY_VERSION = 1


@dataclass
class EmbeddingSpace:
    """Paired input (``V``) and output (``U``) vectors over a fixed vocabulary.

    Row ``i`` of each matrix belongs to ``vocabulary[i]``.
    """

    vocabulary: List[str]
    input_matrix: np.ndarray
    output_matrix: np.ndarray
    space_kind: str = "purchase"
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.vocabulary = list(self.vocabulary)
        n = len(self.vocabulary)
        if len(set(self.vocabulary)) != n:
            raise ValueError("vocabulary entries must be unique")
        if self.input_matrix.shape != self.output_matrix.shape or self.input_matrix.shape[0] != n:
            raise ValueError(
                f"matrix shapes {self.input_matrix.shape}/{self.output_matrix.shape} do not match |V|={n}"
            )

    @property
    def dimension(self) -> int:
        return int(self.input_matrix.shape[1])

    @cached_property
    def index(self) -> Dict[str, int]:
        return {pid: i for i, pid in enumerate(self.vocabulary)}

    def __contains__(self, pid: str) -> bool:
        return pid in self.index

    def __len__(self) -> int:
        return len(self.vocabulary)

    def row(self, pid: str) -> int:
        try:
            return self.index[pid]
        except KeyError:
            raise UnknownProductError(f"product {pid!r} not in {self.space_kind} vocabulary") from None

    def vectors(self, matrix: str = "input") -> np.ndarray:
        """Matrix used for similarity: ``input``, ``output`` or their ``mean``."""
        if matrix == "input":
            return self.input_matrix
        if matrix == "output":
            return self.output_matrix
        if matrix == "mean":
            return 0.5 * (self.input_matrix + self.output_matrix)
        raise ValueError(f"unknown matrix choice {matrix!r}")

    def freeze(self) -> "EmbeddingSpace":
        self.input_matrix.setflags(write=False)
        self.output_matrix.setflags(write=False)
        return self


def _write_matrix(path: Path, vocab: Sequence[str], mat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mat.shape[0]} {mat.shape[1]}\n")
        for pid, row in zip(vocab, mat):
            fh.write(pid + " " + " ".join(repr(float(x)) for x in row) + "\n")


def _read_matrix(path: Path):
    with open(path, encoding="utf-8") as fh:
        n, d = (int(x) for x in fh.readline().split())
        vocab, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d + 1:
                raise ValueError(f"{path}: expected {d} values for {parts[0]!r}, got {len(parts) - 1}")
            vocab.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(vocab) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(vocab)}")
    return vocab, np.asarray(rows, dtype=np.float64).reshape(n, d)


def save_text(space: EmbeddingSpace, path: Union[str, Path]) -> List[Path]:
    """Write ``path`` (input matrix) and ``path.out`` (output matrix)."""
    path = Path(path)
    out = Path(str(path) + ".out")
    _write_matrix(path, space.vocabulary, space.input_matrix)
    _write_matrix(out, space.vocabulary, space.output_matrix)
    return [path, out]


def load_text(path: Union[str, Path], space_kind: str = "purchase") -> EmbeddingSpace:
    path = Path(path)
    vocab, inp = _read_matrix(path)
    out_path = Path(str(path) + ".out")
    if out_path.exists():
        vocab_out, outm = _read_matrix(out_path)
        if vocab_out != vocab:
            raise ValueError(f"{out_path}: vocabulary differs from {path}")
    else:
        outm = np.zeros_like(inp)
    return EmbeddingSpace(vocab, inp, outm, space_kind)


def save_binary(space: EmbeddingSpace, path: Union[str, Path]) -> None:
    """Little-endian float32 snapshot with a versioned header."""
    n, d = space.input_matrix.shape
    kind = space.space_kind.encode()
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<HIIH", BINARY_VERSION, n, d, len(kind)) + kind)
        for pid in space.vocabulary:
            raw = pid.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(space.input_matrix.astype("<f4").tobytes())
        fh.write(space.output_matrix.astype("<f4").tobytes())


def load_binary(path: Union[str, Path]) -> EmbeddingSpace:
    data = Path(path).read_bytes()
    if not data.startswith(BINARY_MAGIC):
        raise ValueError(f"{path}: not an embedding snapshot")
    off = len(BINARY_MAGIC)
    version, n, d, klen = struct.unpack_from("<HIIH", data, off)
    if version != BINARY_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    off += struct.calcsize("<HIIH")
    kind = data[off : off + klen].decode()
    off += klen
    vocab = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        vocab.append(data[off : off + ln].decode())
        off += ln
    size = n * d * 4
    inp = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    outm = np.frombuffer(data, dtype="<f4", count=n * d, offset=off + size).reshape(n, d).astype(np.float64)
    return EmbeddingSpace(vocab, inp, outm, kind)
