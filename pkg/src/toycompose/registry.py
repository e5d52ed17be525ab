"""Portable residual files and training-free composition into prompt embeddings.

File layout (little-endian)::

    magic      8 bytes   b"CONES2R\\0"
    version    u16
    d_text     u32
    category   u16 length + UTF-8
    name       u16 length + UTF-8
    delta      d_text x float32
    fingerprint u32 length + compact JSON
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .encoder import EmbeddingSequence
from .text import TokenizedPrompt, Vocabulary

MAGIC = b"CONES2R\0"
FORMAT_VERSION = 1
SUFFIX = ".res"
_NAME_OK = re.compile(r"^[A-Za-z0-9_.\-]+$")


class RegistryError(Exception):
    pass


class ChecksumError(RegistryError):
    pass


class EntryExistsError(RegistryError):
    pass


class MissingEntryError(RegistryError, KeyError):
    def __str__(self):
        return f"no registry entry named {self.args[0]!r}"


class DimensionMismatchError(RegistryError):
    pass


class BindingError(ValueError):
    pass


@dataclass
class RegistryEntry:
    name: str
    base_category: str
    delta: np.ndarray  # float32 (d_text,)
    fingerprint: dict = field(default_factory=dict)
    checksum: Optional[int] = None

    def __post_init__(self):
        self.delta = np.ascontiguousarray(np.asarray(self.delta, dtype="<f4").reshape(-1))
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("residual contains non-finite values")

    @property
    def d_text(self) -> int:
        return int(self.delta.shape[0])


def encode_entry(entry: RegistryEntry) -> bytes:
    cat = entry.base_category.encode("utf-8")
    name = entry.name.encode("utf-8")
    fp = json.dumps(entry.fingerprint, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [
            MAGIC,
            struct.pack("<HI", FORMAT_VERSION, entry.d_text),
            struct.pack("<H", len(cat)),
            cat,
            struct.pack("<H", len(name)),
            name,
            entry.delta.astype("<f4").tobytes(),
            struct.pack("<I", len(fp)),
            fp,
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def decode_entry(data: bytes) -> RegistryEntry:
    if len(data) < 8 + 6 + 4 or data[:8] != MAGIC:
        raise RegistryError("not a residual file (bad magic)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")
    off = 8
    version, d_text = struct.unpack_from("<HI", data, off)
    off += 6
    if version != FORMAT_VERSION:
        raise RegistryError(f"unsupported format version {version}")
    (n,) = struct.unpack_from("<H", data, off)
    cat = data[off + 2 : off + 2 + n].decode("utf-8")
    off += 2 + n
    (n,) = struct.unpack_from("<H", data, off)
    name = data[off + 2 : off + 2 + n].decode("utf-8")
    off += 2 + n
    delta = np.frombuffer(data, dtype="<f4", count=d_text, offset=off).copy()
    off += 4 * d_text
    (n,) = struct.unpack_from("<I", data, off)
    fingerprint = json.loads(data[off + 4 : off + 4 + n].decode("utf-8"))
    off += 4 + n
    if off != len(data) - 4:
        raise RegistryError("trailing bytes in residual file")
    return RegistryEntry(name, cat, delta, fingerprint, stored)


class ResidualRegistry:
    """Directory of residual files, one per subject name."""

    def __init__(self, root):
        self.root = Path(root)

    @classmethod
    def from_env(cls, default) -> "ResidualRegistry":
        return cls(os.environ.get("CONES2_REGISTRY", default))

    def path(self, name: str) -> Path:
        return self.root / f"{name}{SUFFIX}"

    def names(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name[: -len(SUFFIX)] for p in self.root.glob(f"*{SUFFIX}"))

    def __contains__(self, name: str) -> bool:
        return self.path(name).is_file()

    def save(self, entry: RegistryEntry, overwrite: bool = False) -> Path:
        if not entry.name or not _NAME_OK.match(entry.name):
            raise RegistryError(f"invalid entry name {entry.name!r}")
        dest = self.path(entry.name)
        if dest.exists() and not overwrite:
            raise EntryExistsError(f"entry {entry.name!r} already exists")
        self.root.mkdir(parents=True, exist_ok=True)
        data = encode_entry(entry)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{entry.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                written = f.write(data)
                f.flush()
                os.fsync(f.fileno())
            if written != len(data):
                raise RegistryError(f"short write: {written} of {len(data)} bytes")
            os.replace(tmp, dest)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        entry.checksum = struct.unpack("<I", data[-4:])[0]
        return dest

    def load(self, name: str, d_text: int | None = None) -> RegistryEntry:
        p = self.path(name)
        if not p.is_file():
            raise MissingEntryError(name)
        entry = decode_entry(p.read_bytes())
        if d_text is not None and entry.d_text != d_text:
            raise DimensionMismatchError(f"entry {name!r} has d_text {entry.d_text}, encoder has {d_text}")
        return entry

    def verify(self) -> dict[str, str]:
        """Name -> "ok" or the error message, for every entry."""
        report = {}
        for name in self.names():
            try:
                self.load(name)
                report[name] = "ok"
            except RegistryError as e:
                report[name] = f"{type(e).__name__}: {e}"
        return report


def save_residual(reg: ResidualRegistry, entry: RegistryEntry, overwrite: bool = False) -> Path:
    return reg.save(entry, overwrite)


def load_residual(reg: ResidualRegistry, name: str, d_text: int | None = None) -> RegistryEntry:
    return reg.load(name, d_text)


# --------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class Binding:
    """Attach ``entry`` to ``word`` in a prompt; ``occurrence`` picks the k-th (1-based) copy."""

    word: str
    entry: RegistryEntry
    occurrence: Optional[int] = None

    @classmethod
    def parse(cls, spec: str, lookup) -> "Binding":
        """Parse ``word=entryname`` or ``word@k=entryname``."""
        left, sep, name = spec.partition("=")
        if not sep or not left or not name:
            raise BindingError(f"binding must look like word[@k]=entry, got {spec!r}")
        word, _, k = left.partition("@")
        occ = None
        if k:
            if not k.isdigit() or int(k) < 1:
                raise BindingError(f"bad occurrence index in {spec!r}")
            occ = int(k)
        return cls(word, lookup(name), occ)


def resolve_positions(prompt: TokenizedPrompt, binding: Binding, vocab: Vocabulary) -> list[int]:
    from .text import subject_positions

    positions = subject_positions(prompt, binding.word, vocab)
    if not positions:
        raise BindingError(f"bound word {binding.word!r} does not occur in {prompt.text!r}")
    if binding.occurrence is None:
        return positions
    if binding.occurrence > len(positions):
        raise BindingError(
            f"{binding.word!r} occurs {len(positions)} times, occurrence {binding.occurrence} requested"
        )
    return [positions[binding.occurrence - 1]]


def compose_embedding(
    base: EmbeddingSequence,
    prompt: TokenizedPrompt,
    bindings: Sequence[Binding],
    vocab: Vocabulary,
) -> EmbeddingSequence:
    """Add each bound residual to its token rows; every other row is copied as is."""
    d_text = base.vectors.shape[-1]
    taken: dict[int, str] = {}
    plan = []
    for b in bindings:
        if b.entry.d_text != d_text:
            raise DimensionMismatchError(f"residual {b.entry.name!r} has d_text {b.entry.d_text}, embedding has {d_text}")
        for p in resolve_positions(prompt, b, vocab):
            if p in taken:
                raise BindingError(f"token {p} ({b.word!r}) bound twice: {taken[p]!r} and {b.entry.name!r}")
            taken[p] = b.entry.name
            plan.append((p, b.entry.delta))
    vectors = base.vectors.detach().clone()
    for p, delta in plan:
        vectors[p] = vectors[p] + torch.as_tensor(delta, dtype=vectors.dtype, device=vectors.device)
    return EmbeddingSequence(vectors, base.length, prompt)
