"""In-memory file trees with a deterministic canonical encoding.

A tree maps normalized absolute paths to directory, file, or symlink nodes.
The canonical encoding (magic ``TSTREE1\\n``, sorted length-prefixed records)
is both the plaintext layout of encrypted root volumes and the on-disk
``boot.tree`` image format.
"""

from __future__ import annotations

import posixpath
import struct
from dataclasses import dataclass

from .util import pack_bytes, unpack_bytes

TREE_MAGIC = b"TSTREE1\n"

_KIND_DIR = 0
_KIND_FILE = 1
_KIND_SYMLINK = 2


class TreeError(Exception):
    pass


class MissingPath(TreeError):
    pass


@dataclass
class DirNode:
    pass


@dataclass
class FileNode:
    data: bytes


@dataclass
class SymlinkNode:
    target: str


Node = DirNode | FileNode | SymlinkNode


def normalize(path: str) -> str:
    if not path or not path.startswith("/"):
        raise TreeError(f"path must be absolute: {path!r}")
    return posixpath.normpath(path)


class FileTree:
    def __init__(self):
        self._nodes: dict[str, Node] = {"/": DirNode()}

    # -- structure ----------------------------------------------------------

    def _ensure_parents(self, path: str) -> None:
        parent = posixpath.dirname(path)
        while parent != "/":
            existing = self._nodes.get(parent)
            if existing is None:
                self._nodes[parent] = DirNode()
            elif not isinstance(existing, DirNode):
                raise TreeError(f"parent is not a directory: {parent}")
            parent = posixpath.dirname(parent)

    def mkdir(self, path: str) -> None:
        path = normalize(path)
        existing = self._nodes.get(path)
        if existing is not None and not isinstance(existing, DirNode):
            raise TreeError(f"exists and is not a directory: {path}")
        self._ensure_parents(path)
        self._nodes[path] = DirNode()

    def write_file(self, path: str, data: bytes) -> None:
        path = normalize(path)
        if isinstance(self._nodes.get(path), DirNode):
            raise TreeError(f"is a directory: {path}")
        self._ensure_parents(path)
        self._nodes[path] = FileNode(bytes(data))

    def symlink(self, path: str, target: str) -> None:
        path = normalize(path)
        if isinstance(self._nodes.get(path), DirNode):
            raise TreeError(f"is a directory: {path}")
        self._ensure_parents(path)
        self._nodes[path] = SymlinkNode(target)

    def remove(self, path: str) -> None:
        """Remove a node; directories are removed with their subtree."""
        path = normalize(path)
        if path == "/":
            raise TreeError("cannot remove root")
        if path not in self._nodes:
            raise MissingPath(path)
        prefix = path + "/"
        for p in list(self._nodes):
            if p == path or p.startswith(prefix):
                del self._nodes[p]

    # -- queries ------------------------------------------------------------

    def node(self, path: str) -> Node:
        path = normalize(path)
        try:
            return self._nodes[path]
        except KeyError:
            raise MissingPath(path) from None

    def exists(self, path: str) -> bool:
        return normalize(path) in self._nodes

    def is_dir(self, path: str) -> bool:
        return isinstance(self._nodes.get(normalize(path)), DirNode)

    def is_file(self, path: str) -> bool:
        return isinstance(self._nodes.get(normalize(path)), FileNode)

    def read_file(self, path: str) -> bytes:
        node = self.node(path)
        if not isinstance(node, FileNode):
            raise TreeError(f"not a regular file: {path}")
        return node.data

    def read_text(self, path: str) -> str:
        return self.read_file(path).decode()

    def append_text(self, path: str, text: str) -> None:
        existing = self.read_file(path) if self.is_file(path) else b""
        self.write_file(path, existing + text.encode())

    def paths(self) -> list[str]:
        return sorted(self._nodes)

    def under(self, root: str) -> list[str]:
        """All paths at or below root, sorted. Raises MissingPath if absent."""
        root = normalize(root)
        if root not in self._nodes:
            raise MissingPath(root)
        prefix = "/" if root == "/" else root + "/"
        return sorted(p for p in self._nodes if p == root or p.startswith(prefix))

    def children(self, root: str) -> list[str]:
        root = normalize(root)
        if root not in self._nodes:
            raise MissingPath(root)
        prefix = "/" if root == "/" else root + "/"
        return sorted(p for p in self._nodes if p.startswith(prefix) and "/" not in p[len(prefix):])

    # -- copies and views ----------------------------------------------------

    def copy(self) -> "FileTree":
        clone = FileTree()
        for path, node in self._nodes.items():
            if isinstance(node, FileNode):
                clone._nodes[path] = FileNode(node.data)
            elif isinstance(node, SymlinkNode):
                clone._nodes[path] = SymlinkNode(node.target)
            else:
                clone._nodes[path] = DirNode()
        return clone

    def mount(self, mount_point: str, other: "FileTree") -> "FileTree":
        """Copy of this tree with ``other`` grafted below ``mount_point``."""
        mount_point = normalize(mount_point)
        view = self.copy()
        view.mkdir(mount_point)
        for path, node in other._nodes.items():
            grafted = mount_point if path == "/" else mount_point + path
            if isinstance(node, FileNode):
                view._nodes[grafted] = FileNode(node.data)
            elif isinstance(node, SymlinkNode):
                view._nodes[grafted] = SymlinkNode(node.target)
            else:
                view._nodes[grafted] = DirNode()
        return view

    # -- canonical encoding ---------------------------------------------------

    def encode(self) -> bytes:
        records = [TREE_MAGIC, struct.pack(">I", len(self._nodes))]
        for path in sorted(self._nodes):
            node = self._nodes[path]
            records.append(pack_bytes(path.encode()))
            if isinstance(node, DirNode):
                records.append(bytes([_KIND_DIR]) + pack_bytes(b""))
            elif isinstance(node, FileNode):
                records.append(bytes([_KIND_FILE]) + pack_bytes(node.data))
            else:
                records.append(bytes([_KIND_SYMLINK]) + pack_bytes(node.target.encode()))
        return b"".join(records)

    @classmethod
    def decode(cls, blob: bytes) -> "FileTree":
        if not blob.startswith(TREE_MAGIC):
            raise TreeError("bad tree magic")
        (count,) = struct.unpack_from(">I", blob, len(TREE_MAGIC))
        offset = len(TREE_MAGIC) + 4
        tree = cls()
        for _ in range(count):
            raw_path, offset = unpack_bytes(blob, offset)
            kind = blob[offset]
            offset += 1
            data, offset = unpack_bytes(blob, offset)
            path = raw_path.decode()
            if kind == _KIND_DIR:
                tree._nodes[path] = DirNode()
            elif kind == _KIND_FILE:
                tree._nodes[path] = FileNode(data)
            elif kind == _KIND_SYMLINK:
                tree._nodes[path] = SymlinkNode(data.decode())
            else:
                raise TreeError(f"unknown node kind {kind}")
        return tree

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FileTree):
            return NotImplemented
        return self.encode() == other.encode()
