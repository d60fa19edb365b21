"""SHA3-512 hash manifests over file trees.

Rendering matches rhash line format: lowercase hex digest, two spaces, path,
sorted bytewise by path. Symlinks are hashed by their target string and never
followed, so link cycles cannot recurse.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .tree import FileNode, FileTree, MissingPath, SymlinkNode


class ManifestError(Exception):
    pass


class MissingRoot(ManifestError):
    pass


@dataclass(frozen=True)
class RootSpec:
    path: str
    recursive: bool = True


def _digest(data: bytes) -> str:
    return hashlib.sha3_512(data).hexdigest()


@dataclass(frozen=True)
class Manifest:
    entries: tuple[tuple[str, str], ...]  # (path, hex digest), sorted by path
    roots: tuple[str, ...] = ()

    def digest_of(self, path: str) -> str | None:
        for p, d in self.entries:
            if p == path:
                return d
        return None

    def paths(self) -> set[str]:
        return {p for p, _ in self.entries}

    def as_dict(self) -> dict[str, str]:
        return dict(self.entries)

    def render(self) -> str:
        return "".join(f"{digest}  {path}\n" for path, digest in self.entries)


@dataclass(frozen=True)
class ManifestDiff:
    added: frozenset[str]
    removed: frozenset[str]
    changed: frozenset[str]

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.changed)


def hash_lines(tree: FileTree, root: str, recursive: bool = True) -> list[str]:
    """Manifest lines for one root, in sorted path order."""
    paths = tree.under(root) if recursive else tree.children(root)
    lines = []
    for path in paths:
        node = tree.node(path)
        if isinstance(node, FileNode):
            lines.append(f"{_digest(node.data)}  {path}\n")
        elif isinstance(node, SymlinkNode):
            lines.append(f"{_digest(node.target.encode())}  {path}\n")
    return lines


def compute_manifest(tree: FileTree, roots: list[RootSpec | str]) -> Manifest:
    """One entry per regular file and symlink under the given roots."""
    specs = [RootSpec(r) if isinstance(r, str) else r for r in roots]
    entries: dict[str, str] = {}
    for spec in specs:
        try:
            for line in hash_lines(tree, spec.path, spec.recursive):
                digest, path = line.rstrip("\n").split("  ", 1)
                entries[path] = digest
        except MissingPath:
            raise MissingRoot(spec.path) from None
    ordered = tuple(sorted(entries.items()))
    return Manifest(entries=ordered, roots=tuple(s.path for s in specs))


def parse_manifest(text: str) -> Manifest:
    return manifest_from_lines(text.splitlines())


def diff_manifests(pre: Manifest, post: Manifest) -> ManifestDiff:
    pre_map = pre.as_dict()
    post_map = post.as_dict()
    added = frozenset(post_map) - frozenset(pre_map)
    removed = frozenset(pre_map) - frozenset(post_map)
    changed = frozenset(
        p for p in frozenset(pre_map) & frozenset(post_map)
        if pre_map[p] != post_map[p]
    )
    return ManifestDiff(added=frozenset(added), removed=frozenset(removed), changed=changed)


def manifest_from_lines(lines: list[str]) -> Manifest:
    entries: dict[str, str] = {}
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        digest, path = line.split("  ", 1)
        entries[path] = digest
    return Manifest(entries=tuple(sorted(entries.items())))
