from __future__ import annotations

import pytest

from sealkit.tree import FileTree, MissingPath, TreeError


def sample_tree():
    tree = FileTree()
    tree.write_file("/etc/passwd", b"root:x:0:0::/root:/bin/bash\n")
    tree.write_file("/etc/ssh/sshd_config", b"Port 22\n")
    tree.symlink("/usr/bin/X11", ".")
    tree.mkdir("/tmp")
    return tree


def test_paths_are_normalized():
    tree = FileTree()
    tree.write_file("/a/b/../c", b"x")
    assert tree.is_file("/a/c")
    with pytest.raises(TreeError):
        tree.write_file("relative/path", b"x")


def test_parents_created_automatically():
    tree = sample_tree()
    assert tree.is_dir("/etc/ssh")
    assert tree.is_dir("/etc")


def test_remove_directory_removes_subtree():
    tree = sample_tree()
    tree.remove("/etc/ssh")
    assert not tree.exists("/etc/ssh/sshd_config")
    assert tree.is_file("/etc/passwd")


def test_remove_missing_raises():
    with pytest.raises(MissingPath):
        sample_tree().remove("/nope")


def test_under_and_children():
    tree = sample_tree()
    assert "/etc/ssh/sshd_config" in tree.under("/etc")
    assert tree.children("/etc") == ["/etc/passwd", "/etc/ssh"]
    with pytest.raises(MissingPath):
        tree.under("/missing")


def test_encode_decode_round_trip():
    tree = sample_tree()
    blob = tree.encode()
    assert blob.startswith(b"TSTREE1\n")
    clone = FileTree.decode(blob)
    assert clone == tree
    assert clone.read_file("/etc/passwd") == tree.read_file("/etc/passwd")
    assert clone.node("/usr/bin/X11").target == "."


def test_encoding_is_deterministic_and_order_independent():
    a = FileTree()
    a.write_file("/x", b"1")
    a.write_file("/y", b"2")
    b = FileTree()
    b.write_file("/y", b"2")
    b.write_file("/x", b"1")
    assert a.encode() == b.encode()


def test_decode_tolerates_zero_padding():
    tree = sample_tree()
    padded = tree.encode() + b"\x00" * 512
    assert FileTree.decode(padded) == tree


def test_copy_is_independent():
    tree = sample_tree()
    clone = tree.copy()
    clone.write_file("/etc/passwd", b"changed")
    assert tree.read_file("/etc/passwd") != b"changed"


def test_mount_grafts_other_tree():
    root = sample_tree()
    boot = FileTree()
    boot.write_file("/keyfile", b"k" * 8)
    view = root.mount("/boot", boot)
    assert view.read_file("/boot/keyfile") == b"k" * 8
    assert not root.exists("/boot/keyfile")  # view is a copy
