"""n-of-n XOR key escrow: the intentional emergency backdoor.

The escrowed secret is the VM disk's rewrapped master-key record (keyslot
plus header digest salts), captured between the two sealing stages. Shares
1..n-1 are uniformly random; only all n together reveal anything.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

from .util import make_rng, pack_bytes, unpack_bytes
from .volume import EncryptedVolume, KeySlot, VolumeError

SHARE_MAGIC = b"TSSHARE1\n"


class EscrowError(Exception):
    pass


class MissingShares(EscrowError):
    pass


class CommitmentMismatch(EscrowError):
    pass


@dataclass(frozen=True)
class KeyShare:
    index: int  # 1-based
    total: int
    payload: bytes
    commitment: bytes  # sha3-512 of the secret, identical across the set


def _commitment(secret: bytes) -> bytes:
    return hashlib.sha3_512(secret).digest()


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def split_key(secret: bytes, n: int, rng: random.Random | None = None) -> list[KeyShare]:
    if n < 2:
        raise EscrowError("need at least 2 parties")
    if not secret:
        raise EscrowError("secret must be nonempty")
    rng = rng or make_rng()
    commitment = _commitment(secret)

    payloads = [rng.randbytes(len(secret)) for _ in range(n - 1)]
    last = secret
    for p in payloads:
        last = _xor(last, p)
    payloads.append(last)
    return [
        KeyShare(index=i + 1, total=n, payload=p, commitment=commitment)
        for i, p in enumerate(payloads)
    ]


def reconstruct(shares: list[KeyShare]) -> bytes:
    if not shares:
        raise MissingShares("no shares given")
    total = shares[0].total
    commitment = shares[0].commitment
    for s in shares:
        if s.total != total:
            raise EscrowError(f"share {s.index} claims total {s.total}, expected {total}")
        if s.commitment != commitment:
            raise CommitmentMismatch("shares carry different commitments")
    indices = {s.index for s in shares}
    if len(shares) < total or indices != set(range(1, total + 1)):
        raise MissingShares(
            f"have {len(shares)} of {total} shares; all parties are required"
        )
    secret = shares[0].payload
    for s in shares[1:]:
        secret = _xor(secret, s.payload)
    if _commitment(secret) != commitment:
        raise CommitmentMismatch("reconstructed secret does not match commitment")
    return secret


@dataclass(frozen=True)
class ShareReport:
    consistent: bool
    problems: tuple[str, ...]


def verify_shares(shares: list[KeyShare]) -> ShareReport:
    """Consistency check without reconstructing an incomplete set."""
    problems: list[str] = []
    if not shares:
        return ShareReport(consistent=False, problems=("no shares",))
    totals = {s.total for s in shares}
    if len(totals) != 1:
        problems.append(f"conflicting totals: {sorted(totals)}")
    if len({s.commitment for s in shares}) != 1:
        problems.append("mixed commitments")
    indices = [s.index for s in shares]
    if len(set(indices)) != len(indices):
        problems.append("duplicate share indices")
    total = shares[0].total
    missing = set(range(1, total + 1)) - set(indices)
    if missing:
        problems.append(f"missing indices: {sorted(missing)}")
    lengths = {len(s.payload) for s in shares}
    if len(lengths) != 1:
        problems.append("payload lengths differ")
    return ShareReport(consistent=not problems, problems=tuple(problems))


# -- escrowed payload: the VM's rewrapped key record -----------------------------


def wrapped_key_record(volume: EncryptedVolume) -> bytes:
    """Serialize the active keyslot plus header digest material.

    This is an encrypted copy of the master key: useless without the keyfile,
    but enough to re-enable unlock on a volume whose slots were erased.
    """
    active = volume.header.active_slots()
    if not active:
        raise VolumeError("volume has no active keyslot to escrow")
    slot = volume.header.slots[active[0]]
    doc = {
        "uuid": volume.header.uuid.hex(),
        "slot_salt": slot.salt.hex(),
        "kdf_iterations": slot.kdf_iterations,
        "wrapped_key": slot.wrapped_key.hex(),
        "mk_digest_salt": volume.header.mk_digest_salt.hex(),
        "mk_digest": volume.header.mk_digest.hex(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def apply_wrapped_key_record(volume: EncryptedVolume, record: bytes) -> None:
    """Reinstate an escrowed keyslot so the original keyfile unlocks again."""
    doc = json.loads(record)
    if bytes.fromhex(doc["uuid"]) != volume.header.uuid:
        raise VolumeError("escrow record belongs to a different volume")
    volume.header.slots[0] = KeySlot(
        state="active",
        salt=bytes.fromhex(doc["slot_salt"]),
        kdf_iterations=doc["kdf_iterations"],
        wrapped_key=bytes.fromhex(doc["wrapped_key"]),
    )
    volume.header.mk_digest_salt = bytes.fromhex(doc["mk_digest_salt"])
    volume.header.mk_digest = bytes.fromhex(doc["mk_digest"])


# -- share files -----------------------------------------------------------------


def serialize_share(share: KeyShare) -> bytes:
    return (
        SHARE_MAGIC
        + pack_bytes(share.index.to_bytes(4, "big"))
        + pack_bytes(share.total.to_bytes(4, "big"))
        + pack_bytes(share.commitment)
        + pack_bytes(share.payload)
    )


def deserialize_share(blob: bytes) -> KeyShare:
    if not blob.startswith(SHARE_MAGIC):
        raise EscrowError("bad share magic")
    offset = len(SHARE_MAGIC)
    index, offset = unpack_bytes(blob, offset)
    total, offset = unpack_bytes(blob, offset)
    commitment, offset = unpack_bytes(blob, offset)
    payload, offset = unpack_bytes(blob, offset)
    if offset != len(blob):
        raise EscrowError("trailing bytes in share file")
    return KeyShare(
        index=int.from_bytes(index, "big"),
        total=int.from_bytes(total, "big"),
        payload=payload,
        commitment=commitment,
    )


def save_share(share: KeyShare, path: str | Path) -> None:
    Path(path).write_bytes(serialize_share(share))


def load_share(path: str | Path) -> KeyShare:
    return deserialize_share(Path(path).read_bytes())
