"""Operator entry point: build, seal, verify, restore, escrow, serve, attack."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import escrow as escrow_mod
from .config import ConfigError, load_config
from .machine import (
    HOST_ROOT_DEVICE,
    Machine,
    MachineError,
    VM_ROOT_DEVICE,
    full_tree_from_images,
    load_images,
    save_images,
)
from .volume import VolumeError
from .manifest import compute_manifest
from .scenarios import SCENARIOS, run_scenario
from .sealing import (
    PublishedBundle,
    ProtocolError,
    default_plan,
    prepare_trusted_server,
    seal_all_with_escrow,
)
from .services import CredentialDirectory, ServiceFrontend, UpstreamResolver, attach_data_vault
from .util import SimClock, make_rng
from .verifier import MalformedBundle, default_policy, verify_seal

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="deterministic RNG seed")
    parser.add_argument("--workdir", type=Path, default=Path("."),
                        help="directory for images, bundle, and shares")
    parser.add_argument("--config", type=Path, default=None,
                        help="key-value config file")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable report on stdout")


def _emit(payload: dict, as_json: bool, lines: list[str]) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _image_dirs(workdir: Path) -> tuple[Path, Path]:
    return workdir / "images" / "host", workdir / "images" / "vm"


def _server_from_images(host_dir: Path, vm_dir: Path, config, rng, clock) -> Machine:
    host_images = load_images(host_dir, rng)
    vm_images = load_images(vm_dir, rng)
    host = Machine(kind="host", name="ts-host", root_device=HOST_ROOT_DEVICE,
                   boot_partition=host_images.boot, root_volume=host_images.root,
                   extra_disks=host_images.extras, rng=rng, clock=clock)
    vm = Machine(kind="vm", name=config.vm_name, root_device=VM_ROOT_DEVICE,
                 boot_partition=vm_images.boot, root_volume=vm_images.root,
                 extra_disks=vm_images.extras, rng=rng, clock=clock)
    host.nested_vm = vm
    host.config = config
    vm.config = config
    return host


def _build_server(args, config):
    rng = make_rng(args.seed)
    clock = SimClock()
    host = prepare_trusted_server(config, rng=rng, clock=clock)
    host_dir, vm_dir = _image_dirs(args.workdir)
    save_images(host.snapshot_image(), host_dir)
    save_images(host.nested_vm.snapshot_image(), vm_dir)
    return host, host_dir, vm_dir


def cmd_build(args) -> int:
    config = load_config(args.config)
    _, host_dir, vm_dir = _build_server(args, config)
    _emit(
        {"host_images": str(host_dir), "vm_images": str(vm_dir)},
        args.json,
        [f"pre-seal images written: {host_dir} {vm_dir}"],
    )
    return EXIT_OK


def cmd_seal(args) -> int:
    config = load_config(args.config)
    rng = make_rng(args.seed)
    clock = SimClock()
    host_dir, vm_dir = _image_dirs(args.workdir)
    if host_dir.exists() and vm_dir.exists():
        host = _server_from_images(host_dir, vm_dir, config, rng, clock)
    else:
        host, host_dir, vm_dir = _build_server(args, config)
        host = _server_from_images(host_dir, vm_dir, config, rng, clock)

    bundle, shares = seal_all_with_escrow(host, args.escrow or 0)
    bundle_dir = args.workdir / "bundle"
    bundle.save(bundle_dir)

    share_paths = []
    if shares:
        share_dir = args.workdir / "shares"
        share_dir.mkdir(parents=True, exist_ok=True)
        for share in shares:
            path = share_dir / f"share-{share.index}.tsshare"
            escrow_mod.save_share(share, path)
            share_paths.append(str(path))

    _emit(
        {
            "bundle": str(bundle_dir),
            "bundle_index_digest": bundle.index_digest(),
            "escrow_shares": share_paths,
        },
        args.json,
        [
            f"sealed; bundle written: {bundle_dir}",
            f"bundle index digest: {bundle.index_digest()}",
        ]
        + [f"escrow share: {p}" for p in share_paths],
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    config = load_config(args.config)
    host_dir, vm_dir = _image_dirs(args.workdir)
    bundle_dir = args.workdir / "bundle"
    if not (host_dir.exists() and vm_dir.exists() and bundle_dir.exists()):
        print("verify: images/ and bundle/ must both exist in the workdir",
              file=sys.stderr)
        return EXIT_FAIL
    policy = default_policy(default_plan(config))
    try:
        verdict = verify_seal(
            load_images(host_dir), load_images(vm_dir),
            PublishedBundle.load(bundle_dir), policy,
        )
    except MalformedBundle as exc:
        print(f"verify: malformed bundle: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.json:
        doc = verdict.to_dict()
        doc["policy"] = policy.to_dict()  # the allowlist is reviewable data
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(verdict.render_text(), end="")
    return EXIT_OK if verdict.status == "PASS" else EXIT_FAIL


def cmd_restore(args) -> int:
    config = load_config(args.config)
    rng = make_rng(args.seed)
    clock = SimClock()
    host_dir, vm_dir = _image_dirs(args.workdir)
    if not (host_dir.exists() and vm_dir.exists()):
        print("restore: no pre-seal images in the workdir", file=sys.stderr)
        return EXIT_FAIL
    host = _server_from_images(host_dir, vm_dir, config, rng, clock)

    if args.reseal:
        bundle, _ = seal_all_with_escrow(host, 0)
        bundle_dir = args.workdir / "bundle"
        bundle.save(bundle_dir)
        _emit(
            {"resealed": True, "bundle_index_digest": bundle.index_digest()},
            args.json,
            [f"restored and resealed; new bundle index digest: {bundle.index_digest()}"],
        )
        return EXIT_OK

    report = host.boot()
    host.power_off()
    _emit(
        {"restored": True, "bootable": report.unlocked},
        args.json,
        ["restored pre-seal state; host boots with its original keyfile"],
    )
    return EXIT_OK


def cmd_escrow(args) -> int:
    if args.escrow_action == "split":
        if not args.secret_hex and not args.secret_file:
            print("escrow split: --secret-hex or --secret-file is required",
                  file=sys.stderr)
            return EXIT_USAGE
        if args.secret_hex:
            try:
                secret = bytes.fromhex(args.secret_hex)
            except ValueError:
                print("escrow split: --secret-hex is not valid hex", file=sys.stderr)
                return EXIT_USAGE
        else:
            secret = Path(args.secret_file).read_bytes()
        shares = escrow_mod.split_key(secret, args.parties, make_rng(args.seed))
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for share in shares:
            escrow_mod.save_share(share, out_dir / f"share-{share.index}.tsshare")
        print(f"wrote {len(shares)} shares to {out_dir}")
        return EXIT_OK

    shares = [escrow_mod.load_share(p) for p in args.shares]
    try:
        secret = escrow_mod.reconstruct(shares)
    except escrow_mod.EscrowError as exc:
        print(f"escrow recover: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.out:
        Path(args.out).write_bytes(secret)
        print(f"secret written to {args.out}")
    else:
        print(secret.hex())
    return EXIT_OK


def cmd_attack(args) -> int:
    config = load_config(args.config)
    names = sorted(SCENARIOS) if args.scenario == "all" else [args.scenario]
    if any(name not in SCENARIOS for name in names):
        print(f"attack: unknown scenario {args.scenario!r}; "
              f"known: {', '.join(sorted(SCENARIOS))} or 'all'", file=sys.stderr)
        return EXIT_USAGE
    seed = args.seed if args.seed is not None else 0
    reports = [run_scenario(name, seed, config) for name in names]
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    else:
        for r in reports:
            marker = "ok" if r.ok else "MISMATCH"
            print(f"{r.name}: expected {r.expected}, observed {r.observed} [{marker}]")
            for detail in r.details:
                print(f"    {detail}")
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def cmd_manifest(args) -> int:
    config = load_config(args.config)
    tree = full_tree_from_images(load_images(Path(args.imagedir)))
    manifest = compute_manifest(tree, config.root_specs())
    text = manifest.render()
    if args.output:
        Path(args.output).write_text(text)
        print(f"manifest written to {args.output}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_serve(args) -> int:
    config = load_config(args.config)
    rng = make_rng(args.seed)
    clock = SimClock()
    host = prepare_trusted_server(config, rng=rng, clock=clock)
    vm = host.nested_vm

    vault_key = attach_data_vault(
        vm, config.vault_sectors,
        {"/data/records.csv": b"id,value\n1,confidential\n"}, rng,
    )
    primary = CredentialDirectory()
    for user, password in config.ldap_users:
        primary.add_user(user, password, rng)
    upstream = UpstreamResolver(table=dict(config.dns_table))

    seal_all_with_escrow(host, 0)
    frontend = ServiceFrontend(
        vm,
        primary_directory=primary if primary.entries else None,
        upstream=upstream,
    )

    print("sealed server ready; one request per line, EOF ends the session",
          file=sys.stderr)
    print(f"vault key (data provider copy): {vault_key.data.hex()[:64]}...",
          file=sys.stderr)
    print(f"(full key: {vault_key.data.hex()})", file=sys.stderr)
    try:
        for line in sys.stdin:
            print(frontend.handle_line(line), flush=True)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sealkit",
        description="Build, seal, verify, and attack simulated self-sealing servers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="prepare a server and write pre-seal images")
    _common_flags(p_build)
    p_build.set_defaults(func=cmd_build)

    p_seal = sub.add_parser("seal", help="run the dual-stage seal and publish the bundle")
    _common_flags(p_seal)
    p_seal.add_argument("--escrow", type=int, default=0, metavar="N",
                        help="split the VM key record into N escrow shares")
    p_seal.set_defaults(func=cmd_seal)

    p_verify = sub.add_parser("verify", help="check the bundle against the pre-seal images")
    _common_flags(p_verify)
    p_verify.set_defaults(func=cmd_verify)

    p_restore = sub.add_parser("restore", help="restore the pre-seal state from images")
    _common_flags(p_restore)
    p_restore.add_argument("--reseal", action="store_true",
                           help="immediately reseal after restoring")
    p_restore.set_defaults(func=cmd_restore)

    p_escrow = sub.add_parser("escrow", help="split or recover escrow shares")
    escrow_sub = p_escrow.add_subparsers(dest="escrow_action", required=True)
    p_split = escrow_sub.add_parser("split")
    p_split.add_argument("--secret-hex")
    p_split.add_argument("--secret-file")
    p_split.add_argument("-n", "--parties", type=int, required=True)
    p_split.add_argument("--out", required=True, help="output directory for share files")
    p_split.add_argument("--seed", type=int, default=None)
    p_recover = escrow_sub.add_parser("recover")
    p_recover.add_argument("shares", nargs="+", help="share files")
    p_recover.add_argument("--out", default=None, help="write the secret to a file")
    p_escrow.set_defaults(func=cmd_escrow)

    p_serve = sub.add_parser("serve", help="seal a server and answer line requests on stdin")
    _common_flags(p_serve)
    p_serve.set_defaults(func=cmd_serve)

    p_attack = sub.add_parser("attack", help="run a named attack scenario")
    p_attack.add_argument("scenario", help="scenario name or 'all'")
    _common_flags(p_attack)
    p_attack.set_defaults(func=cmd_attack)

    p_manifest = sub.add_parser("manifest", help="compute the manifest of an image directory")
    p_manifest.add_argument("imagedir")
    p_manifest.add_argument("-o", "--output", default=None)
    _common_flags(p_manifest)
    p_manifest.set_defaults(func=cmd_manifest)

    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ProtocolError, MachineError, VolumeError,
            escrow_mod.EscrowError, FileNotFoundError) as exc:
        print(f"sealkit: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
