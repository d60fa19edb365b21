"""Dual-stage sealing: build the server, run both sealing stages, publish.

The host stage erases the host's own keyslots and reencrypts the VM disk
under a fresh master key nobody knows; the VM stage then erases its own
keyslots. Each stage produces an ordered sealing log; the published bundle
is assembled from the VM webroot.

seal_all is a single sequential driver with no internal parallelism;
independent servers can be sealed in parallel workers.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from . import escrow as escrow_mod
from . import services as services_mod
from .config import ServerConfig
from .machine import (
    DiskImagePair,
    HOST_ROOT_DEVICE,
    Machine,
    MachineRunning,
    SealingStep,
    StepRecord,
    VM_ROOT_DEVICE,
    VM_ROOT_DEVICE_FROM_HOST,
    passwd_line,
    render_iptables_save,
    FirewallPolicy,
)
from .tree import FileTree
from .util import SimClock, make_rng

HOST_LOG_NAME = "0_init_trusted_mode_host.log"
VM_LOG_NAME = "1_init_trusted_mode.log"

REQUIRED_BUNDLE_ARTIFACTS = (
    HOST_LOG_NAME,
    VM_LOG_NAME,
    "etc-host.zip",
    "root-host.zip",
    "etc-vm.zip",
    "trust-vm.zip",
    "ldap.txt",
)


class ProtocolError(Exception):
    pass


class AlreadySealed(ProtocolError):
    pass


class WebrootIncomplete(ProtocolError):
    pass


class CriticalStepFailure(ProtocolError):
    def __init__(self, log: "SealingLog", step: SealingStep, record: StepRecord):
        super().__init__(f"critical step failed: {step.command}: {record.output}")
        self.log = log
        self.step = step
        self.record = record


@dataclass(frozen=True)
class SealingPlan:
    host_steps: tuple[SealingStep, ...]
    vm_steps: tuple[SealingStep, ...]


@dataclass
class SealingLog:
    stage: str  # "host" | "vm"
    records: list[StepRecord] = field(default_factory=list)
    status: str = "ok"  # "ok" | "failed"

    def commands(self) -> list[str]:
        return [r.command for r in self.records]


def render_log(log: SealingLog) -> str:
    """set -x style text: '+ <command>' then the raw output lines."""
    parts = []
    for record in log.records:
        parts.append(f"+ {record.command}\n")
        output = record.output.rstrip("\n")
        if output:
            parts.append(output + "\n")
    return "".join(parts)


# -- plan construction -------------------------------------------------------------


def _step(kind: str, command: str, critical: bool = False, **args) -> SealingStep:
    return SealingStep(kind=kind, command=command, args=args, critical=critical)


def _hash_steps(config: ServerConfig) -> list[SealingStep]:
    steps = []
    for spec in config.root_specs():
        if spec.recursive:
            steps.append(_step("hash_tree", f"rhash -r --sha3-512 {spec.path}",
                               root=spec.path, recursive=True))
        else:
            steps.append(_step("hash_tree", f"rhash --sha3-512 {spec.path}/*",
                               root=spec.path, recursive=False))
    return steps


def default_plan(config: ServerConfig | None = None) -> SealingPlan:
    config = config or ServerConfig()
    w = config.webroot

    host: list[SealingStep] = [
        _step("set_output_drop", "iptables -P OUTPUT DROP"),
        _step("delete_input_rule", f"iptables -D INPUT {config.host_ssh_rule_index}",
              index=config.host_ssh_rule_index),
        _step("list_rules_save", "iptables-save"),
        _step("list_rules_table", "iptables -L -n"),
        _step("show_file", "cat /etc/hosts.allow", path="/etc/hosts.allow"),
        _step("show_file", "cat /etc/hosts.deny", path="/etc/hosts.deny"),
        _step("purge_ssh", "apt-get -y purge openssh-server"),
        _step("service_status", "systemctl status sshd", unit="sshd"),
        _step("remove_user", "userdel -f trust", name="trust"),
        _step("show_file", "cat /etc/passwd", path="/etc/passwd"),
        _step("show_file", "cat /etc/shadow", path="/etc/shadow"),
        _step("luks_erase", f"cryptsetup luksErase {HOST_ROOT_DEVICE}",
              critical=True, target="self"),
        _step("luks_dump", f"cryptsetup luksDump {HOST_ROOT_DEVICE}", target="self"),
        _step("luks_dump", f"cryptsetup luksDump {VM_ROOT_DEVICE_FROM_HOST}", target="vm"),
        _step("reencrypt_vm",
              f"cryptsetup-reencrypt -v -d /mnt/keyfile -l 512 {VM_ROOT_DEVICE_FROM_HOST}",
              critical=True),
        _step("luks_dump", f"cryptsetup luksDump {VM_ROOT_DEVICE_FROM_HOST}", target="vm"),
        _step("zip_tree", "zip -r /mnt/etc-host.zip /etc",
              src="/etc", dest="vm_boot", name="etc-host.zip"),
        _step("zip_tree", "zip -r /mnt/root-host.zip /root",
              src="/root", dest="vm_boot", name="root-host.zip"),
        _step("list_files", "ls -RlA /"),
        *_hash_steps(config),
        _step("copy_log_to_vm_boot", f"cp /root/{HOST_LOG_NAME} /mnt"),
        _step("start_vm", f"virsh start {config.vm_name}", name=config.vm_name),
    ]

    vm: list[SealingStep] = [
        _step("remove_hosts_allow", "rm /etc/hosts.allow"),
        _step("set_output_drop", "iptables -P OUTPUT DROP"),
        _step("delete_input_rule", f"iptables -D INPUT {config.vm_ssh_rule_index}",
              index=config.vm_ssh_rule_index),
        _step("list_rules_save", "iptables-save"),
        _step("list_rules_table", "iptables -L -n"),
        _step("show_file", "cat /etc/hosts.allow", path="/etc/hosts.allow"),
        _step("show_file", "cat /etc/hosts.deny", path="/etc/hosts.deny"),
        _step("purge_ssh", "apt-get -y purge openssh-server"),
        _step("service_status", "systemctl status sshd", unit="sshd"),
        _step("remove_user", "userdel -f trust", name="trust"),
        _step("show_file", "cat /etc/passwd", path="/etc/passwd"),
        _step("show_file", "cat /etc/group", path="/etc/group"),
        _step("show_file", "cat /etc/shadow", path="/etc/shadow"),
        _step("luks_erase", f"cryptsetup luksErase {VM_ROOT_DEVICE}",
              critical=True, target="self"),
        _step("luks_dump", f"cryptsetup luksDump {VM_ROOT_DEVICE}", target="self"),
        _step("move_from_boot", f"mv /boot/{HOST_LOG_NAME} {w}",
              name=HOST_LOG_NAME, dest_dir=w),
        _step("move_from_boot", f"mv /boot/etc-host.zip {w}",
              name="etc-host.zip", dest_dir=w),
        _step("move_from_boot", f"mv /boot/root-host.zip {w}",
              name="root-host.zip", dest_dir=w),
        _step("chown_webroot", "chown www-data:www-data /var/www", owner="www-data"),
        _step("zip_tree", f"zip -r {w}/etc-vm.zip /etc",
              src="/etc", dest="tree", dest_path=f"{w}/etc-vm.zip"),
        _step("zip_tree", f"zip -r {w}/trust-vm.zip /home/trust",
              src="/home/trust", dest="tree", dest_path=f"{w}/trust-vm.zip"),
        _step("ldap_dump", f"date >> {w}/ldap.txt && slapcat >> {w}/ldap.txt",
              dest=f"{w}/ldap.txt"),
        _step("chown_webroot", "chown -R www-data:www-data /var/www", owner="www-data"),
        _step("list_files", "ls -RlA /"),
        *_hash_steps(config),
        _step("append_date", "echo $(date) >> /home/trust/date.txt",
              path="/home/trust/date.txt"),
        _step("start_web", "systemctl start apache2"),
        _step("send_mail",
              f'mail -s "trusted server running@{config.server_address}" '
              f"{config.mail_to} < /home/trust/date.txt",
              to=config.mail_to,
              subject=f"trusted server running@{config.server_address}",
              body_path="/home/trust/date.txt"),
    ]
    return SealingPlan(host_steps=tuple(host), vm_steps=tuple(vm))


def single_stage_host_plan(config: ServerConfig | None = None) -> SealingPlan:
    """Host-only seal: keyslot erase without the VM reencryption stage."""
    config = config or ServerConfig()
    full = default_plan(config)
    kept = tuple(
        step for step in full.host_steps
        if step.kind not in ("reencrypt_vm", "zip_tree", "copy_log_to_vm_boot",
                             "start_vm")
        and step.args.get("target") != "vm"
    )
    return SealingPlan(host_steps=kept, vm_steps=())


# -- server construction --------------------------------------------------------------


_HOST_RULES = [
    "-A INPUT -m state --state RELATED,ESTABLISHED -j ACCEPT",
    "-A INPUT -i lo -j ACCEPT",
    "-A INPUT -p icmp -j ACCEPT",
    "-A INPUT -p tcp --dport 22 -j ACCEPT",
    "-A INPUT -p tcp --dport 443 -j ACCEPT",
    "-A INPUT -j DROP",
]

_VM_RULES = [
    "-A INPUT -m state --state RELATED,ESTABLISHED -j ACCEPT",
    "-A INPUT -i lo -j ACCEPT",
    "-A INPUT -p icmp -j ACCEPT",
    "-A INPUT -p tcp --dport 443 -j ACCEPT",
    "-A INPUT -p tcp --dport 22 -j ACCEPT",
    "-A INPUT -j DROP",
]

_COMMON_BINARIES = {
    "/bin/bash": b"#!ELF simulated bash binary\n",
    "/bin/ls": b"#!ELF simulated ls binary\n",
    "/bin/cat": b"#!ELF simulated cat binary\n",
    "/sbin/init": b"#!ELF simulated init binary\n",
    "/usr/sbin/cron": b"#!ELF simulated cron binary\n",
    "/usr/sbin/nologin": b"#!ELF simulated nologin binary\n",
    "/usr/sbin/sshd": b"#!ELF simulated sshd binary\n",
    "/usr/bin/env": b"#!ELF simulated env binary\n",
    "/usr/bin/python3": b"#!ELF simulated python3 binary\n",
    "/usr/lib/libc.so.6": b"#!ELF simulated libc\n",
    "/lib/ld-linux.so.2": b"#!ELF simulated loader\n",
    "/usr/share/doc/README": b"simulated documentation\n",
    "/var/log/syslog": b"",
}


def _validate_rule_indices(config: ServerConfig) -> None:
    for label, rules, index in (
        ("host", _HOST_RULES, config.host_ssh_rule_index),
        ("vm", _VM_RULES, config.vm_ssh_rule_index),
    ):
        if index > len(rules) or "--dport 22" not in rules[index - 1]:
            raise ProtocolError(
                f"{label}_ssh_rule_index {index} does not address the ssh rule"
            )


def _base_tree(*, users: list[tuple[str, int, str]], rng: random.Random) -> FileTree:
    """Skeleton shared by host and VM: users, hosts files, binaries, hash roots."""
    tree = FileTree()
    for d in ("/etc", "/home", "/lib", "/root", "/sbin", "/srv", "/tmp",
              "/usr/bin", "/usr/lib", "/usr/local", "/usr/sbin", "/usr/share",
              "/var", "/media", "/mnt", "/opt"):
        tree.mkdir(d)

    passwd, shadow, group = [], [], []
    for name, uid, shell in users:
        home = "/root" if name == "root" else f"/home/{name}"
        passwd.append(passwd_line(name, uid, uid, name, home, shell))
        secret = "*" if shell.endswith("nologin") else f"$6${rng.randbytes(6).hex()}${rng.randbytes(16).hex()}"
        shadow.append(f"{name}:{secret}:18000:0:99999:7:::\n")
        group.append(f"{name}:x:{uid}:\n")
    tree.write_file("/etc/passwd", "".join(passwd).encode())
    tree.write_file("/etc/shadow", "".join(shadow).encode())
    tree.write_file("/etc/group", "".join(group).encode())

    tree.write_file("/etc/hosts.allow", b"sshd: 198.51.100.0/24\n")
    tree.write_file("/etc/hosts.deny", b"ALL: ALL\n")
    tree.write_file("/etc/ssh/sshd_config",
                    b"PermitRootLogin no\nPasswordAuthentication no\n")

    for path, data in _COMMON_BINARIES.items():
        tree.write_file(path, data)
    # recursive link as found on stock installs; manifests hash the target string
    tree.symlink("/usr/bin/X11", ".")
    return tree


def _render_script(title: str, commands: list[str]) -> bytes:
    lines = ["#!/bin/bash", "set -x", f"## {title}"]
    lines.extend(commands)
    return ("\n".join(lines) + "\n").encode()


def _boot_tree(kind: str) -> FileTree:
    tree = FileTree()
    tree.write_file("/initrd.img", f"initrd image ({kind})\n".encode())
    tree.write_file("/vmlinuz", f"kernel image ({kind})\n".encode())
    return tree


def prepare_trusted_server(config: ServerConfig | None = None, *,
                           rng: random.Random | None = None,
                           clock: SimClock | None = None) -> Machine:
    """Build the unsealed host+VM pair in its pre-seal production state."""
    config = config or ServerConfig()
    config.validate()
    _validate_rule_indices(config)
    rng = rng or make_rng()
    clock = clock or SimClock()
    plan = default_plan(config)

    host_tree = _base_tree(users=[("root", 0, "/usr/sbin/nologin"),
                                  ("trust", 1000, "/bin/bash")], rng=rng)
    host_tree.mkdir("/home/trust")
    host_tree.write_file("/home/trust/.bashrc", b"# trust shell profile\n")
    host_tree.write_file("/etc/hostname", b"ts-host\n")
    host_tree.write_file("/etc/crontab", b"@reboot root /root/cron-reboot.sh\n")
    host_tree.write_file(
        "/root/cron-reboot.sh",
        _render_script("cron-reboot host", [
            "mount /dev/sdb1 /mnt",
            "iptables-restore /root/iptables.v4",
            f"/root/init_trusted_mode_reboot.sh > /root/{HOST_LOG_NAME} 2>&1",
        ]),
    )
    host_tree.write_file(
        "/root/init_trusted_mode_reboot.sh",
        _render_script("host sealing", [s.command for s in plan.host_steps]),
    )
    host_tree.write_file(
        "/root/iptables.v4",
        render_iptables_save(FirewallPolicy(input_rules=list(_HOST_RULES))).encode(),
    )
    host_tree.write_file(
        "/root/host-secret.txt",
        f"host secret payload {rng.randbytes(16).hex()}\n".encode(),
    )

    vm_tree = _base_tree(users=[("root", 0, "/usr/sbin/nologin"),
                                ("www-data", 33, "/usr/sbin/nologin"),
                                ("trust", 1000, "/bin/bash")], rng=rng)
    vm_tree.mkdir("/home/trust")
    vm_tree.mkdir(config.webroot)
    vm_tree.write_file("/etc/hostname", f"{config.vm_name}\n".encode())
    vm_tree.write_file("/etc/crontab", b"@reboot root /home/trust/cron-reboot.sh\n")
    vm_tree.write_file(
        "/home/trust/cron-reboot.sh",
        _render_script("cron-reboot vm", [
            "iptables-restore /home/trust/iptables.v4",
            f"/home/trust/init_trusted_mode.sh > {config.webroot}/{VM_LOG_NAME} 2>&1",
        ]),
    )
    vm_tree.write_file(
        "/home/trust/init_trusted_mode.sh",
        _render_script("vm sealing", [s.command for s in plan.vm_steps]),
    )
    vm_tree.write_file(
        "/home/trust/iptables.v4",
        render_iptables_save(FirewallPolicy(input_rules=list(_VM_RULES))).encode(),
    )
    vm_tree.write_file(
        "/etc/ldap/directory.tsv",
        services_mod.render_directory_file(config.ldap_users, rng).encode(),
    )
    vm_tree.mkdir("/srv/data")
    vm_tree.write_file(
        "/srv/data/vm-secret.txt",
        f"vm secret payload {rng.randbytes(16).hex()}\n".encode(),
    )

    host = Machine.provision(
        kind="host", name="ts-host", root_device=HOST_ROOT_DEVICE,
        root_tree=host_tree, boot_tree=_boot_tree("host"),
        sector_count=config.host_sectors, rng=rng, clock=clock,
    )
    vm = Machine.provision(
        kind="vm", name=config.vm_name, root_device=VM_ROOT_DEVICE,
        root_tree=vm_tree, boot_tree=_boot_tree("vm"),
        sector_count=config.vm_sectors, rng=rng, clock=clock,
    )
    host.nested_vm = vm
    host.config = config
    vm.config = config
    return host


# -- stage drivers -----------------------------------------------------------------


def _run_stage(machine: Machine, stage: str, steps: tuple[SealingStep, ...]) -> SealingLog:
    log = SealingLog(stage=stage)
    for step in steps:
        record = machine.exec_step(step)
        log.records.append(record)
        if step.critical and not record.ok:
            log.status = "failed"
            raise CriticalStepFailure(log, step, record)
    return log


def seal_host(host: Machine, plan: SealingPlan | None = None) -> SealingLog:
    if not host.is_on:
        raise ProtocolError("host must be booted before sealing")
    if host.nested_vm is not None and host.nested_vm.is_on:
        raise ProtocolError("nested VM must be powered off during the host stage")
    plan = plan or default_plan(getattr(host, "config", None))

    log = _run_stage(host, "host", plan.host_steps)

    text = render_log(log)
    host.write_file(f"/root/{HOST_LOG_NAME}", text.encode())
    if host.ram.publish_log_requested and host.nested_vm is not None:
        host.nested_vm.boot_partition.write_file(f"/{HOST_LOG_NAME}", text.encode())
    return log


def seal_vm(vm: Machine, plan: SealingPlan | None = None) -> SealingLog:
    if not vm.is_on:
        raise ProtocolError("vm must be booted before sealing")
    plan = plan or default_plan(getattr(vm, "config", None))
    config = getattr(vm, "config", None) or ServerConfig()

    log = _run_stage(vm, "vm", plan.vm_steps)
    vm.write_file(f"{config.webroot}/{VM_LOG_NAME}", render_log(log).encode())
    return log


def seal_single_stage(host: Machine, plan: SealingPlan | None = None) -> SealingLog:
    """Host-only seal (no VM reencryption); the header-restore attack target."""
    if not host.is_on:
        host.boot()
    plan = plan or single_stage_host_plan(getattr(host, "config", None))
    log = _run_stage(host, "host", plan.host_steps)
    host.write_file(f"/root/{HOST_LOG_NAME}", render_log(log).encode())
    return log


def seal_all_with_escrow(host: Machine, escrow_parties: int = 0,
                         plan: SealingPlan | None = None
                         ) -> tuple["PublishedBundle", list[escrow_mod.KeyShare]]:
    """Full dual-stage seal; optionally escrow the VM's rewrapped key record.

    The escrow capture must happen between the two stages: after the host
    reencrypted the VM disk, before the VM erases its own keyslots.
    """
    config = getattr(host, "config", None) or ServerConfig()
    plan = plan or default_plan(config)
    vm = host.nested_vm
    if vm is None:
        raise ProtocolError("host has no nested VM; run prepare first")
    if host.is_sealed or vm.is_sealed:
        raise AlreadySealed("server is already sealed")

    if not host.is_on:
        host.boot()
    seal_host(host, plan)

    shares: list[escrow_mod.KeyShare] = []
    if escrow_parties:
        payload = escrow_mod.wrapped_key_record(vm.root_volume)
        shares = escrow_mod.split_key(payload, escrow_parties, rng=host.rng)

    if not host.ram.vm_start_requested:
        raise ProtocolError("host plan finished without starting the VM")
    vm.boot()
    seal_vm(vm, plan)
    return publish_bundle(vm), shares


def seal_all(host: Machine, plan: SealingPlan | None = None) -> "PublishedBundle":
    bundle, _ = seal_all_with_escrow(host, 0, plan)
    return bundle


def restore_pre_seal(host: Machine, host_images: DiskImagePair,
                     vm_images: DiskImagePair, *, reseal: bool = False):
    """Put both machines back into their imaged pre-seal state."""
    vm = host.nested_vm
    if host.is_on or (vm is not None and vm.is_on):
        raise MachineRunning("machines must be powered off before restore")
    host.restore_image(host_images)
    if vm is not None:
        vm.restore_image(vm_images)
    if reseal:
        return seal_all(host)
    return None


# -- the published bundle -------------------------------------------------------------


@dataclass
class PublishedBundle:
    """Everything the sealed server publishes for third-party verification."""

    artifacts: dict[str, bytes]

    @property
    def host_log_text(self) -> str:
        return self.artifacts[HOST_LOG_NAME].decode()

    @property
    def vm_log_text(self) -> str:
        return self.artifacts[VM_LOG_NAME].decode()

    @property
    def ldap_text(self) -> str:
        return self.artifacts["ldap.txt"].decode()

    def index_text(self) -> str:
        lines = [
            f"{hashlib.sha3_512(data).hexdigest()}  {name}\n"
            for name, data in sorted(self.artifacts.items())
        ]
        return "".join(lines)

    def index_digest(self) -> str:
        return hashlib.sha3_512(self.index_text().encode()).hexdigest()

    def save(self, directory) -> None:
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, data in self.artifacts.items():
            (directory / name).write_bytes(data)
        (directory / "index.txt").write_text(self.index_text())

    @classmethod
    def load(cls, directory) -> "PublishedBundle":
        from pathlib import Path

        directory = Path(directory)
        artifacts = {
            p.name: p.read_bytes()
            for p in sorted(directory.iterdir())
            if p.is_file() and p.name != "index.txt"
        }
        return cls(artifacts=artifacts)


def publish_bundle(vm: Machine, config: ServerConfig | None = None) -> PublishedBundle:
    config = config or getattr(vm, "config", None) or ServerConfig()
    if not vm.is_on or not vm.is_sealed:
        raise ProtocolError("bundle can only be published from a sealed, running VM")
    if vm.ram.services.web != "running":
        raise ProtocolError("web service is not running")

    webroot = config.webroot
    tree = vm.ram.tree
    artifacts: dict[str, bytes] = {}
    if tree.is_dir(webroot):
        for path in tree.under(webroot):
            if tree.is_file(path):
                artifacts[path[len(webroot) + 1:]] = tree.read_file(path)
    missing = [name for name in REQUIRED_BUNDLE_ARTIFACTS if name not in artifacts]
    if missing:
        raise WebrootIncomplete(f"webroot is missing: {', '.join(missing)}")
    return PublishedBundle(artifacts=dict(sorted(artifacts.items())))
