from __future__ import annotations

import pytest

from conftest import SMALL, build_sealed, build_server

from sealkit import volume as vol
from sealkit.machine import MachineRunning
from sealkit.sealing import (
    AlreadySealed,
    CriticalStepFailure,
    HOST_LOG_NAME,
    ProtocolError,
    PublishedBundle,
    VM_LOG_NAME,
    WebrootIncomplete,
    default_plan,
    prepare_trusted_server,
    publish_bundle,
    render_log,
    restore_pre_seal,
    seal_all,
    seal_host,
    seal_vm,
)
from sealkit.util import SimClock, make_rng


# -- prepare_trusted_server ------------------------------------------------------


def test_prepared_server_boots_and_seals_cleanly():
    host = build_server(30)
    bundle = seal_all(host)
    assert set(bundle.artifacts) >= {HOST_LOG_NAME, VM_LOG_NAME}


def test_prepared_disks_have_one_active_slot_each():
    host = build_server(31)
    for machine in (host, host.nested_vm):
        states = vol.dump(machine.root_volume).slot_states
        assert states[0] == "ACTIVE" and states[1:] == ("EMPTY",) * 7


def test_prepared_webroot_is_empty_of_logs():
    host = build_server(32)
    vm = host.nested_vm
    vm.boot()
    webroot = host.config.webroot
    assert vm.ram.tree.is_dir(webroot)
    assert [p for p in vm.ram.tree.under(webroot) if vm.ram.tree.is_file(p)] == []
    vm.power_off()


def test_prepare_rejects_bad_rule_index():
    from sealkit.config import ServerConfig

    bad = ServerConfig(host_ssh_rule_index=2)  # rule 2 is not the ssh rule
    with pytest.raises(ProtocolError):
        prepare_trusted_server(bad, rng=make_rng(0), clock=SimClock())


# -- seal_host ---------------------------------------------------------------------


def test_seal_host_erases_host_slots():
    host = build_server(33)
    host.boot()
    seal_host(host)
    assert vol.dump(host.root_volume).slot_states == ("EMPTY",) * 8


def test_seal_host_reencrypts_vm_disk():
    host = build_server(34)
    before = host.nested_vm.root_volume.header.slots[0].wrapped_key
    host.boot()
    seal_host(host)
    after = host.nested_vm.root_volume.header.slots[0].wrapped_key
    assert before != after


def test_seal_host_copies_log_to_vm_boot():
    host = build_server(35)
    host.boot()
    log = seal_host(host)
    published = host.nested_vm.boot_partition.read_file(f"/{HOST_LOG_NAME}")
    assert published.decode() == render_log(log)


def test_seal_host_requires_booted_host_and_cold_vm():
    host = build_server(36)
    with pytest.raises(ProtocolError):
        seal_host(host)
    host.boot()
    host.nested_vm.boot()
    with pytest.raises(ProtocolError):
        seal_host(host)


def test_critical_step_failure_aborts():
    host = build_server(37)
    host.boot()
    plan = default_plan(host.config)
    # sabotage: the VM keyfile no longer opens its disk, so reencrypt fails
    host.nested_vm.boot_partition.write_file("/keyfile", b"\x00" * 512)
    with pytest.raises(CriticalStepFailure) as excinfo:
        seal_host(host, plan)
    assert excinfo.value.log.status == "failed"
    assert "cryptsetup-reencrypt" in excinfo.value.step.command


# -- seal_vm ------------------------------------------------------------------------


def sealed_vm(seed):
    host = build_server(seed)
    seal_all(host)
    return host, host.nested_vm


def test_seal_vm_erases_vm_slots():
    _, vm = sealed_vm(38)
    assert vol.dump(vm.root_volume).slot_states == ("EMPTY",) * 8


def test_seal_vm_webroot_holds_both_logs():
    host, vm = sealed_vm(39)
    webroot = host.config.webroot
    assert vm.ram.tree.is_file(f"{webroot}/{HOST_LOG_NAME}")
    assert vm.ram.tree.is_file(f"{webroot}/{VM_LOG_NAME}")


def test_seal_vm_sends_notification_mail():
    _, vm = sealed_vm(40)
    outbox = vm.ram.services.mailer
    assert len(outbox) == 1
    assert "trusted server running" in outbox[0].subject


# -- seal_all -----------------------------------------------------------------------


def test_seal_all_full_run():
    host, vm, _, _, bundle = build_sealed(41)
    assert host.is_sealed and vm.is_sealed
    assert host.is_on and vm.is_on
    assert vm.ram.services.web == "running"
    for name in (HOST_LOG_NAME, VM_LOG_NAME, "etc-host.zip", "root-host.zip",
                 "etc-vm.zip", "trust-vm.zip", "ldap.txt"):
        assert name in bundle.artifacts


def test_seal_all_then_power_off_is_permanent():
    host, vm, _, _, _ = build_sealed(42)
    host.power_off()
    from sealkit.machine import SealedAndCold

    with pytest.raises(SealedAndCold):
        host.boot()
    with pytest.raises(SealedAndCold):
        vm.boot()


def test_seal_all_twice_is_a_precondition_error():
    host, _, _, _, _ = build_sealed(43)
    with pytest.raises(AlreadySealed):
        seal_all(host)


def test_golden_path_logs_a_noncritical_failure_and_continues():
    # the VM plan cats /etc/hosts.allow after removing it, like the scripts do
    host = build_server(56)
    seal_all(host)
    vm_log_text = host.nested_vm.ram.tree.read_text(
        f"{host.config.webroot}/{VM_LOG_NAME}"
    )
    assert "cat: /etc/hosts.allow: No such file or directory" in vm_log_text
    assert host.nested_vm.is_sealed  # the failure did not stop the protocol


def test_plan_hashes_usr_bin_non_recursively():
    plan = default_plan(SMALL)
    commands = [s.command for s in plan.host_steps]
    assert "rhash --sha3-512 /usr/bin/*" in commands
    assert "rhash -r --sha3-512 /etc" in commands


def test_plan_stage_endings():
    plan = default_plan(SMALL)
    assert [s.kind for s in plan.host_steps[-2:]] == ["copy_log_to_vm_boot", "start_vm"]
    assert [s.kind for s in plan.vm_steps[-2:]] == ["start_web", "send_mail"]


def test_log_completeness_every_plan_step_once_in_order():
    host = build_server(44)
    plan = default_plan(host.config)
    host.boot()
    host_log = seal_host(host, plan)
    assert host_log.commands() == [s.command for s in plan.host_steps]
    host.nested_vm.boot()
    vm_log = seal_vm(host.nested_vm, plan)
    assert vm_log.commands() == [s.command for s in plan.vm_steps]


def test_post_seal_invariants():
    host, vm, host_images, vm_images, _ = build_sealed(45)
    for machine, images in ((host, host_images), (vm, vm_images)):
        keyfile = vol.Keyfile(images.boot.read_file("/keyfile"))
        with pytest.raises(vol.KeyslotsEmpty):
            vol.unlock(machine.root_volume, keyfile)
        assert machine.ram.services.ssh == "purged"
        assert "trust" not in machine.ram.users
        assert machine.ram.firewall.output_policy == "DROP"


# -- publish_bundle -----------------------------------------------------------------


def test_bundle_index_digest_stable_across_assemblies():
    host, vm, _, _, bundle = build_sealed(46)
    again = publish_bundle(vm)
    assert bundle.index_digest() == again.index_digest()


def test_bundle_contains_ldap_dump():
    _, _, _, _, bundle = build_sealed(47)
    assert "ldap.txt" in bundle.artifacts
    assert bundle.ldap_text.strip()


def test_bundle_contains_no_keyfile_bytes():
    host, vm, host_images, vm_images, bundle = build_sealed(48)
    host_keyfile = host_images.boot.read_file("/keyfile")
    vm_keyfile = vm_images.boot.read_file("/keyfile")
    for name, data in bundle.artifacts.items():
        assert host_keyfile not in data, name
        assert vm_keyfile not in data, name


def test_publish_requires_complete_webroot():
    host, vm, _, _, _ = build_sealed(49)
    vm.remove_path(f"{host.config.webroot}/ldap.txt")
    with pytest.raises(WebrootIncomplete):
        publish_bundle(vm)


def test_bundle_save_load_round_trip(tmp_path):
    _, _, _, _, bundle = build_sealed(50)
    bundle.save(tmp_path / "bundle")
    loaded = PublishedBundle.load(tmp_path / "bundle")
    assert loaded.artifacts == bundle.artifacts
    assert loaded.index_digest() == bundle.index_digest()


# -- restore_pre_seal ----------------------------------------------------------------


def test_restore_without_reseal_leaves_unsealed_bootable():
    host, vm, host_images, vm_images, _ = build_sealed(51)
    host.power_off()
    result = restore_pre_seal(host, host_images, vm_images)
    assert result is None
    assert not host.is_sealed
    assert host.boot().unlocked


def test_restore_with_reseal_produces_fresh_key():
    host, vm, host_images, vm_images, first = build_sealed(52)
    first_digest = vm.root_volume.header.mk_digest
    host.power_off()
    second = restore_pre_seal(host, host_images, vm_images, reseal=True)
    assert second is not None
    assert vm.root_volume.header.mk_digest != first_digest
    assert second.index_digest() != first.index_digest()


def test_restore_requires_power_off():
    host, _, host_images, vm_images, _ = build_sealed(53)
    with pytest.raises(MachineRunning):
        restore_pre_seal(host, host_images, vm_images)


def test_restore_rejects_swapped_images():
    host, _, host_images, vm_images, _ = build_sealed(54)
    host.power_off()
    from sealkit.machine import GeometryMismatch

    with pytest.raises(GeometryMismatch):
        restore_pre_seal(host, vm_images, host_images)
