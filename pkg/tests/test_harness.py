"""The watchdog oracles must bite when fed corrupted state, stay quiet on
clean runs, and the scenario/CLI layers must hold their contracts."""
import json
from pathlib import Path

import pytest

from enclavesim.errors import ScenarioParseError
from enclavesim.guest_os import EnclaveDriver
from enclavesim.harness import (
    ExpectationFailed,
    MemoryOracle,
    ReferenceStackModel,
    SecretScanner,
    WriteConfinementOracle,
    ZeroizeWatch,
    check_frame_exclusivity,
    check_stack_integrity,
    check_trace_completeness,
    parse_scenario,
    run_scenario,
    run_scenario_text,
    verify_oracle_sensitivity,
)
from enclavesim.harness.cli import main as cli_main
from enclavesim.machine import MachineConfig
from enclavesim.sim import Simulation
from enclavesim.stage2 import PERM_RO, PERM_RW, PERM_RWX
from enclavesim.ta_runtime import image_for_pages

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def make_sim(frames=256, **kw):
    sim = Simulation(MachineConfig(frames=frames, **kw))
    return sim, EnclaveDriver(sim)


# -- memory oracle -------------------------------------------------------------


def test_memory_oracle_quiet_on_clean_run():
    sim, driver = make_sim()
    oracle = MemoryOracle(sim.machine)
    sim.machine.observers.append(oracle)
    fd = driver.create(image_for_pages("counter", 3, 1))
    driver.invoke(fd, 1)
    driver.destroy(fd)
    assert oracle.verify() == []


def test_memory_oracle_catches_silent_poke():
    sim, driver = make_sim()
    oracle = MemoryOracle(sim.machine)
    sim.machine.observers.append(oracle)
    sim.machine.frames[97][0] = 0x5A  # behind the observers' backs
    problems = oracle.verify()
    assert problems and "97" in problems[0]


# -- zeroize watchdog ----------------------------------------------------------


def destroy_under_watch(sabotage):
    sim, driver = make_sim()
    watch = ZeroizeWatch(sim.hv)
    sim.machine.observers.append(watch)
    sim.hv.sabotage |= sabotage
    fd = driver.create(image_for_pages("counter", 3, 1))
    driver.invoke(fd, 1)
    driver.destroy(fd)
    return watch.violations


def test_zeroize_watch_quiet_on_honest_teardown():
    assert destroy_under_watch(set()) == []


def test_zeroize_watch_catches_skipped_wipe():
    violations = destroy_under_watch({"skip_zeroize"})
    assert any("without zeroize" in v for v in violations)


def test_zeroize_watch_catches_wrong_order():
    violations = destroy_under_watch({"remap_before_zeroize"})
    assert violations


def test_sensitivity_matrix():
    assert verify_oracle_sensitivity() == {
        "none": True,
        "skip_zeroize": True,
        "remap_before_zeroize": True,
    }


# -- write confinement -----------------------------------------------------------


def test_confinement_quiet_on_clean_run():
    sim, driver = make_sim()
    oracle = WriteConfinementOracle(sim.hv)
    sim.machine.observers.append(oracle)
    fd = driver.create(image_for_pages("counter", 3, 1))
    driver.invoke(fd, 1)
    driver.destroy(fd)
    assert oracle.violations == []


def test_confinement_flags_write_to_unreachable_frame():
    sim, driver = make_sim()
    fd = driver.create(image_for_pages("echo", 3, 1))
    rec = driver.record_of(fd)
    oracle = WriteConfinementOracle(sim.hv)
    sim.machine.observers.append(oracle)
    # device-style DMA into enclave memory; no running vcpu maps this frame
    sim.machine.write_frame(rec.private_frames()[0], 0, b"\xee")
    assert any("not writable" in v for v in oracle.violations)


def test_confinement_flags_raw_write_to_shared_frame():
    sim, driver = make_sim()
    fd = driver.create(image_for_pages("echo", 3, 1))
    rec = driver.record_of(fd)
    oracle = WriteConfinementOracle(sim.hv)
    sim.machine.observers.append(oracle)
    # primary may write its channel page, but only via the protocol
    sim.machine.write_frame(rec.channel_frames()[0], 64, b"\xee")
    assert any("outside channel protocol" in v for v in oracle.violations)


# -- structural checks -----------------------------------------------------------


def test_exclusivity_blesses_channels_and_flags_extras():
    sim, driver = make_sim()
    fd = driver.create(image_for_pages("echo", 3, 1))
    rec = driver.record_of(fd)
    shared = set(rec.channel_frames())
    assert check_frame_exclusivity(sim.hv, shared) == []
    # sneak a second primary mapping of a private frame, data-only so it
    # pattern-matches legal channel sharing
    sim.hv.primary.table.map(300, rec.private_frames()[0], PERM_RW)
    rec.vm.table.protect(0, PERM_RW)
    problems = check_frame_exclusivity(sim.hv, shared)
    assert any("not a known channel" in p for p in problems)


def test_exclusivity_flags_executable_sharing():
    sim, driver = make_sim()
    fd = driver.create(image_for_pages("echo", 3, 1))
    rec = driver.record_of(fd)
    page = rec.primary_channel_pages()[0]
    sim.hv.primary.table.protect(page, PERM_RWX)
    problems = check_frame_exclusivity(sim.hv)
    assert any("perms" in p for p in problems)


def test_exclusivity_flags_destroyed_vm_with_mappings():
    sim, driver = make_sim()
    fd = driver.create(image_for_pages("echo", 3, 1))
    rec = driver.record_of(fd)
    driver.destroy(fd)
    rec.vm.table.map(0, 250, PERM_RO)
    problems = check_frame_exclusivity(sim.hv)
    assert any("destroyed" in p for p in problems)


def test_stack_integrity_sees_broken_links():
    sim, _ = make_sim()
    hv = sim.hv
    a = hv.make_aux_vcpu(0, "a")
    hv.schedule_vcpu(0, a)
    assert check_stack_integrity(hv) == []
    a.tail.head = None  # sever the downlink's back-pointer
    assert any("asymmetric" in p for p in check_stack_integrity(hv))
    a.tail.head = a
    hv.yield_vcpu(0)
    a.tail = sim.primary_vcpu(0)  # dangling link on an idle vcpu
    assert any("dangling" in p for p in check_stack_integrity(hv))


def test_trace_completeness_detects_tampering():
    sim, driver = make_sim()
    fd = driver.create(image_for_pages("echo", 3, 1))
    driver.invoke(fd, 0, b"x")
    assert check_trace_completeness(sim) == []
    sim.machine.ledger.hypercalls += 1
    assert any("hypercall" in p for p in check_trace_completeness(sim))
    sim.machine.ledger.hypercalls -= 1
    del sim.trace.events[3]
    assert any("dense" in p for p in check_trace_completeness(sim))


def test_secret_scanner_finds_planted_bytes():
    sim, driver = make_sim()
    needle = bytes.fromhex("feedfacecafebeef")
    sim.machine.write_frame(123, 700, needle)
    hits = SecretScanner(sim.machine).scan_frames([needle])
    assert hits == [(123, 700, 0)]
    reachable = SecretScanner(sim.machine).scan_vm_reachable(
        sim.hv, sim.hv.primary.vmid, [needle])
    assert reachable == hits  # primary maps everything at boot


# -- reference stack model --------------------------------------------------------


def test_reference_model_semantics():
    model = ReferenceStackModel(1, ["base"])
    model.push(0, "a")
    model.push(0, "b")
    assert model.stack(0) == ["base", "a", "b"]
    assert model.charges == 2
    assert model.interrupt(0, "a") == "unwound"
    assert model.stack(0) == ["base", "a"]
    assert model.charges == 3
    assert model.interrupt(0, "a") == "pending"
    assert model.charges == 3 and "a" in model.pending
    assert model.pop(0) == "a"
    assert model.top(0) == "base"
    model.push(0, "a")  # re-entry consumes the pending mark
    assert "a" not in model.pending


# -- scenario engine ---------------------------------------------------------------


def test_scenario_roundtrip_and_expectations():
    result = run_scenario_text("""
        machine frames=128
        create e echo mem=3
        invoke e 0 str:hello
        expect status done
        expect payload str:hello
        invoke e 9
        expect status error
        destroy e
        destroy e
        expect error BadFd
    """)
    assert result.ok
    assert any("create e" in line for line in result.outputs)


def test_scenario_adversary_and_interrupts():
    result = run_scenario_text("""
        machine frames=128
        create e echo mem=3
        adversary read e private 0
        expect fault unmapped
        adversary write e private 1
        expect fault unmapped
        adversary read e channel 0
        aux a1
        schedule a1
        interrupt primary
        expect outcome unwound
        interrupt primary
        expect outcome pending
    """)
    assert result.ok


def test_scenario_expectation_failure_raises():
    with pytest.raises(ExpectationFailed):
        run_scenario_text("""
            create e echo
            invoke e 0 str:x
            expect status error
        """)


@pytest.mark.parametrize("bad", [
    "warp 9",
    "create e echo\nmachine frames=64",
    "invoke ghost 0",
    "create e echo\ninvoke e 0 b64:AAAA",
    "create e echo\nadversary peek e private 0",
    "seed 1 2",
])
def test_scenario_rejects_malformed_scripts(bad):
    with pytest.raises(ScenarioParseError):
        run_scenario_text(bad)


def test_bundled_scenarios_run_clean():
    paths = sorted(SCENARIO_DIR.glob("*.txt"))
    assert len(paths) >= 4
    for path in paths:
        scenario = parse_scenario(path.read_text(), name=path.stem)
        result = run_scenario(scenario)
        assert result.ok, (path.name, result.violations)


def test_scenarios_are_deterministic():
    text = """
        seed 11
        create e echo mem=3
        invoke e 0 rand:32
        timer 6
        create s spinner mem=3
        invoke s 1 hex:0400000003000000
        resume s
        destroy s
        destroy e
    """
    a = run_scenario_text(text)
    b = run_scenario_text(text)
    assert a.ok and b.ok
    assert a.outputs == b.outputs
    assert a.sim.trace.to_jsonl() == b.sim.trace.to_jsonl()


# -- command line ------------------------------------------------------------------


def test_cli_run_and_trace(tmp_path, capsys):
    trace_out = str(tmp_path / "trace.jsonl")
    demo = str(SCENARIO_DIR / "stack_demo.txt")
    assert cli_main(["run", demo, "--trace", trace_out]) == 0
    lines = Path(trace_out).read_text().strip().splitlines()
    events = [json.loads(line) for line in lines]
    assert events[0]["event"] == "boot"
    assert [ev["step"] for ev in events] == list(range(len(events)))
    capsys.readouterr()


def test_cli_trace_wants_one_scenario(capsys):
    demo = str(SCENARIO_DIR / "stack_demo.txt")
    assert cli_main(["run", demo, demo, "--trace", "/tmp/x.jsonl"]) == 2
    capsys.readouterr()


def test_cli_attack(capsys):
    assert cli_main(["attack"]) == 0
    out = capsys.readouterr().out
    assert "contained" in out


def test_cli_bench_small(capsys):
    assert cli_main(["bench", "--pages", "16,32", "--reps", "3"]) == 0
    capsys.readouterr()


def test_cli_fuzz_profiles(capsys):
    assert cli_main(["fuzz", "--profile", "stack", "--ops", "400"]) == 0
    assert cli_main(["fuzz", "--profile", "create-fail", "--ops", "60"]) == 0
    assert cli_main(["fuzz", "--profile", "sensitivity"]) == 0
    capsys.readouterr()


def test_cli_pack_image(tmp_path, capsys):
    code = tmp_path / "blob.bin"
    code.write_bytes(b"TA!echo\n" + bytes(64))
    out = tmp_path / "img.bin"
    rc = cli_main(["pack-image", "--mem-pages", "2", "--channel-pages", "1",
                   "--code", str(code), "--cmds", "0", "-o", str(out)])
    assert rc == 0 and out.exists()
    bad = cli_main(["pack-image", "--mem-pages", "0", "--channel-pages", "1",
                    "--code", str(code), "--cmds", "0",
                    "-o", str(tmp_path / "nope.bin")])
    assert bad == 1
    capsys.readouterr()
