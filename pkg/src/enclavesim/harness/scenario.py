"""Line-oriented scenario scripts.

A scenario drives one simulation end to end: it sizes the machine, creates
enclaves through the driver, invokes commands, injects timer interrupts,
plays adversary (guest-level reads and writes from the primary into memory
it should not reach) and asserts on outcomes.  The same script always
produces the same trace.

Format, one statement per line, `#` starts a comment:

    machine frames=512 pcpus=1 max_vms=8 reserved=64
    seed 7

    create w wallet                 # fd bound to variable `w`
    create e echo mem=16 chan=2     # override image geometry
    invoke w 1 str:master seed      # payload: str:, hex:, rand:N or empty
    expect status done
    expect payload len:0
    resume e                        # re-enter after a preemption
    destroy w
    expect error BadHandle          # previous statement must have failed so

    timer 40                        # arm a timer `delay` cost units out
    tick                            # poll timers outside guest execution
    adversary read e private 0      # primary touches donated page 0
    expect fault unmapped
    adversary write e private 3
    aux a1                          # bare schedulable vcpu, pcpu 0
    schedule a1
    interrupt primary               # unwinds everything above the base
    yield                           # pop the running vcpu

`expect` always refers to the immediately preceding action.  Adversary
accesses and failed driver calls are recorded, never raised, so containment
is scriptable; an error that was not expected fails the run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..channel import ChannelStatus
from ..errors import ScenarioParseError, SimulationError
from ..guest_os import EnclaveDriver
from ..machine import PAGE_SHIFT, MachineConfig
from ..sim import Simulation
from ..stage2 import AccessFault
from ..ta_runtime import REGISTRY, image_for, image_for_pages
from .oracles import WriteConfinementOracle, ZeroizeWatch, standard_checks


class ExpectationFailed(SimulationError):
    """A scripted `expect` did not hold."""


@dataclass(frozen=True)
class Step:
    lineno: int
    op: str
    args: Tuple[str, ...]

    def fail(self, msg: str) -> ScenarioParseError:
        return ScenarioParseError("line %d: %s" % (self.lineno, msg))


@dataclass
class Scenario:
    config: MachineConfig
    seed: int
    steps: List[Step]
    name: str = "scenario"


@dataclass
class ScenarioResult:
    sim: Simulation
    driver: EnclaveDriver
    outputs: List[str] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _parse_kv(parts: List[str], lineno: int, allowed: Dict[str, str]) -> Dict[str, int]:
    out = {}
    for part in parts:
        if "=" not in part:
            raise ScenarioParseError("line %d: expected key=value, got %r"
                                     % (lineno, part))
        key, _, val = part.partition("=")
        if key not in allowed:
            raise ScenarioParseError("line %d: unknown key %r" % (lineno, key))
        try:
            out[allowed[key]] = int(val, 0)
        except ValueError:
            raise ScenarioParseError("line %d: bad integer %r"
                                     % (lineno, val)) from None
    return out


_ACTIONS = {"create", "invoke", "resume", "destroy", "timer", "tick",
            "adversary", "expect", "aux", "schedule", "yield", "interrupt"}


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    config_kw: Dict[str, int] = {}
    seed = 0
    steps: List[Step] = []
    saw_action = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op, args = parts[0], parts[1:]
        if op == "machine":
            if saw_action:
                raise ScenarioParseError(
                    "line %d: machine directive after first action" % lineno)
            config_kw.update(_parse_kv(
                args, lineno,
                {"frames": "frames", "pcpus": "pcpus", "max_vms": "max_vms",
                 "reserved": "os_reserved_pages"}))
        elif op == "seed":
            if saw_action:
                raise ScenarioParseError(
                    "line %d: seed directive after first action" % lineno)
            if len(args) != 1:
                raise ScenarioParseError("line %d: seed takes one integer"
                                         % lineno)
            seed = int(args[0], 0)
        elif op in _ACTIONS:
            saw_action = True
            steps.append(Step(lineno, op, tuple(args)))
        else:
            raise ScenarioParseError("line %d: unknown statement %r"
                                     % (lineno, op))
    return Scenario(MachineConfig(**config_kw), seed, steps, name)


def _parse_payload(spec: str, rng) -> bytes:
    if spec.startswith("str:"):
        return spec[4:].encode()
    if spec.startswith("hex:"):
        return bytes.fromhex(spec[4:])
    if spec.startswith("rand:"):
        return rng.randbytes(int(spec[5:]))
    raise ScenarioParseError("payload must be str:, hex: or rand:N, got %r"
                             % spec)


class _Runner:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.sim = Simulation(scenario.config, seed=scenario.seed)
        self.driver = EnclaveDriver(self.sim)
        self.zerowatch = ZeroizeWatch(self.sim.hv)
        self.confinement = WriteConfinementOracle(self.sim.hv)
        self.sim.machine.observers += [self.zerowatch, self.confinement]
        self.fds: Dict[str, int] = {}
        self.auxes: Dict[str, object] = {}
        self.outputs: List[str] = []
        # outcome of the most recent action, consulted by `expect`
        self.last: Dict[str, object] = {}

    def _say(self, msg: str) -> None:
        self.outputs.append(msg)

    def _fd(self, step: Step, var: str) -> int:
        if var not in self.fds:
            raise step.fail("unknown enclave variable %r" % var)
        return self.fds[var]

    def run(self) -> ScenarioResult:
        for step in self.scenario.steps:
            handler = getattr(self, "_op_" + step.op)
            handler(step)
        violations = standard_checks(self.sim, self.driver,
                                     self._shared_frames())
        violations += self.zerowatch.violations
        violations += self.confinement.violations
        return ScenarioResult(self.sim, self.driver, self.outputs, violations)

    def _shared_frames(self) -> set:
        # expected sharing from the OS side: each live fd's channel pages,
        # translated through the primary's view
        shared = set()
        for fd in self.driver.open_fds():
            info = self.driver.fd_info(fd)
            for page in info.chan_pages:
                ent = self.sim.hv.primary.table.lookup(page)
                if ent is not None:
                    shared.add(ent[0])
        return shared

    # -- actions ----------------------------------------------------------

    def _guard(self, step: Step, thunk):
        """Run a driver/hypervisor action, turning errors into recorded
        outcomes instead of crashes."""
        self.last = {"lineno": step.lineno}
        try:
            return thunk()
        except SimulationError as err:
            self.last["error"] = type(err).__name__
            self._say("line %d: %s: %s"
                      % (step.lineno, type(err).__name__, err))
            return None

    def _op_create(self, step: Step) -> None:
        if len(step.args) < 2:
            raise step.fail("create needs: create <var> <program>")
        var, ta_name = step.args[0], step.args[1]
        if ta_name not in REGISTRY:
            raise step.fail("no registered program %r" % ta_name)
        geom = _parse_kv(list(step.args[2:]), step.lineno,
                         {"mem": "mem", "chan": "chan"})
        if geom:
            image = image_for_pages(ta_name,
                                    geom.get("mem",
                                             image_for(ta_name).mem_size_pages),
                                    geom.get("chan", 1))
        else:
            image = image_for(ta_name)

        def go():
            fd = self.driver.create(image)
            self.fds[var] = fd
            self.last["fd"] = fd
            self._say("line %d: create %s -> fd %d (%d+%d pages)"
                      % (step.lineno, var, fd, image.mem_size_pages,
                         image.channel_size_pages))
        self._guard(step, go)

    def _op_invoke(self, step: Step) -> None:
        if len(step.args) < 2:
            raise step.fail("invoke needs: invoke <var> <cmd> [payload]")
        fd = self._fd(step, step.args[0])
        cmd = int(step.args[1], 0)
        payload = b""
        if len(step.args) > 2:
            payload = _parse_payload(" ".join(step.args[2:]), self.sim.rng)

        def go():
            status, ret = self.driver.invoke(fd, cmd, payload)
            self.last["status"] = status
            self.last["payload"] = ret
            self._say("line %d: invoke %s cmd %d -> %s %s"
                      % (step.lineno, step.args[0], cmd, status.name.lower(),
                         ret.hex()))
        self._guard(step, go)

    def _op_resume(self, step: Step) -> None:
        if len(step.args) != 1:
            raise step.fail("resume needs: resume <var>")
        fd = self._fd(step, step.args[0])

        def go():
            status, ret = self.driver.resume(fd)
            self.last["status"] = status
            self.last["payload"] = ret
            self._say("line %d: resume %s -> %s %s"
                      % (step.lineno, step.args[0], status.name.lower(),
                         ret.hex()))
        self._guard(step, go)

    def _op_destroy(self, step: Step) -> None:
        if len(step.args) != 1:
            raise step.fail("destroy needs: destroy <var>")
        fd = self._fd(step, step.args[0])

        def go():
            # the variable stays bound so a scripted second destroy can
            # observe the driver's BadFd instead of a parse error
            self.driver.destroy(fd)
            self._say("line %d: destroy %s" % (step.lineno, step.args[0]))
        self._guard(step, go)

    def _op_timer(self, step: Step) -> None:
        if not step.args:
            raise step.fail("timer needs a delay")
        delay = int(step.args[0], 0)
        kw = _parse_kv(list(step.args[1:]), step.lineno, {"pcpu": "pcpu"})
        deadline = self.sim.arm_timer(delay, kw.get("pcpu", 0))
        self.last = {"lineno": step.lineno}
        self._say("line %d: timer armed for t=%d" % (step.lineno, deadline))

    def _op_tick(self, step: Step) -> None:
        self.last = {"lineno": step.lineno}
        self.sim.check_timers()

    def _op_adversary(self, step: Step) -> None:
        if len(step.args) != 4 or step.args[0] not in ("read", "write") \
                or step.args[2] not in ("private", "channel"):
            raise step.fail(
                "adversary needs: adversary read|write <var> private|channel <idx>")
        mode, var, region, idx = (step.args[0], step.args[1], step.args[2],
                                  int(step.args[3], 0))
        fd = self._fd(step, var)
        rec = self.driver.record_of(fd)
        pages = (rec.primary_private_pages() if region == "private"
                 else rec.primary_channel_pages())
        if not 0 <= idx < len(pages):
            raise step.fail("page index %d out of range" % idx)
        ipa = pages[idx] << PAGE_SHIFT
        self.last = {"lineno": step.lineno}
        if mode == "read":
            out = self.sim.vm_read(self.sim.hv.primary, ipa, 16)
        else:
            out = self.sim.vm_write(self.sim.hv.primary, ipa, b"\xa5" * 16)
        if isinstance(out, AccessFault):
            self.last["fault"] = out.kind.value
            self._say("line %d: adversary %s %s[%d] -> fault %s"
                      % (step.lineno, mode, region, idx, out.kind.value))
        else:
            self.last["data"] = out if mode == "read" else b""
            self._say("line %d: adversary %s %s[%d] -> succeeded"
                      % (step.lineno, mode, region, idx))

    # raw stacking, for demos of the scheduling machinery
    def _op_aux(self, step: Step) -> None:
        if not step.args:
            raise step.fail("aux needs a name")
        kw = _parse_kv(list(step.args[1:]), step.lineno, {"pcpu": "pcpu"})
        name = step.args[0]
        self.auxes[name] = self.sim.hv.make_aux_vcpu(kw.get("pcpu", 0), name)
        self.last = {"lineno": step.lineno}

    def _resolve_vcpu(self, step: Step, name: str):
        if name == "primary":
            return self.sim.primary_vcpu(0)
        if name in self.auxes:
            return self.auxes[name]
        raise step.fail("unknown vcpu %r" % name)

    def _op_schedule(self, step: Step) -> None:
        if not step.args:
            raise step.fail("schedule needs a vcpu name")
        vcpu = self._resolve_vcpu(step, step.args[0])
        self._guard(step, lambda: self.sim.hv.schedule_vcpu(vcpu.pcpu, vcpu))

    def _op_yield(self, step: Step) -> None:
        kw = _parse_kv(list(step.args), step.lineno, {"pcpu": "pcpu"})
        self._guard(step,
                    lambda: self.sim.hv.yield_vcpu(kw.get("pcpu", 0)))

    def _op_interrupt(self, step: Step) -> None:
        if not step.args:
            raise step.fail("interrupt needs a vcpu name")
        vcpu = self._resolve_vcpu(step, step.args[0])

        def go():
            outcome = self.sim.hv.deliver_interrupt(vcpu.pcpu, vcpu)
            self.last["outcome"] = outcome
            self._say("line %d: interrupt %s -> %s"
                      % (step.lineno, step.args[0], outcome))
        self._guard(step, go)

    # -- expectations -------------------------------------------------------

    def _op_expect(self, step: Step) -> None:
        if len(step.args) < 2:
            raise step.fail("expect needs: expect <what> <value>")
        what, value = step.args[0], " ".join(step.args[1:])
        if what == "status":
            got = self.last.get("status")
            want = ChannelStatus[value.upper()]
            if got is not want:
                raise ExpectationFailed(
                    "line %d: expected status %s, got %s"
                    % (step.lineno, want.name,
                       got.name if got is not None else self.last.get("error")))
        elif what == "payload":
            got = self.last.get("payload")
            if value.startswith("len:"):
                want_len = int(value[4:], 0)
                if got is None or len(got) != want_len:
                    raise ExpectationFailed(
                        "line %d: expected %d payload bytes, got %r"
                        % (step.lineno, want_len, got))
            else:
                want = _parse_payload(value, self.sim.rng)
                if got != want:
                    raise ExpectationFailed(
                        "line %d: payload %r != expected %r"
                        % (step.lineno, got, want))
        elif what == "fault":
            got = self.last.get("fault")
            if got != value:
                raise ExpectationFailed(
                    "line %d: expected fault %r, got %r"
                    % (step.lineno, value, got if got else "no fault"))
        elif what == "error":
            got = self.last.get("error")
            if got != value:
                raise ExpectationFailed(
                    "line %d: expected error %s, got %r"
                    % (step.lineno, value, got))
        elif what == "outcome":
            got = self.last.get("outcome")
            if got != value:
                raise ExpectationFailed(
                    "line %d: expected interrupt outcome %r, got %r"
                    % (step.lineno, value, got))
        else:
            raise step.fail("unknown expectation %r" % what)


def run_scenario(scenario: Scenario) -> ScenarioResult:
    return _Runner(scenario).run()


def run_scenario_text(text: str, name: str = "scenario") -> ScenarioResult:
    return run_scenario(parse_scenario(text, name))
