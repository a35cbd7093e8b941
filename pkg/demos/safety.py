"""
Untrusted G-code meets the validator and the printer.

The manufacturer checks every program before it reaches the machine,
and the simulated printer refuses the same commands on its own.
"""
from stlstream.config import MachineSpec
from stlstream.gcode import parse_gcode, validate
from stlstream.printer_sim import PrinterSim

PROGRAM = """\
G28
M104 S215
M997            ; firmware update
G1 X10 Y10 Z0.3 F3000
M104 S320       ; past the hotend limit
G1 X400 Y10     ; off the bed
M23 job.gco     ; select a file from SD
M999            ; restart
"""


def main():
    machine = MachineSpec()
    program = parse_gcode(PROGRAM)
    report = validate(program, machine)
    print(f"validator verdict: {report.verdict}")
    for v in report.violations:
        print(f"  line {v.source_line}: {v.rule} ({v.detail})")

    print()
    print("same lines sent straight to the printer:")
    sim = PrinterSim(machine)
    for n, line in enumerate(PROGRAM.splitlines(), start=1):
        print(f"  {n}: {line.split(';')[0].strip():<16} -> {sim.send_line(line)}")
    state = sim.state
    print(f"printer ends at {state.position}, hotend setpoint {state.hotend_target:g} C")


if __name__ == "__main__":
    main()
