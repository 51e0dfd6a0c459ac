"""Probe DSL text-assembly parser tests."""

import pytest

from cohsim.program import (
    Op,
    ProbeParseError,
    ProbeProgram,
    alu,
    branch,
    fence_loads,
    fence_mem,
    flush,
    format_probe,
    load,
    parse_probe,
    read_timer,
    store,
)

CANONICAL = """
# timing probe
mfence
lfence
rdtimer t0
lfence
load v, [lbb_addr]       # delay load
alu c, v
branch c, end
load d, [lab_base]       # probing load
end: lfence
rdtimer t1
flush [lab_base]
flush [lbb_addr]
"""


def test_parse_canonical_probe():
    prog = parse_probe(CANONICAL)
    ops = [i.op for i in prog]
    assert ops == [
        Op.FENCE_MEM, Op.FENCE_LOADS, Op.READ_TIMER, Op.FENCE_LOADS,
        Op.LOAD, Op.ALU, Op.BRANCH, Op.LOAD, Op.FENCE_LOADS,
        Op.READ_TIMER, Op.FLUSH, Op.FLUSH,
    ]
    br = prog[6]
    assert br.src == "c" and br.target == 8  # label resolves past the LAB


def test_round_trip():
    prog = parse_probe(CANONICAL)
    assert parse_probe(format_probe(prog)) == prog


def test_numeric_branch_target():
    prog = parse_probe("branch c, 2\nalu a, b\nlfence\n")
    assert prog[0].target == 2


def test_branch_may_target_program_end():
    prog = parse_probe("branch c, 1\n")
    assert prog[0].target == 1


def test_branch_target_out_of_range():
    with pytest.raises(ProbeParseError):
        parse_probe("branch c, 5\nalu a, b\n")
    with pytest.raises(ProbeParseError):
        ProbeProgram((branch("c", 3), alu("a", "b")))


def test_undefined_label_reports_line():
    with pytest.raises(ProbeParseError) as err:
        parse_probe("alu a, b\nbranch c, nowhere\n")
    assert "nowhere" in str(err.value) and "line 2" in str(err.value)


def test_duplicate_label():
    with pytest.raises(ProbeParseError) as err:
        parse_probe("x: alu a, b\nx: alu c, d\n")
    assert "duplicate" in str(err.value)


def test_unknown_instruction_reports_line():
    with pytest.raises(ProbeParseError) as err:
        parse_probe("lfence\nprefetch [a]\n")
    assert err.value.lineno == 2


def test_malformed_operands():
    for bad in ("load v lbb", "store v", "alu a", "rdtimer", "flush a",
                "lfence now", "mfence x"):
        with pytest.raises(ProbeParseError):
            parse_probe(bad)


def test_label_on_own_line():
    prog = parse_probe("branch c, end\nalu a, b\nend:\n")
    assert prog[0].target == 2 and len(prog) == 2


def test_constructors_match_parser():
    text = format_probe(
        ProbeProgram(
            (
                fence_mem(),
                fence_loads(),
                read_timer("t"),
                load("v", "a"),
                store("a"),
                alu("x", "v"),
                branch("x", 7),
                flush("a"),
            )
        )
    )
    assert parse_probe(text) == ProbeProgram(
        (
            fence_mem(), fence_loads(), read_timer("t"), load("v", "a"),
            store("a"), alu("x", "v"), branch("x", 7), flush("a"),
        )
    )
