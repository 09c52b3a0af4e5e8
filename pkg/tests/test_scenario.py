import pytest

from teesim import scenario as sc
from teesim.errors import ParseError, ValidationError
from teesim.units import MS_NS

MINIMAL = """teesim-scenario v1
seed = 5
horizon = 3s

[apps]
app demo demo-payload

[timeline]
at 0ms create sb1 app=demo
at 800ms workload sb1 idle
at 1500ms terminate sb1
"""


def test_parse_minimal():
    s = sc.parse(MINIMAL)
    assert s.seed == 5
    assert len(s.timeline) == 3
    assert s.timeline[0].kind == "create"


def test_roundtrip_specific():
    s = sc.parse(MINIMAL)
    assert sc.parse(sc.serialize(s)) == s


@pytest.mark.parametrize("seed", range(12))
def test_roundtrip_generated(seed):
    s = sc.make_random_scenario(seed)
    assert sc.parse(sc.serialize(s)) == s


def test_missing_header_is_parse_error():
    with pytest.raises(ParseError) as exc:
        sc.parse("not a scenario\n")
    assert exc.value.line == 1


def test_bad_section_reports_line():
    text = MINIMAL.replace("[apps]", "[wat]")
    with pytest.raises(ParseError) as exc:
        sc.parse(text)
    assert exc.value.line == 5


def test_bad_keyvalue_reports_line():
    with pytest.raises(ParseError) as exc:
        sc.parse("teesim-scenario v1\nseed 5\n")
    assert exc.value.line == 2


def test_unknown_device_is_validation_error():
    text = MINIMAL.replace("at 800ms workload sb1 idle",
                           "at 800ms request_dev sb1 floppy")
    with pytest.raises(ValidationError):
        sc.parse(text)


def test_unknown_handle_is_validation_error():
    text = MINIMAL.replace("terminate sb1", "terminate sb9")
    with pytest.raises(ValidationError):
        sc.parse(text)


def test_unsorted_timeline_rejected():
    text = MINIMAL.replace("at 1500ms terminate sb1",
                           "at 100ms terminate sb1")
    with pytest.raises(ValidationError):
        sc.parse(text)


def test_minimal_run_has_boot_and_shutdown_costs():
    res = sc.run_scenario(sc.parse(MINIMAL))
    assert res.exit_code == 0
    costs = {r["args"]["name"]: r["args"]["ns"]
             for r in res.world.engine.records if r["op"] == "cost"}
    assert costs["boot"] == 532 * MS_NS
    assert costs["shutdown"] == 629 * MS_NS


def test_rerun_same_seed_identical_digest():
    s = sc.make_random_scenario(3)
    assert sc.run_scenario(s).trace_digest == sc.run_scenario(s).trace_digest


def test_mutation_flag_roundtrip():
    text = MINIMAL.replace("seed = 5", "seed = 5\nmutate = no_sanitize")
    s = sc.parse(text)
    assert s.mutations == ("no_sanitize",)
    assert sc.parse(sc.serialize(s)) == s


def test_attack_directive_runs():
    text = MINIMAL.replace("at 800ms workload sb1 idle",
                           "at 800ms attack dma_bypass target=sb1")
    res = sc.run_scenario(sc.parse(text))
    assert res.exit_code == 0
    assert len(res.world.attack_outcomes) == 1
    assert res.world.attack_outcomes[0].blocked


def test_unblocked_attack_sets_exit_code():
    text = MINIMAL.replace("seed = 5", "seed = 5\nmutate = no_smmu")
    text = text.replace("at 800ms workload sb1 idle",
                        "at 800ms attack dma_bypass target=sb1")
    res = sc.run_scenario(sc.parse(text))
    assert res.exit_code == 1
