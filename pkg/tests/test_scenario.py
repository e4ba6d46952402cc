import json
from pathlib import Path

import pytest

from tinc.errors import ConfigError
from tinc.scenario import Scenario, load_scenario, parse_scenario, parse_values, with_override

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def test_shipped_scenarios_load():
    smoke = load_scenario(str(SCENARIOS / "smoke.scenario"))
    assert smoke.name == "smoke" and smoke.seed == 7
    assert smoke.topology.control_count == 8
    default = load_scenario(str(SCENARIOS / "default.scenario"))
    assert default.topology.shards == 4
    assert default.workload.auth_levels == {0: 0.7, 1: 0.3}


def test_defaults_fill_missing_sections():
    s = parse_scenario({"schema_version": 1})
    assert isinstance(s, Scenario)
    assert s.scheduler.delta == 0.5
    assert s.xshard.tau == 2 and s.xshard.t_min == 100.0
    assert s.ddid.alpha == 0.9


def test_errors_name_the_offending_field():
    with pytest.raises(ConfigError) as info:
        parse_scenario({"schema_version": 1, "workload": {"rate": -5}})
    assert info.value.path == "workload.rate"
    with pytest.raises(ConfigError) as info:
        parse_scenario({"schema_version": 1, "topology": {"shards": 2, "colour": "red"}})
    assert info.value.path == "topology.colour"
    with pytest.raises(ConfigError) as info:
        parse_scenario({"schema_version": 2})
    assert info.value.path == "schema_version"
    with pytest.raises(ConfigError):
        parse_scenario({})
    with pytest.raises(ConfigError):
        parse_scenario([1, 2])


def test_cross_field_rules():
    with pytest.raises(ConfigError):
        parse_scenario({"schema_version": 1, "topology": {"shards": None}})
    sized = parse_scenario({"schema_version": 1, "topology": {"shards": None, "total_control": 12, "total_data": 12}})
    assert sized.topology.control_count == 12
    with pytest.raises(ConfigError):
        parse_scenario({"schema_version": 1, "workload": {"multi_object_fraction": 0.5, "objects": 1}})
    with pytest.raises(ConfigError):
        parse_scenario({"schema_version": 1, "workload": {"auth_levels": {}}})
    with pytest.raises(ConfigError) as info:
        parse_scenario({"schema_version": 1, "faults": [{"kind": "crash", "at": 5.0}]})
    assert info.value.path.startswith("faults.0")


def test_load_reports_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(str(tmp_path / "missing.scenario"))
    bad = tmp_path / "bad.scenario"
    bad.write_text("{ not json")
    with pytest.raises(ConfigError) as info:
        load_scenario(str(bad))
    assert "line 1" in str(info.value)


def test_overrides_accept_aliases_and_dotted_paths():
    s = parse_scenario({"schema_version": 1})
    assert with_override(s, "shards", 4).topology.shards == 4
    assert with_override(s, "network.jitter", 0.0).network.jitter == 0.0
    assert s.topology.shards == 2
    with pytest.raises(ConfigError):
        with_override(s, "topology.colour", 1)
    with pytest.raises(ConfigError):
        with_override(s, "rate", -1.0)


def test_parse_values():
    assert parse_values("2,4,8") == [2, 4, 8]
    assert parse_values("0.1, 0.5") == [0.1, 0.5]
    assert parse_values("abc,b") == ["abc", "b"]
    with pytest.raises(ConfigError):
        parse_values(" , ")


def test_scenarios_serialize_back_to_json():
    s = load_scenario(str(SCENARIOS / "smoke.scenario"))
    again = parse_scenario(json.loads(json.dumps(s.model_dump(mode="json"))))
    assert again == s
