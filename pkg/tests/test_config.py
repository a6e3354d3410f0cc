import copy
import json

import pytest
import yaml

from qkdnet.cli import sample_config
from qkdnet.config import ConfigError, check_script, load_config, load_script
from qkdnet.core import NodeId

with open(sample_config(), encoding="utf-8") as fh:
    SAMPLE = yaml.safe_load(fh)


def mutated(fn):
    raw = copy.deepcopy(SAMPLE)
    fn(raw)
    return raw


def test_sample_parses():
    cfg = load_config(sample_config())
    assert len(cfg.domains) == 5 and len(cfg.nodes) == 11 and len(cfg.borders) == 6
    assert NodeId("berlin", "gw") in cfg.nodes


def test_json_yaml_and_mapping_agree():
    a = load_config(SAMPLE)
    b = load_config(json.dumps(SAMPLE))
    c = load_config(yaml.safe_dump(SAMPLE, sort_keys=False))
    assert a == b == c


def test_link_ids_are_stable():
    a, b = load_config(SAMPLE), load_config(copy.deepcopy(SAMPLE))
    assert [l.link_id for l in a.links] == [l.link_id for l in b.links]
    assert len({l.link_id for l in a.links}) == len(a.links)


BAD = [
    ("domains", lambda r: r.pop("domains")),
    ("domains.berlin.nodes", lambda r: r["domains"]["berlin"].__setitem__("nodes", [])),
    ("domains.berlin.links[0].b", lambda r: r["domains"]["berlin"]["links"][0].__setitem__("b", "gw")),
    ("domains.berlin.links[0].type", lambda r: r["domains"]["berlin"]["links"][0].__setitem__("type", "RAW")),
    ("domains.berlin.links[0].rate_bps", lambda r: r["domains"]["berlin"]["links"][0].__setitem__("rate_bps", "x")),
    ("domains.berlin.links[0].rate_bps", lambda r: r["domains"]["berlin"]["links"][0].__setitem__("rate_bps", 0)),
    ("domains.berlin.links[0].bogus", lambda r: r["domains"]["berlin"]["links"][0].__setitem__("bogus", 1)),
    ("borders[0].method", lambda r: r["borders"][0].__setitem__("method", 5)),
    ("borders[1].links", lambda r: r["borders"][1]["links"][1].update(kem="kem-a")),
    ("borders[2].mode", lambda r: r["borders"][2].__setitem__("mode", "c")),
    ("borders[2].suites", lambda r: r["borders"][2]["suites"].pop()),
    ("borders[4].block_size", lambda r: r["borders"][4].__setitem__("block_size", 101)),
    ("borders[4].psk", lambda r: r["borders"][4].__setitem__("psk", "nope")),
    ("borders[4].kdf", lambda r: r["borders"][4].__setitem__("kdf", "md5")),
    ("borders[4].paths", lambda r: r["borders"][4]["paths"]["ground"].update(kem="kem-a", sig="sig-a")),
    ("controllers[1].domains[0]", lambda r: r["controllers"][1].__setitem__("domains", ["redimadrid"])),
    ("key_len", lambda r: r.__setitem__("key_len", 4)),
    ("seed", lambda r: r.__setitem__("seed", "abc")),
]


@pytest.mark.parametrize("where,mutate", BAD, ids=[b[0] for b in BAD])
def test_errors_name_their_field(where, mutate):
    with pytest.raises(ConfigError) as info:
        load_config(mutated(mutate))
    assert info.value.path.startswith(where.split("[")[0].split(".")[0])
    assert where in str(info.value) or info.value.path == where


def test_unknown_suite_and_unlisted_suite():
    with pytest.raises(ConfigError, match="kem-z"):
        load_config(mutated(lambda r: r["suites"].append("kem-z")))
    with pytest.raises(ConfigError, match="not listed"):
        load_config(mutated(lambda r: r["suites"].remove("kem-b")))


def test_bad_psk_hex():
    with pytest.raises(ConfigError) as info:
        load_config(mutated(lambda r: r["psks"].__setitem__("gateways", "zz")))
    assert info.value.path == "psks.gateways"


def test_top_level_and_io_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config("[1, 2]")
    with pytest.raises(ConfigError, match="no such file"):
        load_config(str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigError):
        load_config("{not json")


def test_script_parsing():
    s = load_script({"duration": 30, "actions": [
        {"at": 5, "action": "kill", "channel": "x"},
        {"at": 1, "action": "request_e2e_key", "source": "berlin/gw", "destination": "poznan/gw"},
    ]})
    assert [a.kind for a in s.actions] == ["request_e2e_key", "kill"]
    assert load_script(None).actions == ()
    with pytest.raises(ConfigError) as info:
        load_script({"duration": 5, "actions": [{"at": 9, "action": "kill", "channel": "x"}]})
    assert info.value.path == "actions[0].at"
    with pytest.raises(ConfigError) as info:
        load_script({"actions": [{"at": 1, "action": "explode"}]})
    assert info.value.path == "actions[0].action"
    with pytest.raises(ConfigError) as info:
        load_script({"actions": [{"at": 1, "action": "kill", "channel": "x", "when": 3}]})
    assert info.value.path == "actions[0].when"


@pytest.mark.parametrize("action,where", [
    ({"action": "request_e2e_key", "source": "berlin/gw", "destination": "berlin/gw"}, "actions[0].destination"),
    ({"action": "request_e2e_key", "source": "berlin/zz", "destination": "berlin/gw"}, "actions[0].source"),
    ({"action": "kill", "channel": "nowhere"}, "actions[0].channel"),
    ({"action": "kill_node", "node": "atlantis/x"}, "actions[0].node"),
    ({"action": "drain", "node": "berlin/gw", "peer": "berlin/n1"}, "actions[0].supplier"),
    ({"action": "request_all_pairs", "length": 0}, "actions[0].length"),
    ({"action": "request_all_pairs", "spacing": -1}, "actions[0].spacing"),
])
def test_check_script_resolves_names(action, where):
    cfg = load_config(SAMPLE)
    script = load_script({"actions": [dict(at=1, **action)]})
    with pytest.raises(ConfigError) as info:
        check_script(script, cfg, {"link:x"})
    assert info.value.path == where
