"""Deployment and script files.

A deployment file (YAML, or JSON, which YAML accepts) declares domains with
their nodes and intra-domain links, the controllers, and the border
agreements between domains.  A script file lists timed actions.  Every
validation error names the offending field as a dotted path, e.g.
``borders[2].paths.space.kem``.

Key names are documented in README.md; ``data/three_testbeds.yaml`` is a
complete example.
"""

from __future__ import annotations

import json
import os
import uuid
from dataclasses import dataclass, field
from typing import Any

import yaml

from . import crypto
from .core import MAX_KEY_LEN, MIN_KEY_LEN, LinkType, NodeId, PathId, ValidationError
from .netsim import ChannelSpec

LINK_NAMESPACE = uuid.UUID("5d7c1c1e-3f1a-4c55-9b7e-6a0e8f2d4b10")
DEFAULT_EPOCH = 1_700_000_000


class ConfigError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


def derived_link_id(name: str) -> uuid.UUID:
    return uuid.uuid5(LINK_NAMESPACE, name)


# --------------------------------------------------------------------------
# typed configuration


@dataclass(frozen=True)
class LinkConf:
    name: str
    link_id: uuid.UUID
    a: NodeId
    b: NodeId
    link_type: LinkType
    rate_bps: int
    key_len: int
    kem: str
    sig: str
    side_channels: tuple[str, ...]
    channel: ChannelSpec


@dataclass(frozen=True)
class DomainConf:
    name: str
    nodes: tuple[NodeId, ...]
    borders: tuple[NodeId, ...]
    links: tuple[LinkConf, ...]


@dataclass(frozen=True)
class ControllerConf:
    name: str
    domains: tuple[str, ...]


@dataclass(frozen=True)
class M4PathConf:
    path: PathId
    kem: str
    sig: str
    side_channels: tuple[str, ...]
    channel: ChannelSpec


@dataclass(frozen=True)
class BorderConf:
    """One border agreement.  `a` sends for methods 3 and 4."""

    name: str
    method: int
    a: NodeId
    b: NodeId
    link_id: uuid.UUID
    rate_bps: int
    key_len: int
    # methods 1 and 2
    links: tuple[LinkConf, ...] = ()
    # method 3
    mode: str = "a"
    suites: tuple[tuple[str, str], ...] = ()
    suite_side_channels: tuple[tuple[str, ...], ...] = ()
    channel: ChannelSpec | None = None
    # method 4
    paths: tuple[M4PathConf, ...] = ()
    block_size: int = 50
    ttl: float = 30.0
    psk: bytes = b""
    kdf: str = "xor"
    sessions: int = 1
    blocks: int | None = None

    @property
    def supplier_prefix(self) -> str:
        return f"m{self.method}:{self.name}"


@dataclass(frozen=True)
class DeploymentConfig:
    seed: int
    epoch: int
    key_len: int
    suites: tuple[str, ...]
    psks: dict[str, bytes]
    domains: tuple[DomainConf, ...]
    controllers: tuple[ControllerConf, ...]
    borders: tuple[BorderConf, ...]
    relay_channel: dict
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def nodes(self) -> list[NodeId]:
        return [n for d in self.domains for n in d.nodes]

    @property
    def links(self) -> list[LinkConf]:
        return [l for d in self.domains for l in d.links]

    def with_seed(self, seed: int) -> "DeploymentConfig":
        return DeploymentConfig(
            seed, self.epoch, self.key_len, self.suites, self.psks, self.domains,
            self.controllers, self.borders, self.relay_channel, self.raw,
        )


# --------------------------------------------------------------------------
# field readers


class _Fields:
    """Typed access to one mapping, with dotted paths in every error."""

    def __init__(self, data: Any, path: str) -> None:
        if not isinstance(data, dict):
            raise ConfigError(path, "must be a mapping")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, default: Any = ..., kind: type | tuple = object) -> Any:
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError(self.at(key), "is required")
            return default
        value = self.data[key]
        if kind is int and isinstance(value, bool):
            raise ConfigError(self.at(key), "must be an integer")
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if not isinstance(value, kind):
            name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise ConfigError(self.at(key), f"must be of type {name}")
        return value

    def sub(self, key: str, default: Any = ...) -> "_Fields":
        return _Fields(self.get(key, {} if default is ... else default, dict), self.at(key))

    def items(self, key: str, default: Any = ...) -> list[tuple[Any, str]]:
        seq = self.get(key, default, list)
        return [(v, f"{self.at(key)}[{i}]") for i, v in enumerate(seq)]

    def finish(self) -> None:
        extra = sorted(set(map(str, self.data)) - self.used)
        if extra:
            raise ConfigError(self.at(extra[0]), "unknown field")


def _positive(path: str, value):
    if value is None or value <= 0:
        raise ConfigError(path, "must be positive")
    return value


def _key_len(path: str, value: int) -> int:
    if not MIN_KEY_LEN <= value <= MAX_KEY_LEN:
        raise ConfigError(path, f"must lie in [{MIN_KEY_LEN}, {MAX_KEY_LEN}]")
    return value


def _tags(path: str, value) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(t, str) and t for t in value):
        raise ConfigError(path, "must be a list of non-empty strings")
    return tuple(value)


def _channel(f: _Fields, key: str, channel_id: str, default: dict) -> ChannelSpec:
    raw = dict(default)
    raw.update(f.get(key, {}, dict))
    c = _Fields(raw, f.at(key))
    try:
        spec = ChannelSpec(
            channel_id,
            latency_ms=c.get("latency_ms", 0.0, float),
            jitter_ms=c.get("jitter_ms", 0.0, float),
            bandwidth_bps=c.get("bandwidth_bps", None, (int, float, type(None))),
            loss_before_retry=c.get("loss_before_retry", 0.0, float),
            retry_timeout_ms=c.get("retry_timeout_ms", None, (int, float, type(None))),
        )
    except ValueError as exc:
        raise ConfigError(f.at(key), str(exc)) from None
    c.finish()
    return spec


class _Parser:
    def __init__(self, raw: dict) -> None:
        self.root = _Fields(raw, "")
        self.nodes: dict[NodeId, str] = {}  # node -> path where declared
        self.suites: set[str] = set()
        self.channel_ids: set[str] = set()
        self.link_ids: dict[uuid.UUID, str] = {}
        self.default_channel: dict = {}

    def node(self, path: str, text: Any, domain: str | None = None, *, declare: bool = False) -> NodeId:
        if not isinstance(text, str):
            raise ConfigError(path, "must be a node name")
        try:
            node = NodeId.parse(text) if "/" in text or domain is None else NodeId(domain, text)
        except ValidationError as exc:
            raise ConfigError(path, str(exc)) from None
        if not declare and node not in self.nodes:
            raise ConfigError(path, f"unknown node {node}")
        return node

    def suite(self, path: str, name: Any, kind: str) -> str:
        if not isinstance(name, str):
            raise ConfigError(path, "must be a suite name")
        known = crypto.kem_suites() if kind == "kem" else crypto.sig_suites()
        if name not in known:
            raise ConfigError(path, f"{kind.upper()} suite {name!r} is not registered")
        if name not in self.suites:
            raise ConfigError(path, f"suite {name!r} is not listed under 'suites'")
        return name

    def channel_id(self, path: str, cid: str) -> str:
        if cid in self.channel_ids:
            raise ConfigError(path, f"channel name {cid!r} used twice")
        self.channel_ids.add(cid)
        return cid

    def link_id(self, path: str, f: _Fields, name: str) -> uuid.UUID:
        text = f.get("id", None, (str, type(None)))
        try:
            lid = derived_link_id(name) if text is None else uuid.UUID(text)
        except ValueError:
            raise ConfigError(f.at("id"), f"{text!r} is not a UUID") from None
        if lid in self.link_ids:
            raise ConfigError(f.at("id"), f"link id {lid} already used at {self.link_ids[lid]}")
        self.link_ids[lid] = path
        return lid

    def link(self, raw, path: str, domain: str | None, key_len: int, *, a=None, b=None,
             allowed=(LinkType.QKD, LinkType.PQC)) -> LinkConf:
        f = _Fields(raw, path)
        name = f.get("name", None, (str, type(None)))
        a = self.node(f.at("a"), f.get("a"), domain) if a is None or "a" in f.data else a
        b = self.node(f.at("b"), f.get("b"), domain) if b is None or "b" in f.data else b
        if a == b:
            raise ConfigError(f.at("b"), "a link needs two distinct endpoints")
        if domain is not None and (a.domain != domain or b.domain != domain):
            raise ConfigError(path, f"intra-domain link leaves domain {domain}")
        name = name or f"{a}~{b}"
        tname = f.get("type", "QKD", str).upper()
        if tname not in LinkType.__members__ or LinkType[tname] not in allowed:
            raise ConfigError(f.at("type"), f"must be one of {[t.name for t in allowed]}")
        link_type = LinkType[tname]
        rate = _positive(f.at("rate_bps"), f.get("rate_bps", 1024, int))
        klen = _key_len(f.at("key_len"), f.get("key_len", key_len, int))
        if rate * 3600 < 8 * klen:
            raise ConfigError(f.at("rate_bps"), "must yield at least one key per hour")
        default_kem = sorted(s for s in self.suites if s in crypto.kem_suites())
        default_sig = sorted(s for s in self.suites if s in crypto.sig_suites())
        kem = self.suite(f.at("kem"), f.get("kem", default_kem[0] if default_kem else "kem-a"), "kem")
        sig = self.suite(f.at("sig"), f.get("sig", default_sig[0] if default_sig else "sig-a"), "sig")
        sc = _tags(f.at("side_channels"), f.get("side_channels", []))
        lid = self.link_id(path, f, name)
        cid = self.channel_id(f.at("name"), name)
        chan = _channel(f, "channel", cid, self.default_channel)
        f.finish()
        return LinkConf(name, lid, a, b, link_type, rate, klen, kem, sig, sc, chan)

    # ------------------------------------------------------------------

    def parse(self) -> DeploymentConfig:
        r = self.root
        seed = r.get("seed", 0, int)
        epoch = r.get("epoch", DEFAULT_EPOCH, int)
        key_len = _key_len("key_len", r.get("key_len", 32, int))
        suites = []
        for name, path in r.items("suites", ["kem-a", "kem-b", "sig-a", "sig-b"]):
            if not isinstance(name, str):
                raise ConfigError(path, "must be a suite name")
            if name not in crypto.kem_suites() + crypto.sig_suites():
                if name in ("kem-x25519", "sig-ed25519"):
                    try:
                        crypto.register_classical_suites()
                    except ImportError:
                        raise ConfigError(path, f"{name} needs the 'cryptography' package") from None
                else:
                    raise ConfigError(path, f"unknown suite {name!r}")
            suites.append(name)
        self.suites = set(suites)
        psks = {}
        for name, value in r.get("psks", {}, dict).items():
            path = f"psks.{name}"
            try:
                psks[str(name)] = crypto.Psk(bytes.fromhex(str(value))).data
            except ValueError as exc:
                raise ConfigError(path, f"must be hex, at most {crypto.MAX_PSK_LEN} octets ({exc})") from None
        self.default_channel = r.get("default_channel", {"latency_ms": 1.0}, dict)
        relay_channel = r.get("relay_channel", {"latency_ms": 1.0}, dict)
        _channel(_Fields({"relay": relay_channel}, ""), "relay", "relay-check", {})

        domains_f = r.sub("domains")
        if not domains_f.data:
            raise ConfigError("domains", "at least one domain is required")
        # declare all nodes first so links and borders can refer to any of them
        declared: dict[str, tuple[list[NodeId], _Fields]] = {}
        for dname in domains_f.data:
            df = domains_f.sub(str(dname))
            try:
                NodeId(str(dname), "x")
            except ValidationError as exc:
                raise ConfigError(df.path, str(exc)) from None
            nodes = []
            for text, path in df.items("nodes"):
                node = self.node(path, text, str(dname), declare=True)
                if node.domain != dname:
                    raise ConfigError(path, f"node {node} declared outside its domain")
                if node in self.nodes:
                    raise ConfigError(path, f"node {node} declared twice")
                self.nodes[node] = path
                nodes.append(node)
            if not nodes:
                raise ConfigError(df.at("nodes"), "must not be empty")
            declared[str(dname)] = (nodes, df)
        domains = []
        for dname, (nodes, df) in declared.items():
            borders = tuple(self.node(p, t, dname) for t, p in df.items("borders", []))
            for bn, (t, p) in zip(borders, df.items("borders", [])):
                if bn.domain != dname:
                    raise ConfigError(p, "border node must belong to the domain")
            links = tuple(self.link(raw, p, dname, key_len) for raw, p in df.items("links", []))
            df.finish()
            domains.append(DomainConf(dname, tuple(nodes), borders, links))

        controllers = []
        covered: dict[str, str] = {}
        for raw, path in r.items("controllers", []):
            cf = _Fields(raw, path)
            name = cf.get("name", None, str)
            doms = []
            for dn, p in cf.items("domains"):
                if dn not in declared:
                    raise ConfigError(p, f"unknown domain {dn!r}")
                if dn in covered:
                    raise ConfigError(p, f"domain {dn!r} already managed by {covered[dn]}")
                covered[dn] = name
                doms.append(dn)
            cf.finish()
            controllers.append(ControllerConf(name, tuple(doms)))
        for dn in declared:
            if dn not in covered:
                controllers.append(ControllerConf(dn, (dn,)))
        names = [c.name for c in controllers]
        if len(set(names)) != len(names):
            raise ConfigError("controllers", "controller names must be unique")

        borders = [self.border(raw, p, key_len, psks, domains) for raw, p in r.items("borders", [])]
        bnames = [b.name for b in borders]
        if len(set(bnames)) != len(bnames):
            raise ConfigError("borders", "border names must be unique")
        r.finish()
        return DeploymentConfig(
            seed, epoch, key_len, tuple(suites), psks, tuple(domains), tuple(controllers),
            tuple(borders), relay_channel, self.root.data,
        )

    def border(self, raw, path: str, key_len: int, psks: dict, domains: list[DomainConf]) -> BorderConf:
        f = _Fields(raw, path)
        name = f.get("name", None, str)
        method = f.get("method", None, int)
        if method not in (1, 2, 3, 4):
            raise ConfigError(f.at("method"), "must be 1, 2, 3 or 4")
        a_key, b_key = ("a", "b") if method in (1, 2) else ("sender", "receiver")
        a = self.node(f.at(a_key), f.get(a_key))
        b = self.node(f.at(b_key), f.get(b_key))
        if a.domain == b.domain:
            raise ConfigError(f.at(b_key), "border agreements join two different domains")
        for n, key in ((a, a_key), (b, b_key)):
            dom = next(d for d in domains if d.name == n.domain)
            if n not in dom.borders:
                raise ConfigError(f.at(key), f"{n} is not listed as a border node of {n.domain}")
        klen = _key_len(f.at("key_len"), f.get("key_len", key_len, int))
        lid = self.link_id(path, f, f"border:{name}")
        common = dict(name=name, method=method, a=a, b=b, link_id=lid, key_len=klen)

        if method in (1, 2):
            want = LinkType.QKD if method == 1 else LinkType.PQC
            links = []
            for i, (lraw, lp) in enumerate(f.items("links")):
                if isinstance(lraw, dict):
                    lraw = {"name": f"{name}#{i}", "type": want.name, **lraw}
                links.append(self.link(lraw, lp, None, klen, a=a, b=b, allowed=(want,)))
            if len(links) != 2:
                raise ConfigError(f.at("links"), f"method {method} bridges exactly two links")
            for lc, (_, lp) in zip(links, f.items("links")):
                if {lc.a, lc.b} != {a, b}:
                    raise ConfigError(lp, f"link must join {a} and {b}")
                if lc.key_len != klen:
                    raise ConfigError(f"{lp}.key_len", "must match the border key length")
            if method == 2 and (links[0].kem == links[1].kem or links[0].sig == links[1].sig):
                raise ConfigError(f.at("links"), "the two PQC links must use different KEM and SIG suites")
            f.finish()
            return BorderConf(**common, rate_bps=min(l.rate_bps for l in links), links=tuple(links))

        rate = _positive(f.at("rate_bps"), f.get("rate_bps", 256, int))
        if method == 3:
            mode = f.get("mode", "a", str)
            if mode not in ("a", "b"):
                raise ConfigError(f.at("mode"), "must be 'a' or 'b'")
            suites, tags = [], []
            for sraw, sp in f.items("suites"):
                sf = _Fields(sraw, sp)
                suites.append((self.suite(sf.at("kem"), sf.get("kem"), "kem"),
                               self.suite(sf.at("sig"), sf.get("sig"), "sig")))
                tags.append(_tags(sf.at("side_channels"), sf.get("side_channels", [])))
                sf.finish()
            if len(suites) != 2:
                raise ConfigError(f.at("suites"), "method 3 uses exactly two suite pairs")
            if suites[0][0] == suites[1][0] or suites[0][1] == suites[1][1]:
                raise ConfigError(f.at("suites"), "the two suite pairs must differ in KEM and SIG")
            chan = _channel(f, "channel", self.channel_id(f.at("name"), name), self.default_channel)
            f.finish()
            return BorderConf(**common, rate_bps=rate, mode=mode, suites=tuple(suites),
                              suite_side_channels=tuple(tags), channel=chan)

        pf = f.sub("paths")
        paths = []
        for key, pid in (("space", PathId.SPACE), ("ground", PathId.GROUND)):
            p = pf.sub(key)
            if not p.data:
                raise ConfigError(p.path, "is required")
            kem = self.suite(p.at("kem"), p.get("kem"), "kem")
            sig = self.suite(p.at("sig"), p.get("sig"), "sig")
            tags = _tags(p.at("side_channels"), p.get("side_channels", []))
            chan = _channel(p, "channel", self.channel_id(p.path, f"{name}/{key}"), self.default_channel)
            p.finish()
            paths.append(M4PathConf(pid, kem, sig, tags, chan))
        pf.finish()
        if paths[0].kem == paths[1].kem or paths[0].sig == paths[1].sig:
            raise ConfigError(pf.path, "space and ground must use different KEM and SIG suites")
        block = f.get("block_size", 50, int)
        if not 1 <= block <= 100:
            raise ConfigError(f.at("block_size"), "must lie in [1, 100]")
        ttl = _positive(f.at("ttl"), f.get("ttl", 30.0, float))
        psk_name = f.get("psk", None, (str, type(None)))
        if psk_name is not None and psk_name not in psks:
            raise ConfigError(f.at("psk"), f"unknown PSK {psk_name!r}")
        kdf = f.get("kdf", "xor", str)
        if kdf not in crypto.KDFS:
            raise ConfigError(f.at("kdf"), f"must be one of {sorted(crypto.KDFS)}")
        sessions = _positive(f.at("sessions"), f.get("sessions", 1, int))
        blocks = f.get("blocks", None, (int, type(None)))
        if blocks is not None and blocks < 0:
            raise ConfigError(f.at("blocks"), "must be non-negative")
        f.finish()
        return BorderConf(
            **common, rate_bps=rate, paths=tuple(paths), block_size=block, ttl=ttl,
            psk=psks.get(psk_name, b"") if psk_name else b"", kdf=kdf, sessions=sessions, blocks=blocks,
        )


def parse_config(raw: Any) -> DeploymentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "deployment file must contain a mapping")
    return _Parser(raw).parse()


def _load(source: str | os.PathLike | dict) -> Any:
    if isinstance(source, dict):
        return source
    text = str(source)
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
        if str(source).endswith(".json"):
            try:
                return json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError("", f"invalid JSON: {exc}") from None
    elif isinstance(source, os.PathLike) or ("\n" not in text and text.endswith((".yaml", ".yml", ".json"))):
        raise ConfigError("", f"no such file: {text}")
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None


def load_config(source: str | os.PathLike | dict) -> DeploymentConfig:
    """Parse a deployment from a path, a YAML/JSON string or a mapping."""
    return parse_config(_load(source))


# --------------------------------------------------------------------------
# scripts

ACTIONS = {
    "request_e2e_key": {"source", "destination", "length", "app", "deadline"},
    "request_all_pairs": {"spacing", "length", "deadline"},
    "kill": {"channel"},
    "heal": {"channel"},
    "kill_node": {"node"},
    "heal_node": {"node"},
    "drain": {"node", "peer", "supplier", "number"},
}


@dataclass(frozen=True)
class Action:
    at: float
    kind: str
    args: dict


@dataclass(frozen=True)
class Script:
    duration: float = 60.0
    settle: float = 60.0
    actions: tuple[Action, ...] = ()


def parse_script(raw: Any) -> Script:
    if raw is None:
        return Script()
    f = _Fields(raw, "")
    duration = _positive("duration", f.get("duration", 60.0, float))
    settle = f.get("settle", 60.0, float)
    if settle < 0:
        raise ConfigError("settle", "must be non-negative")
    actions = []
    for araw, path in f.items("actions", []):
        af = _Fields(araw, path)
        at = af.get("at", None, float)
        if not 0 <= at <= duration:
            raise ConfigError(af.at("at"), f"must lie in [0, {duration}]")
        kind = af.get("action", None, str)
        if kind not in ACTIONS:
            raise ConfigError(af.at("action"), f"must be one of {sorted(ACTIONS)}")
        args = {k: v for k, v in araw.items() if k not in ("at", "action")}
        extra = sorted(set(args) - ACTIONS[kind])
        if extra:
            raise ConfigError(af.at(extra[0]), f"not an argument of {kind}")
        actions.append(Action(at, kind, args))
    f.finish()
    actions.sort(key=lambda a: a.at)  # stable: equal times keep file order
    return Script(duration, settle, tuple(actions))


def load_script(source: str | os.PathLike | dict | None) -> Script:
    return parse_script(None if source is None else _load(source))


def check_script(script: Script, config: DeploymentConfig, channel_ids: set[str]) -> None:
    """Resolve names used by actions against a deployment."""
    nodes = set(config.nodes)

    def node(path: str, text) -> NodeId:
        try:
            n = NodeId.parse(str(text))
        except ValidationError as exc:
            raise ConfigError(path, str(exc)) from None
        if n not in nodes:
            raise ConfigError(path, f"unknown node {n}")
        return n

    for i, act in enumerate(script.actions):
        path = f"actions[{i}]"
        a = act.args
        if act.kind == "request_e2e_key":
            if node(f"{path}.source", a.get("source")) == node(f"{path}.destination", a.get("destination")):
                raise ConfigError(f"{path}.destination", "must differ from source")
        elif act.kind in ("kill", "heal"):
            if a.get("channel") not in channel_ids:
                raise ConfigError(f"{path}.channel", f"unknown channel {a.get('channel')!r}")
        elif act.kind in ("kill_node", "heal_node"):
            node(f"{path}.node", a.get("node"))
        elif act.kind == "drain":
            node(f"{path}.node", a.get("node"))
            node(f"{path}.peer", a.get("peer"))
            if not isinstance(a.get("supplier"), str):
                raise ConfigError(f"{path}.supplier", "is required")
        for key in ("length", "number"):
            if key in a and (not isinstance(a[key], int) or isinstance(a[key], bool) or a[key] <= 0):
                raise ConfigError(f"{path}.{key}", "must be a positive integer")
        for key in ("deadline", "spacing"):
            if key in a and (not isinstance(a[key], (int, float)) or a[key] < 0):
                raise ConfigError(f"{path}.{key}", "must be a non-negative number")
