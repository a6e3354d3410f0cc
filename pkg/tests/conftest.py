import uuid

import pytest
from hypothesis import strategies as st

from qkdnet.core import (
    CipherBlock,
    KeyEntry,
    KeyMaterial,
    KeyPackage,
    LinkDescriptor,
    LinkType,
    NodeId,
    PackageMeta,
    PathId,
    PathSpec,
    SigBlock,
    Validity,
)
from qkdnet.rng import Drbg
from qkdnet.seclevel import Base, SecurityLabel, normalize

ident = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_.", min_size=1, max_size=12)
node_ids = st.builds(NodeId, ident, ident)
uuids = st.binary(min_size=16, max_size=16).map(lambda b: uuid.UUID(bytes=b))
materials = st.binary(min_size=16, max_size=96).map(KeyMaterial)
tags = st.sampled_from(["s1", "s2", "s3", "s4", "det", "mu"])
labels = st.builds(SecurityLabel, st.sampled_from(list(Base)), st.frozensets(tags, max_size=4))
exprs = st.lists(labels, min_size=1, max_size=4).map(normalize)


@st.composite
def validities(draw):
    start = draw(st.integers(min_value=0, max_value=2**40))
    return Validity(start, start + draw(st.integers(min_value=1, max_value=10**6)))


key_entries = st.builds(
    KeyEntry,
    key_id=uuids,
    key=materials,
    peer=node_ids,
    supplier_id=ident,
    validity=validities(),
    label=exprs,
)


@st.composite
def link_descriptors(draw):
    a, b = draw(st.lists(node_ids, min_size=2, max_size=2, unique=True))
    key_len = draw(st.integers(min_value=16, max_value=128))
    rate = draw(st.integers(min_value=8 * key_len, max_value=10**6))
    return LinkDescriptor(draw(uuids), a, b, draw(st.sampled_from(list(LinkType))), rate, key_len)


@st.composite
def path_specs(draw):
    hops = draw(st.lists(node_ids, min_size=2, max_size=6, unique=True))
    links = draw(st.lists(uuids, min_size=len(hops) - 1, max_size=len(hops) - 1))
    crossings = draw(st.frozensets(st.integers(min_value=0, max_value=len(hops) - 2)))
    return PathSpec(tuple(hops), tuple(links), crossings)


@st.composite
def key_packages(draw):
    blocks = draw(
        st.lists(st.builds(CipherBlock, ident, st.binary(max_size=64), st.binary(max_size=64)), min_size=1, max_size=3)
    )
    sigs = draw(st.lists(st.builds(SigBlock, ident, st.binary(max_size=64)), max_size=3))
    meta = PackageMeta(draw(node_ids), draw(validities()), draw(st.sampled_from(list(PathId))))
    return KeyPackage(draw(uuids), tuple(blocks), meta, tuple(sigs))


@pytest.fixture
def rng():
    return Drbg(1234)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        _criteria[props["criterion"]] = (outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, title, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n} {outcome}: {title}" + (f" ({detail})" if detail else ""))
