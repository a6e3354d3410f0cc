"""Emulator for multi-domain key networks mixing QKD links and PQC channels.

Most users want `run_scenario` and `load_config`; the submodules expose the
pieces (label algebra, key stores, relays, border methods) for direct use.
"""

from .config import ConfigError, DeploymentConfig, Script, load_config, load_script
from .core import KeyEntry, KeyMaterial, KeyPackage, LinkType, NodeId
from .scenario import Deployment, Report, run_scenario
from .seclevel import SecurityExpr, SecurityLabel, its, mc, parallel, serial

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Deployment",
    "DeploymentConfig",
    "KeyEntry",
    "KeyMaterial",
    "KeyPackage",
    "LinkType",
    "NodeId",
    "Report",
    "Script",
    "SecurityExpr",
    "SecurityLabel",
    "its",
    "load_config",
    "load_script",
    "mc",
    "parallel",
    "run_scenario",
    "serial",
]
