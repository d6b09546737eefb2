"""Grid services: wire protocol, auth, the registry, site nodes, TCP."""

from .auth import SystemClock, issue_token, validate_token
from .node import Node
from .registry import Registry, SiteDescriptor
from .tcp import Server, TcpTransport

__all__ = [
    "Node",
    "Registry",
    "Server",
    "SiteDescriptor",
    "SystemClock",
    "TcpTransport",
    "issue_token",
    "validate_token",
]
