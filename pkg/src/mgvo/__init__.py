"""A desk-scale virtual organisation for federated mammography archives.

Autonomous site nodes hold anonymized imaging data and answer a small query
language; a registry tracks membership; queries decompose across sites and
merge into one XML result set; algorithms execute where the data lives.
"""

from .errors import MgError
from .mgql import parse_query, print_query
from .model import GlobalFileId, format_gfid, parse_gfid, pseudonymize

__version__ = "0.1.0"

__all__ = [
    "MgError",
    "GlobalFileId",
    "format_gfid",
    "parse_gfid",
    "parse_query",
    "print_query",
    "pseudonymize",
    "__version__",
]
