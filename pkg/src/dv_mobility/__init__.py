import logging
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("dv-mobility")
except PackageNotFoundError:
    # package is not installed
    __version__ = "unknown"

FORMAT_VERSION = 1
"""Version of the JSON formats written by the package (reports, models)."""

dv_logger = logging.getLogger("dv_mobility")
# Modules use ``logging.getLogger(__name__)`` which makes them children of
# this logger, so handlers configured here apply to the whole package.
dv_logger.addHandler(logging.NullHandler())
