from ._version import __version__  # noqa: F401
from .utils._config import machine_info, sys_info  # noqa: F401
from .utils._logs import set_log_level  # noqa: F401
