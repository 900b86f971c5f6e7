import platform
import re
import sys
from functools import partial
from importlib.metadata import PackageNotFoundError, requires, version
from typing import IO, Callable, Optional

import psutil
from threadpoolctl import threadpool_info


def machine_info() -> dict:
    """Collect the facts that make a timing measurement interpretable.

    Returns
    -------
    info : dict
        Platform, Python version, CPU name, physical/logical core counts,
        total RAM in GB and the BLAS thread pools numpy is linked against.
    """
    pools = [
        {
            "library": pool.get("internal_api", "unknown"),
            "threading_layer": pool.get("threading_layer", "unknown"),
            "num_threads": pool.get("num_threads"),
        }
        for pool in threadpool_info()
    ]
    return {
        "platform": platform.platform(),
        "python": sys.version.split()[0],
        "cpu": platform.processor() or platform.machine(),
        "physical_cores": psutil.cpu_count(False),
        "logical_cores": psutil.cpu_count(True),
        "ram_gb": round(psutil.virtual_memory().total / float(2**30), 1),
        "thread_pools": pools,
    }


def sys_info(fid: Optional[IO] = None, developer: bool = False):
    """Print the system information for debugging and benchmark provenance.

    Parameters
    ----------
    fid : file-like, default=None
        The file to write to, passed to :func:`print`.
        Can be None to use :data:`sys.stdout`.
    developer : bool, default=False
        If True, display information about optional dependencies.
    """
    ljust = 26
    out = partial(print, end="", file=fid)
    package = __package__.split(".")[0]
    info = machine_info()

    out("Platform:".ljust(ljust) + info["platform"] + "\n")
    out("Python:".ljust(ljust) + sys.version.replace("\n", " ") + "\n")
    out("Executable:".ljust(ljust) + sys.executable + "\n")
    out("CPU:".ljust(ljust) + info["cpu"] + "\n")
    out("Physical cores:".ljust(ljust) + str(info["physical_cores"]) + "\n")
    out("Logical cores:".ljust(ljust) + str(info["logical_cores"]) + "\n")
    out("RAM:".ljust(ljust) + f"{info['ram_gb']:0.1f} GB\n")
    out("SWAP:".ljust(ljust))
    out(f"{psutil.swap_memory().total / float(2 ** 30):0.1f} GB\n")
    for pool in info["thread_pools"]:
        out(
            "BLAS:".ljust(ljust)
            + f"{pool['library']} ({pool['threading_layer']}, "
            + f"{pool['num_threads']} threads)\n"
        )

    out("\nDependencies info\n")
    out(f"{package}:".ljust(ljust) + version(package) + "\n")
    _list_dependencies_info(out, ljust, _requirements(package))

    if developer:
        for extra in ("build", "doc", "test", "style"):
            names = _requirements(package, extra)
            if names:
                out(f"\nOptional '{extra}' info\n")
                _list_dependencies_info(out, ljust, names)


def _requirements(package: str, extra: Optional[str] = None) -> list[str]:
    """Distribution names required by ``package``, or by one of its extras."""
    names = []
    for req in requires(package) or []:
        marker = req.partition(";")[2]
        in_extra = re.search(r"""extra\s*==\s*["']([^"']+)["']""", marker)
        if (in_extra.group(1) if in_extra else None) == extra:
            names.append(re.match(r"[A-Za-z0-9_.\-]+", req.strip()).group(0))
    return names


def _list_dependencies_info(out: Callable, ljust: int, names: list[str]):
    """Print one ``name: version`` line per installed distribution."""
    for name in names:
        try:
            found = version(name)
        except PackageNotFoundError:
            found = "Not found."
        out(f"{name}:".ljust(ljust) + found + "\n")
