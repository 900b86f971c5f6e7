import argparse
import json

from .. import machine_info, sys_info


def run():
    """Run sys_info() command."""
    parser = argparse.ArgumentParser(
        prog=f"{__package__.split('.')[0]}-sys_info",
        description="Print the system information used as benchmark provenance.",
    )
    parser.add_argument(
        "--developer",
        help="display information for optional dependencies",
        action="store_true",
    )
    parser.add_argument(
        "--json",
        help="print the machine facts as JSON instead",
        action="store_true",
    )
    args = parser.parse_args()

    if args.json:
        print(json.dumps(machine_info(), indent=2))
    else:
        sys_info(developer=args.developer)
