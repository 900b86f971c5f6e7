import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("GLYPHFORGE_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set GLYPHFORGE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
