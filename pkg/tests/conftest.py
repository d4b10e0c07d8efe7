import sys
from pathlib import Path

import pytest

from glottisnet import tensor as T

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def nan_sentinel():
    """Run the whole suite with the debug NaN/Inf sentinel armed."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)
