import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def demo_dir() -> Path:
    import rarefx

    return Path(rarefx.__file__).parent / "assets" / "demo"
