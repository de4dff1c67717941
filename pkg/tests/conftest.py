"""Common test configuration for all tests.

This file is automatically loaded by pytest and also sets up
the Python path for regular test execution.
"""

import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

# Add src directory to Python path so tests can import modules
project_root = Path(__file__).parent.parent
src_path = project_root / "src"
sys.path.insert(0, str(src_path))

settings.register_profile(
    "rankstack",
    max_examples=50,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("rankstack")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs taking minutes")
