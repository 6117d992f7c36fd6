import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def report_line(capsys):
    """Print a line to the terminal even when pytest captures output."""
    def emit(text: str) -> None:
        with capsys.disabled():
            print(text)
    return emit
