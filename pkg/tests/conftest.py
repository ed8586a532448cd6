import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

import helpers
from agacci.notebook import parse_notebook
from agacci.rubric import load_rubric


@pytest.fixture
def fixture_notebook():
    return parse_notebook(helpers.fixture_notebook_bytes(), source_id="fixture.ipynb")


@pytest.fixture
def ml_rubric():
    return load_rubric(helpers.rubric_bytes())
