"""Full unsupervised run on 2- and 3-speaker mixtures against the separation floor.

Takes several minutes; set CONDEEPMOD_ACCEPTANCE=1 to include it.
"""
import json
import os
import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from src import main as cli

ACCEPTANCE_CONFIG = Path(__file__).parent / "config" / "acceptance_pipeline.json"

pytestmark = pytest.mark.skipif(
    not os.getenv("CONDEEPMOD_ACCEPTANCE"), reason="set CONDEEPMOD_ACCEPTANCE=1 to run the full pipeline"
)

SI_SNRI_FLOOR = 5.0
PURITY_FLOOR = 0.85
SPEAKER_COUNT_MARGIN = 2.0
# Allowed gap to oracle frame masks when those cannot reach the floor themselves.
ORACLE_GAP = 1.0


@pytest.fixture(scope="module")
def evaluated(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("acceptance")
    assert cli.main(["--workdir", str(workdir), "--config", str(ACCEPTANCE_CONFIG), "pipeline"]) == cli.EXIT_OK
    reports = [json.loads(path.read_text()) for path in sorted((workdir / "reports" / "eval").glob("mix*.json"))]
    return pd.DataFrame(reports)


def test_every_mixture_is_scored(evaluated):
    assert len(evaluated) == 40
    assert evaluated["n_sources"].value_counts().to_dict() == {2: 20, 3: 20}


def test_two_speaker_floor(evaluated):
    two = evaluated[evaluated["n_sources"] == 2]
    assert two["purity"].mean() >= PURITY_FLOOR
    floor = min(SI_SNRI_FLOOR, two["oracle_si_snri"].mean() - ORACLE_GAP)
    assert two["si_snri"].mean() >= floor


def test_three_speakers_stay_close(evaluated):
    means = evaluated.groupby("n_sources")["si_snri"].mean()
    assert abs(means[3] - means[2]) <= SPEAKER_COUNT_MARGIN
