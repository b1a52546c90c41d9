"""Artifact layout under one --workdir root."""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from src.utils.errors import UsageError

TEST_PREFIX = "mix"
TRAIN_PREFIX = "train"


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text())


def to_jsonable(value: Any) -> Any:
    """numpy scalars/arrays to plain Python for json.dumps."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


class Workspace:
    """corpus/, mix/, models/, graphs/, heads/, out/ and reports/ under one root."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def speakers_path(self) -> Path:
        return self.corpus_dir / "speakers.json"

    @property
    def mix_dir(self) -> Path:
        return self.root / "mix"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def checkpoints_dir(self) -> Path:
        return self.models_dir / "checkpoints"

    @property
    def encoder_path(self) -> Path:
        return self.models_dir / "encoder.cdm"

    @property
    def finetuned_encoder_path(self) -> Path:
        return self.models_dir / "encoder_ft.cdm"

    @property
    def loss_trace_path(self) -> Path:
        return self.models_dir / "loss_trace.csv"

    @property
    def graphs_dir(self) -> Path:
        return self.root / "graphs"

    @property
    def heads_dir(self) -> Path:
        return self.root / "heads"

    @property
    def out_dir(self) -> Path:
        return self.root / "out"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    def mixture_dir(self, mix_id: str) -> Path:
        return self.mix_dir / mix_id

    def graph_path(self, mix_id: str) -> Path:
        return self.graphs_dir / f"{mix_id}.cdg"

    def graph_report_path(self, mix_id: str) -> Path:
        return self.graphs_dir / f"{mix_id}.json"

    def embeddings_path(self, mix_id: str) -> Path:
        return self.graphs_dir / f"{mix_id}.npy"

    def head_result_path(self, mix_id: str) -> Path:
        return self.heads_dir / f"{mix_id}.json"

    def head_params_path(self, mix_id: str) -> Path:
        return self.heads_dir / f"{mix_id}.cdm"

    def estimates_dir(self, mix_id: str) -> Path:
        return self.out_dir / mix_id

    def inference_encoder_path(self) -> Path:
        """Fine-tuned encoder when present, else the pretrained one."""
        if self.finetuned_encoder_path.exists():
            return self.finetuned_encoder_path
        return self.encoder_path

    def mixture_ids(self, prefix: str = TEST_PREFIX) -> List[str]:
        if not self.mix_dir.exists():
            return []
        return sorted(
            path.name for path in self.mix_dir.iterdir()
            if path.is_dir() and path.name.startswith(prefix) and (path / "meta.json").exists()
        )

    def require(self, path: Path, stage: str, hint: Optional[str] = None) -> Path:
        if not path.exists():
            message = f"{stage}: missing input {path}"
            if hint:
                message += f" (run `{hint}` first)"
            raise UsageError(message, {"stage": stage, "path": str(path)})
        return path

    def require_mixtures(self, stage: str, prefix: str = TEST_PREFIX) -> List[str]:
        ids = self.mixture_ids(prefix)
        if not ids:
            raise UsageError(f"{stage}: no mixtures under {self.mix_dir} (run `synth` first)", {"stage": stage})
        return ids

    def estimate_paths(self, mix_id: str) -> List[Path]:
        directory = self.estimates_dir(mix_id)
        paths = sorted(directory.glob("est*.wav"), key=lambda p: int(p.stem[3:]))
        return paths
