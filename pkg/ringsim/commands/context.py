import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Union

import structlog
from pydantic import BaseModel

from ringsim import __version__
from ringsim.models.results import RunManifest, Trace
from ringsim.services.scenario import ScenarioFile
from ringsim.utils.helpers import write_csv, write_json, write_trace_csv

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class CommandContext:
    """Inputs of one subcommand and the record of the files it wrote."""

    subcommand: str
    scenario_file: ScenarioFile
    output_dir: Path
    workers: int = 1
    files: List[str] = field(default_factory=list)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    _clock: float = field(default_factory=time.perf_counter)

    @property
    def scenario(self):
        return self.scenario_file.scenario

    def _track(self, path: Path) -> Path:
        self.files.append(path.name)
        logger.info("output written", subcommand=self.subcommand, path=str(path))
        return path

    def write_json(self, name: str, payload: Union[BaseModel, Mapping[str, Any]]) -> Path:
        return self._track(write_json(self.output_dir / name, payload))

    def write_csv(self, name: str, header: Sequence[str], columns: Sequence[Iterable[Any]]) -> Path:
        return self._track(write_csv(self.output_dir / name, header, columns))

    def write_trace(self, name: str, trace: Trace) -> Path:
        return self._track(write_trace_csv(self.output_dir / name, trace))

    def write_manifest(self) -> Path:
        """Written last; its presence marks a complete run."""
        path = self.scenario_file.path
        manifest = RunManifest(
            subcommand=self.subcommand,
            scenario_path=str(path) if path is not None else None,
            rng_seed_u64=self.scenario_file.seed,
            output_dir=str(self.output_dir),
            tool_version=__version__,
            started_at=self.started_at,
            wall_clock_s=time.perf_counter() - self._clock,
            files=list(self.files),
        )
        return write_json(self.output_dir / MANIFEST_NAME, manifest)
