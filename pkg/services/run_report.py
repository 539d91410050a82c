"""
Run Report

Collects what a run did: effective configuration, per-frame timings,
warnings and summary metrics. Written next to the output frames as
run_report.json plus frame_timings.csv.
"""

import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from utils.logging_config import log_frame_table, setup_logger

logger = setup_logger(__name__)


REPORT_NAME = "run_report.json"
TIMINGS_NAME = "frame_timings.csv"

FLOAT_CAVEAT = (
    "Outputs are bit-identical across runs on the same platform and numpy/scipy build; "
    "different BLAS backends or CPU architectures may differ in the last float64 bits."
)


@dataclass
class RunReport:
    """Mutable report owned by one pipeline run."""

    config: Dict[str, Any] = field(default_factory=dict)
    timings: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    info: Dict[str, Any] = field(default_factory=dict)

    def add_timing(self, frame_index: int, stage: str, duration_ms: float) -> None:
        self.timings.append({'frame_index': frame_index, 'stage': stage, 'duration_ms': duration_ms})

    def add_warning(self, message: str) -> None:
        self.warnings.append(message)

    def set_metric(self, name: str, value: Optional[float]) -> None:
        self.metrics[name] = None if value is None else float(value)

    def timings_frame(self) -> pd.DataFrame:
        """Timings as a DataFrame with columns frame_index, stage, duration_ms."""
        df = pd.DataFrame(self.timings, columns=['frame_index', 'stage', 'duration_ms'])
        return df.sort_values(['stage', 'frame_index'], kind='stable').reset_index(drop=True)

    def stage_summary(self) -> Dict[str, Dict[str, float]]:
        """Total and mean milliseconds per stage."""
        df = self.timings_frame()
        if df.empty:
            return {}
        grouped = df.groupby('stage')['duration_ms'].agg(['sum', 'mean', 'max'])
        return {
            stage: {'total_ms': float(row['sum']), 'mean_ms': float(row['mean']), 'max_ms': float(row['max'])}
            for stage, row in grouped.iterrows()
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            'config': self.config,
            'info': self.info,
            'metrics': self.metrics,
            'warnings': self.warnings,
            'stage_summary': self.stage_summary(),
            'platform': {
                'python': platform.python_version(),
                'machine': platform.machine(),
                'numpy': np.__version__,
                'note': FLOAT_CAVEAT,
            },
        }

    def write(self, directory) -> Path:
        """
        Write run_report.json and frame_timings.csv into directory.

        Returns:
            Path to run_report.json
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)

        df = self.timings_frame()
        df.to_csv(directory / TIMINGS_NAME, index=False)
        log_frame_table(logger, df, "frame timings")

        report_path = directory / REPORT_NAME
        report_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str), encoding='utf-8')
        logger.info(f"Run report written to {report_path}")
        return report_path
