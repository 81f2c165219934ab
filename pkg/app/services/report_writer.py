"""Verdict and series persistence"""
import json
from pathlib import Path
from typing import List, Optional, Union

import pandas as pd

from app.core.exceptions import ConfigMismatchError
from app.core.logging import get_logger
from app.models.schemas import Verdict
from app.services.stats_service import stats_service

logger = get_logger(__name__)

REPORTS_SUBDIR = "reports"
SERIES_SUBDIR = "series"


class ReportWriter:
    """
    Writes verdicts as one JSON file per tag plus an aggregated summary.csv.

    Layout under the output directory:
        reports/<tag>.json
        reports/summary.csv
        series/<name>.csv
    """

    def __init__(self, output_dir: Union[str, Path], config_hash: str):
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash
        self.report_dir = self.output_dir / REPORTS_SUBDIR
        self.series_dir = self.output_dir / SERIES_SUBDIR
        self.report_dir.mkdir(parents=True, exist_ok=True)
        self.series_dir.mkdir(parents=True, exist_ok=True)
        self.verdicts: List[Verdict] = []

    def write(self, verdict: Verdict) -> Path:
        """
        Persist one verdict.

        Raises:
            ConfigMismatchError: Verdict produced under another configuration
        """
        if verdict.config_hash != self.config_hash:
            raise ConfigMismatchError(self.config_hash, verdict.config_hash)
        path = self.report_dir / f"{verdict.tag}.json"
        with open(path, "w", encoding="utf-8") as f:
            f.write(verdict.model_dump_json(indent=2))
        self.verdicts.append(verdict)
        stats_service.record_verdict(verdict)
        return path

    def write_series(self, name: str, frame: pd.DataFrame) -> Path:
        """Plot-ready CSV; a config_hash column is added to every row"""
        path = self.series_dir / f"{name}.csv"
        frame = frame.copy()
        frame["config_hash"] = self.config_hash
        frame.to_csv(path, index=False)
        logger.debug(f"Series {name} written to {path}")
        return path

    def write_summary(self) -> Path:
        """summary.csv over every verdict present in the report directory"""
        verdicts = load_verdicts(self.report_dir)
        frame = summary_frame(verdicts)
        path = self.report_dir / "summary.csv"
        frame.to_csv(path, index=False)
        logger.info(f"Summary of {len(verdicts)} verdicts written to {path}")
        return path

    @property
    def failed(self) -> bool:
        return any(v.status.value == "FAIL" for v in self.verdicts)


def summary_frame(verdicts: List[Verdict]) -> pd.DataFrame:
    return pd.DataFrame.from_records(
        [
            {"tag": v.tag, "suite": v.suite, "status": v.status.value,
             "config_hash": v.config_hash, "timestamp": v.timestamp, "detail": v.detail or ""}
            for v in verdicts
        ],
        columns=["tag", "suite", "status", "config_hash", "timestamp", "detail"],
    )


def load_verdict(path: Union[str, Path]) -> Verdict:
    with open(path, encoding="utf-8") as f:
        return Verdict.model_validate(json.load(f))


def load_verdicts(report_dir: Union[str, Path]) -> List[Verdict]:
    """Every readable verdict JSON in a directory, sorted by tag; unreadable files are logged and skipped"""
    report_dir = Path(report_dir)
    if not report_dir.is_dir():
        return []
    verdicts = []
    for path in sorted(report_dir.glob("*.json")):
        try:
            verdicts.append(load_verdict(path))
        except Exception as e:
            logger.error(f"Skipping unreadable report {path}: {str(e)}")
    return verdicts


def find_verdict(report_dir: Union[str, Path], tag: str) -> Optional[Verdict]:
    path = Path(report_dir) / f"{tag}.json"
    if not path.exists():
        return None
    return load_verdict(path)
