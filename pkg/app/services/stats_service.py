"""Verdict tally"""
import threading
from datetime import datetime
from typing import Any, Dict, Iterable


class StatsService:
    """Tracks verdict counts for the current session"""

    def __init__(self):
        self.lock = threading.Lock()
        self.total = 0
        self.passed = 0
        self.failed = 0
        self.vacuous = 0
        self.config_hashes = set()
        self.session_start = datetime.utcnow().isoformat() + "Z"

    def record_verdict(self, verdict) -> None:
        """
        Record a verdict

        Args:
            verdict: Verdict with status PASS, FAIL or VACUOUS
        """
        with self.lock:
            self.total += 1
            status = verdict.status.value
            if status == "PASS":
                self.passed += 1
            elif status == "FAIL":
                self.failed += 1
            else:
                self.vacuous += 1
            self.config_hashes.add(verdict.config_hash)

    def record_all(self, verdicts: Iterable) -> None:
        """Record every verdict of a suite run"""
        for verdict in verdicts:
            self.record_verdict(verdict)

    def get_stats(self) -> Dict[str, Any]:
        """
        Get current statistics

        Returns:
            Dictionary with verdict counts, config hashes and session start
        """
        with self.lock:
            return {
                "total": self.total,
                "passed": self.passed,
                "failed": self.failed,
                "vacuous": self.vacuous,
                "config_hashes": sorted(self.config_hashes),
                "session_start": self.session_start,
            }

    def reset(self) -> None:
        """Reset statistics"""
        with self.lock:
            self.total = 0
            self.passed = 0
            self.failed = 0
            self.vacuous = 0
            self.config_hashes = set()
            self.session_start = datetime.utcnow().isoformat() + "Z"


# Global stats service instance
stats_service = StatsService()
