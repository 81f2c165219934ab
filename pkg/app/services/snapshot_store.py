"""Snapshot persistence"""
import json
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import joblib
import numpy as np
import pandas as pd

from app.core.exceptions import ConfigMismatchError, NumericalError
from app.core.logging import get_logger
from app.models.fields import (
    ModifiedWeightState, ParticleEnsemble, ScalarField3, Snapshot, VectorField3,
)

logger = get_logger(__name__)

_FIELD_FILES = ("rho", "phi", "grad_x", "grad_y", "grad_z")


class SnapshotStore:
    """
    Ordered snapshots of one run.

    Without a directory everything stays in memory. With a directory every snapshot
    is written on arrival and loaded back on access.
    """

    def __init__(self, weights: np.ndarray, initial_positions: np.ndarray,
                 initial_velocities: np.ndarray, mu: int = 1, config_hash: str = "",
                 directory: Optional[Union[str, Path]] = None):
        self.weights = np.asarray(weights, dtype=float)
        self.initial_positions = np.asarray(initial_positions, dtype=float)
        self.initial_velocities = np.asarray(initial_velocities, dtype=float)
        self.mu = mu
        self.config_hash = config_hash
        self.directory = Path(directory) if directory is not None else None
        self._snapshots: Dict[float, Union[Snapshot, Path]] = {}
        self.conserved_log: List[Dict[str, float]] = []
        self.modified_log: List[Dict[str, float]] = []
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            joblib.dump(
                {"weights": self.weights, "initial_positions": self.initial_positions,
                 "initial_velocities": self.initial_velocities},
                self.directory / "initial.joblib", compress=3,
            )

    @classmethod
    def from_ensemble(cls, ensemble: ParticleEnsemble, config_hash: str = "",
                      directory: Optional[Union[str, Path]] = None) -> "SnapshotStore":
        return cls(ensemble.weights, ensemble.initial_positions, ensemble.initial_velocities,
                   mu=ensemble.mu, config_hash=config_hash, directory=directory)

    # -- writing ----------------------------------------------------------

    def add(self, snapshot: Snapshot) -> None:
        if self._snapshots and snapshot.time <= self.times[-1]:
            raise ValueError(f"Snapshot times must increase, got {snapshot.time} after {self.times[-1]}")
        self.conserved_log.append({"t": snapshot.time, "step": snapshot.step, **snapshot.conserved})
        self.modified_log.append({"t": snapshot.time, **snapshot.modified_stats})
        if self.directory is None:
            self._snapshots[snapshot.time] = snapshot
            return
        path = self.directory / f"snapshot_{len(self._snapshots):04d}"
        path.mkdir(exist_ok=True)
        joblib.dump(
            {
                "time": snapshot.time, "step": snapshot.step,
                "positions": snapshot.positions, "velocities": snapshot.velocities,
                "phi_corr": snapshot.phi_corr, "w_corr": snapshot.w_corr,
                "conserved": snapshot.conserved, "modified_stats": snapshot.modified_stats,
            },
            path / "ensemble.joblib", compress=3,
        )
        fields = (snapshot.rho, snapshot.phi) + tuple(snapshot.grad_phi.components)
        for name, field in zip(_FIELD_FILES, fields):
            field.save(path / f"{name}.bin")
        self._snapshots[snapshot.time] = path
        logger.debug(f"Snapshot t={snapshot.time:g} written to {path}")

    def metadata(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "mu": self.mu,
            "snapshot_times": self.times,
            "horizon": self.horizon,
            "conserved": self.conserved_log,
            "modified_stats": self.modified_log,
        }

    def save_metadata(self) -> None:
        if self.directory is None:
            return
        with open(self.directory / "metadata.json", "w", encoding="utf-8") as f:
            json.dump(self.metadata(), f, indent=2)

    # -- reading ----------------------------------------------------------

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SnapshotStore":
        """
        Open a store written by a previous run.

        Raises:
            FileNotFoundError: No metadata.json in the directory
        """
        directory = Path(directory)
        meta_path = directory / "metadata.json"
        if not meta_path.exists():
            error_msg = f"Snapshot store not found at: {directory}"
            logger.error(error_msg)
            raise FileNotFoundError(error_msg)
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
        initial = joblib.load(directory / "initial.joblib")
        store = cls.__new__(cls)
        store.weights = initial["weights"]
        store.initial_positions = initial["initial_positions"]
        store.initial_velocities = initial["initial_velocities"]
        store.mu = int(meta["mu"])
        store.config_hash = meta["config_hash"]
        store.directory = directory
        store.conserved_log = meta.get("conserved", [])
        store.modified_log = meta.get("modified_stats", [])
        store._snapshots = {
            float(t): directory / f"snapshot_{k:04d}" for k, t in enumerate(meta["snapshot_times"])
        }
        logger.info(f"Loaded snapshot store with {len(store)} snapshots from {directory}")
        return store

    def _materialize(self, entry: Union[Snapshot, Path]) -> Snapshot:
        if isinstance(entry, Snapshot):
            return entry
        try:
            data = joblib.load(entry / "ensemble.joblib")
            fields = [ScalarField3.load(entry / f"{name}.bin") for name in _FIELD_FILES]
        except Exception as e:
            error_msg = f"Failed to load snapshot from {entry}: {str(e)}"
            logger.error(error_msg, exc_info=True)
            raise NumericalError(error_msg) from e
        return Snapshot(
            time=data["time"], step=data["step"],
            positions=data["positions"], velocities=data["velocities"],
            phi_corr=data["phi_corr"], w_corr=data["w_corr"],
            rho=fields[0], phi=fields[1], grad_phi=VectorField3(tuple(fields[2:])),
            conserved=data["conserved"], modified_stats=data["modified_stats"],
        )

    @property
    def times(self) -> List[float]:
        return sorted(self._snapshots)

    @property
    def horizon(self) -> Optional[float]:
        """Last resolved snapshot time"""
        return self.times[-1] if self._snapshots else None

    def __len__(self) -> int:
        return len(self._snapshots)

    def __iter__(self) -> Iterator[Snapshot]:
        for t in self.times:
            yield self._materialize(self._snapshots[t])

    def get(self, t: float, rtol: float = 1e-9) -> Snapshot:
        """
        Snapshot at time t.

        Raises:
            KeyError: No snapshot within rtol of t
        """
        for stored in self.times:
            if abs(stored - t) <= rtol * max(1.0, abs(t)):
                return self._materialize(self._snapshots[stored])
        raise KeyError(f"No snapshot at t={t}; available: {self.times}")

    def window(self, t_min: float, t_max: float) -> List[float]:
        return [t for t in self.times if t_min - 1e-12 <= t <= t_max + 1e-12]

    def ensemble(self, t: float) -> ParticleEnsemble:
        """Particle state at a snapshot time"""
        snapshot = self.get(t)
        return ParticleEnsemble(
            snapshot.positions, snapshot.velocities, self.weights,
            self.initial_positions, self.initial_velocities,
            mu=self.mu, time=snapshot.time,
            modified=ModifiedWeightState(snapshot.phi_corr, snapshot.w_corr),
        )

    def conserved_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.conserved_log)

    def require_hash(self, expected: str) -> None:
        """
        Raises:
            ConfigMismatchError: Store generated by another configuration
        """
        if expected and self.config_hash and expected != self.config_hash:
            raise ConfigMismatchError(expected, self.config_hash)
