from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PatientRecord:
    """One case with every modality in its raw form.

    ``static`` uses NaN for missing cells. ``vitals`` maps a channel name to a
    ``(times, values)`` pair of irregular samples in seconds. ``medications``
    lists administered groups, or is ``None`` when no record exists.
    """

    patient_id: str
    static: np.ndarray
    hip: np.ndarray
    chest: np.ndarray
    vitals: dict
    medications: list[str] | None
    label: int

    @property
    def static_mask(self) -> np.ndarray:
        """True where a static feature was observed."""
        return ~np.isnan(self.static)

    @property
    def vitals_mask(self) -> dict[str, np.ndarray]:
        return {name: ~np.isnan(vals) for name, (_, vals) in self.vitals.items()}
