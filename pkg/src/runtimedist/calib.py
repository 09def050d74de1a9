"""Cost-unit calibration: per-unit normal models from repeated observations.

Five cost units are modeled: sequential page read (c_s), random page read
(c_r), per-tuple CPU (c_t), per-index-tuple CPU (c_i), and per-operation
CPU (c_o). Each calibration record divides an observed elapsed time by a
known primitive count; the per-unit sample mean and unbiased sample
variance define the unit's normal model. Units are treated as mutually
independent; that assumption is recorded in the model metadata.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

COST_UNITS = ("c_s", "c_r", "c_t", "c_i", "c_o")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationRecord:
    unit: str
    count: int
    elapsed_seconds: float

    def __post_init__(self):
        if self.unit not in COST_UNITS:
            raise CalibrationError(f"unknown cost unit {self.unit!r}")
        if self.count <= 0:
            raise CalibrationError("primitive count must be positive")
        if self.elapsed_seconds < 0:
            raise CalibrationError(
                "negative elapsed time: calibration file is broken, refusing to clamp"
            )


@dataclass
class UnitModel:
    mean: float
    variance: float
    observations: int


@dataclass
class CostUnitModel:
    units: dict[str, UnitModel]
    metadata: dict = field(default_factory=lambda: {"units_independent": True})

    def mean(self, unit: str) -> float:
        return self.units[unit].mean

    def variance(self, unit: str) -> float:
        return self.units[unit].variance


def solve_unit_from_record(record: CalibrationRecord) -> float:
    """Observed unit value: elapsed seconds per primitive operation."""
    return record.elapsed_seconds / record.count


def fit_cost_units(records) -> CostUnitModel:
    """Sample mean and unbiased variance per unit over observed values.

    Every unit needs at least two observations (the variance uses the
    count-1 denominator); missing units are reported together.
    """
    values: dict[str, list[float]] = {u: [] for u in COST_UNITS}
    for rec in records:
        values[rec.unit].append(solve_unit_from_record(rec))
    short = [u for u in COST_UNITS if len(values[u]) < 2]
    if short:
        raise CalibrationError(
            f"need >= 2 observations per unit; insufficient for: {', '.join(short)}"
        )
    units = {}
    for u in COST_UNITS:
        obs = values[u]
        k = len(obs)
        mean = sum(obs) / k
        var = sum((v - mean) ** 2 for v in obs) / (k - 1)
        units[u] = UnitModel(mean=mean, variance=var, observations=k)
    return CostUnitModel(units=units)


def read_calibration_csv(path) -> list[CalibrationRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"unit", "count", "elapsed_seconds"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise CalibrationError(
                f"{path}: calibration CSV needs columns unit,count,elapsed_seconds"
            )
        for row in reader:
            records.append(
                CalibrationRecord(
                    unit=row["unit"],
                    count=int(row["count"]),
                    elapsed_seconds=float(row["elapsed_seconds"]),
                )
            )
    return records


def write_calibration_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "count", "elapsed_seconds"])
        for rec in records:
            writer.writerow([rec.unit, rec.count, repr(rec.elapsed_seconds)])
