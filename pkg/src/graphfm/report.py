"""Experiment report record and its line-oriented text format.

Layout::

    report_version = 1
    label = "ours"
    config.mu = 1e-05
    metrics.test_rmse = 2.1e-07
    meta.created = "2026-10-16T12:00:00"
    [iterations]
    iteration,train_objective,val_rmse
    0,0.37,0.02
    1,0.31,nan

Values in the key-value header are JSON scalars, so floats keep their
shortest round-trip repr. ``meta.*`` keys hold run-dependent data (wall
clock, timestamps) and are excluded from :meth:`ExperimentReport.payload`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ReportVersionError

REPORT_VERSION = 1
_SECTIONS = ("config", "metrics", "meta")


@dataclass
class ExperimentReport:
    label: str = ""
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    iteration: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    train_objective: np.ndarray = field(default_factory=lambda: np.zeros(0))
    val_rmse: np.ndarray = field(default_factory=lambda: np.zeros(0))
    report_version: int = REPORT_VERSION

    def __eq__(self, other):
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        return self.to_text() == other.to_text()

    def _header_lines(self, with_meta):
        lines = [f"report_version = {json.dumps(self.report_version)}",
                 f"label = {json.dumps(self.label)}"]
        for section in _SECTIONS:
            if section == "meta" and not with_meta:
                continue
            for key in sorted(getattr(self, section)):
                value = _jsonable(getattr(self, section)[key])
                lines.append(f"{section}.{key} = {json.dumps(value)}")
        return lines

    def _table_lines(self):
        lines = ["[iterations]", "iteration,train_objective,val_rmse"]
        for it, obj, val in zip(self.iteration, self.train_objective, self.val_rmse):
            lines.append(f"{int(it)},{float(obj)!r},{float(val)!r}")
        return lines

    def to_text(self) -> str:
        return "\n".join(self._header_lines(True) + self._table_lines()) + "\n"

    def payload(self) -> str:
        """Report text minus the run-dependent ``meta`` section."""
        return "\n".join(self._header_lines(False) + self._table_lines()) + "\n"

    @classmethod
    def from_text(cls, text: str, path=None) -> "ExperimentReport":
        rep = cls()
        lines = text.splitlines()
        seen_version = False
        i = 0
        while i < len(lines) and lines[i].strip() != "[iterations]":
            line = lines[i].strip()
            i += 1
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition(" = ")
            if not sep:
                raise DataError(f"expected 'key = value', got {line!r}", path, i)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                raise DataError(f"bad value for {key!r}: {raw!r}", path, i) from None
            if key == "report_version":
                if value != REPORT_VERSION:
                    raise ReportVersionError(
                        f"unsupported report_version {value!r} (expected {REPORT_VERSION})", path, i)
                seen_version = True
            elif key == "label":
                rep.label = value
            else:
                section, dot, name = key.partition(".")
                if not dot or section not in _SECTIONS:
                    raise DataError(f"unknown key {key!r}", path, i)
                getattr(rep, section)[name] = value
        if not seen_version:
            raise ReportVersionError("missing report_version", path)
        it, obj, val = [], [], []
        if i < len(lines):
            i += 2  # section marker and column header
            for lineno in range(i, len(lines)):
                line = lines[lineno].strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise DataError(f"expected 3 columns, got {line!r}", path, lineno + 1)
                try:
                    it.append(int(parts[0]))
                    obj.append(float(parts[1]))
                    val.append(float(parts[2]))
                except ValueError:
                    raise DataError(f"non-numeric row {line!r}", path, lineno + 1) from None
        rep.iteration = np.array(it, dtype=np.int64)
        rep.train_objective = np.array(obj, dtype=np.float64)
        rep.val_rmse = np.array(val, dtype=np.float64)
        return rep


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    return v
