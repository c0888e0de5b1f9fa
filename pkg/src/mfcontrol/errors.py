"""Exception hierarchy shared by every module.

Each error carries a module-origin tag so the CLI can report where a
failure came from in its machine-readable error JSON.
"""

from __future__ import annotations


class MfcError(Exception):
    origin = "mfcontrol"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {
            "error": type(self).__name__,
            "origin": self.origin,
            "message": str(self),
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


class SpecificationError(MfcError):
    origin = "model"


class ConvexityError(MfcError):
    origin = "hamiltonian"


class ConfigError(MfcError):
    origin = "cli"


class MeasureError(MfcError):
    origin = "measure"


class GridError(MfcError):
    origin = "paths"


class SolverError(MfcError):
    origin = "fbsde"


class DivergenceError(SolverError):
    pass


class BasisError(SolverError):
    pass


class CapabilityError(MfcError):
    origin = "flows"


def _jsonable(v):
    try:
        import numpy as np

        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, np.generic):
            return v.item()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v
