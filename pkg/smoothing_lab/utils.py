import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
from aws_lambda_powertools import Logger, Tracer

SERVICE_NAME = os.getenv("POWERTOOLS_SERVICE_NAME", "smoothing-lab")

logger = Logger(service=SERVICE_NAME, logger_handler=logging.StreamHandler(sys.stderr))
tracer = Tracer(service=SERVICE_NAME)


class LabError(Exception):
    """Base error for every smoothing-lab failure that signals unusable input."""

    code = "lab_error"

    def to_record(self) -> Dict[str, Any]:
        return {"error": self.code, "message": str(self)}


class MalformedLaw(LabError):
    code = "malformed_law"


class OutOfRange(LabError):
    code = "out_of_range"


class StrategyMismatch(LabError):
    code = "strategy_mismatch"


class NegativeArgument(LabError):
    code = "negative_argument"


class NonpositiveU(LabError):
    code = "nonpositive_u"


class GridMismatch(LabError):
    code = "grid_mismatch"


class TooDeep(LabError):
    code = "too_deep"


class ContinuousState(LabError):
    code = "continuous_state"


class AtomExplosion(LabError):
    code = "atom_explosion"


class InvalidDelta(LabError):
    code = "invalid_delta"


class EllipticityViolation(LabError):
    code = "ellipticity_violation"


class CapExceeded(LabError):
    code = "cap_exceeded"


class TooLarge(LabError):
    code = "too_large"


class PreconditionError(LabError):
    code = "precondition"


class InvalidCurve(LabError):
    code = "invalid_curve"


class ConfigError(LabError):
    code = "config"


Label = Union[str, int]


def derive_seed(master: int, labels: Sequence[Label]) -> int:
    """
    Counter-based stream seed: keyed BLAKE2b of the label path.

    The master seed is the key, every label is encoded with a type tag and a
    length prefix, and the first 8 digest bytes are read as an unsigned
    64-bit integer. The encoding is part of the public contract and must not
    change between versions.
    """
    if master < 0:
        raise PreconditionError(f"master seed must be non-negative, got {master}")
    key = int(master).to_bytes(16, "little", signed=False)
    h = hashlib.blake2b(key=key, digest_size=8, person=b"smoothing-lab")
    for label in labels:
        if isinstance(label, bool) or not isinstance(label, (str, int)):
            raise PreconditionError(f"seed labels must be str or int, got {label!r}")
        if isinstance(label, int):
            raw = b"i" + str(label).encode("ascii")
        else:
            raw = b"s" + label.encode("utf-8")
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    return int.from_bytes(h.digest(), "little")


def fmt_real(x: float) -> str:
    """Round-trip text for a float; non-finite values as inf / -inf / nan."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def json_real(x: float) -> Union[float, str]:
    """JSON has no infinities, so they travel as strings."""
    x = float(x)
    return x if math.isfinite(x) else fmt_real(x)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_real(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def batch_means(values, batches: int):
    """Mean and batch-means standard error of a 1-D sample split into equal batches."""
    values = np.asarray(values, dtype=np.float64)
    usable = (values.size // batches) * batches
    if usable == 0:
        raise PreconditionError(f"need at least {batches} samples for batch means, got {values.size}")
    means = values[:usable].reshape(batches, -1).mean(axis=1)
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(batches))
