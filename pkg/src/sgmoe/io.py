"""File formats: dataset CSV, Theta / measure / chain / trace JSON."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .model import Dataset, InvalidInputError, ModelSpec, Theta

PathLike = Union[str, os.PathLike]


class SchemaError(InvalidInputError):
    """A file does not follow its documented layout."""


def atomic_write_text(path: PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: PathLike, obj) -> None:
    # repr-based float formatting round-trips doubles exactly
    atomic_write_text(path, json.dumps(obj, indent=2, allow_nan=False) + "\n")


def read_json(path: PathLike):
    with open(path) as fh:
        return json.load(fh)


def write_csv_rows(path: PathLike, rows: List[dict], fieldnames: Optional[List[str]] = None) -> None:
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            for k in r:
                if k not in fieldnames:
                    fieldnames.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# -- Theta -------------------------------------------------------------------


def theta_to_dict(theta: Theta) -> dict:
    return {"spec": theta.spec.to_dict(), "gate": theta.gate.tolist(), "experts": theta.experts.tolist()}


def theta_from_dict(d: dict) -> Theta:
    try:
        spec = ModelSpec(**{k: int(d["spec"][k]) for k in ("K", "M", "P", "D")})
        gate = np.array(d["gate"], dtype=float)
        experts = np.array(d["experts"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed Theta JSON: {exc}") from exc
    if spec.K == 1 and gate.size == 0:
        gate = np.zeros(spec.gate_shape)
    if gate.shape != spec.gate_shape:
        raise SchemaError(f"gate has shape {gate.shape}, expected {spec.gate_shape}")
    if experts.shape != spec.expert_shape:
        raise SchemaError(f"experts has shape {experts.shape}, expected {spec.expert_shape}")
    return Theta(spec, gate, experts)


def save_theta(path: PathLike, theta: Theta) -> None:
    write_json(path, theta_to_dict(theta))


def load_theta(path: PathLike) -> Theta:
    return theta_from_dict(read_json(path))


# -- Dataset -----------------------------------------------------------------


def dataset_to_csv_text(data: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{p + 1}" for p in range(data.P)] + ["y"])
    for row, label in zip(data.x, data.y):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()


def save_dataset(path: PathLike, data: Dataset) -> None:
    atomic_write_text(path, dataset_to_csv_text(data))


def load_dataset(path: PathLike, M: Optional[int] = None, standardize: bool = False
                 ) -> Tuple[Dataset, Optional[Dict[str, int]]]:
    """Read ``x1,...,xP,y``.

    Integer labels must lie in 1..M.  Any non-integer label column is treated
    as categories, mapped to 1..M in sorted order; the mapping is returned.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    if len(header) < 2 or header[-1] != "y" or header[:-1] != [f"x{p + 1}" for p in range(len(header) - 1)]:
        raise SchemaError(f"{path}: header must be x1,...,xP,y; got {','.join(header)}")
    P = len(header) - 1
    for i, r in enumerate(rows):
        if len(r) != P + 1:
            raise SchemaError(f"{path}: row {i + 2} has {len(r)} fields, expected {P + 1}")
    try:
        x = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=float).reshape(len(rows), P)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric covariate ({exc})") from exc
    if not np.all(np.isfinite(x)):
        raise SchemaError(f"{path}: covariates must be finite")
    raw = [r[-1].strip() for r in rows]
    mapping = None
    try:
        y = np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError:
        cats = sorted(set(raw))
        mapping = {c: i + 1 for i, c in enumerate(cats)}
        y = np.array([mapping[v] for v in raw], dtype=np.int64)
    if y.size and y.min() < 1:
        raise SchemaError(f"{path}: integer labels must lie in 1..M")
    if M is not None:
        if y.size and y.max() > M:
            raise SchemaError(f"{path}: label {int(y.max())} exceeds M={M}")
    if standardize and x.shape[0] > 1:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    try:
        return Dataset(x, y, M), mapping
    except InvalidInputError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
