"""Observational data container, column roles and CSV ingestion."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, DomainError, EmptyDataError, IOFailure, SchemaError

ROLES = ("outcome", "exposure", "mediator", "covariate", "w_proxy", "z_proxy", "ignore")


def _frozen(values, ndim):
    arr = np.array(values, dtype=float, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(len(arr), 0)
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented sample with roles Y, A, M, X, W, Z.

    Arrays are copied on construction and made read-only, so a Dataset can be
    shared between concurrent estimator runs.  ``x`` may have zero columns.
    """

    y: np.ndarray
    a: np.ndarray
    m: np.ndarray
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray
    x_names: tuple = ()
    w_names: tuple = ()
    z_names: tuple = ()
    diagnostics: Mapping = field(default_factory=dict)
    x_transformed: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "y", _frozen(self.y, 1))
        set_(self, "a", _frozen(self.a, 1))
        set_(self, "m", _frozen(self.m, 1))
        n = self.y.shape[0]
        for name in ("x", "w", "z"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(n, -1) if arr.size else np.zeros((n, 0))
            set_(self, name, _frozen(arr, 2))
        for name in ("a", "m", "x", "w", "z"):
            if getattr(self, name).shape[0] != n:
                raise DomainError(f"column block {name!r} has {getattr(self, name).shape[0]} rows, expected {n}")
        if n == 0:
            raise EmptyDataError("dataset has no rows")
        if self.w.shape[1] < 1 or self.z.shape[1] < 1:
            raise DomainError("at least one W proxy and one Z proxy column are required")
        if not np.all((self.a == 0) | (self.a == 1)):
            raise DomainError("exposure must contain only 0 and 1")
        for name in ("y", "a", "m", "x", "w", "z"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"non-finite values in {name!r}")
        for name, block in (("x_names", self.x), ("w_names", self.w), ("z_names", self.z)):
            names = tuple(getattr(self, name))
            if not names:
                names = tuple(f"{name[0]}{j + 1}" for j in range(block.shape[1]))
            if len(names) != block.shape[1]:
                raise DomainError(f"{name} has {len(names)} entries for {block.shape[1]} columns")
            set_(self, name, names)
        set_(self, "diagnostics", dict(self.diagnostics))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def p_w(self) -> int:
        return int(self.w.shape[1])

    @property
    def p_z(self) -> int:
        return int(self.z.shape[1])

    @property
    def n_treated(self) -> int:
        return int(self.a.sum())

    def take(self, index) -> "Dataset":
        """Rows selected (with repetition allowed) by an integer index array."""
        index = np.asarray(index)
        return replace(
            self,
            y=self.y[index],
            a=self.a[index],
            m=self.m[index],
            x=self.x[index],
            w=self.w[index],
            z=self.z[index],
            diagnostics={},
        )

    def with_x(self, x, transformed=None) -> "Dataset":
        flag = self.x_transformed if transformed is None else transformed
        return replace(self, x=x, x_transformed=flag, diagnostics=dict(self.diagnostics))

    def standardized(self) -> "Dataset":
        """Copy with each covariate column centred and scaled to unit variance."""
        if self.p_x == 0:
            return self
        sd = self.x.std(axis=0)
        sd[sd == 0] = 1.0
        return self.with_x((self.x - self.x.mean(axis=0)) / sd)

    def columns(self) -> dict:
        """Ordered name -> vector mapping used for serialisation."""
        cols = {"Y": self.y, "A": self.a, "M": self.m}
        for block, names in ((self.x, self.x_names), (self.w, self.w_names), (self.z, self.z_names)):
            for j, name in enumerate(names):
                cols[name] = block[:, j]
        return cols

    def roles(self) -> "ColumnRoles":
        mapping = {"Y": "outcome", "A": "exposure", "M": "mediator"}
        mapping.update({name: "covariate" for name in self.x_names})
        mapping.update({name: "w_proxy" for name in self.w_names})
        mapping.update({name: "z_proxy" for name in self.z_names})
        return ColumnRoles(mapping)


@dataclass(frozen=True)
class ColumnRoles:
    """Assignment of CSV header names to data roles."""

    mapping: Mapping[str, str]

    def __post_init__(self):
        mapping = {str(k).strip(): str(v).strip().lower() for k, v in dict(self.mapping).items()}
        bad = {k: v for k, v in mapping.items() if v not in ROLES}
        if bad:
            raise ConfigError(f"unknown role(s): {bad}; allowed roles are {', '.join(ROLES)}")
        for role in ("outcome", "exposure", "mediator"):
            count = sum(v == role for v in mapping.values())
            if count != 1:
                raise ConfigError(f"exactly one {role} column is required, found {count}")
        for role in ("w_proxy", "z_proxy"):
            if not any(v == role for v in mapping.values()):
                raise ConfigError(f"at least one {role} column is required (role {role!r} missing)")
        object.__setattr__(self, "mapping", mapping)

    def names(self, role: str) -> list:
        return [k for k, v in self.mapping.items() if v == role]

    @classmethod
    def from_text(cls, text: str) -> "ColumnRoles":
        """Parse ``name=role`` lines; an INI file with a ``[roles]`` section also works."""
        if any(line.strip().startswith("[") for line in text.splitlines()):
            parser = configparser.ConfigParser(delimiters=("=",))
            parser.optionxform = str
            parser.read_string(text)
            if not parser.has_section("roles"):
                raise ConfigError("config file has no [roles] section")
            return cls(dict(parser.items("roles")))
        mapping = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"cannot parse role line {raw!r}; expected name=role")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
        return cls(mapping)

    @classmethod
    def from_file(cls, path) -> "ColumnRoles":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot read roles file {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def parse(cls, spec: str) -> "ColumnRoles":
        """Inline form ``Y=outcome,A=exposure,...`` or a path to a roles file."""
        if Path(spec).is_file():
            return cls.from_file(spec)
        return cls.from_text(spec.replace(",", "\n"))


def load_csv(path, roles: ColumnRoles, standardize: bool = False) -> Dataset:
    """Read a CSV file into a validated :class:`Dataset`.

    Rows with an empty or unparsable cell in any role-mapped column are dropped;
    the count is kept in ``diagnostics["dropped_rows"]``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise EmptyDataError(f"{path} is empty") from None
            rows = list(reader)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc

    used = [k for k, v in roles.mapping.items() if v != "ignore"]
    missing = [k for k in used if k not in header]
    if missing:
        raise SchemaError(f"column(s) {missing} named in the role mapping are absent from the header")
    pos = {name: header.index(name) for name in used}

    parsed = []
    dropped = 0
    for row in rows:
        if not row or all(not c.strip() for c in row):
            continue
        try:
            values = {}
            for name in used:
                cell = row[pos[name]].strip() if pos[name] < len(row) else ""
                value = float(cell)
                if not math.isfinite(value):
                    raise ValueError(cell)
                values[name] = value
        except ValueError:
            dropped += 1
            continue
        parsed.append(values)
    if not parsed:
        raise EmptyDataError(f"no complete rows remain in {path} ({dropped} dropped)")

    (outcome,) = roles.names("outcome")
    (exposure,) = roles.names("exposure")
    (mediator,) = roles.names("mediator")
    a = np.array([r[exposure] for r in parsed])
    if not np.all((a == 0) | (a == 1)):
        bad = sorted(set(a[(a != 0) & (a != 1)].tolist()))[:5]
        raise DomainError(f"exposure column {exposure!r} must be 0/1, found {bad}")

    def block(role):
        names = roles.names(role)
        arr = np.array([[r[k] for k in names] for r in parsed], dtype=float).reshape(len(parsed), len(names))
        return arr, tuple(names)

    x, x_names = block("covariate")
    w, w_names = block("w_proxy")
    z, z_names = block("z_proxy")
    d = Dataset(
        y=[r[outcome] for r in parsed],
        a=a,
        m=[r[mediator] for r in parsed],
        x=x,
        w=w,
        z=z,
        x_names=x_names,
        w_names=w_names,
        z_names=z_names,
        diagnostics={"dropped_rows": dropped},
    )
    return d.standardized() if standardize else d


def write_csv(d: Dataset, path) -> None:
    """Write ``d`` so that :func:`load_csv` with ``d.roles()`` reproduces it exactly."""
    cols = d.columns()
    names = list(cols)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for i in range(d.n):
                writer.writerow([repr(float(cols[k][i])) for k in names])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def empirical_mean_y(d: Dataset) -> float:
    return float(np.mean(d.y))
