"""Plain-text artifacts for trained bases and CSV output.

Artifact layout (one token per line after the header)::

    # key=value          optional metadata lines
    N l L                dimensions
    Psi                  N*l values, column-major
    Phi                  N*L values, column-major
    indices              L integers (0-based)

Floats are written with ``repr``, the shortest decimal string that
round-trips exactly.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .deim import DeimData

__all__ = ["Artifact", "save_artifact", "load_artifact", "write_csv", "format_value"]


@dataclass
class Artifact:
    """Trained reduced basis and optional DEIM data."""

    Psi: np.ndarray
    Phi: np.ndarray
    indices: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def deim(self):
        """DEIM data, or ``None`` for plain RB artifacts."""
        if self.indices.size == 0:
            return None
        return DeimData(self.Phi, self.indices)


def save_artifact(path, Psi, deim=None, meta=None):
    Psi = np.asarray(Psi, dtype=float)
    N, l = Psi.shape
    Phi = np.zeros((N, 0)) if deim is None else deim.Phi
    idx = np.zeros(0, dtype=int) if deim is None else deim.indices
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (meta or {}).items():
            if "\n" in f"{key}{value}" or "=" in str(key):
                raise ValueError(f"metadata entry {key!r} cannot be written on one line")
            fh.write(f"# {key}={value}\n")
        fh.write(f"{N} {l} {Phi.shape[1]}\n")
        for v in Psi.ravel(order="F"):
            fh.write(repr(float(v)) + "\n")
        for v in Phi.ravel(order="F"):
            fh.write(repr(float(v)) + "\n")
        for i in idx:
            fh.write(f"{int(i)}\n")


def load_artifact(path):
    """Read an artifact written by :func:`save_artifact`.

    Raises
    ------
    ValueError
        On a malformed header or a wrong number of entries.
    """
    meta = {}
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            else:
                tokens.append(line)
    if not tokens:
        raise ValueError(f"{path}: empty artifact")
    head = tokens[0].split()
    if len(head) != 3:
        raise ValueError(f"{path}: header must read 'N l L', got {tokens[0]!r}")
    N, l, L = (int(v) for v in head)
    body = tokens[1:]
    expected = N * l + N * L + L
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} entries after the header, found {len(body)}")
    values = np.array(body[: N * (l + L)], dtype=float)
    Psi = values[: N * l].reshape((N, l), order="F")
    Phi = values[N * l:].reshape((N, L), order="F")
    indices = np.array(body[N * (l + L):], dtype=np.intp)
    return Artifact(Psi, Phi, indices, meta)


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows, columns=None):
    """Write dict rows with a header; floats use their round-trip form."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c, "")) for c in columns])
