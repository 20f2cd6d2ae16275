"""Minimal ASCII PLY point-cloud reader/writer (x, y, z plus an optional
alpha property)."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def write_ply(path, positions: np.ndarray, alpha: np.ndarray | None = None):
    positions = np.asarray(positions, np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {positions.shape[0]}",
             "property float x", "property float y", "property float z"]
    if alpha is not None:
        alpha = np.asarray(alpha, np.float64).reshape(-1)
        if alpha.shape[0] != positions.shape[0]:
            raise ValueError("alpha length must match positions")
        lines.append("property float alpha")
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(positions.shape[0]):
            row = f"{positions[i, 0]:.9g} {positions[i, 1]:.9g} {positions[i, 2]:.9g}"
            if alpha is not None:
                row += f" {alpha[i]:.9g}"
            fh.write(row + "\n")


def read_ply(path):
    """Returns (positions (n,3), alpha (n,) or None)."""
    with open(path) as fh:
        first = fh.readline().strip()
        if first != "ply":
            raise FormatError(f"{path}: not a PLY file (missing 'ply' magic)")
        if fh.readline().strip() != "format ascii 1.0":
            raise FormatError(f"{path}: only 'format ascii 1.0' is supported")
        n = None
        props = []
        for line in fh:
            line = line.strip()
            if line.startswith("comment"):
                continue
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("element"):
                raise FormatError(f"{path}: unsupported element '{line}'")
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
            else:
                raise FormatError(f"{path}: unexpected header line '{line}'")
        else:
            raise FormatError(f"{path}: missing end_header")
        if n is None:
            raise FormatError(f"{path}: missing 'element vertex' declaration")
        for need in ("x", "y", "z"):
            if need not in props:
                raise FormatError(f"{path}: missing vertex property '{need}'")
        rows = np.zeros((n, len(props)))
        for i in range(n):
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: expected {n} vertices, file ended at {i}")
            vals = line.split()
            if len(vals) != len(props):
                raise FormatError(f"{path}: vertex {i} has {len(vals)} values, "
                                  f"expected {len(props)}")
            rows[i] = [float(v) for v in vals]
    xyz = np.stack([rows[:, props.index(c)] for c in "xyz"], axis=1)
    alpha = rows[:, props.index("alpha")] if "alpha" in props else None
    return xyz, alpha
