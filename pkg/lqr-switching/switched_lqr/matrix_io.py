"""Plain-text matrix files

Each block is a header line `name rows cols` followed by `rows` lines of
`cols` whitespace separated decimals. Blank lines and lines starting with
'#' are ignored. Plant files hold blocks A, B, W; weight files hold Q, R;
gain files hold K0 and/or K1.
"""

import logging
from pathlib import Path

import numpy as np

from switched_lqr.control_core import LinearPlant, LQWeights
from switched_lqr.errors import MatrixFormatError


logger = logging.getLogger(__name__)


def parse_matrices(text: str, source: str = "<string>") -> dict[str, np.ndarray]:
    """Parse every matrix block in the text"""
    lines = [
        (i + 1, line.split())
        for i, line in enumerate(text.splitlines())
        if line.strip() and not line.lstrip().startswith("#")
    ]

    matrices = {}
    pos = 0
    while pos < len(lines):
        line_no, header = lines[pos]
        if len(header) != 3:
            raise MatrixFormatError(
                f"{source}:{line_no}: expected 'name rows cols', got {' '.join(header)!r}"
            )
        name, rows, cols = header
        try:
            rows, cols = int(rows), int(cols)
        except ValueError as e:
            raise MatrixFormatError(
                f"{source}:{line_no}: rows and cols must be integers"
            ) from e
        if rows < 1 or cols < 1:
            raise MatrixFormatError(f"{source}:{line_no}: empty matrix '{name}'")
        if name in matrices:
            raise MatrixFormatError(f"{source}:{line_no}: duplicate matrix '{name}'")

        body = lines[pos + 1 : pos + 1 + rows]
        if len(body) != rows:
            raise MatrixFormatError(
                f"{source}: matrix '{name}' has {len(body)} rows, expected {rows}"
            )
        values = []
        for row_no, row in body:
            if len(row) != cols:
                raise MatrixFormatError(
                    f"{source}:{row_no}: matrix '{name}' row has {len(row)} entries, expected {cols}"
                )
            try:
                values.append([float(v) for v in row])
            except ValueError as e:
                raise MatrixFormatError(
                    f"{source}:{row_no}: non-numeric entry in matrix '{name}'"
                ) from e

        matrices[name] = np.array(values, dtype=float)
        pos += 1 + rows

    return matrices


def read_matrices(path: str | Path) -> dict[str, np.ndarray]:
    """Read every matrix block in a file"""
    path = Path(path)
    logger.debug("Reading matrices from %s", path)
    return parse_matrices(path.read_text(), source=str(path))


def _require(matrices: dict[str, np.ndarray], names: list[str], source: str):
    missing = [name for name in names if name not in matrices]
    if missing:
        raise MatrixFormatError(f"{source}: missing matrices {', '.join(missing)}")


def read_plant(path: str | Path, strict: bool = True) -> LinearPlant:
    """Plant (A, B, W) from a matrix file"""
    matrices = read_matrices(path)
    _require(matrices, ["A", "B", "W"], str(path))
    return LinearPlant(matrices["A"], matrices["B"], matrices["W"], strict=strict)


def read_weights(path: str | Path) -> LQWeights:
    """Weights (Q, R) from a matrix file"""
    matrices = read_matrices(path)
    _require(matrices, ["Q", "R"], str(path))
    return LQWeights(matrices["Q"], matrices["R"])


def format_matrix(name: str, M: np.ndarray) -> str:
    """One matrix block with 17 significant digits per entry"""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rows = [" ".join(f"{v:.17g}" for v in row) for row in M]
    return "\n".join([f"{name} {M.shape[0]} {M.shape[1]}", *rows])


def write_matrices(path: str | Path, matrices: dict[str, np.ndarray], header: str = ""):
    """Write matrix blocks, optionally after a '#' comment header"""
    blocks = [format_matrix(name, M) for name, M in matrices.items()]
    text = "\n".join(blocks) + "\n"
    if header:
        text = f"# {header}\n" + text
    Path(path).write_text(text)
