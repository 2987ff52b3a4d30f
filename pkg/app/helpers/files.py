"""
Readers and writers for the on-disk formats: MXT observation stacks, CSV observations and result tables.

Every writer goes through `atomic_write_text`, so an interrupted run never leaves a truncated file behind.
"""

import re
from io import StringIO
from math import isfinite
from os import replace
from pathlib import Path
from tempfile import NamedTemporaryFile

import numpy as np
import pandas as pd

from app.models.matvar import MatrixStack

MXT_HEADER = re.compile(r"^#mxt v1 n=(\d+) p=(\d+) q=(\d+)$")


class ParseException(Exception):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def format_number(value: float) -> str:
    return f"{value:.17g}"


def atomic_write_text(path: Path, text: str) -> None:
    """
    Write to a temporary file next to `path`, then rename it over `path`.
    """
    path = Path(path)
    with NamedTemporaryFile(
        "w",
        delete=False,
        dir=path.parent,
        encoding="utf-8",
        newline="\n",
        prefix=f".{path.name}.",
        suffix=".tmp",
    ) as tmp:
        tmp.write(text)
    replace(tmp.name, path)


def dump_mxt(stack: MatrixStack) -> str:
    blocks = [
        "\n".join(" ".join(format_number(v) for v in row) for row in obs)
        for obs in stack.data
    ]
    return f"#mxt v1 n={stack.n} p={stack.p} q={stack.q}\n" + "\n\n".join(blocks) + "\n"


def read_text(path: Path) -> str:
    """
    UTF-8 contents of `path`, undecodable bytes reported with their line number.
    """
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseException(
            f"Invalid UTF-8 byte 0x{raw[e.start]:02x}", raw.count(b"\n", 0, e.start) + 1
        )


def parse_mxt(text: str) -> MatrixStack:
    """
    Parse an MXT document: a `#mxt v1 n= p= q=` header, then n blocks of p lines with q numbers each, blocks separated by exactly one blank line.

    Blank lines after the last block are accepted.
    """
    lines = text.splitlines()
    if not lines:
        raise ParseException("Empty file, expected an MXT header", 1)
    match = MXT_HEADER.match(lines[0].strip())
    if not match:
        raise ParseException(f"Invalid MXT header: {lines[0][:80]!r}", 1)
    n, p, q = (int(group) for group in match.groups())
    if min(n, p, q) < 1:
        raise ParseException("n, p and q must be at least 1", 1)

    rows: list[list[float]] = []
    blanks = 0
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            blanks += 1
            continue
        if len(rows) == n * p:
            raise ParseException(f"More rows than the declared n*p = {n * p}", line_no)
        starts_block = len(rows) % p == 0
        if not rows and blanks:
            raise ParseException("Blank line before the first block", line_no - 1)
        if rows and starts_block and blanks != 1:
            raise ParseException(
                f"Blocks must be separated by one blank line, found {blanks}", line_no
            )
        if not starts_block and blanks:
            raise ParseException(f"Blank line inside a block of {p} rows", line_no - 1)
        blanks = 0

        tokens = line.split()
        if len(tokens) != q:
            raise ParseException(f"Expected {q} numbers, got {len(tokens)}", line_no)
        try:
            values = [float(token) for token in tokens]
        except ValueError as e:
            raise ParseException(f"Invalid number: {e}", line_no)
        if not all(isfinite(v) for v in values):
            raise ParseException("Numbers must be finite", line_no)
        rows.append(values)

    if len(rows) != n * p:
        raise ParseException(
            f"Declared n={n}, p={p} needs {n * p} rows, found {len(rows)}", len(lines)
        )
    return MatrixStack(data=np.array(rows).reshape(n, p, q))


def read_mxt(path: Path) -> MatrixStack:
    return parse_mxt(read_text(path))


def write_mxt(path: Path, stack: MatrixStack) -> None:
    atomic_write_text(path, dump_mxt(stack))


def read_observation_csv(path: Path, p: int, q: int) -> MatrixStack:
    """
    One observation per line as p·q comma-separated numbers, vec(X) by column-stacking.
    """
    try:
        frame = pd.read_csv(
            StringIO(read_text(path)),
            dtype=str,
            header=None,
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError:
        raise ParseException("Empty file", 1)
    except pd.errors.ParserError as e:
        raise ParseException(str(e))

    frame = frame.dropna(how="all")
    if frame.shape[1] != p * q:
        raise ParseException(
            f"Expected {p * q} values per line for {p}x{q} observations, got {frame.shape[1]}",
            int(frame.index[0]) + 1 if len(frame) else 1,
        )
    values = frame.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    bad = ~np.isfinite(values.to_numpy(dtype=np.float64))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseException(
            f"Invalid number in field {col + 1}: {frame.iat[row, col]!r}",
            int(frame.index[row]) + 1,
        )
    return MatrixStack.from_vectorized(values.to_numpy(dtype=np.float64), p, q)


def write_frame(path: Path, frame: pd.DataFrame, comments: list[str] | None = None) -> None:
    """
    CSV with a header row, LF endings and 17 significant digits, followed by `# ` comment lines.
    """
    buffer = StringIO()
    frame.to_csv(buffer, float_format="%.17g", index=False, lineterminator="\n")
    for comment in comments or []:
        buffer.write(f"# {comment}\n")
    atomic_write_text(path, buffer.getvalue())
