"""
Text artifacts written by the lab: tensors, checkpoints, CSV tables,
manifests and run directories.

Everything is plain text so runs can be diffed; floats are written with 17
significant digits so a rerun with the same seeds is byte-identical.
"""

import csv
import logging
import math
import re
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Union

from .autodiff import Tensor
from .errors import ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
_SECTION = re.compile(r"^\[param (?P<name>[^\]]+)\]$")

PathLike = Union[str, Path]
Cell = Union[str, int, float, bool]


def format_float(value: float) -> str:
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, ".17g")


def _cell(value: Cell) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def write_tensor(path: PathLike, tensor: Tensor) -> Path:
    target = Path(path)
    target.write_text(tensor.to_text())
    return target


def read_tensor(path: PathLike) -> Tensor:
    return Tensor.from_text(Path(path).read_text())


def write_checkpoint(path: PathLike, tensors: Mapping[str, Tensor]) -> Path:
    """
    Save named tensors as ``[param <name>]`` sections in the given order.
    """
    chunks = [f"[param {name}]\n{tensor.to_text()}" for name, tensor in tensors.items()]
    target = Path(path)
    target.write_text("".join(chunks))
    logger.info("Wrote checkpoint %s (%d tensors)", target, len(chunks))
    return target


def read_checkpoint(path: PathLike) -> Dict[str, Tensor]:
    """
    Load a checkpoint written by :func:`write_checkpoint`.

    Raises:
        ValidationError: On a missing file, text outside a section, or a
            duplicated section; the message carries the line number
    """
    source = Path(path)
    if not source.is_file():
        raise ValidationError(f"checkpoint not found: {source}")
    tensors: Dict[str, Tensor] = {}
    name: Optional[str] = None
    body: list = []
    start = 0

    def flush() -> None:
        if name is None:
            return
        try:
            tensors[name] = Tensor.from_text("\n".join(body))
        except (ValidationError, ValueError) as exc:
            raise ValidationError(f"bad tensor in section '{name}': {exc}", line=start) from exc

    for number, raw in enumerate(source.read_text().splitlines(), start=1):
        line = raw.strip()
        match = _SECTION.match(line)
        if match:
            flush()
            name = match.group("name")
            if name in tensors:
                raise ValidationError(f"duplicate section '{name}'", line=number)
            body, start = [], number
        elif line:
            if name is None:
                raise ValidationError("data before the first [param] section", line=number)
            body.append(line)
    flush()
    return tensors


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Cell]]) -> Path:
    target = Path(path)
    with open(target, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    return target


def read_csv(path: PathLike) -> list:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def write_key_values(path: PathLike, values: Mapping[str, Cell]) -> Path:
    """Flat ``key=value`` lines sorted by key."""
    target = Path(path)
    lines = [f"{key}={_cell(values[key])}" for key in sorted(values)]
    target.write_text("\n".join(lines) + "\n")
    return target


def read_key_values(path: PathLike) -> Dict[str, str]:
    entries = {}
    for raw in Path(path).read_text().splitlines():
        if "=" in raw:
            key, value = raw.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def create_run_dir(out: PathLike, command: str, now: Optional[datetime] = None) -> Path:
    """
    Create ``<out>/<command>-YYYYmmdd-HHMMSS``, adding a numeric suffix
    instead of reusing an existing directory.
    """
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    stamp = (now or datetime.now()).strftime("%Y%m%d-%H%M%S")
    base = f"{command}-{stamp}"
    candidate = root / base
    suffix = 1
    while True:
        try:
            candidate.mkdir()
            break
        except FileExistsError:
            candidate = root / f"{base}-{suffix}"
            suffix += 1
    logger.info("Run directory %s", candidate)
    return candidate
