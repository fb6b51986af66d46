"""
Evaluation file formats.

Records are read from JSON lines (one object per line, blank lines skipped)
and human ranks from a CSV with the header ``sentence_id,sample_index,rank``.
Every record is validated through its pydantic model; the first violation is
reported as a ``SchemaError`` naming the file and line.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from ..errors import InvalidArgumentError, SchemaError
from ..models.eval_models import HumanRank, RatedSample

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
RecordT = TypeVar("RecordT", bound=BaseModel)

RANK_COLUMNS = ("sentence_id", "sample_index", "rank")


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(part) for part in first.get("loc", ())) or "record"
    return f"{where}: {first.get('msg', 'invalid value')}"


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidArgumentError(f"cannot read {path}: {e.strerror or e}",
                                   details={"path": str(path)}) from e


def read_jsonl(path: PathLike, model: Type[RecordT]) -> List[RecordT]:
    """Validated records of ``model``, one per non-blank line.

    Raises:
        InvalidArgumentError: the file cannot be read
        SchemaError: a line is not JSON or does not match ``model``
    """
    path = Path(path)
    records = []
    for line_no, line in enumerate(_read_text(path).splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(str(path), line_no, f"invalid JSON: {e.msg}") from None
        if not isinstance(data, dict):
            raise SchemaError(str(path), line_no, "expected a JSON object")
        try:
            records.append(model.model_validate(data))
        except ValidationError as e:
            raise SchemaError(str(path), line_no, _describe(e)) from None
    logger.debug(f"Read {len(records)} {model.__name__} records from {path}")
    return records


def read_human_ranks(path: PathLike) -> List[HumanRank]:
    path = Path(path)
    reader = csv.DictReader(_read_text(path).splitlines())
    header = reader.fieldnames or []
    missing = [c for c in RANK_COLUMNS if c not in header]
    if missing:
        raise SchemaError(str(path), 1, f"missing column(s): {', '.join(missing)}")
    ranks = []
    for row in reader:
        values = {c: (row.get(c) or "").strip() for c in RANK_COLUMNS}
        if not any(values.values()):
            continue
        try:
            ranks.append(HumanRank.model_validate(values))
        except ValidationError as e:
            raise SchemaError(str(path), reader.line_num, _describe(e)) from None
    return ranks


def apply_human_ranks(samples: Sequence[RatedSample], ranks: Iterable[HumanRank]) -> List[RatedSample]:
    """Copies of ``samples`` with ``human_rank`` filled in from ``ranks``.

    Raises:
        InvalidArgumentError: a rank names an unknown sample or repeats one
    """
    by_key: Dict[tuple, int] = {}
    for rank in ranks:
        key = (rank.sentence_id, rank.sample_index)
        if key in by_key:
            raise InvalidArgumentError(f"duplicate rank for sentence {key[0]!r} sample {key[1]}")
        by_key[key] = rank.rank
    known = {(s.sentence_id, s.sample_index) for s in samples}
    unknown = sorted(set(by_key) - known)
    if unknown:
        raise InvalidArgumentError(
            f"{len(unknown)} rank(s) refer to unknown samples, first: {unknown[0]}"
        )
    return [
        s.model_copy(update={"human_rank": by_key[(s.sentence_id, s.sample_index)]})
        if (s.sentence_id, s.sample_index) in by_key else s
        for s in samples
    ]


def write_jsonl(path: PathLike, records: Iterable[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [r.model_dump_json(exclude_none=True) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    logger.debug(f"Wrote {len(lines)} records to {path}")
    return path


def write_json(path: PathLike, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
