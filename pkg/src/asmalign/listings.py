"""Disassembly listing ingestion: parsing, renumbering, filtering, corpus IO.

A listing is plain text holding one or more functions.  Functions are
delimited by blank lines or by a header line of the form

    FUNC name=<fn> project=<proj> opt=<O0..O3> source=<key> [id=<id>]

followed by one instruction per line, ``<number>: <mnemonic and operands>``.
The number is a decimal index (``indexed`` format) or a hex address
(``addressed`` format); addressed functions must be renumbered to 0-based
sequential indices before they enter a corpus.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import IntegrityError, ListingParseError, SchemaError

OPT_LEVELS = ("O0", "O1", "O2", "O3")
ARCH = "x86-64"

CORPUS_SCHEMA = "corpus/v1"

_HEADER_RE = re.compile(r"^FUNC\s+(?P<rest>.*)$")
_LINE_RE = re.compile(r"^\s*(?P<num>\S+?)\s*:\s*(?P<text>.+?)\s*$")


@dataclass(frozen=True)
class AsmInstruction:
    """One instruction: a sequential index plus its textual form."""

    index: int
    text: str

    def __post_init__(self):
        if self.index < 0:
            raise IntegrityError(f"instruction index must be >= 0, got {self.index}")
        if not self.text:
            raise IntegrityError("instruction text must be non-empty")
        if "\n" in self.text:
            raise IntegrityError("instruction text must not contain newlines")


@dataclass(frozen=True)
class AsmFunction:
    """One disassembled function with its ordered instruction list.

    Two functions with equal ``source_key`` and different ``opt_level`` are
    compiled from the same source and count as semantic duplicates.
    """

    id: str
    project: str
    function_name: str | None
    opt_level: str
    source_key: str
    instructions: tuple[AsmInstruction, ...]
    arch: str = ARCH

    def __post_init__(self):
        if self.opt_level not in OPT_LEVELS:
            raise IntegrityError(f"unknown opt level {self.opt_level!r}")
        if not self.id:
            raise IntegrityError("function id must be non-empty")

    @property
    def is_canonical(self) -> bool:
        """True when instruction indices are exactly 0..n-1 in order."""
        return all(ins.index == i for i, ins in enumerate(self.instructions))

    def listing_text(self) -> str:
        """Render back to the one-instruction-per-line listing form."""
        return "\n".join(f"{ins.index}: {ins.text}" for ins in self.instructions)


@dataclass(frozen=True)
class Corpus:
    """An id-unique collection of canonical functions."""

    functions: tuple[AsmFunction, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for fn in self.functions:
            if fn.id in seen:
                raise IntegrityError(f"duplicate function id {fn.id!r}")
            seen.add(fn.id)
            if not fn.is_canonical:
                raise IntegrityError(
                    f"function {fn.id!r} has non-sequential instruction indices; "
                    "renumber_addresses() it first"
                )

    def __len__(self) -> int:
        return len(self.functions)

    def by_id(self) -> dict[str, AsmFunction]:
        return {fn.id: fn for fn in self.functions}

    def manifest(self) -> dict:
        """Per-project counts and proportions (proportions sum to 1)."""
        counts: dict[str, int] = {}
        for fn in self.functions:
            counts[fn.project] = counts.get(fn.project, 0) + 1
        total = len(self.functions)
        proportions = {
            project: counts[project] / total for project in sorted(counts)
        } if total else {}
        return {"counts": dict(sorted(counts.items())), "proportions": proportions}


def _parse_header(rest: str, line_no: int) -> dict:
    meta: dict[str, str] = {}
    for token in rest.split():
        if "=" not in token:
            # Bare first token is treated as the function name.
            if "name" not in meta and not meta:
                meta["name"] = token
                continue
            raise ListingParseError(line_no, f"malformed header token {token!r}")
        key, value = token.split("=", 1)
        meta[key] = value
    return meta


def _finish_function(
    meta: Mapping[str, str],
    raw: list[tuple[int, str]],
    ordinal: int,
) -> AsmFunction:
    project = meta.get("project", "unknown")
    name = meta.get("name")
    opt = meta.get("opt", "O0")
    stem = name if name is not None else f"fn{ordinal:04d}"
    source = meta.get("source", f"{project}/{stem}")
    fn_id = meta.get("id", f"{project}/{stem}/{opt}")
    return AsmFunction(
        id=fn_id,
        project=project,
        function_name=name,
        opt_level=opt,
        source_key=source,
        instructions=tuple(AsmInstruction(index=i, text=t) for i, t in raw),
    )


def parse_listing(text: str, format_hint: str = "indexed") -> list[AsmFunction]:
    """Parse a disassembly listing into function records.

    ``format_hint`` selects how the number before the colon is read:
    ``indexed`` as a decimal index, ``addressed`` as a hex address.  In the
    addressed case the raw addresses are kept in the ``index`` fields so that
    :func:`renumber_addresses` can replace them.
    """
    if format_hint not in ("indexed", "addressed"):
        raise ValueError(f"unknown format hint {format_hint!r}")
    functions: list[AsmFunction] = []
    meta: dict[str, str] = {}
    raw: list[tuple[int, str]] = []
    open_block = False

    def close(ordinal: int):
        nonlocal meta, raw, open_block
        if open_block and (raw or meta):
            functions.append(_finish_function(meta, raw, ordinal))
        meta, raw, open_block = {}, [], False

    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            close(len(functions))
            continue
        header = _HEADER_RE.match(stripped)
        if header:
            close(len(functions))
            meta = _parse_header(header.group("rest"), line_no)
            open_block = True
            continue
        m = _LINE_RE.match(stripped)
        if not m:
            raise ListingParseError(line_no, f"not a header, blank, or instruction line: {stripped!r}")
        num_text = m.group("num")
        try:
            base = 16 if format_hint == "addressed" else 10
            number = int(num_text, base)
        except ValueError:
            raise ListingParseError(
                line_no, f"bad {format_hint} instruction number {num_text!r}"
            ) from None
        if number < 0:
            raise ListingParseError(line_no, f"negative instruction number {num_text!r}")
        raw.append((number, m.group("text")))
        open_block = True
    close(len(functions))
    return functions


def renumber_addresses(fn: AsmFunction) -> AsmFunction:
    """Replace raw (strictly increasing) addresses with sequential indices."""
    for prev, cur in zip(fn.instructions, fn.instructions[1:]):
        if cur.index <= prev.index:
            raise IntegrityError(
                f"function {fn.id!r}: addresses not strictly increasing "
                f"({prev.index:#x} followed by {cur.index:#x})"
            )
    renumbered = tuple(
        AsmInstruction(index=i, text=ins.text) for i, ins in enumerate(fn.instructions)
    )
    return replace(fn, instructions=renumbered)


def filter_min_length(corpus: Corpus, min_len: int = 3) -> Corpus:
    """Drop functions shorter than ``min_len`` instructions."""
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    return Corpus(tuple(fn for fn in corpus.functions if len(fn.instructions) >= min_len))


def balance_sample(corpus: Corpus, per_project_cap: int, seed: int) -> Corpus:
    """Cap each project's contribution by seeded sampling without replacement.

    Projects with more than ``per_project_cap`` functions are subsampled
    uniformly; smaller projects pass through whole.  Input order is kept.
    """
    if per_project_cap < 1:
        raise ValueError("per_project_cap must be >= 1")
    by_project: dict[str, list[int]] = {}
    for pos, fn in enumerate(corpus.functions):
        by_project.setdefault(fn.project, []).append(pos)
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for project in sorted(by_project):
        positions = by_project[project]
        if len(positions) <= per_project_cap:
            keep.update(positions)
        else:
            chosen = rng.choice(len(positions), size=per_project_cap, replace=False)
            keep.update(positions[i] for i in chosen)
    return Corpus(tuple(fn for pos, fn in enumerate(corpus.functions) if pos in keep))


def _function_to_json(fn: AsmFunction) -> dict:
    return {
        "id": fn.id,
        "project": fn.project,
        "function_name": fn.function_name,
        "opt_level": fn.opt_level,
        "arch": fn.arch,
        "source_key": fn.source_key,
        "instructions": [{"index": ins.index, "text": ins.text} for ins in fn.instructions],
    }


def _function_from_json(obj: Mapping) -> AsmFunction:
    return AsmFunction(
        id=obj["id"],
        project=obj["project"],
        function_name=obj["function_name"],
        opt_level=obj["opt_level"],
        source_key=obj["source_key"],
        arch=obj.get("arch", ARCH),
        instructions=tuple(
            AsmInstruction(index=ins["index"], text=ins["text"])
            for ins in obj["instructions"]
        ),
    )


def export_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus as JSON-Lines with a leading manifest line."""
    path = Path(path)
    lines = [json.dumps({"schema": CORPUS_SCHEMA, "count": len(corpus)}, separators=(",", ":"))]
    lines.extend(
        json.dumps(_function_to_json(fn), separators=(",", ":")) for fn in corpus.functions
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_corpus(path: str | Path) -> Corpus:
    """Read a corpus file, validating schema version and id uniqueness."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty corpus file")
    head = json.loads(lines[0])
    schema = head.get("schema", "")
    if schema.split("/")[0] != CORPUS_SCHEMA.split("/")[0] or schema != CORPUS_SCHEMA:
        raise SchemaError(f"{path}: expected schema {CORPUS_SCHEMA!r}, got {schema!r}")
    functions = [_function_from_json(json.loads(line)) for line in lines[1:] if line]
    if head.get("count") != len(functions):
        raise SchemaError(
            f"{path}: manifest count {head.get('count')} != {len(functions)} functions"
        )
    try:
        return Corpus(tuple(functions))
    except IntegrityError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def build_corpus(functions: Iterable[AsmFunction]) -> Corpus:
    """Assemble functions into a corpus, enforcing id uniqueness."""
    return Corpus(tuple(functions))
