"""Instruction-data engine: prompt assembly, generation, and dataset files.

Samples are stored in training form: the question text carries the
``<inst-placeholder>`` glyph instead of the raw listing, and the listing is
re-attached through the function id at batch-assembly time.  Prompts sent to
the chat backend embed the full listing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import ChatBackend, ChatResponse
from .errors import AsmalignError, IntegrityError, SchemaError
from .listings import AsmFunction, Corpus
from .specials import INST_PLACEHOLDER
from .templates import FINETUNE_TASKS, TaskType, TemplateBank

DATASET_SCHEMA = "dataset/v1"
QUARANTINE_SCHEMA = "rejected/v1"

COST_CATEGORIES = ("simp", "reason", "conv", "detail", "bcsd")


class ConversationParseError(AsmalignError):
    """A User:/AI: transcript could not be split into rounds."""


class SampleValidationError(AsmalignError):
    """A generated sample violates the shape rules for its task type."""


@dataclass(frozen=True)
class ChatTurn:
    role: str  # system | user | assistant
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise SampleValidationError(f"unknown turn role {self.role!r}")
        if not self.content:
            raise SampleValidationError("turn content must be non-empty")


@dataclass(frozen=True)
class Provenance:
    backend_model: str
    template_index: int
    cost_usd: float = 0.0

    def __post_init__(self):
        if self.cost_usd < 0:
            raise SampleValidationError("cost must be non-negative")


@dataclass(frozen=True)
class InstructionSample:
    """One task-typed (Q, A) record bound to a function."""

    id: str
    function_id: str
    task: TaskType
    turns: tuple[ChatTurn, ...]
    provenance: Provenance

    def __post_init__(self):
        turns = self.turns
        if turns and turns[0].role == "system":
            turns = turns[1:]
        if not turns:
            raise SampleValidationError("sample needs at least one user/assistant round")
        for i, turn in enumerate(turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise SampleValidationError(
                    f"turn {i} should be {expected!r}, got {turn.role!r}"
                )
        if turns[-1].role != "assistant":
            raise SampleValidationError("sample must end with an assistant turn")
        if self.task == TaskType.CONV and len(turns) < 6:
            raise SampleValidationError(
                f"conv samples need >= 3 rounds, got {len(turns) // 2}"
            )
        if self.task == TaskType.SIMP and "\n" in turns[-1].content:
            raise SampleValidationError("simp answers must be single-line")

    def rounds(self) -> list[tuple[str, str]]:
        turns = self.turns[1:] if self.turns[0].role == "system" else self.turns
        return [(turns[i].content, turns[i + 1].content) for i in range(0, len(turns), 2)]


@dataclass(frozen=True)
class RejectedSample:
    """Quarantine record for a completion that failed validation."""

    function_id: str
    task: TaskType
    reason: str
    raw_text: str


@dataclass(frozen=True)
class Dataset:
    name: str
    samples: tuple[InstructionSample, ...]

    def manifest(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sample in self.samples:
            counts[sample.task.value] = counts.get(sample.task.value, 0) + 1
        return dict(sorted(counts.items()))


@dataclass
class CostLedger:
    entries: list[dict] = field(default_factory=list)

    def add(self, category: str, usd: float) -> None:
        if category not in COST_CATEGORIES:
            raise ValueError(f"unknown cost category {category!r}")
        if usd < 0:
            raise ValueError("cost must be non-negative")
        self.entries.append({"category": category, "usd": usd})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"schema": "costs/v1", "entries": self.entries},
                       sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "CostLedger":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("schema") != "costs/v1":
            raise SchemaError(f"{path}: not a costs/v1 file")
        ledger = cls()
        for entry in obj["entries"]:
            ledger.add(entry["category"], entry["usd"])
        return ledger


def select_template(
    bank: TemplateBank, task: TaskType, rng: np.random.Generator
) -> tuple[int, str]:
    """Uniformly draw one user prompt for the task."""
    prompts = bank.for_task(task).user_prompts
    index = int(rng.integers(len(prompts)))
    return index, prompts[index]


def render_code(fn: AsmFunction) -> str:
    return fn.listing_text()


def build_prompt(
    template: str,
    system: str,
    fn: AsmFunction,
    description: str | None = None,
) -> list[ChatTurn]:
    """Compose the generation-time messages for one function.

    Templates may carry ``{asm}`` / ``{description}`` slots; templates without
    slots get the code block (and description, when given) appended in the
    same ``<code>...</code>`` shape.
    """
    if not fn.instructions:
        raise ValueError(f"function {fn.id!r} has no instructions")
    code = render_code(fn)
    if "{asm}" in template:
        if "{description}" in template and description is None:
            raise SampleValidationError(
                f"template for {fn.id!r} requires a description and none was given"
            )
        user = template.replace("{asm}", code)
        if description is not None:
            user = user.replace("{description}", description)
    else:
        user = f"{template}\nHere is the assembly code:<code>{code}</code>."
        if description is not None:
            user += f" Here is the description of the code:{description}."
    return [ChatTurn("system", system), ChatTurn("user", user)]


def parse_conversation(raw: str) -> list[tuple[str, str]]:
    """Split a ``User:``/``AI:`` transcript into (question, answer) rounds."""
    segments: list[tuple[str, list[str]]] = []  # (marker, lines)
    for line in raw.splitlines():
        stripped = line.strip()
        if stripped.startswith("User:"):
            segments.append(("User", [stripped[len("User:"):].strip()]))
        elif stripped.startswith("AI:"):
            segments.append(("AI", [stripped[len("AI:"):].strip()]))
        elif stripped:
            if not segments:
                raise ConversationParseError(
                    f"transcript must open with 'User:', got {stripped!r}"
                )
            segments[-1][1].append(stripped)
    if not segments:
        return []
    if segments[0][0] != "User":
        raise ConversationParseError("transcript must open with 'User:'")
    rounds: list[tuple[str, str]] = []
    i = 0
    while i < len(segments):
        marker, lines = segments[i]
        if marker != "User":
            raise ConversationParseError(f"expected 'User:' at round {len(rounds) + 1}")
        if i + 1 >= len(segments) or segments[i + 1][0] != "AI":
            question = "\n".join(lines)
            raise ConversationParseError(f"question {question!r} has no 'AI:' answer")
        rounds.append(("\n".join(lines), "\n".join(segments[i + 1][1])))
        i += 2
    return rounds


def render_conversation(rounds: Sequence[tuple[str, str]]) -> str:
    """Inverse of parse_conversation for well-formed single-line rounds."""
    return "\n".join(f"User: {q}\nAI: {a}" for q, a in rounds)


def _question_with_placeholder(question: str) -> str:
    return f"{INST_PLACEHOLDER}\n{question}"


def _turns_from_rounds(rounds: Sequence[tuple[str, str]]) -> list[ChatTurn]:
    turns: list[ChatTurn] = []
    for i, (q, a) in enumerate(rounds):
        question = _question_with_placeholder(q) if i == 0 else q
        turns.append(ChatTurn("user", question))
        turns.append(ChatTurn("assistant", a))
    return turns


def _sample_from_completion(
    fn: AsmFunction,
    task: TaskType,
    template_index: int,
    prompt: str,
    response: ChatResponse,
    sample_id: str,
) -> InstructionSample:
    text = response.text.strip()
    if not text:
        raise SampleValidationError("empty completion")
    if task in (TaskType.CONV, TaskType.REASON):
        rounds = parse_conversation(text)
        if not rounds:
            raise SampleValidationError("completion contains no rounds")
        for q, a in rounds:
            if "\n" in a:
                raise SampleValidationError("round answers must be single-line")
        turns = _turns_from_rounds(rounds)
    else:
        turns = [
            ChatTurn("user", _question_with_placeholder(prompt)),
            ChatTurn("assistant", text),
        ]
    return InstructionSample(
        id=sample_id,
        function_id=fn.id,
        task=task,
        turns=tuple(turns),
        provenance=Provenance(
            backend_model=response.model,
            template_index=template_index,
            cost_usd=response.cost_usd,
        ),
    )


def generate_sample(
    client: ChatBackend,
    fn: AsmFunction,
    task: TaskType,
    bank: TemplateBank,
    rng: np.random.Generator,
    description: str | None = None,
    temperature: float = 0.2,
    max_attempts: int = 3,
    sample_id: str | None = None,
    ledger: CostLedger | None = None,
) -> InstructionSample | RejectedSample:
    """Generate and validate one sample; malformed completions are retried
    up to ``max_attempts`` and then quarantined as a RejectedSample."""
    if task != TaskType.SIMP and description is None:
        raise ValueError(f"task {task.value!r} requires a description")
    if task == TaskType.SIMP and description is not None:
        raise ValueError("simp generation works from code alone")
    sample_id = sample_id or f"{task.value}/{fn.id}"
    system = bank.for_task(task).system_message
    last_reason = "no attempts made"
    last_raw = ""
    for _ in range(max_attempts):
        template_index, template = select_template(bank, task, rng)
        messages = [
            {"role": t.role, "content": t.content}
            for t in build_prompt(template, system, fn, description)
        ]
        response = client.complete(messages, temperature)
        if ledger is not None:
            ledger.add(task.value, response.cost_usd)
        try:
            return _sample_from_completion(
                fn, task, template_index, template, response, sample_id
            )
        except (ConversationParseError, SampleValidationError) as exc:
            last_reason = str(exc)
            last_raw = response.text
    return RejectedSample(function_id=fn.id, task=task, reason=last_reason, raw_text=last_raw)


def assemble_d1(corpus: Corpus, samples: Iterable[InstructionSample], name: str = "D1") -> Dataset:
    """Pretraining dataset: simp samples only, at most one per function."""
    ids = set(corpus.by_id())
    seen_functions: set[str] = set()
    out: list[InstructionSample] = []
    for sample in samples:
        if sample.task != TaskType.SIMP:
            raise IntegrityError(f"{name} accepts only simp samples, got {sample.task.value}")
        if sample.function_id not in ids:
            raise IntegrityError(f"sample {sample.id} references unknown function {sample.function_id!r}")
        if sample.function_id in seen_functions:
            raise IntegrityError(f"function {sample.function_id!r} has more than one simp sample")
        seen_functions.add(sample.function_id)
        out.append(sample)
    return Dataset(name=name, samples=tuple(sorted(out, key=lambda s: s.id)))


def assemble_d2(corpus: Corpus, samples: Iterable[InstructionSample], name: str = "D2") -> Dataset:
    """Fine-tuning dataset: detail/conv/reason samples, many per function."""
    ids = set(corpus.by_id())
    out: list[InstructionSample] = []
    for sample in samples:
        if sample.task not in FINETUNE_TASKS:
            raise IntegrityError(f"{name} accepts only detail/conv/reason, got {sample.task.value}")
        if sample.function_id not in ids:
            raise IntegrityError(f"sample {sample.id} references unknown function {sample.function_id!r}")
        out.append(sample)
    return Dataset(name=name, samples=tuple(sorted(out, key=lambda s: s.id)))


def generate_datasets(
    corpus: Corpus,
    client: ChatBackend,
    bank: TemplateBank,
    tasks: Sequence[TaskType],
    seed: int,
    temperature: float = 0.2,
) -> tuple[Dataset | None, Dataset | None, list[RejectedSample], CostLedger]:
    """Run the full engine over a corpus, deterministically for a fixed seed.

    Simplified descriptions are generated first (from code alone) and reused
    as the description input of detail/conv/reason generation; functions whose
    simp generation is rejected are quarantined for the downstream tasks too.
    """
    rng = np.random.default_rng(seed)
    ledger = CostLedger()
    rejected: list[RejectedSample] = []
    functions = sorted(corpus.functions, key=lambda fn: fn.id)
    want_d2 = any(t in FINETUNE_TASKS for t in tasks)

    descriptions: dict[str, str] = {}
    simp_samples: list[InstructionSample] = []
    if TaskType.SIMP in tasks or want_d2:
        for fn in functions:
            result = generate_sample(
                client, fn, TaskType.SIMP, bank, rng,
                temperature=temperature, ledger=ledger,
            )
            if isinstance(result, RejectedSample):
                rejected.append(result)
                continue
            descriptions[fn.id] = result.turns[-1].content
            simp_samples.append(result)

    d2_samples: list[InstructionSample] = []
    for task in FINETUNE_TASKS:
        if task not in tasks:
            continue
        for fn in functions:
            description = descriptions.get(fn.id)
            if description is None:
                rejected.append(RejectedSample(
                    function_id=fn.id, task=task,
                    reason="no simplified description available", raw_text="",
                ))
                continue
            result = generate_sample(
                client, fn, task, bank, rng, description=description,
                temperature=temperature, ledger=ledger,
            )
            if isinstance(result, RejectedSample):
                rejected.append(result)
            else:
                d2_samples.append(result)

    d1 = assemble_d1(corpus, simp_samples) if TaskType.SIMP in tasks else None
    d2 = assemble_d2(corpus, d2_samples) if want_d2 else None
    return d1, d2, rejected, ledger


def cost_report(ledger: CostLedger) -> dict:
    """Per-category totals and raw proportions of the grand total."""
    totals = {category: 0.0 for category in COST_CATEGORIES}
    for entry in ledger.entries:
        totals[entry["category"]] += entry["usd"]
    grand = sum(totals.values())
    rows = [
        {
            "category": category,
            "usd": totals[category],
            "percent": (100.0 * totals[category] / grand) if grand > 0 else 0.0,
        }
        for category in COST_CATEGORIES
        if totals[category] > 0
    ]
    return {"total": grand, "rows": rows}


def render_cost_report(report: dict) -> str:
    lines = [f"{'category':<10} {'usd':>10} {'percent':>8}"]
    for row in report["rows"]:
        lines.append(f"{row['category']:<10} {row['usd']:>10.2f} {row['percent']:>7.1f}%")
    lines.append(f"{'total':<10} {report['total']:>10.2f}")
    return "\n".join(lines)


def _sample_to_json(sample: InstructionSample) -> dict:
    return {
        "id": sample.id,
        "function_id": sample.function_id,
        "task": sample.task.value,
        "turns": [{"role": t.role, "content": t.content} for t in sample.turns],
        "provenance": {
            "backend_model": sample.provenance.backend_model,
            "template_index": sample.provenance.template_index,
            "cost_usd": sample.provenance.cost_usd,
        },
    }


def _sample_from_json(obj: Mapping) -> InstructionSample:
    prov = obj["provenance"]
    return InstructionSample(
        id=obj["id"],
        function_id=obj["function_id"],
        task=TaskType(obj["task"]),
        turns=tuple(ChatTurn(t["role"], t["content"]) for t in obj["turns"]),
        provenance=Provenance(
            backend_model=prov["backend_model"],
            template_index=prov["template_index"],
            cost_usd=prov["cost_usd"],
        ),
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    header = {
        "schema": DATASET_SCHEMA,
        "name": dataset.name,
        "task_counts": dataset.manifest(),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines.extend(
        json.dumps(_sample_to_json(s), sort_keys=True, separators=(",", ":"))
        for s in dataset.samples
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema") != DATASET_SCHEMA:
        raise SchemaError(f"{path}: expected schema {DATASET_SCHEMA!r}, got {header.get('schema')!r}")
    samples = tuple(_sample_from_json(json.loads(line)) for line in lines[1:] if line)
    dataset = Dataset(name=header.get("name", "dataset"), samples=samples)
    if dataset.manifest() != header.get("task_counts"):
        raise SchemaError(f"{path}: task_counts header disagrees with samples")
    return dataset


def save_quarantine(rejected: Sequence[RejectedSample], path: str | Path) -> None:
    lines = [json.dumps({"schema": QUARANTINE_SCHEMA, "count": len(rejected)},
                        sort_keys=True, separators=(",", ":"))]
    for r in rejected:
        lines.append(json.dumps(
            {"function_id": r.function_id, "task": r.task.value,
             "reason": r.reason, "raw_text": r.raw_text},
            sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
