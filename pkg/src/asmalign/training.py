"""Two-stage alignment training and the interactive answering loop.

Samples render to character sequences shaped like their generation
transcripts (``User: ...\\nAI: ...``); the code placeholder in the first
question expands into an inst-start/inst-end bracket whose interior rows are
the projected encoder features.  The loss is the mean negative log-likelihood
over answer-token positions only; question, system, and code positions are
masked out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .datagen import Dataset, InstructionSample
from .errors import IntegrityError
from .listings import AsmFunction, Corpus
from .model import ToyModel
from .specials import INST_PLACEHOLDER
from .templates import TaskType
from .vocab import expand_placeholder

ANSWER_CUE = "\nAI: "


@dataclass(frozen=True)
class SequencePlan:
    """One sample rendered to ids with its loss mask and code span."""

    function_id: str
    ids: np.ndarray          # (L,) int64, placeholder id on code slots
    loss_mask: np.ndarray    # (L,) float64, 1.0 exactly on answer tokens + eos
    code_offset: int
    code_len: int

    @property
    def signature(self) -> tuple[int, int, int]:
        return (len(self.ids), self.code_offset, self.code_len)


@dataclass(frozen=True)
class Batch:
    """Same-shape sequence plans stacked into rectangular arrays."""

    functions: tuple[AsmFunction, ...]
    ids: np.ndarray          # (B, L)
    loss_mask: np.ndarray    # (B, L)
    code_offset: int
    code_len: int

    def __post_init__(self):
        B, L = self.ids.shape
        if self.loss_mask.shape != (B, L):
            raise IntegrityError("loss mask shape must match ids")
        if np.any(self.loss_mask[:, 0] != 0.0):
            raise IntegrityError("position 0 can never be a target")
        span = slice(self.code_offset - 1, self.code_offset + self.code_len + 1)
        if np.any(self.loss_mask[:, span] != 0.0):
            raise IntegrityError("code region positions must be masked out")

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    @property
    def masked_count(self) -> float:
        return float(self.loss_mask.sum())


def build_sequence(model: ToyModel, fn: AsmFunction, sample: InstructionSample) -> SequencePlan:
    """Render a sample into ids + mask, expanding the code placeholder."""
    vocab = model.vocab
    rounds = sample.rounds()
    ids: list[int] = [vocab.bos_id]
    mask: list[float] = [0.0]

    def emit(text: str, flag: float):
        seg = vocab.encode_text(text)
        ids.extend(seg)
        mask.extend([flag] * len(seg))

    for i, (q, a) in enumerate(rounds):
        emit(f"User: {q}{ANSWER_CUE}", 0.0)
        emit(a, 1.0)
        if i + 1 < len(rounds):
            emit("\n", 0.0)
    ids.append(vocab.eos_id)
    mask.append(1.0)

    code_len = model.code_length(fn)
    expanded, offset = expand_placeholder(ids, vocab, code_len)
    # Splice zeros into the mask for the bracket + code slots (3 + code_len
    # positions replace the single placeholder position).
    at = ids.index(vocab.placeholder_id)
    expanded_mask = mask[:at] + [0.0] * (code_len + 2) + mask[at + 1:]
    if len(expanded_mask) != len(expanded):
        raise IntegrityError("mask expansion out of step with id expansion")
    return SequencePlan(
        function_id=fn.id,
        ids=np.asarray(expanded, dtype=np.int64),
        loss_mask=np.asarray(expanded_mask, dtype=np.float64),
        code_offset=offset,
        code_len=code_len,
    )


def build_batches(model: ToyModel, corpus: Corpus, dataset: Dataset) -> list[SequencePlan]:
    by_id = corpus.by_id()
    plans = []
    for sample in dataset.samples:
        fn = by_id.get(sample.function_id)
        if fn is None:
            raise IntegrityError(f"dataset references unknown function {sample.function_id!r}")
        plans.append(build_sequence(model, fn, sample))
    return plans


def _stack(model: ToyModel, corpus_by_id: dict[str, AsmFunction],
           plans: list[SequencePlan]) -> Batch:
    sig = plans[0].signature
    if any(p.signature != sig for p in plans):
        raise IntegrityError("cannot stack plans with different shapes")
    return Batch(
        functions=tuple(corpus_by_id[p.function_id] for p in plans),
        ids=np.stack([p.ids for p in plans]),
        loss_mask=np.stack([p.loss_mask for p in plans]),
        code_offset=sig[1],
        code_len=sig[2],
    )


def batch_embeddings(model: ToyModel, batch: Batch) -> Tensor:
    """Token embeddings with the code span replaced by projected features."""
    feats = np.stack([model.code_features(fn) for fn in batch.functions])
    projected = model.projector.apply(Tensor(feats))
    tok = model.decoder.embed(batch.ids)
    off, m = batch.code_offset, batch.code_len
    return ag.concat([tok[:, :off], projected, tok[:, off + m:]], axis=1)


def forward_loss(model: ToyModel, batch: Batch) -> Tensor:
    """Mean negative log-likelihood over the masked (answer) positions."""
    if batch.masked_count == 0:
        raise IntegrityError("batch has no masked target positions")
    emb = batch_embeddings(model, batch)
    logits = model.decoder.forward_embeddings(emb)
    log_probs = ag.log_softmax(logits[:, :-1, :])
    targets = batch.ids[:, 1:]
    target_mask = batch.loss_mask[:, 1:]
    nll = ag.mul(ag.take_along_last(log_probs, targets), -1.0)
    total = ag.tsum(ag.mul(nll, Tensor(target_mask)))
    return ag.mul(total, 1.0 / batch.masked_count)


def backward(model: ToyModel, batch: Batch, stage: str) -> dict[str, np.ndarray]:
    """Exact gradients of forward_loss for the stage's trainable set.

    Parameters outside the set keep requires_grad False, receive no stored
    gradient, and are never updated.
    """
    trainable = model.trainable(stage)
    for name, param in model.all_params().items():
        param.requires_grad = name in trainable
        param.zero_grad()
    loss = forward_loss(model, batch)
    loss.backward()
    return {name: param.grad for name, param in trainable.items() if param.grad is not None}


# Full-scale defaults; toy runs pass explicit values suited to their size.
STAGE_DEFAULT_LR = {"pretrain": 2e-3, "finetune": 2e-5}


@dataclass
class TrainConfig:
    stage: str               # pretrain | finetune
    lr: float | None = None
    steps: int = 300
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr is None:
            self.lr = STAGE_DEFAULT_LR[self.stage]


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def _train(model: ToyModel, corpus: Corpus, dataset: Dataset, cfg: TrainConfig) -> TrainReport:
    if not dataset.samples:
        raise IntegrityError("cannot train on an empty dataset")
    plans = build_batches(model, corpus, dataset)
    by_id = corpus.by_id()
    trainable = model.trainable(cfg.stage)
    for name, param in model.all_params().items():
        param.requires_grad = name in trainable
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    for _ in range(cfg.steps):
        picks = rng.integers(0, len(plans), size=cfg.batch_size)
        chosen = [plans[i] for i in picks]
        groups: dict[tuple, list[SequencePlan]] = {}
        for plan in chosen:
            groups.setdefault(plan.signature, []).append(plan)
        total = None
        count = 0.0
        for group in groups.values():
            batch = _stack(model, by_id, group)
            emb = batch_embeddings(model, batch)
            logits = model.decoder.forward_embeddings(emb)
            log_probs = ag.log_softmax(logits[:, :-1, :])
            nll = ag.mul(ag.take_along_last(log_probs, batch.ids[:, 1:]), -1.0)
            part = ag.tsum(ag.mul(nll, Tensor(batch.loss_mask[:, 1:])))
            total = part if total is None else ag.add(total, part)
            count += batch.masked_count
        if count == 0:
            raise IntegrityError("training step drew only maskless sequences")
        loss = ag.mul(total, 1.0 / count)
        for param in trainable.values():
            param.zero_grad()
        loss.backward()
        for param in trainable.values():
            if param.grad is not None:
                param.data = param.data - cfg.lr * param.grad
        report.losses.append(loss.item())
    return report


def train_stage1(model: ToyModel, d1: Dataset, corpus: Corpus, cfg: TrainConfig) -> TrainReport:
    """Projector-only alignment pretraining; encoder and decoder stay frozen."""
    if cfg.stage != "pretrain":
        raise ValueError("train_stage1 requires a pretrain config")
    if any(s.task != TaskType.SIMP for s in d1.samples):
        raise IntegrityError("stage 1 trains on simp samples only")
    report = _train(model, corpus, d1, cfg)
    model.config.stage1_done = True
    return report


def train_stage2(model: ToyModel, d2: Dataset, corpus: Corpus, cfg: TrainConfig,
                 allow_unpretrained: bool = False) -> TrainReport:
    """End-to-end fine-tuning of projector + decoder; encoder stays frozen."""
    if cfg.stage != "finetune":
        raise ValueError("train_stage2 requires a finetune config")
    if not model.config.stage1_done and not allow_unpretrained:
        raise IntegrityError(
            "stage 2 expects a stage-1 trained model (pass allow_unpretrained "
            "to run the no-pretraining ablation)"
        )
    return _train(model, corpus, d2, cfg)


def drop_task(dataset: Dataset, task: TaskType) -> Dataset:
    """Ablation helper: remove one task type from a fine-tuning dataset."""
    kept = tuple(s for s in dataset.samples if s.task != task)
    return Dataset(name=f"{dataset.name}-drop-{task.value}", samples=kept)


def interactive_answer(model: ToyModel, fn: AsmFunction, questions: list[str],
                       max_new_tokens: int = 64) -> list[str]:
    """Greedy-decode one answer per question, in question order."""
    vocab = model.vocab
    answers: list[str] = []
    feats = model.code_features(fn)
    projected = model.projector.apply(Tensor(feats)).data
    m = projected.shape[0]
    for question in questions:
        prompt = f"User: {INST_PLACEHOLDER}\n{question}{ANSWER_CUE}"
        ids = [vocab.bos_id] + vocab.encode_text(prompt)
        expanded, offset = expand_placeholder(ids, vocab, m)
        generated: list[int] = []
        for _ in range(max_new_tokens):
            current = np.asarray(expanded + generated, dtype=np.int64)
            tok = model.decoder.embed(current)
            emb = ag.concat(
                [tok[:offset], Tensor(projected), tok[offset + m:]], axis=0
            )
            logits = model.decoder.forward_embeddings(emb)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == vocab.eos_id:
                break
            generated.append(next_id)
        answers.append(vocab.decode_ids(generated))
    return answers
