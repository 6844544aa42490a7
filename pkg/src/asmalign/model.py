"""Projector and toy causal decoder built on the autograd engine.

The decoder is a small pre-norm transformer: learned token and position
embeddings, one or more causal self-attention blocks, and an output head
over the character vocabulary.  All parameters are float64 and every forward
is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderStub
from .errors import IntegrityError, SchemaError
from .listings import AsmFunction
from .vocab import Vocab

MODEL_SCHEMA = "model/v1"

PROJECTOR_MODES = ("linear", "two_layer")


class Projector:
    """Map encoder features into the decoder embedding space.

    ``linear`` is a single matrix (no bias); ``two_layer`` adds a tanh hidden
    layer of width ``hidden`` for extra capacity.
    """

    def __init__(self, in_dim: int, out_dim: int, mode: str = "linear",
                 hidden: int | None = None, seed: int = 0):
        if mode not in PROJECTOR_MODES:
            raise ValueError(f"unknown projector mode {mode!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mode = mode
        self.hidden = hidden or max(in_dim, out_dim)
        rng = np.random.default_rng(seed)
        scale_in = 1.0 / np.sqrt(in_dim)
        self.params: dict[str, Tensor] = {}
        if mode == "linear":
            self.params["W"] = Tensor(rng.standard_normal((in_dim, out_dim)) * scale_in,
                                      requires_grad=True)
        else:
            self.params["W1"] = Tensor(rng.standard_normal((in_dim, self.hidden)) * scale_in,
                                       requires_grad=True)
            self.params["b1"] = Tensor(np.zeros(self.hidden), requires_grad=True)
            self.params["W2"] = Tensor(
                rng.standard_normal((self.hidden, out_dim)) / np.sqrt(self.hidden),
                requires_grad=True)
            self.params["b2"] = Tensor(np.zeros(out_dim), requires_grad=True)

    def apply(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_dim:
            raise IntegrityError(
                f"projector expects width {self.in_dim}, got {features.shape[-1]}"
            )
        if self.mode == "linear":
            return ag.matmul(features, self.params["W"])
        hidden = ag.tanh(ag.linear(features, self.params["W1"], self.params["b1"]))
        return ag.linear(hidden, self.params["W2"], self.params["b2"])


class ToyDecoder:
    """Character-level causal transformer with exact gradients."""

    def __init__(self, vocab_size: int, d_model: int = 32, n_heads: int = 2,
                 n_layers: int = 1, max_len: int = 128, seed: int = 0):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.max_len = max_len
        rng = np.random.default_rng(seed)
        scale = 0.08
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(rng.standard_normal((vocab_size, d_model)) * scale,
                              requires_grad=True)
        p["pos_emb"] = Tensor(rng.standard_normal((max_len, d_model)) * scale,
                              requires_grad=True)
        for i in range(n_layers):
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[f"blocks.{i}.attn.{name}"] = Tensor(
                    rng.standard_normal((d_model, d_model)) * scale, requires_grad=True)
            for name in ("bq", "bk", "bv", "bo"):
                p[f"blocks.{i}.attn.{name}"] = Tensor(np.zeros(d_model), requires_grad=True)
            p[f"blocks.{i}.ln1.gain"] = Tensor(np.ones(d_model), requires_grad=True)
            p[f"blocks.{i}.ln1.bias"] = Tensor(np.zeros(d_model), requires_grad=True)
            p[f"blocks.{i}.mlp.W1"] = Tensor(
                rng.standard_normal((d_model, 4 * d_model)) * scale, requires_grad=True)
            p[f"blocks.{i}.mlp.b1"] = Tensor(np.zeros(4 * d_model), requires_grad=True)
            p[f"blocks.{i}.mlp.W2"] = Tensor(
                rng.standard_normal((4 * d_model, d_model)) * scale, requires_grad=True)
            p[f"blocks.{i}.mlp.b2"] = Tensor(np.zeros(d_model), requires_grad=True)
            p[f"blocks.{i}.ln2.gain"] = Tensor(np.ones(d_model), requires_grad=True)
            p[f"blocks.{i}.ln2.bias"] = Tensor(np.zeros(d_model), requires_grad=True)
        p["ln_f.gain"] = Tensor(np.ones(d_model), requires_grad=True)
        p["ln_f.bias"] = Tensor(np.zeros(d_model), requires_grad=True)
        p["head.W"] = Tensor(rng.standard_normal((d_model, vocab_size)) * scale,
                             requires_grad=True)
        p["head.b"] = Tensor(np.zeros(vocab_size), requires_grad=True)
        self.params = p
        self._masks: dict[int, np.ndarray] = {}

    def causal_mask(self, length: int) -> np.ndarray:
        mask = self._masks.get(length)
        if mask is None:
            mask = np.triu(np.full((length, length), -np.inf), k=1)
            self._masks[length] = mask
        return mask

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IntegrityError("token id out of vocabulary range")
        if ids.size == 0:
            return Tensor(np.zeros((0, self.d_model)))
        return ag.take_rows(self.params["tok_emb"], ids)

    def forward_embeddings(self, emb: Tensor) -> Tensor:
        """Logits for an embedding sequence of shape (B, L, d) or (L, d)."""
        squeeze = emb.ndim == 2
        if squeeze:
            emb = ag.reshape(emb, (1,) + emb.shape)
        B, L, d = emb.shape
        if L > self.max_len:
            raise IntegrityError(f"sequence length {L} exceeds max_len {self.max_len}")
        p = self.params
        x = ag.add(emb, p["pos_emb"][:L])
        mask = Tensor(self.causal_mask(L))
        dh = self.d_model // self.n_heads
        inv_sqrt_dh = 1.0 / np.sqrt(dh)
        for i in range(self.n_layers):
            normed = ag.layer_norm(x, p[f"blocks.{i}.ln1.gain"], p[f"blocks.{i}.ln1.bias"])
            q = ag.linear(normed, p[f"blocks.{i}.attn.Wq"], p[f"blocks.{i}.attn.bq"])
            k = ag.linear(normed, p[f"blocks.{i}.attn.Wk"], p[f"blocks.{i}.attn.bk"])
            v = ag.linear(normed, p[f"blocks.{i}.attn.Wv"], p[f"blocks.{i}.attn.bv"])

            def split(t: Tensor) -> Tensor:
                return ag.transpose(ag.reshape(t, (B, L, self.n_heads, dh)), (0, 2, 1, 3))

            q, k, v = split(q), split(k), split(v)
            scores = ag.add(
                ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh), mask
            )
            attn = ag.softmax(scores, axis=-1)
            ctx = ag.matmul(attn, v)
            merged = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, L, self.d_model))
            x = ag.add(x, ag.linear(merged, p[f"blocks.{i}.attn.Wo"], p[f"blocks.{i}.attn.bo"]))
            normed2 = ag.layer_norm(x, p[f"blocks.{i}.ln2.gain"], p[f"blocks.{i}.ln2.bias"])
            hidden = ag.tanh(ag.linear(normed2, p[f"blocks.{i}.mlp.W1"], p[f"blocks.{i}.mlp.b1"]))
            x = ag.add(x, ag.linear(hidden, p[f"blocks.{i}.mlp.W2"], p[f"blocks.{i}.mlp.b2"]))
        x = ag.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        logits = ag.linear(x, p["head.W"], p["head.b"])
        return logits[0] if squeeze else logits


@dataclass
class ModelConfig:
    d_enc: int = 32
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    max_len: int = 128
    max_instructions: int = 64
    projector_mode: str = "linear"
    two_tap: bool = False
    encoder_enabled: bool = True
    seed: int = 0
    stage1_done: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ToyModel:
    config: ModelConfig
    vocab: Vocab
    encoder: EncoderStub
    projector: Projector
    decoder: ToyDecoder
    # Feature cache: encoding is deterministic, so reuse across steps.
    _feature_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocab | None = None) -> "ToyModel":
        vocab = vocab or Vocab.default()
        encoder = EncoderStub(
            dim=config.d_enc,
            max_instructions=config.max_instructions,
            seed=config.seed,
            two_tap=config.two_tap,
        )
        projector = Projector(
            in_dim=encoder.output_dim,
            out_dim=config.d_model,
            mode=config.projector_mode,
            seed=config.seed + 1,
        )
        decoder = ToyDecoder(
            vocab_size=len(vocab),
            d_model=config.d_model,
            n_heads=config.n_heads,
            n_layers=config.n_layers,
            max_len=config.max_len,
            seed=config.seed + 2,
        )
        return cls(config=config, vocab=vocab, encoder=encoder,
                   projector=projector, decoder=decoder)

    def code_length(self, fn: AsmFunction) -> int:
        return min(len(fn.instructions), self.encoder.max_instructions)

    def code_features(self, fn: AsmFunction) -> np.ndarray:
        """Encoder features for a function, honoring the encoder ablation."""
        cached = self._feature_cache.get(fn.id)
        if cached is None:
            cached = self.encoder.encode(fn)
            self._feature_cache[fn.id] = cached
        if not self.config.encoder_enabled:
            return np.zeros_like(cached)
        return cached

    def trainable(self, stage: str) -> dict[str, Tensor]:
        if stage == "pretrain":
            return {f"projector.{k}": v for k, v in self.projector.params.items()}
        if stage == "finetune":
            out = {f"projector.{k}": v for k, v in self.projector.params.items()}
            out.update({f"decoder.{k}": v for k, v in self.decoder.params.items()})
            return out
        raise ValueError(f"unknown stage {stage!r}")

    def all_params(self) -> dict[str, Tensor]:
        out = {f"projector.{k}": v for k, v in self.projector.params.items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params.items()})
        return out


# -- the four architecture operations ----------------------------------------


def encode_assembly(fn: AsmFunction, encoder: EncoderStub) -> np.ndarray:
    return encoder.encode(fn)


def project(features: np.ndarray | Tensor, projector: Projector) -> Tensor:
    feats = features if isinstance(features, Tensor) else Tensor(features)
    return projector.apply(feats)


def embed_instruction(ids: np.ndarray, decoder: ToyDecoder) -> Tensor:
    return decoder.embed(ids)


def concat_embeddings(code: Tensor, question: Tensor) -> Tensor:
    if code.shape[-1] != question.shape[-1]:
        raise IntegrityError(
            f"embedding widths differ: {code.shape[-1]} vs {question.shape[-1]}"
        )
    if question.shape[0] == 0:
        return code
    return ag.concat([code, question], axis=0)


# -- checkpoint IO ------------------------------------------------------------


def _params_to_json(params: dict[str, Tensor]) -> dict:
    return {
        name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in sorted(params.items())
    }


def _params_from_json(obj: dict, params: dict[str, Tensor]) -> None:
    if sorted(obj) != sorted(params):
        raise SchemaError("checkpoint parameter names do not match the architecture")
    for name, spec in obj.items():
        data = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        if data.shape != params[name].shape:
            raise SchemaError(f"checkpoint shape mismatch for {name}")
        params[name].data = data


def encoder_state_bytes(model: ToyModel) -> bytes:
    return json.dumps(model.encoder.config(), sort_keys=True).encode("utf-8")


def decoder_state_bytes(model: ToyModel) -> bytes:
    return json.dumps(_params_to_json(model.decoder.params), sort_keys=True).encode("utf-8")


def projector_state_bytes(model: ToyModel) -> bytes:
    return json.dumps(_params_to_json(model.projector.params), sort_keys=True).encode("utf-8")


def save_model(model: ToyModel, path: str | Path) -> None:
    record = {
        "schema": MODEL_SCHEMA,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "encoder": model.encoder.config(),
        "projector": {
            "mode": model.projector.mode,
            "in_dim": model.projector.in_dim,
            "out_dim": model.projector.out_dim,
            "hidden": model.projector.hidden,
            "params": _params_to_json(model.projector.params),
        },
        "decoder": _params_to_json(model.decoder.params),
    }
    Path(path).write_text(json.dumps(record, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> ToyModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    schema = obj.get("schema", "")
    if schema.split("/")[0] != MODEL_SCHEMA.split("/")[0] or schema != MODEL_SCHEMA:
        raise SchemaError(f"{path}: expected schema {MODEL_SCHEMA!r}, got {schema!r}")
    config = ModelConfig.from_dict(obj["config"])
    vocab = Vocab(tokens={t: i for t, i in obj["vocab"].items()})
    model = ToyModel.create(config, vocab=vocab)
    _params_from_json(obj["projector"]["params"], model.projector.params)
    _params_from_json(obj["decoder"], model.decoder.params)
    return model
