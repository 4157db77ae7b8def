"""A tiny byte-level decoder-only transformer for comparing attention variants.

Only the attention masks depend on the variant. Parameter names, shapes and the
order of initialisation draws are fixed, and batches come from a generator that is
seeded independently of the model, so runs with the same seed see the same data.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Tensor
from .errors import CorpusError, InvalidArgumentError, NumericError, TrainingDivergedError
from .kernels import banded_attention, flops_count, masked_dense_attention
from .metrics import MetricsReport, aggregate_reports, make_report
from .partition import HeadMask, MaskVariant, VariantKind, build_mask, compute_partition

log = logging.getLogger(__name__)

DTYPE = np.float32
CHECKPOINT_MAGIC = b"BATTNCK1"


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 8
    d_model: int = 128
    seq_len: int = 256
    vocab_size: int = 0
    variant: str = "SPA"
    seed: int = 0
    learning_rate: float = 3e-4
    batch_size: int = 16
    steps: int = 300

    def __post_init__(self):
        self.variant = str(MaskVariant.parse(self.variant))
        if self.heads < 1 or self.d_model % self.heads:
            raise InvalidArgumentError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.seq_len < self.heads:
            raise InvalidArgumentError(f"seq_len={self.seq_len} must be >= heads={self.heads}")
        if self.layers < 1 or self.batch_size < 1 or self.steps < 0:
            raise InvalidArgumentError("layers and batch_size must be >= 1, steps >= 0")

    @property
    def mask_variant(self) -> MaskVariant:
        return MaskVariant.parse(self.variant)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise InvalidArgumentError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Corpus:
    vocab: tuple[int, ...]
    train: np.ndarray
    val: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def decode(self, ids) -> str:
        return bytes(self.vocab[i] for i in ids).decode("utf-8", errors="replace")


def load_corpus(path: str | Path, seq_len: int = 256) -> Corpus:
    """Byte-level tokens of a UTF-8 file; the last 5% of tokens are validation.

    Ids follow first appearance in the file.
    """
    path = Path(path)
    minimum = 10 * seq_len
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc.strerror}") from exc
    if len(raw) < minimum:
        raise CorpusError(
            f"corpus {path} has {len(raw)} bytes; at least {minimum} (10 x seq_len) are required"
        )
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"corpus {path} is not valid UTF-8: {exc}") from exc
    arr = np.frombuffer(raw, dtype=np.uint8)
    _, first = np.unique(arr, return_index=True)
    vocab = tuple(int(arr[i]) for i in np.sort(first))
    lut = np.zeros(256, dtype=np.int64)
    lut[list(vocab)] = np.arange(len(vocab))
    ids = lut[arr]
    split = int(len(ids) * 0.95)
    return Corpus(vocab, ids[:split], ids[split:])


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = [("tok_emb", (v, d)), ("pos_emb", (cfg.seq_len, d))]
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w1", (d, 4 * d)), (p + "b1", (4 * d,)),
            (p + "w2", (4 * d, d)), (p + "b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head", (d, v))]
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights ~ N(0, 0.02); biases and LayerNorm shifts 0, LayerNorm gains 1."""
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=DTYPE)
        elif leaf.startswith("b"):
            data = np.zeros(shape, dtype=DTYPE)
        else:
            data = (rng.standard_normal(shape) * 0.02).astype(DTYPE)
        params[name] = Tensor(data, requires_grad=True)
    return params


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def model_masks(cfg: ModelConfig) -> list[HeadMask]:
    return build_mask(compute_partition(cfg.seq_len, cfg.heads), cfg.mask_variant)


def _slice_masks(masks: list[HeadMask], length: int) -> list[HeadMask]:
    if length == masks[0].seq_len:
        return masks
    return [HeadMask(m.head, length, m.lo[:length], m.hi[:length], m.band) for m in masks]


def forward(
    params: dict[str, Tensor],
    ids: np.ndarray,
    cfg: ModelConfig,
    masks: list[HeadMask],
    capture: list | None = None,
) -> Tensor:
    """Logits ``(B, L, vocab)`` for token ids ``(B, L)``, ``L <= seq_len``.

    When ``capture`` is a list, each layer's dense attention probabilities are
    appended to it.
    """
    b, length = ids.shape
    if length > cfg.seq_len:
        raise InvalidArgumentError(f"sequence of {length} tokens exceeds seq_len={cfg.seq_len}")
    masks = _slice_masks(masks, length)
    h, d = cfg.heads, cfg.d_model
    dense = cfg.mask_variant.kind is VariantKind.STANDARD
    x = ag.add(ag.embedding_lookup(params["tok_emb"], ids), ag.embedding_lookup(params["pos_emb"], np.arange(length)))

    def linear(t, w, bias):
        return ag.add(ag.matmul(t, params[w]), params[bias])

    def heads_of(t):
        return ag.transpose(ag.reshape(t, (b, length, h, d // h)), (0, 2, 1, 3))

    for l in range(cfg.layers):
        p = f"blocks.{l}."
        a = ag.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = heads_of(linear(a, p + "wq", p + "bq"))
        k = heads_of(linear(a, p + "wk", p + "bk"))
        v = heads_of(linear(a, p + "wv", p + "bv"))
        if dense:
            att, probs = masked_dense_attention(q, k, v, masks)
            probs = probs.data
        else:
            res = banded_attention(q, k, v, masks, capture=capture is not None)
            att, probs = res if capture is not None else (res, None)
        if capture is not None:
            capture.append(probs)
        x = ag.add(x, linear(att, p + "wo", p + "bo"))
        f = ag.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        f = linear(ag.gelu(linear(f, p + "w1", p + "b1")), p + "w2", p + "b2")
        x = ag.add(x, f)
    x = ag.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return ag.matmul(x, params["head"])


@dataclass
class CurvePoint:
    step: int
    loss: float
    tokens_per_sec: float


@dataclass
class TrainState:
    config: ModelConfig
    params: dict[str, Tensor]
    adam: AdamState
    step: int
    rng: np.random.Generator
    running_loss: float | None = None
    curve: list[CurvePoint] = field(default_factory=list)


def new_state(cfg: ModelConfig) -> TrainState:
    if cfg.vocab_size < 1:
        raise InvalidArgumentError("vocab_size must be set (from the corpus) before training")
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(cfg, np.random.Generator(np.random.PCG64(init_seq)))
    return TrainState(cfg, params, AdamState(), 0, np.random.Generator(np.random.PCG64(data_seq)))


def sample_batch(rng: np.random.Generator, tokens: np.ndarray, batch: int, seq_len: int):
    starts = rng.integers(0, len(tokens) - seq_len - 1, size=batch)
    idx = starts[:, None] + np.arange(seq_len + 1)
    window = tokens[idx]
    return window[:, :-1], window[:, 1:]


def loss_on(state: TrainState, x: np.ndarray, y: np.ndarray, masks) -> Tensor:
    logits = forward(state.params, x, state.config, masks)
    return ag.cross_entropy_loss(logits, y)


def train(
    cfg: ModelConfig,
    corpus: Corpus,
    state: TrainState | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 100,
    on_step: Callable[[CurvePoint], None] | None = None,
) -> tuple[TrainState, list[CurvePoint]]:
    """Run ``cfg.steps`` Adam updates (continuing ``state`` if given).

    The curve holds, for every step ``t``, the loss of the batch drawn at ``t`` under
    the parameters after ``t`` updates; a final point at ``t = steps`` is measured on
    one more batch without updating. Checkpoints go to ``checkpoint_dir`` every
    ``checkpoint_every`` steps and at the end (a step-0 checkpoint when ``steps == 0``).
    """
    if cfg.vocab_size == 0:
        cfg = dataclasses.replace(cfg, vocab_size=corpus.vocab_size)
    if state is None:
        state = new_state(cfg)
    masks = model_masks(cfg)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    target = state.step + cfg.steps
    curve: list[CurvePoint] = []
    tokens = cfg.batch_size * cfg.seq_len
    last_finite = None
    while True:
        t0 = time.perf_counter()
        updating = state.step < target
        # the closing measurement must not consume the data stream
        rng = state.rng if updating else copy.deepcopy(state.rng)
        x, y = sample_batch(rng, corpus.train, cfg.batch_size, cfg.seq_len)
        try:
            loss = loss_on(state, x, y, masks)
        except NumericError as exc:
            raise TrainingDivergedError(
                f"loss became non-finite at step {state.step} (last finite loss {last_finite}): {exc}"
            ) from exc
        value = float(loss.data)
        last_finite = value
        if updating:
            for p in state.params.values():
                p.grad = None
            loss.backward()
            ag.adam_step(state.params, state.adam, cfg.learning_rate)
        dt = time.perf_counter() - t0
        point = CurvePoint(state.step, value, tokens / dt if dt > 0 else float("inf"))
        curve.append(point)
        state.curve.append(point)
        state.running_loss = value if state.running_loss is None else 0.9 * state.running_loss + 0.1 * value
        if on_step is not None:
            on_step(point)
        if not updating:
            break
        state.step += 1
        if ckdir is not None and checkpoint_every > 0 and state.step % checkpoint_every == 0 and state.step != target:
            save_checkpoint(state, ckdir / f"step_{state.step:06d}.ckpt")
    if ckdir is not None:
        save_checkpoint(state, ckdir / f"step_{state.step:06d}.ckpt")
    return state, curve


def write_curve_csv(curve: list[CurvePoint], path_or_file) -> None:
    lines = ["step,loss,tokens_per_sec"]
    lines += [f"{p.step},{p.loss!r},{p.tokens_per_sec:.1f}" for p in curve]
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text)


@dataclass(frozen=True)
class EvalResult:
    loss: float
    perplexity: float
    tokens: int

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def validation_windows(val: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    length = min(seq_len, len(val) - 1)
    if length < 1:
        raise CorpusError("validation split is too short")
    count = (len(val) - 1) // length
    idx = np.arange(count)[:, None] * length + np.arange(length + 1)
    w = val[idx]
    return w[:, :-1], w[:, 1:]


def evaluate(state: TrainState, corpus: Corpus) -> EvalResult:
    """Mean cross-entropy over non-overlapping validation windows."""
    cfg = state.config
    masks = model_masks(cfg)
    xs, ys = validation_windows(corpus.val, cfg.seq_len)
    total, count = 0.0, 0
    for i in range(0, len(xs), cfg.batch_size):
        x, y = xs[i : i + cfg.batch_size], ys[i : i + cfg.batch_size]
        loss = loss_on(state, x, y, masks)
        total += float(loss.data) * y.size
        count += y.size
    mean = total / count
    return EvalResult(mean, math.exp(mean), count)


def collect_attention_stats(state: TrainState, batch: np.ndarray) -> dict:
    """Per-layer and aggregate :class:`MetricsReport` for one batch of ids."""
    cfg = state.config
    masks = model_masks(cfg)
    captured: list[np.ndarray] = []
    forward(state.params, np.asarray(batch), cfg, masks, capture=captured)
    length = batch.shape[1]
    layer_masks = _slice_masks(masks, length)
    d_k = cfg.d_model // cfg.heads
    flops = flops_count(cfg.mask_variant, cfg.seq_len, cfg.heads, d_k).to_json()
    echo = cfg.to_json() | {"step": state.step, "batch_shape": list(batch.shape)}
    layers = [make_report(p, layer_masks, flops, echo | {"layer": i}) for i, p in enumerate(captured)]
    return {"layers": layers, "aggregate": aggregate_reports(layers, echo)}


def _state_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, p.data) for name, p in state.params.items()]
    for name in state.params:
        if name in state.adam.m:
            arrays.append((f"adam.m/{name}", state.adam.m[name]))
            arrays.append((f"adam.v/{name}", state.adam.v[name]))
    return arrays


def save_checkpoint(state: TrainState, path: str | Path, metrics: dict | None = None) -> Path:
    """Write ``magic | u64 header length | JSON header | little-endian f32 blob``."""
    index = []
    blobs = []
    offset = 0
    for name, arr in _state_arrays(state):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "banded-attn-checkpoint/1",
        "config": state.config.to_json(),
        "step": state.step,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "metrics": {"running_loss": state.running_loss} | (metrics or {}),
        "tensors": index,
        "blob_nbytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + n])
    blob = memoryview(data)[pos + n :]
    if len(blob) != header["blob_nbytes"]:
        raise ValueError(f"{path}: blob is {len(blob)} bytes, header says {header['blob_nbytes']}")
    cfg = ModelConfig.from_json(header["config"])
    arrays = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(entry["shape"])
    params = {}
    for name, shape in param_shapes(cfg):
        arr = arrays[name]
        if tuple(arr.shape) != shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != expected {shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True)
    adam = AdamState(step=header["adam_step"])
    for name in params:
        if f"adam.m/{name}" in arrays:
            adam.m[name] = arrays[f"adam.m/{name}"].copy()
            adam.v[name] = arrays[f"adam.v/{name}"].copy()
    bitgen = np.random.PCG64()
    bitgen.state = header["rng_state"]
    return TrainState(
        cfg, params, adam, header["step"], np.random.Generator(bitgen), header["metrics"].get("running_loss")
    )
