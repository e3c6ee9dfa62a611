"""Toy decoder-only transformer.

Pre-norm blocks with RMS normalization, causal multi-head attention and a
single-projection ReLU MLP. Every linear map is bias-free so the MLP output is
exactly downproj_input @ down_projection. Layers are numbered 1..L everywhere
outside this module's internals; residual stream 0 is the embedding.
"""

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from functions.corpus import EOS, PAD, encode, prompt_ids
from functions.errors import (CheckpointFormatError, ConfigError, LayerError,
                              SequenceTooLongError)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LNRM"
CHECKPOINT_VERSION = 1
# optional provenance footer: UTF-8 JSON, u32 length, magic
STAMP_MAGIC = b"LNST"
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 256
    vocab_size: int = 128
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "seed" and value < 1:
                raise ConfigError(f"model config {f.name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_mlp < self.d_model:
            raise ConfigError(f"d_mlp={self.d_mlp} must be >= d_model={self.d_model}")
        if not 0 <= self.seed < 2 ** 32:
            raise ConfigError(f"seed must fit in u32, got {self.seed}")

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class Intervention:
    """Evaluation-time edits: skipped blocks act as identity, shifts are added to
    residual_out of their layer at every position after BOS."""
    skip_layers: frozenset = frozenset()
    residual_shifts: dict = field(default_factory=dict, hash=False)

    @property
    def is_empty(self) -> bool:
        return not self.skip_layers and not self.residual_shifts


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    scheme: str = "symmetric_per_tensor"

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ConfigError(f"quantization bits must be 4 or 8, got {self.bits}")
        if self.scheme != "symmetric_per_tensor":
            raise ConfigError(f"unsupported quantization scheme {self.scheme!r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass
class ActivationTrace:
    residual: np.ndarray        # (L+1, T, d); index 0 is the embedding stream
    attn_out: np.ndarray        # (L, T, d)
    downproj_input: np.ndarray  # (L, T, p)
    mlp_out: np.ndarray         # (L, T, d)
    prompt_len: int

    def residual_out(self, layer: int) -> np.ndarray:
        return self.residual[layer]

    def attn(self, layer: int) -> np.ndarray:
        return self.attn_out[layer - 1]

    def downproj(self, layer: int) -> np.ndarray:
        return self.downproj_input[layer - 1]

    def mlp(self, layer: int) -> np.ndarray:
        return self.mlp_out[layer - 1]


@dataclass
class TrainResult:
    checkpoint: "ModelCheckpoint"
    loss_curve: list
    answer_accuracy: float
    diverged: bool = False


def rms_norm(x, gain):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + NORM_EPS) * gain


def sinusoidal_positions(max_seq_len: int, d_model: int) -> torch.Tensor:
    pe = torch.zeros(max_seq_len, d_model)
    position = torch.arange(0, max_seq_len, dtype=torch.float32).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d_model, 2).float() * -(math.log(10000.0) / d_model))
    pe[:, 0::2] = torch.sin(position * div_term)
    pe[:, 1::2] = torch.cos(position * div_term[: d_model // 2])
    return pe


class Block(nn.Module):
    def __init__(self, d_model, n_heads, d_mlp):
        super().__init__()
        self.n_heads = n_heads
        self.attn_norm = nn.Parameter(torch.ones(d_model))
        self.wq = nn.Parameter(torch.empty(d_model, d_model))
        self.wk = nn.Parameter(torch.empty(d_model, d_model))
        self.wv = nn.Parameter(torch.empty(d_model, d_model))
        self.wo = nn.Parameter(torch.empty(d_model, d_model))
        self.mlp_norm = nn.Parameter(torch.ones(d_model))
        self.up_projection = nn.Parameter(torch.empty(d_model, d_mlp))
        self.down_projection = nn.Parameter(torch.empty(d_mlp, d_model))

    def attention(self, x):
        B, T, d = x.shape
        hd = d // self.n_heads
        xn = rms_norm(x, self.attn_norm)
        q = (xn @ self.wq).view(B, T, self.n_heads, hd).transpose(1, 2)
        k = (xn @ self.wk).view(B, T, self.n_heads, hd).transpose(1, 2)
        v = (xn @ self.wv).view(B, T, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        z = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(B, T, d)
        return z @ self.wo

    def mlp_input(self, x):
        return F.relu(rms_norm(x, self.mlp_norm) @ self.up_projection)


class ModelCheckpoint(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.stamp = {}
        c, d = config.vocab_size, config.d_model
        self.token_embedding = nn.Parameter(torch.empty(c, d))
        self.layers = nn.ModuleList(
            [Block(d, config.n_heads, config.d_mlp) for _ in range(config.n_layers)])
        self.final_norm = nn.Parameter(torch.ones(d))
        self.unembedding = nn.Parameter(torch.empty(c, d))
        self.register_buffer("positions", sinusoidal_positions(config.max_seq_len, d), persistent=False)

    def forward(self, tokens, intervention=None, trace=None):
        B, T = tokens.shape
        if T > self.config.max_seq_len:
            raise SequenceTooLongError(f"sequence of {T} tokens exceeds max_seq_len={self.config.max_seq_len}")
        skip = intervention.skip_layers if intervention else frozenset()
        shifts = intervention.residual_shifts if intervention else {}

        x = self.token_embedding[tokens] + self.positions[:T]
        if trace is not None:
            trace["residual"].append(x)
        for layer, block in enumerate(self.layers, 1):
            if layer in skip:
                attn = torch.zeros_like(x)
                h = x.new_zeros(B, T, self.config.d_mlp)
                mlp = torch.zeros_like(x)
                out = x
            else:
                attn = block.attention(x)
                mid = x + attn
                h = block.mlp_input(mid)
                mlp = h @ block.down_projection
                out = mid + mlp
            if layer in shifts:
                # BOS (position 0) is left alone, as it is in the unlearning vector
                shift = torch.as_tensor(shifts[layer], dtype=out.dtype)
                out = torch.cat([out[:, :1], out[:, 1:] + shift], dim=1)
            if trace is not None:
                trace["residual"].append(out)
                trace["attn_out"].append(attn)
                trace["downproj_input"].append(h)
                trace["mlp_out"].append(mlp)
            x = out
        return self.unembed(x)

    def unembed(self, x):
        return rms_norm(x, self.final_norm) @ self.unembedding.T


def init_model(config: ModelConfig) -> ModelCheckpoint:
    m = ModelCheckpoint(config)
    gen = torch.Generator().manual_seed(config.seed)
    d, p, L = config.d_model, config.d_mlp, config.n_layers
    with torch.no_grad():
        m.token_embedding.normal_(0.0, 1.0, generator=gen)
        m.unembedding.normal_(0.0, d ** -0.5, generator=gen)
        for block in m.layers:
            for w in (block.wq, block.wk, block.wv, block.up_projection):
                w.normal_(0.0, d ** -0.5, generator=gen)
            block.wo.normal_(0.0, d ** -0.5 / math.sqrt(2 * L), generator=gen)
            block.down_projection.normal_(0.0, p ** -0.5 / math.sqrt(2 * L), generator=gen)
    return m


def named_tensors(m: ModelCheckpoint) -> dict:
    tensors = {"token_embedding": m.token_embedding}
    for layer, block in enumerate(m.layers, 1):
        for name in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "up_projection", "down_projection"):
            tensors[f"layers.{layer}.{name}"] = getattr(block, name)
    tensors["final_norm"] = m.final_norm
    tensors["unembedding"] = m.unembedding
    return tensors


def down_projection_name(layer: int) -> str:
    return f"layers.{layer}.down_projection"


def check_layer(m: ModelCheckpoint, layer: int):
    if not 1 <= layer <= m.config.n_layers:
        raise LayerError(f"layer {layer} out of range [1, {m.config.n_layers}]")


def get_down_projection(m: ModelCheckpoint, layer: int) -> np.ndarray:
    check_layer(m, layer)
    return m.layers[layer - 1].down_projection.detach().numpy().copy()


def set_down_projection(m: ModelCheckpoint, layer: int, weights):
    check_layer(m, layer)
    target = m.layers[layer - 1].down_projection
    weights = torch.as_tensor(np.asarray(weights, dtype=np.float32))
    if weights.shape != target.shape:
        raise LayerError(f"down_projection of layer {layer} is {tuple(target.shape)}, got {tuple(weights.shape)}")
    with torch.no_grad():
        target.copy_(weights)


def parameter_count(m: ModelCheckpoint) -> int:
    return sum(t.numel() for t in named_tensors(m).values())


def forward(m: ModelCheckpoint, tokens, capture: bool = False, intervention=None, prompt_len=None):
    """Logits (T, c) for one sequence, plus an ActivationTrace when capture is set."""
    ids = torch.as_tensor(list(tokens), dtype=torch.long).unsqueeze(0)
    trace = {"residual": [], "attn_out": [], "downproj_input": [], "mlp_out": []} if capture else None
    with torch.no_grad():
        logits = m(ids, intervention=intervention, trace=trace)
    logits = logits[0].numpy()
    if not capture:
        return logits, None

    def stack(name):
        return torch.stack([t[0] for t in trace[name]]).numpy()

    return logits, ActivationTrace(
        residual=stack("residual"),
        attn_out=stack("attn_out"),
        downproj_input=stack("downproj_input"),
        mlp_out=stack("mlp_out"),
        prompt_len=len(tokens) if prompt_len is None else prompt_len,
    )


def greedy_decode(m: ModelCheckpoint, prompt, max_new: int, intervention=None):
    ids = list(prompt)
    out = []
    for _ in range(max_new):
        if len(ids) >= m.config.max_seq_len:
            logger.debug("decode stopped at max_seq_len=%d after %d new tokens", m.config.max_seq_len, len(out))
            break
        logits, _ = forward(m, ids, intervention=intervention)
        # np.argmax keeps the first maximum, so ties go to the lowest id
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


def rank_of_token(logits, target: int) -> int:
    logits = np.asarray(logits)
    return 1 + int(np.sum(logits > logits[target]))


def answer_ranks(m: ModelCheckpoint, vocab, record, intervention=None):
    """Teacher-forced rank of every answer token given the question prefix."""
    prompt = prompt_ids(vocab, record.question)
    answer = encode(vocab, record.answer, add_specials=False)
    logits, _ = forward(m, prompt + answer[:-1], intervention=intervention)
    return [rank_of_token(logits[len(prompt) - 1 + i], tok) for i, tok in enumerate(answer)]


def _training_example(vocab, record):
    prompt = prompt_ids(vocab, record.question)
    ids = prompt + encode(vocab, record.answer, add_specials=False) + [EOS]
    inputs, targets = ids[:-1], ids[1:]
    # question tokens are masked out of the loss
    mask = [0.0] * (len(prompt) - 1) + [1.0] * (len(targets) - len(prompt) + 1)
    return inputs, targets, mask


def _collate(examples):
    width = max(len(e[0]) for e in examples)
    inputs = torch.full((len(examples), width), PAD, dtype=torch.long)
    targets = torch.full((len(examples), width), PAD, dtype=torch.long)
    mask = torch.zeros(len(examples), width)
    for i, (x, y, w) in enumerate(examples):
        inputs[i, : len(x)] = torch.tensor(x)
        targets[i, : len(y)] = torch.tensor(y)
        mask[i, : len(w)] = torch.tensor(w)
    return inputs, targets, mask


def answer_accuracy(m: ModelCheckpoint, vocab, records) -> float:
    hits, total = 0, 0
    for record in records:
        ranks = answer_ranks(m, vocab, record)
        hits += sum(r == 1 for r in ranks)
        total += len(ranks)
    return hits / total if total else 0.0


def train(m: ModelCheckpoint, vocab, records, epochs: int, lr: float, batch: int,
          momentum: float = 0.9, seed=None) -> TrainResult:
    if not records:
        raise ValueError("train needs at least one record")
    seed = m.config.seed if seed is None else seed
    model = copy.deepcopy(m)
    examples = [_training_example(vocab, r) for r in records]
    for x, _, _ in examples:
        if len(x) > model.config.max_seq_len:
            raise SequenceTooLongError(f"training sequence of {len(x)} tokens exceeds max_seq_len")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    loss_curve = []
    diverged = False

    model.train()
    for epoch in tqdm(range(epochs), desc="train", disable=not logger.isEnabledFor(logging.INFO)):
        last_good = copy.deepcopy(model.state_dict())
        order = rng.permutation(len(examples))
        epoch_losses = []
        for start in range(0, len(order), batch):
            inputs, targets, mask = _collate([examples[i] for i in order[start:start + batch]])
            logits = model(inputs)
            token_loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                                         reduction="none").view_as(mask)
            loss = (token_loss * mask).sum() / mask.sum()
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            optimizer.step()
            epoch_losses.append(loss.item())
        if diverged:
            model.load_state_dict(last_good)
            logger.warning("training diverged at epoch %d; keeping the last good checkpoint", epoch + 1)
            break
        loss_curve.append(float(np.mean(epoch_losses)))
        if (epoch + 1) % 50 == 0:
            logger.info("epoch %d/%d loss %.4f", epoch + 1, epochs, loss_curve[-1])
    model.eval()

    accuracy = answer_accuracy(model, vocab, records)
    logger.info("training finished: %d epochs, answer-token accuracy %.3f", len(loss_curve), accuracy)
    return TrainResult(checkpoint=model, loss_curve=loss_curve, answer_accuracy=accuracy, diverged=diverged)


def quantize_tensor(w: np.ndarray, bits: int):
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = amax / qmax if amax > 0 else 1.0
    q = np.clip(np.round(w.astype(np.float64) / scale), -qmax, qmax)
    return (q * scale).astype(np.float32), scale


def quantize(m: ModelCheckpoint, spec: QuantSpec) -> ModelCheckpoint:
    """Symmetric per-tensor round-to-grid on every weight tensor."""
    qm = copy.deepcopy(m)
    with torch.no_grad():
        for name, tensor in named_tensors(qm).items():
            values, scale = quantize_tensor(tensor.detach().numpy(), spec.bits)
            tensor.copy_(torch.from_numpy(values))
            logger.debug("quantized %s to %d bits, scale %.4e", name, spec.bits, scale)
    return qm


def append_stamp(body: bytes, stamp) -> bytes:
    if not stamp:
        return bytes(body)
    encoded = json.dumps(stamp, sort_keys=True).encode("utf-8")
    return bytes(body) + encoded + struct.pack("<I", len(encoded)) + STAMP_MAGIC


def split_stamp(data: bytes, path):
    """Strip a provenance footer if present. Returns (body, stamp)."""
    if len(data) < 8 or data[-4:] != STAMP_MAGIC:
        return data, {}
    (size,) = struct.unpack_from("<I", data, len(data) - 8)
    start = len(data) - 8 - size
    if start < 0:
        raise CheckpointFormatError(f"{path}: stamp footer claims {size} bytes, file has {len(data)}")
    try:
        stamp = json.loads(data[start:len(data) - 8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable stamp footer ({exc})") from exc
    if not isinstance(stamp, dict):
        raise CheckpointFormatError(f"{path}: stamp footer is not an object")
    return data[:start], stamp


# Function to write the LNRM checkpoint format
def save_checkpoint(m: ModelCheckpoint, path, stamp=None):
    path = Path(path)
    payloads = []
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<7I", *m.config.as_tuple())
    for name, tensor in named_tensors(m).items():
        values = tensor.detach().numpy().astype("<f4")
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape)
        payload = values.tobytes(order="C")
        payloads.append(payload)
        body += payload
    crc = 0
    for payload in payloads:
        crc = zlib.crc32(payload, crc)
    body += struct.pack("<I", crc)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(append_stamp(body, stamp if stamp is not None else m.stamp))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    data, stamp = split_stamp(path.read_bytes(), path)
    header = 4 + 4 + 7 * 4
    if len(data) < header + 4:
        raise CheckpointFormatError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig(*struct.unpack_from("<7I", data, 8))
    except ConfigError as exc:
        raise CheckpointFormatError(f"{path}: invalid model config ({exc})") from exc

    def need(offset, size):
        if offset + size > len(data) - 4:
            raise CheckpointFormatError(f"{path}: truncated tensor table at byte {offset}")

    tensors = {}
    crc = 0
    offset = header
    while offset < len(data) - 4:
        need(offset, 2)
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        need(offset, name_len + 1)
        try:
            name = data[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: tensor name at byte {offset} is not UTF-8") from exc
        offset += name_len
        (rank,) = struct.unpack_from("<B", data, offset)
        offset += 1
        need(offset, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = 4 * int(np.prod(shape, dtype=np.int64))
        need(offset, size)
        payload = data[offset:offset + size]
        crc = zlib.crc32(payload, crc)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
        offset += size

    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if stored_crc != crc:
        raise CheckpointFormatError(f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {crc:#010x})")

    m = ModelCheckpoint(config)
    expected = named_tensors(m)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointFormatError(f"{path}: tensor table mismatch, missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, tensor in expected.items():
            if tuple(tensor.shape) != tensors[name].shape:
                raise CheckpointFormatError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                                            f"expected {tuple(tensor.shape)}")
            tensor.copy_(torch.from_numpy(tensors[name].astype(np.float32)))
    m.stamp = stamp
    m.eval()
    return m
