"""Small pre-norm transformer encoder with dense, lexical and multi-vector heads.

All training-path arithmetic is float64. Parameters live in an ordered dict of
torch tensors so that autograd can differentiate any objective built on top of
:func:`forward`.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import CheckpointError, DataError, NumericError
from .tokenize import CLS_ID, PAD_ID, TokenSeq, Vocab

DTYPE = torch.float64


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 128
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "dim", "layers", "heads", "ffn_mult"):
            if getattr(self, name) < 1:
                raise DataError(f"EncoderConfig.{name} must be >= 1")
        if self.max_len < 2:
            raise DataError("EncoderConfig.max_len must be >= 2")
        if self.dim % self.heads:
            raise DataError(f"dim={self.dim} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def param_shapes(cfg: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, f = cfg.dim, cfg.dim * cfg.ffn_mult
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["tok_emb"] = (cfg.vocab_size, d)
    shapes["pos_emb"] = (cfg.max_len, d)
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        for m in ("wq", "wk", "wv", "wo"):
            shapes[p + m] = (d, d)
            shapes[p + "b" + m[1]] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "w1"] = (d, f)
        shapes[p + "b1"] = (f,)
        shapes[p + "w2"] = (f, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["w_lex"] = (d,)
    shapes["w_col"] = (d, d)
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def clone(self) -> "EncoderParams":
        return EncoderParams(self.config, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(t.detach().contiguous().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init_encoder(config: EncoderConfig) -> EncoderParams:
    """Layer-norm gains start at 1 and shifts at 0; every other tensor is
    drawn uniformly from [-1/sqrt(d), 1/sqrt(d)] in name order from a PCG64
    stream seeded with ``config.seed``."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    bound = 1.0 / math.sqrt(config.dim)
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln") and leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("ln") and leaf.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    return EncoderParams(config, tensors)


class Encoded(NamedTuple):
    """Batched encoder output. Token axes exclude the CLS position."""

    dense: torch.Tensor  # (B, d) unit rows
    lexical: torch.Tensor  # (B, N) non-negative, zero on padding
    multi: torch.Tensor  # (B, N, d) unit rows on valid positions
    mask: torch.Tensor  # (B, N) bool
    ids: torch.Tensor  # (B, N) long, PAD on padding


def pad_batch(seqs: Sequence[TokenSeq], max_len: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """CLS-prefixed, PAD-filled id matrix and its validity mask."""
    longest = max((len(s) for s in seqs), default=0)
    if longest + 1 > max_len:
        raise DataError(f"sequence of {longest} tokens exceeds max_len={max_len} (CLS included)")
    width = longest + 1
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    ids[:, 0] = CLS_ID
    mask[:, 0] = True
    for i, s in enumerate(seqs):
        n = len(s)
        if n:
            ids[i, 1 : n + 1] = torch.tensor(s.ids, dtype=torch.long)
            mask[i, 1 : n + 1] = True
    return ids, mask


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def _gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def forward(tensors: Dict[str, torch.Tensor], cfg: EncoderConfig, ids: torch.Tensor, mask: torch.Tensor) -> Encoded:
    bsz, width = ids.shape
    d, nh, hd = cfg.dim, cfg.heads, cfg.head_dim
    x = tensors["tok_emb"][ids] + tensors["pos_emb"][:width]
    key_bias = torch.zeros((bsz, 1, 1, width), dtype=DTYPE).masked_fill(~mask[:, None, None, :], float("-inf"))
    for l in range(cfg.layers):
        p = f"layer{l}."
        a = _layer_norm(x, tensors[p + "ln1_g"], tensors[p + "ln1_b"])
        q = (a @ tensors[p + "wq"] + tensors[p + "bq"]).view(bsz, width, nh, hd).transpose(1, 2)
        k = (a @ tensors[p + "wk"] + tensors[p + "bk"]).view(bsz, width, nh, hd).transpose(1, 2)
        v = (a @ tensors[p + "wv"] + tensors[p + "bv"]).view(bsz, width, nh, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd) + key_bias, dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(bsz, width, d)
        x = x + ctx @ tensors[p + "wo"] + tensors[p + "bo"]
        f = _layer_norm(x, tensors[p + "ln2_g"], tensors[p + "ln2_b"])
        x = x + _gelu(f @ tensors[p + "w1"] + tensors[p + "b1"]) @ tensors[p + "w2"] + tensors[p + "b2"]
    h = _layer_norm(x, tensors["lnf_g"], tensors["lnf_b"])

    cls = h[:, 0]
    dense = cls / cls.norm(dim=-1, keepdim=True)
    tok = h[:, 1:]
    tok_mask = mask[:, 1:]
    lexical = torch.relu(tok @ tensors["w_lex"]) * tok_mask
    proj = tok @ tensors["w_col"]
    norms = proj.norm(dim=-1, keepdim=True)
    # padding rows may be anything finite; keep them away from a 0/0
    norms = torch.where(tok_mask[..., None], norms, torch.ones_like(norms))
    multi = proj / norms
    return Encoded(dense, lexical, multi, tok_mask, ids[:, 1:])


def encode_tensors(params: EncoderParams, seqs: Sequence[TokenSeq], tensors: Optional[Dict[str, torch.Tensor]] = None) -> Encoded:
    ids, mask = pad_batch(seqs, params.config.max_len)
    out = forward(tensors if tensors is not None else params.tensors, params.config, ids, mask)
    return out


@dataclass
class MultiRepresentation:
    dense: np.ndarray
    lexical_weights: np.ndarray
    multi_vectors: np.ndarray
    tokens: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def _to_reprs(out: Encoded, seqs: Sequence[TokenSeq]) -> List[MultiRepresentation]:
    dense = out.dense.detach().numpy()
    lex = out.lexical.detach().numpy()
    multi = out.multi.detach().numpy()
    if not (np.isfinite(dense).all() and np.isfinite(lex).all() and np.isfinite(multi).all()):
        raise NumericError("non-finite activations in encoder output")
    reps = []
    for i, s in enumerate(seqs):
        n = len(s)
        reps.append(
            MultiRepresentation(
                dense[i].copy(),
                lex[i, :n].copy(),
                multi[i, :n].copy(),
                tuple(s.tokens),
            )
        )
    return reps


def encode(params: EncoderParams, seq: TokenSeq) -> MultiRepresentation:
    with torch.no_grad():
        out = encode_tensors(params, [seq])
    return _to_reprs(out, [seq])[0]


def encode_batch(params: EncoderParams, seqs: Sequence[TokenSeq], batch_size: int = 256) -> List[MultiRepresentation]:
    """Encode many sequences; each chunk is padded only to its own longest member."""
    reps: List[MultiRepresentation] = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = list(seqs[start : start + batch_size])
            reps.extend(_to_reprs(encode_tensors(params, chunk), chunk))
    return reps


def dense_embeddings(params: EncoderParams, seqs: Sequence[TokenSeq], batch_size: int = 256) -> np.ndarray:
    rows = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            out = encode_tensors(params, list(seqs[start : start + batch_size]))
            rows.append(out.dense.numpy())
    if not rows:
        return np.zeros((0, params.config.dim))
    emb = np.concatenate(rows)
    if not np.isfinite(emb).all():
        raise NumericError("non-finite dense embeddings")
    return emb


# --- gradients ---------------------------------------------------------------


@dataclass
class GradientSet:
    grads: "OrderedDict[str, torch.Tensor]"
    loss: float = float("nan")
    aux: Optional[dict] = None

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.grads[name]

    def global_norm(self) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in self.grads.values()))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(OrderedDict((k, g * factor) for k, g in self.grads.items()), self.loss, self.aux)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(OrderedDict((k, g + other.grads[k]) for k, g in self.grads.items()), self.loss + other.loss)


Objective = Callable[[Dict[str, torch.Tensor], object], torch.Tensor]


def backward(params: EncoderParams, batch: object, objective: Objective) -> GradientSet:
    """Exact gradient of ``objective(tensors, batch)`` w.r.t. every parameter tensor.

    Tensors the objective never touches get an all-zero gradient. The objective
    may return ``(loss, aux)``; ``aux`` is detached and kept on the result.
    """
    leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.tensors.items())
    loss = objective(leaves, batch)
    aux = None
    if isinstance(loss, tuple):
        loss, aux = loss
        aux = {k: v.detach() for k, v in aux.items()}
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in tensor {name!r}")
        out[name] = g
    return GradientSet(out, float(loss.detach()), aux)


def _scalar(out) -> float:
    return float(out[0] if isinstance(out, tuple) else out)


def finite_difference(params: EncoderParams, batch: object, objective: Objective, h: float = 1e-5) -> "OrderedDict[str, torch.Tensor]":
    """Central differences, one coordinate at a time."""
    base = OrderedDict((k, v.detach().clone()) for k, v in params.tensors.items())
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    with torch.no_grad():
        for name, t in base.items():
            flat = t.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = _scalar(objective(base, batch))
                flat[i] = orig - h
                down = _scalar(objective(base, batch))
                flat[i] = orig
                g[i] = (up - down) / (2 * h)
            out[name] = g.view(t.shape)
    return out


def relative_errors(analytic: GradientSet, numeric: Dict[str, torch.Tensor], floor: float = 1e-10) -> Dict[str, float]:
    """Per-tensor ||a - n|| / max(||a||, ||n||, floor)."""
    errs = {}
    for name, a in analytic.grads.items():
        n = numeric[name]
        denom = max(float(a.norm()), float(n.norm()), floor)
        errs[name] = float((a - n).norm()) / denom
    return errs


# --- checkpoints -------------------------------------------------------------

MAGIC = b"TRMCKPT\x00"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: EncoderParams, vocab: Optional[Vocab] = None, extra: Optional[dict] = None) -> None:
    """Header: magic, u32 version, u32 header length, JSON header. Body: tensors
    in header order as row-major float64 little-endian, then a sha256 of
    everything before it."""
    header = {
        "config": asdict(params.config),
        "seed": params.config.seed,
        "tensors": [[name, list(t.shape)] for name, t in params.tensors.items()],
        "vocab": [vocab.token(i) for i in range(len(vocab))] if vocab is not None else None,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(hbytes))
    body += hbytes
    for t in params.tensors.values():
        body += t.detach().contiguous().numpy().astype("<f8").tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path) -> Tuple[EncoderParams, Optional[Vocab], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = len(MAGIC) + 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    cfg = EncoderConfig(**header["config"])
    expected = param_shapes(cfg)
    listed = OrderedDict((n, tuple(s)) for n, s in header["tensors"])
    if listed != expected:
        raise CheckpointError(f"{path}: tensor shapes do not match the stored EncoderConfig")
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, shape in expected.items():
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    vocab = Vocab({tok: i for i, tok in enumerate(header["vocab"])}) if header.get("vocab") else None
    return EncoderParams(cfg, tensors), vocab, header.get("extra", {})
