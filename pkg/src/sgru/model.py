"""Structured GRU network for graph traffic forecasting.

Shapes below use B for batch, P input steps, F output steps, N nodes,
D input channels, d node-embedding width for the adjacency, d_emb the
embedded feature width and H the hidden width. Every forward function accepts
an optional leading batch axis.
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, NumericError, Tensor

FORMAT_VERSION = 1
CELL_NAMES = ("a", "b", "c", "d", "e")
CONN_TARGETS = ("c", "d", "e")

# named sub-streams of the single run seed
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_NOISE = 2


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


class Variant(str, Enum):
    SIMPLE = "simple"
    W_ST_EMB = "w_st_emb"
    W_STRUCT = "w_struct"
    SGRU = "sgru"

    @property
    def structured(self) -> bool:
        return self in (Variant.W_STRUCT, Variant.SGRU)

    @property
    def st_embedding(self) -> bool:
        return self in (Variant.W_ST_EMB, Variant.SGRU)


@dataclass(frozen=True)
class ModelDims:
    P: int = 12
    F: int = 12
    N: int = 4
    D: int = 1
    D_out: int = 1
    d: int = 2
    d_emb: int = 16
    H: int = 64

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if int(v) != v or v < 1:
                raise ValueError(f"dimension {k} must be a positive integer, got {v!r}")


class _ParamGroup:
    """Dataclass mixin yielding (dotted name, leaf) pairs in field order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, _ParamGroup):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, dict):
                for key, sub in value.items():
                    yield from sub.named_parameters(f"{name}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


@dataclass
class AdjacencyParams(_ParamGroup):
    E1: Tensor
    E2: Tensor


@dataclass
class EmbeddingParams(_ParamGroup):
    W_e: Tensor
    b_e: Tensor
    # absent for the variants without spatio-temporal embedding
    E_space: Tensor | None = None
    E_time: Tensor | None = None


@dataclass
class CellParams(_ParamGroup):
    Ws1: Tensor
    bs1: Tensor
    Ws2: Tensor
    bs2: Tensor
    Wa: Tensor
    ba: Tensor
    Wz: Tensor
    bz: Tensor
    Wr: Tensor
    br: Tensor
    Wc: Tensor
    bc: Tensor


@dataclass
class ConnParams(_ParamGroup):
    W_ac: Tensor
    b_ac: Tensor
    W_bc: Tensor
    b_bc: Tensor
    W_ad: Tensor
    b_ad: Tensor
    W_bd: Tensor
    b_bd: Tensor
    W_ae: Tensor
    b_ae: Tensor
    W_be: Tensor
    b_be: Tensor

    def branch(self, q: str) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (getattr(self, f"W_a{q}"), getattr(self, f"b_a{q}"),
                getattr(self, f"W_b{q}"), getattr(self, f"b_b{q}"))


@dataclass
class HeadParams(_ParamGroup):
    W: Tensor
    b: Tensor


@dataclass
class SgruParams(_ParamGroup):
    adjacency: AdjacencyParams
    embedding: EmbeddingParams
    cells: dict[str, CellParams]
    conn: ConnParams | None
    head: HeadParams
    variant: Variant = field(default=Variant.SGRU, metadata={"static": True})
    dims: ModelDims = field(default_factory=ModelDims, metadata={"static": True})


def parameter_count(params: _ParamGroup) -> int:
    return sum(p.size for _, p in params.named_parameters())


# ------------------------------------------------------------ initialisation

def _xavier(rng, rows: int, cols: int, name: str) -> Tensor:
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _embedding(rng, shape, scale: float, name: str) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def init_cell(rng, N: int, in_dim: int, H: int) -> CellParams:
    return CellParams(
        Ws1=_xavier(rng, in_dim, H, "Ws1"), bs1=_zeros(H, "bs1"),
        Ws2=_xavier(rng, in_dim, H, "Ws2"), bs2=_zeros(H, "bs2"),
        Wa=_xavier(rng, 4 * H, H, "Wa"), ba=_zeros((N, H), "ba"),
        Wz=_xavier(rng, H, H, "Wz"), bz=_zeros(H, "bz"),
        Wr=_xavier(rng, H, H, "Wr"), br=_zeros(H, "br"),
        Wc=_xavier(rng, in_dim + H, H, "Wc"), bc=_zeros(H, "bc"),
    )


def init_params(dims: ModelDims, variant: Variant | str = Variant.SGRU, seed: int = 0) -> SgruParams:
    variant = Variant(variant)
    rng = rng_for(seed, STREAM_INIT)
    N, H, de = dims.N, dims.H, dims.d_emb
    scale = 1.0 / np.sqrt(de)

    adjacency = AdjacencyParams(
        E1=_embedding(rng, (N, dims.d), scale, "E1"),
        E2=_embedding(rng, (N, dims.d), scale, "E2"),
    )
    embedding = EmbeddingParams(W_e=_xavier(rng, dims.D, de, "W_e"), b_e=_zeros(de, "b_e"))
    if variant.st_embedding:
        embedding.E_space = _embedding(rng, (N, de), scale, "E_space")
        embedding.E_time = _embedding(rng, (de, dims.P), scale, "E_time")

    cells = {}
    for i, name in enumerate(CELL_NAMES):
        # chained cells after the first read the previous hidden sequence
        in_dim = de if (variant.structured or i == 0) else H
        cells[name] = init_cell(rng, N, in_dim, H)

    conn = None
    if variant.structured:
        weights = {}
        for q in CONN_TARGETS:
            for src in ("a", "b"):
                weights[f"W_{src}{q}"] = _xavier(rng, H, H, f"W_{src}{q}")
                weights[f"b_{src}{q}"] = _zeros(H, f"b_{src}{q}")
        conn = ConnParams(**weights)

    width = (3 * H if variant.structured else H) * dims.P
    head = HeadParams(W=_xavier(rng, width, dims.F * dims.D_out, "head_W"),
                      b=_zeros(dims.F * dims.D_out, "head_b"))
    return SgruParams(adjacency, embedding, cells, conn, head, variant, dims)


# ------------------------------------------------------------------ forward

def adaptive_adjacency(p: AdjacencyParams) -> Tensor:
    return T.softmax_rows(T.relu(T.matmul(p.E1, T.transpose(p.E2))))


def embed_sequence(X, p: EmbeddingParams, use_st: bool = True) -> Tensor:
    """Project channels to d_emb and add per-node and per-step embeddings.

    X is (..., P, N, D); the result is (..., P, N, d_emb).
    """
    X = T.as_tensor(X)
    if X.ndim < 3 or X.shape[-1] != p.W_e.shape[0]:
        raise DimensionError(f"embed_sequence: input {X.shape} does not end in D={p.W_e.shape[0]}")
    out = T.add(T.matmul(X, p.W_e), p.b_e)
    if use_st and p.E_space is not None:
        P = p.E_time.shape[1]
        if X.shape[-3] != P or X.shape[-2] != p.E_space.shape[0]:
            raise DimensionError(
                f"embed_sequence: input {X.shape} does not match P={P}, N={p.E_space.shape[0]}")
        out = T.add(out, p.E_space)
        out = T.add(out, T.reshape(T.transpose(p.E_time), (P, 1, -1)))
    return out


def gcn_gru_step(x_t, h_prev, A, p: CellParams) -> Tensor:
    """One recurrent update; x_t is (..., N, in_dim), h_prev and the result (..., N, H)."""
    x_t, h_prev = T.as_tensor(x_t), T.as_tensor(h_prev)
    left = T.matmul(A, T.concat_last(T.matmul(x_t, p.Ws1) + p.bs1, h_prev))
    right = T.concat_last(T.matmul(x_t, p.Ws2) + p.bs2, h_prev)
    a_t = T.matmul(T.concat_last(left, right), p.Wa) + p.ba
    z = T.sigmoid(T.matmul(a_t, p.Wz) + p.bz)
    r = T.sigmoid(T.matmul(a_t, p.Wr) + p.br)
    c = T.tanh(T.matmul(T.concat_last(x_t, r * h_prev), p.Wc) + p.bc)
    return (1.0 - z) * c + z * h_prev


def run_cell(steps: list[Tensor], h0, A, p: CellParams) -> list[Tensor]:
    h, out = h0, []
    for x_t in steps:
        h = gcn_gru_step(x_t, h, A, p)
        out.append(h)
    return out


def conn(h_a, h_b, p: ConnParams) -> tuple[Tensor, Tensor, Tensor]:
    h_a, h_b = T.as_tensor(h_a), T.as_tensor(h_b)
    outs = []
    for q in CONN_TARGETS:
        W_a, b_a, W_b, b_b = p.branch(q)
        gate = T.sigmoid(T.matmul(h_a, W_a) + b_a)
        outs.append(gate * (T.matmul(h_b, W_b) + b_b))
    return tuple(outs)


def predict_head(hidden: list[Tensor], p: HeadParams, F: int, D_out: int) -> Tensor:
    """Per-node FC over the flattened (P, width) hidden stack -> (..., F, N, D_out)."""
    seq = T.stack(hidden, axis=-2)                       # (..., N, P, width)
    lead = seq.shape[:-2]
    flat = T.reshape(seq, lead + (seq.shape[-2] * seq.shape[-1],))
    out = T.matmul(flat, p.W) + p.b                      # (..., N, F*D_out)
    out = T.reshape(out, lead + (F, D_out))              # (..., N, F, D_out)
    nd = out.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.permute(out, axes)


def _check(stage: str, t: Tensor | list[Tensor]) -> None:
    items = t if isinstance(t, (list, tuple)) else [t]
    for item in items:
        if not np.all(np.isfinite(item.data)):
            raise NumericError(f"non-finite values after stage {stage!r}")


def sgru_forward(X, params: SgruParams) -> Tensor:
    """Map input windows (..., P, N, D) to forecasts (..., F, N, D_out)."""
    dims, variant = params.dims, params.variant
    X = T.as_tensor(X)
    if X.ndim not in (3, 4) or X.shape[-3:] != (dims.P, dims.N, dims.D):
        raise DimensionError(f"sgru_forward: input {X.shape} does not match (P,N,D)="
                             f"{(dims.P, dims.N, dims.D)}")
    _check("input", X)

    try:
        A = adaptive_adjacency(params.adjacency)
    except NumericError as exc:
        raise NumericError("non-finite values after stage 'adjacency'") from exc
    emb = embed_sequence(X, params.embedding, use_st=variant.st_embedding)
    _check("embedding", emb)
    steps = [T.select(emb, -3, t) for t in range(dims.P)]
    h0 = Tensor(np.zeros(X.shape[:-3] + (dims.N, dims.H)))

    if variant.structured:
        cells = params.cells
        h_a = run_cell(steps, h0, A, cells["a"])
        _check("cell a", h_a)
        h_b = run_cell(steps, h0, A, cells["b"])
        _check("cell b", h_b)
        inits = conn(h_a[-1], h_b[-1], params.conn)
        _check("conn", list(inits))
        branches = []
        for q, init in zip(CONN_TARGETS, inits):
            hs = run_cell(steps, init, A, cells[q])
            _check(f"cell {q}", hs)
            branches.append(hs)
        hidden = [T.concat_last(T.concat_last(c, d), e) for c, d, e in zip(*branches)]
    else:
        hidden = steps
        for name in CELL_NAMES:
            hidden = run_cell(hidden, h0, A, params.cells[name])
            _check(f"cell {name}", hidden)

    out = predict_head(hidden, params.head, dims.F, dims.D_out)
    _check("head", out)
    return out


# --------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    params: SgruParams
    seed: int
    # per-channel (mean, std) of the training segment; None for untrained stubs
    standardizer: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        dims = self.params.dims
        doc = {
            "format_version": FORMAT_VERSION,
            "variant": self.params.variant.value,
            "hyperparameters": {"P": dims.P, "F": dims.F, "N": dims.N, "D": dims.D,
                                "D_out": dims.D_out, "d": dims.d, "d_prime": dims.d_emb,
                                "H": dims.H},
            "seed": self.seed,
            "parameters": {name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
                           for name, p in self.params.named_parameters()},
        }
        if self.standardizer is not None:
            doc["standardizer"] = self.standardizer
        if self.extra:
            doc["extra"] = self.extra
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        write_atomic(path, self.dumps())

    @classmethod
    def from_dict(cls, doc: dict) -> Checkpoint:
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        hp = dict(doc["hyperparameters"])
        hp["d_emb"] = hp.pop("d_prime")
        dims = ModelDims(**hp)
        params = init_params(dims, doc["variant"], seed=0)
        stored = doc["parameters"]
        names = [n for n, _ in params.named_parameters()]
        if sorted(names) != sorted(stored):
            raise ValueError("checkpoint parameter names do not match the variant layout")
        for name, p in params.named_parameters():
            entry = stored[name]
            values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            if values.shape != p.shape:
                raise DimensionError(f"checkpoint {name}: shape {values.shape} != {p.shape}")
            p.data = values
        return cls(params, int(doc["seed"]), doc.get("standardizer"), doc.get("extra", {}))

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def clone_params(params: SgruParams) -> SgruParams:
    dup = init_params(params.dims, params.variant, seed=0)
    for (_, dst), (_, src) in zip(dup.named_parameters(), params.named_parameters()):
        dst.data = src.data.copy()
    return dup
