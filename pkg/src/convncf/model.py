"""Model assembly: merge function x prediction head, checkpoints, parameter counts.

A model is a ``ModelSpec`` (architecture plus head parameters) together with
``EmbeddingTables``. The merge kind decides how the two embeddings combine;
the head maps the merged value to a scalar score:

* ``OUTER`` + ``ConvStack``: the full interaction-map model. The K x K outer
  product is treated as a one-channel image and halved by 2x2/stride-2
  convolutions until a 1 x 1 x C vector remains, which a weight vector
  projects to the score.
* ``OUTER`` + ``MlpHead``: the ablation that flattens the interaction map
  row-major to a K^2 vector for a fully-connected tower.
* ``ELEMENTWISE`` + ``LinearHead`` (GMF) or ``MlpHead`` (JRL).
* ``CONCAT`` + ``MlpHead`` (the plain MLP baseline).
* ``INNER`` + ``IdentityHead``: the shallow dot-product models.

Gradients for head parameters are returned as a dict keyed by section name
(``conv.<l>.kernel``, ``conv.<l>.bias``, ``mlp.<l>.W``, ``mlp.<l>.b``,
``w``); the same names address parameters in checkpoints and in the
finite-difference report.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union

import numpy as np

from convncf.embeddings import (
    EmbeddingTables,
    FISM_NORM_EXCLUDED,
    Variant,
    item_embedding,
    user_embedding,
)
from convncf.tensor import (
    DimensionError,
    conv2x2s2_backward,
    conv2x2s2_forward,
    dense_backward,
    dense_forward,
    dot,
    outer,
    relu,
    relu_backward,
)


class MergeKind(Enum):
    ELEMENTWISE = "elementwise"
    CONCAT = "concat"
    OUTER = "outer"
    INNER = "inner"


class HeadKind(Enum):
    CNN = "cnn"
    MLP = "mlp"
    LINEAR = "linear"
    IDENTITY = "identity"


class ConfigurationError(ValueError):
    """Raised when an architecture's pieces do not fit together."""


class FormatError(ValueError):
    """Raised when a checkpoint file cannot be decoded."""


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (2, 2, cin, C)
    bias: np.ndarray  # 0-d array, one scalar per layer


@dataclass
class ConvStack:
    """The convolution tower: per-layer kernels, scalar biases, prediction weights."""

    layers: list[ConvLayer]
    w: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def C(self) -> int:
        return self.layers[0].kernel.shape[3]

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("conv stack needs at least one layer")
        C = self.C
        for l, layer in enumerate(self.layers, start=1):
            expect_cin = 1 if l == 1 else C
            kh, kw, cin, cout = layer.kernel.shape
            if (kh, kw) != (2, 2) or cin != expect_cin or cout != C:
                raise ConfigurationError(
                    f"conv layer {l} kernel shape {layer.kernel.shape}, expected (2, 2, {expect_cin}, {C})"
                )
        if self.w.shape != (C,):
            raise ConfigurationError(f"prediction weights shape {self.w.shape}, expected ({C},)")


@dataclass
class MlpLayer:
    W: np.ndarray  # (m, n)
    b: np.ndarray  # (m,)


@dataclass
class MlpHead:
    """Half-size fully-connected tower with relu, projected to a scalar."""

    layers: list[MlpLayer]
    w: np.ndarray  # prediction weights on the last hidden layer

    @property
    def in_width(self) -> int:
        return self.layers[0].W.shape[1]

    def validate(self) -> None:
        if not 1 <= len(self.layers) <= 3:
            raise ConfigurationError(f"mlp head supports 1..3 hidden layers, got {len(self.layers)}")
        prev = self.in_width
        for l, layer in enumerate(self.layers, start=1):
            m, n = layer.W.shape
            if n != prev or layer.b.shape != (m,):
                raise ConfigurationError(f"mlp layer {l} does not chain: W {layer.W.shape}, b {layer.b.shape}")
            prev = m
        if self.w.shape != (prev,):
            raise ConfigurationError(f"mlp prediction weights shape {self.w.shape}, expected ({prev},)")


@dataclass
class LinearHead:
    w: np.ndarray


@dataclass
class IdentityHead:
    pass


Head = Union[ConvStack, MlpHead, LinearHead, IdentityHead]

_ALLOWED = {
    MergeKind.OUTER: (ConvStack, MlpHead),
    MergeKind.ELEMENTWISE: (LinearHead, MlpHead),
    MergeKind.CONCAT: (MlpHead,),
    MergeKind.INNER: (IdentityHead,),
}


@dataclass
class ModelSpec:
    """Architecture record: embedding variant, merge kind, head parameters."""

    variant: Variant
    merge: MergeKind
    head: Head
    K: int
    fism_norm: str = FISM_NORM_EXCLUDED

    def __post_init__(self) -> None:
        if not isinstance(self.head, _ALLOWED[self.merge]):
            raise ConfigurationError(
                f"merge {self.merge.value} does not admit head {type(self.head).__name__}"
            )
        if isinstance(self.head, ConvStack):
            self.head.validate()
            if 2 ** self.head.depth != self.K:
                raise ConfigurationError(
                    f"embedding size {self.K} needs a power-of-two tower; depth {self.head.depth} covers {2 ** self.head.depth}"
                )
        elif isinstance(self.head, MlpHead):
            self.head.validate()
            if self.head.in_width != self.merged_width():
                raise ConfigurationError(
                    f"mlp input width {self.head.in_width} != merged width {self.merged_width()}"
                )
        elif isinstance(self.head, LinearHead) and self.head.w.shape != (self.K,):
            raise ConfigurationError(f"linear head weights shape {self.head.w.shape}, expected ({self.K},)")

    def merged_width(self) -> int:
        if self.merge is MergeKind.OUTER:
            return self.K * self.K
        if self.merge is MergeKind.CONCAT:
            return 2 * self.K
        return self.K

    @property
    def head_kind(self) -> HeadKind:
        return {ConvStack: HeadKind.CNN, MlpHead: HeadKind.MLP, LinearHead: HeadKind.LINEAR, IdentityHead: HeadKind.IDENTITY}[type(self.head)]


# ---------------------------------------------------------------------------
# merge


def merge(kind: MergeKind, fU: np.ndarray, fI: np.ndarray):
    """Combine user and item embeddings: a vector, a matrix, or a scalar."""
    fU = np.asarray(fU, dtype=np.float64)
    fI = np.asarray(fI, dtype=np.float64)
    if fU.shape != fI.shape or fU.ndim != 1:
        raise DimensionError(f"merge expects equal-length vectors, got {fU.shape} and {fI.shape}")
    if kind is MergeKind.ELEMENTWISE:
        return fU * fI
    if kind is MergeKind.CONCAT:
        return np.concatenate([fU, fI])
    if kind is MergeKind.OUTER:
        return outer(fU, fI)
    if kind is MergeKind.INNER:
        return dot(fU, fI)
    raise ValueError(f"unknown merge kind {kind!r}")


def merge_backward(kind: MergeKind, fU: np.ndarray, fI: np.ndarray, d_merged):
    """Adjoint of merge: cotangents for both embeddings."""
    if kind is MergeKind.ELEMENTWISE:
        return d_merged * fI, d_merged * fU
    if kind is MergeKind.CONCAT:
        k = fU.shape[0]
        return d_merged[:k].copy(), d_merged[k:].copy()
    if kind is MergeKind.OUTER:
        return d_merged @ fI, d_merged.T @ fU
    if kind is MergeKind.INNER:
        return float(d_merged) * fI, float(d_merged) * fU
    raise ValueError(f"unknown merge kind {kind!r}")


# ---------------------------------------------------------------------------
# heads


@dataclass
class ConvCache:
    inputs: list[np.ndarray]
    pres: list[np.ndarray]
    g: np.ndarray


def convncf_forward(stack: ConvStack, E: np.ndarray):
    """Run the tower over one interaction map; returns (cache, score)."""
    E = np.asarray(E, dtype=np.float64)
    K = E.shape[0]
    if E.ndim != 2 or E.shape[1] != K:
        raise DimensionError(f"interaction map must be square, got {E.shape}")
    if 2 ** stack.depth != K:
        raise ConfigurationError(f"map size {K} is not 2**depth for depth {stack.depth}")
    x = E.reshape(K, K, 1)
    inputs, pres = [], []
    for layer in stack.layers:
        inputs.append(x)
        pre, x = conv2x2s2_forward(x, layer.kernel, float(layer.bias))
        pres.append(pre)
    g = x.reshape(stack.C)
    cache = ConvCache(inputs=inputs, pres=pres, g=g)
    return cache, float(stack.w @ g)


def convncf_backward(stack: ConvStack, cache: ConvCache, d_y: float):
    """Adjoint of convncf_forward; returns (head grads by section, d_E)."""
    grads: dict[str, np.ndarray] = {"w": d_y * cache.g}
    d_act = (d_y * stack.w).reshape(1, 1, stack.C)
    for l in range(stack.depth, 0, -1):
        layer = stack.layers[l - 1]
        d_act, d_kernel, d_bias = conv2x2s2_backward(
            cache.inputs[l - 1], layer.kernel, cache.pres[l - 1], d_act
        )
        grads[f"conv.{l}.kernel"] = d_kernel
        grads[f"conv.{l}.bias"] = np.asarray(d_bias, dtype=np.float64)
    K = cache.inputs[0].shape[0]
    return grads, d_act.reshape(K, K)


@dataclass
class MlpCache:
    xs: list[np.ndarray]  # layer inputs, xs[0] is the merged vector
    pres: list[np.ndarray]
    out: np.ndarray  # last hidden activation


def mlp_forward(head: MlpHead, x0: np.ndarray):
    x = np.asarray(x0, dtype=np.float64)
    xs, pres = [], []
    for layer in head.layers:
        xs.append(x)
        pre = dense_forward(x, layer.W, layer.b)
        pres.append(pre)
        x = relu(pre)
    cache = MlpCache(xs=xs, pres=pres, out=x)
    return cache, float(head.w @ x)


def mlp_backward(head: MlpHead, cache: MlpCache, d_y: float):
    grads: dict[str, np.ndarray] = {"w": d_y * cache.out}
    d_x = d_y * head.w
    for l in range(len(head.layers), 0, -1):
        d_pre = relu_backward(cache.pres[l - 1], d_x)
        d_x, d_W, d_b = dense_backward(cache.xs[l - 1], head.layers[l - 1].W, d_pre)
        grads[f"mlp.{l}.W"] = d_W
        grads[f"mlp.{l}.b"] = d_b
    return grads, d_x


def head_forward(spec: ModelSpec, merged):
    """Dispatch the merged value through the head; returns (cache, score)."""
    head = spec.head
    if isinstance(head, ConvStack):
        return convncf_forward(head, merged)
    if isinstance(head, MlpHead):
        x0 = merged.reshape(-1) if spec.merge is MergeKind.OUTER else merged
        return mlp_forward(head, x0)
    if isinstance(head, LinearHead):
        return merged, float(head.w @ merged)
    return None, float(merged)


def head_backward(spec: ModelSpec, merged, cache, d_y: float):
    """Adjoint of head_forward; returns (head grads by section, d_merged)."""
    head = spec.head
    if isinstance(head, ConvStack):
        return convncf_backward(head, cache, d_y)
    if isinstance(head, MlpHead):
        grads, d_x0 = mlp_backward(head, cache, d_y)
        if spec.merge is MergeKind.OUTER:
            d_x0 = d_x0.reshape(spec.K, spec.K)
        return grads, d_x0
    if isinstance(head, LinearHead):
        return {"w": d_y * merged}, d_y * head.w
    return {}, d_y


# ---------------------------------------------------------------------------
# scoring


def predict(
    spec: ModelSpec,
    tables: EmbeddingTables,
    u: int,
    i: int,
    history: Iterable[int] = (),
) -> float:
    """Score one (user, item) pair. Pure in (spec, tables)."""
    fU = user_embedding(tables, spec.variant, u, i, history, norm=spec.fism_norm)
    fI = item_embedding(tables, i)
    merged = merge(spec.merge, fU, fI)
    _, y = head_forward(spec, merged)
    return y


def _conv_scores_batch(stack: ConvStack, E: np.ndarray) -> np.ndarray:
    x = E.reshape(E.shape[0], E.shape[1], E.shape[2], 1)
    for layer in stack.layers:
        n, s, _, c = x.shape
        patches = x.reshape(n, s // 2, 2, s // 2, 2, c)
        pre = np.einsum("niajbd,abdc->nijc", patches, layer.kernel) + float(layer.bias)
        x = np.maximum(pre, 0.0)
    return x.reshape(x.shape[0], stack.C) @ stack.w


def _mlp_scores_batch(head: MlpHead, X: np.ndarray) -> np.ndarray:
    for layer in head.layers:
        X = np.maximum(X @ layer.W.T + layer.b, 0.0)
    return X @ head.w


def predict_batch(
    spec: ModelSpec,
    tables: EmbeddingTables,
    u: int,
    items: np.ndarray,
    history: Iterable[int] = (),
) -> np.ndarray:
    """Score many candidate items for one user in one vectorized pass.

    The user embedding is computed once with no target exclusion, which
    matches ``predict`` exactly whenever no candidate sits in the history
    (the ranking protocol guarantees that).
    """
    items = np.asarray(items, dtype=np.int64)
    fU = user_embedding(tables, spec.variant, u, None, history, norm=spec.fism_norm)
    FI = tables.Q[items]
    if spec.merge is MergeKind.INNER:
        return FI @ fU
    if spec.merge is MergeKind.ELEMENTWISE:
        X = FI * fU
        if isinstance(spec.head, LinearHead):
            return X @ spec.head.w
        return _mlp_scores_batch(spec.head, X)
    if spec.merge is MergeKind.CONCAT:
        X = np.concatenate([np.broadcast_to(fU, FI.shape), FI], axis=1)
        return _mlp_scores_batch(spec.head, X)
    E = np.einsum("k,nl->nkl", fU, FI)
    if isinstance(spec.head, ConvStack):
        return _conv_scores_batch(spec.head, E)
    return _mlp_scores_batch(spec.head, E.reshape(E.shape[0], -1))


# ---------------------------------------------------------------------------
# initialization


def init_conv_stack(K: int, C: int, seed) -> ConvStack:
    """He-scaled Gaussian kernels, zero biases; depth is log2(K)."""
    depth = int(math.log2(K))
    if 2 ** depth != K:
        raise ConfigurationError(f"embedding size must be a power of two for the tower, got {K}")
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(1, depth + 1):
        cin = 1 if l == 1 else C
        std = math.sqrt(2.0 / (4 * cin))
        layers.append(
            ConvLayer(
                kernel=rng.normal(0.0, std, size=(2, 2, cin, C)),
                bias=np.zeros(()),
            )
        )
    w = rng.normal(0.0, 1.0 / math.sqrt(C), size=C)
    return ConvStack(layers=layers, w=w)


def init_mlp_head(in_width: int, n_layers: int, seed) -> MlpHead:
    """Half-size tower of relu layers plus a scalar projection."""
    if not 1 <= n_layers <= 3:
        raise ConfigurationError(f"mlp head supports 1..3 hidden layers, got {n_layers}")
    rng = np.random.default_rng(seed)
    layers = []
    prev = in_width
    for _ in range(n_layers):
        width = prev // 2
        if width < 1:
            raise ConfigurationError(f"mlp tower collapses below width 1 from input {in_width}")
        layers.append(
            MlpLayer(
                W=rng.normal(0.0, math.sqrt(2.0 / prev), size=(width, prev)),
                b=np.zeros(width),
            )
        )
        prev = width
    w = rng.normal(0.0, 1.0 / math.sqrt(prev), size=prev)
    return MlpHead(layers=layers, w=w)


def init_linear_head(K: int) -> LinearHead:
    """All-ones projection, so the untrained model starts at the inner product."""
    return LinearHead(w=np.ones(K))


def new_head(kind: HeadKind, spec_merge: MergeKind, K: int, C: int, mlp_layers: int, seed) -> Head:
    if kind is HeadKind.CNN:
        return init_conv_stack(K, C, seed)
    if kind is HeadKind.MLP:
        widths = {MergeKind.OUTER: K * K, MergeKind.CONCAT: 2 * K, MergeKind.ELEMENTWISE: K}
        if spec_merge not in widths:
            raise ConfigurationError(f"mlp head does not pair with merge {spec_merge.value}")
        return init_mlp_head(widths[spec_merge], mlp_layers, seed)
    if kind is HeadKind.LINEAR:
        return LinearHead(w=np.ones(K))
    return IdentityHead()


# ---------------------------------------------------------------------------
# parameter sections


def head_sections(head: Head) -> list[tuple[str, np.ndarray]]:
    """Named parameter arrays of a head, in canonical checkpoint order."""
    if isinstance(head, ConvStack):
        out = []
        for l, layer in enumerate(head.layers, start=1):
            out.append((f"conv.{l}.kernel", layer.kernel))
            out.append((f"conv.{l}.bias", layer.bias))
        out.append(("w", head.w))
        return out
    if isinstance(head, MlpHead):
        out = []
        for l, layer in enumerate(head.layers, start=1):
            out.append((f"mlp.{l}.W", layer.W))
            out.append((f"mlp.{l}.b", layer.b))
        out.append(("w", head.w))
        return out
    if isinstance(head, LinearHead):
        return [("w", head.w)]
    return []


def section_arrays(spec: ModelSpec, tables: EmbeddingTables) -> dict[str, np.ndarray]:
    """All trainable arrays by section name, embedding tables included."""
    out: dict[str, np.ndarray] = {"P": tables.P, "Q": tables.Q}
    if tables.Qp is not None:
        out["Qp"] = tables.Qp
    out.update(dict(head_sections(spec.head)))
    return out


@dataclass
class ParamCount:
    head_sections: list[tuple[str, int]]
    head_total: int
    embedding_sections: list[tuple[str, int]] = field(default_factory=list)
    embedding_total: int = 0


def param_count(spec: ModelSpec, M: Optional[int] = None, N: Optional[int] = None) -> ParamCount:
    """Exact trainable-parameter counts: head sections plus, when table
    dimensions are given, the embedding side."""
    sections = [(name, int(arr.size)) for name, arr in head_sections(spec.head)]
    head_total = sum(c for _, c in sections)
    embed_sections: list[tuple[str, int]] = []
    if M is not None and N is not None:
        embed_sections.append(("P", M * spec.K))
        embed_sections.append(("Q", N * spec.K))
        if spec.variant in (Variant.FISM, Variant.SVDPP):
            embed_sections.append(("Qp", N * spec.K))
    return ParamCount(
        head_sections=sections,
        head_total=head_total,
        embedding_sections=embed_sections,
        embedding_total=sum(c for _, c in embed_sections),
    )


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "ONCF1"


def _descriptor(spec: ModelSpec, tables: EmbeddingTables) -> str:
    return (
        f"variant={spec.variant.value},merge={spec.merge.value},head={spec.head_kind.value},"
        f"K={spec.K},alpha={tables.alpha!r},fism_norm={spec.fism_norm}"
    )


def save_checkpoint(spec: ModelSpec, tables: EmbeddingTables, path: str) -> None:
    """Write the model: ASCII header and directory, then raw little-endian
    float64 payloads. Round-trips bit-exactly."""
    sections = list(section_arrays(spec, tables).items())
    header = io.StringIO()
    header.write(f"{_MAGIC} {_descriptor(spec, tables)}\n")
    offset = 0
    payloads = []
    for name, arr in sections:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        dims = " ".join(str(d) for d in arr.shape)
        line = f"{name} {arr.ndim}" + (f" {dims}" if arr.ndim else "") + f" {offset}\n"
        header.write(line)
        payloads.append(data)
        offset += len(data)
    header.write("\n")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for data in payloads:
            fh.write(data)
    os.replace(tmp, path)


def _parse_descriptor(text: str) -> dict[str, str]:
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise FormatError(f"bad descriptor entry {part!r}")
        key, value = part.split("=", 1)
        out[key] = value
    return out


def load_checkpoint(path: str) -> tuple[ModelSpec, EmbeddingTables]:
    """Read a checkpoint written by save_checkpoint, validating as it goes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("truncated header")
    first = blob[:nl].decode("ascii", errors="replace")
    if not first.startswith(_MAGIC + " "):
        raise FormatError(f"bad magic line {first!r}")
    desc = _parse_descriptor(first[len(_MAGIC) + 1 :])
    for key in ("variant", "merge", "head", "K", "alpha", "fism_norm"):
        if key not in desc:
            raise FormatError(f"descriptor missing {key}")

    directory: list[tuple[str, tuple[int, ...], int]] = []
    pos = nl + 1
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise FormatError("directory not terminated")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "":
            break
        parts = line.split()
        try:
            name = parts[0]
            rank = int(parts[1])
            dims = tuple(int(d) for d in parts[2 : 2 + rank])
            offset = int(parts[2 + rank])
            if len(parts) != 3 + rank or any(d < 1 for d in dims) or offset < 0:
                raise ValueError
        except (IndexError, ValueError):
            raise FormatError(f"bad directory line {line!r}") from None
        directory.append((name, dims, offset))

    payload = blob[pos:]
    arrays: dict[str, np.ndarray] = {}
    for name, dims, offset in directory:
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise FormatError(f"section {name} truncated")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(dims)

    try:
        variant = Variant(desc["variant"])
        merge_kind = MergeKind(desc["merge"])
        head_kind = HeadKind(desc["head"])
        K = int(desc["K"])
        alpha = float(desc["alpha"])
    except ValueError as exc:
        raise FormatError(f"bad descriptor value: {exc}") from None

    for required in ("P", "Q"):
        if required not in arrays:
            raise FormatError(f"section {required} missing")
    tables = EmbeddingTables(
        P=arrays["P"], Q=arrays["Q"], Qp=arrays.get("Qp"), K=K, alpha=alpha
    )
    if variant in (Variant.FISM, Variant.SVDPP) and tables.Qp is None:
        raise FormatError("section Qp missing for history-based variant")

    head: Head
    if head_kind is HeadKind.CNN:
        layers = []
        for l in range(1, len([n for n in arrays if n.endswith(".kernel")]) + 1):
            kname, bname = f"conv.{l}.kernel", f"conv.{l}.bias"
            if kname not in arrays or bname not in arrays:
                raise FormatError(f"section {kname} missing")
            layers.append(ConvLayer(kernel=arrays[kname], bias=arrays[bname].reshape(())))
        if "w" not in arrays:
            raise FormatError("section w missing")
        head = ConvStack(layers=layers, w=arrays["w"])
    elif head_kind is HeadKind.MLP:
        layers = []
        for l in range(1, len([n for n in arrays if n.startswith("mlp.") and n.endswith(".W")]) + 1):
            wname, bname = f"mlp.{l}.W", f"mlp.{l}.b"
            if wname not in arrays or bname not in arrays:
                raise FormatError(f"section {wname} missing")
            layers.append(MlpLayer(W=arrays[wname], b=arrays[bname]))
        if "w" not in arrays:
            raise FormatError("section w missing")
        head = MlpHead(layers=layers, w=arrays["w"])
    elif head_kind is HeadKind.LINEAR:
        if "w" not in arrays:
            raise FormatError("section w missing")
        head = LinearHead(w=arrays["w"])
    else:
        head = IdentityHead()

    try:
        spec = ModelSpec(variant=variant, merge=merge_kind, head=head, K=K, fism_norm=desc["fism_norm"])
    except ConfigurationError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from None
    if tables.P.shape[1] != K or tables.Q.shape[1] != K:
        raise FormatError(f"section P/Q width does not match K={K}")
    return spec, tables
