"""Cross-modal encoder with local attention, feature pyramid, and task heads.

The forward pass mirrors the detection pipeline end to end: a two-layer
temporal convolution projects each modality's features to the token width,
the visual and audio tracks are concatenated around learnable separator
(and, for detection, classification) tokens, a pre-norm Transformer encoder
with a banded attention mask produces one feature map per layer, and shared
lightweight convolutional heads read frame-level predictions off every
pyramid level. Everything runs on the in-house autodiff tape, so the whole
network is gradient-checkable in float64.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DFD = "dfd"
TFL = "tfl"

CHECKPOINT_MAGIC = b"AVFC"
CHECKPOINT_VERSION = 1


class NonFiniteError(RuntimeError):
    """Raised when activations or outputs stop being finite."""


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    r: int = 2
    u: int = 1
    l: int = 3
    q: int = 15
    f_max: int = 600
    d0: int = 16
    task: str = TFL
    attention_residual: bool = True  # off reproduces the bare two-line layer update

    def __post_init__(self):
        if self.task not in (DFD, TFL):
            raise ValueError(f"task must be '{DFD}' or '{TFL}'")
        if self.d % self.r != 0:
            raise ValueError("token dim d must be divisible by head count r")
        if self.l < 1 or self.f_max < 1 or self.q < 0:
            raise ValueError("need l >= 1, f_max >= 1, q >= 0")
        if self.u < 1 or self.d0 < 1:
            raise ValueError("need u >= 1, d0 >= 1")

    @property
    def extra_tokens(self) -> int:
        return 2 if self.task == DFD else 1

    def tokens_for(self, f: int) -> int:
        return 2 * f + self.extra_tokens


@dataclass(frozen=True)
class TokenLayout:
    """Where each role sits in the assembled token sequence.

    ``sep_pos``/``a_start``/``n_tokens`` are per-sample arrays because the
    separator follows the last real visual token, so shorter samples in a
    padded batch place their audio block earlier.
    """

    batch: int
    f: int
    cls_pos: int | None
    v_start: int
    lengths: np.ndarray
    sep_pos: np.ndarray
    a_start: np.ndarray
    n_tokens: np.ndarray
    n_max: int

    @property
    def uniform(self) -> bool:
        return bool((self.lengths == self.f).all())


@dataclass
class PyramidFeatures:
    """Per-layer frame tokens ``z`` (B, 2f, l, d) and cls tokens (B, l, d)."""

    z: Tensor
    cls: Tensor | None
    layout: TokenLayout


@dataclass
class TflPredictions:
    """Per frame, modality, and pyramid level: fake probability and distances.

    All arrays are (B, 2, l, f) with modality axis ordered (visual, audio).
    ``d_s`` is non-negative and ``d_e`` non-positive by construction.
    """

    a_hat: Tensor
    d_s: Tensor
    d_e: Tensor


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_parameters(
    config: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """Fresh parameter table: truncated-normal weights, identity-affine LN.

    Weight matrices use fan-in scaling (std = 1/sqrt(fan_in)); at small
    token widths a flat 0.02 std collapses the content signal to noise
    after two projection layers. Token/position encodings stay at 0.02.
    """
    d, u = config.d, config.u

    def param(arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    def tn(*shape) -> Tensor:
        fan_in = int(np.prod(shape[:-1]))
        return param(_trunc_normal(rng, shape, std=fan_in**-0.5))

    def enc(*shape) -> Tensor:
        return param(_trunc_normal(rng, shape, std=0.02))

    def zeros(*shape) -> Tensor:
        return param(np.zeros(shape))

    def ones(*shape) -> Tensor:
        return param(np.ones(shape))

    p: dict[str, Tensor] = {}
    p["proj.w0"], p["proj.b0"] = tn(3, config.d0, d), zeros(d)
    p["proj.w1"], p["proj.b1"] = tn(3, d, d), zeros(d)
    p["seq_v"], p["seq_a"], p["sep"] = enc(d), enc(d), enc(d)
    if config.task == DFD:
        p["cls"] = enc(d)
    p["pos"] = enc(2 * config.f_max + config.extra_tokens, d)
    for i in range(config.l):
        pre = f"enc{i}"
        p[f"{pre}.ln1.w"], p[f"{pre}.ln1.b"] = ones(d), zeros(d)
        p[f"{pre}.qkv.w"], p[f"{pre}.qkv.b"] = tn(d, 3 * d), zeros(3 * d)
        p[f"{pre}.out.w"], p[f"{pre}.out.b"] = tn(d, d), zeros(d)
        p[f"{pre}.ln2.w"], p[f"{pre}.ln2.b"] = ones(d), zeros(d)
        p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"] = tn(d, d * u), zeros(d * u)
        p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"] = tn(d * u, d), zeros(d)
    if config.task == DFD:
        p["dfd.w1"], p["dfd.b1"] = tn(d, d), zeros(d)
        p["dfd.ln1.w"], p["dfd.ln1.b"] = ones(d), zeros(d)
        p["dfd.w2"], p["dfd.b2"] = tn(d, d), zeros(d)
        p["dfd.ln2.w"], p["dfd.ln2.b"] = ones(d), zeros(d)
        p["dfd.w3"], p["dfd.b3"] = tn(d, 2), zeros(2)
    else:
        for head, out in (("cls_head", 1), ("reg_head", 2)):
            p[f"{head}.w0"], p[f"{head}.b0"] = tn(3, d, d), zeros(d)
            p[f"{head}.ln0.w"], p[f"{head}.ln0.b"] = ones(d), zeros(d)
            p[f"{head}.w1"], p[f"{head}.b1"] = tn(3, d, d), zeros(d)
            p[f"{head}.ln1.w"], p[f"{head}.ln1.b"] = ones(d), zeros(d)
            p[f"{head}.w2"], p[f"{head}.b2"] = tn(3, d, out), zeros(out)
        # prior-based output biases: fake frames are rare (sigmoid ~0.12) and
        # boundary distances start at half a typical interval, not at zero
        p["cls_head.b2"].data[...] = -2.0
        p["reg_head.b2"].data[...] = 6.0
    return p


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        t = t.reshape(1, *t.shape)
    if t.ndim != 3:
        raise ValueError(f"expected (f, d0) or (B, f, d0), got {t.shape}")
    return t


def _frame_mask_column(valid: np.ndarray | None, dtype) -> np.ndarray | None:
    if valid is None:
        return None
    return np.asarray(valid, dtype=dtype)[..., None]


def project_features(
    x,
    params: dict[str, Tensor],
    config: ModelConfig,
    frame_valid: np.ndarray | None = None,
) -> Tensor:
    """Two ReLU conv layers (kernel 3) mapping (B, f, d0) -> (B, f, d).

    ``frame_valid`` (B, f) zeroes padded frames between the layers so that a
    padded batch computes exactly what the unpadded samples would.
    """
    t = _as_batch(x)
    if t.shape[1] > config.f_max:
        raise ValueError(f"sequence length {t.shape[1]} exceeds f_max={config.f_max}")
    mask = _frame_mask_column(frame_valid, t.data.dtype)
    if mask is not None:
        t = t * mask
    h = ad.relu(ad.conv1d_same(t, params["proj.w0"], params["proj.b0"]))
    if mask is not None:
        h = h * mask
    h = ad.relu(ad.conv1d_same(h, params["proj.w1"], params["proj.b1"]))
    if mask is not None:
        h = h * mask
    return h


def assemble_tokens(
    v_proj,
    a_proj,
    params: dict[str, Tensor],
    config: ModelConfig,
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, TokenLayout]:
    """Build the token sequence [cls?, v..., sep, a...] with all encodings.

    Sequence encodings are added per modality, position encodings per slot.
    With per-sample ``lengths`` the separator trails the last real visual
    token and zero padding fills the tail up to the batch maximum.
    """
    v = _as_batch(v_proj)
    a = _as_batch(a_proj)
    if v.shape != a.shape:
        raise ValueError(f"modalities disagree: {v.shape} vs {a.shape}")
    b, f, d = v.shape
    if lengths is None:
        lengths = np.full(b, f, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (b,) or (lengths > f).any() or (lengths < 1).any():
        raise ValueError("lengths must be per-sample counts in [1, f]")

    e = config.extra_tokens
    cls_pos = 0 if config.task == DFD else None
    v_start = e - 1
    n_tokens = 2 * lengths + e
    n_max = int(2 * f + e)
    layout = TokenLayout(
        batch=b,
        f=f,
        cls_pos=cls_pos,
        v_start=v_start,
        lengths=lengths,
        sep_pos=v_start + lengths,
        a_start=v_start + lengths + 1,
        n_tokens=n_tokens,
        n_max=n_max,
    )

    pos = params["pos"]
    sep = ad.broadcast_to(params["sep"].reshape(1, 1, d), (b, 1, d))
    if (lengths == f).all():
        parts = []
        if cls_pos is not None:
            parts.append(ad.broadcast_to(params["cls"].reshape(1, 1, d), (b, 1, d)))
        parts.extend([v + params["seq_v"], sep, a + params["seq_a"]])
        tokens = ad.concat(parts, axis=1) + pos[:n_max].reshape(1, n_max, d)
        return tokens, layout

    zero_row = Tensor(np.zeros((1, d), dtype=v.data.dtype))
    rows = []
    for i in range(b):
        fi = int(lengths[i])
        ni = int(n_tokens[i])
        parts = []
        if cls_pos is not None:
            parts.append(params["cls"].reshape(1, d))
        parts.append(v[i, :fi] + params["seq_v"])
        parts.append(params["sep"].reshape(1, d))
        parts.append(a[i, :fi] + params["seq_a"])
        tok = ad.concat(parts, axis=0) + pos[:ni]
        if ni < n_max:
            tok = ad.concat([tok, ad.broadcast_to(zero_row, (n_max - ni, d))], axis=0)
        rows.append(tok)
    return ad.stack(rows, axis=0), layout


def build_local_mask(n: int, q: int, pad_len: int = 0) -> np.ndarray:
    """Boolean (n, n) attention mask: band of half-width q//2 (q=0: global).

    Padding slots (the last ``pad_len`` positions) are unreachable and
    attend only to themselves.
    """
    if pad_len >= n or pad_len < 0:
        raise ValueError("pad_len must be in [0, n)")
    if q == 0:
        allowed = np.ones((n, n), dtype=bool)
    else:
        idx = np.arange(n)
        allowed = np.abs(idx[:, None] - idx[None, :]) <= q // 2
    real = n - pad_len
    allowed[:, real:] = False
    allowed[real:, :] = False
    if pad_len:
        allowed[np.arange(real, n), np.arange(real, n)] = True
    return allowed


def _attention_bias(mask: np.ndarray, dtype) -> np.ndarray:
    bias = np.where(mask, 0.0, -np.inf).astype(dtype)
    if bias.ndim == 2:
        return bias[None, None]
    return bias[:, None]


def mask_for_layout(layout: TokenLayout, q: int) -> np.ndarray:
    """Attention mask for an assembled batch: (n, n) or (B, n, n) if ragged."""
    if layout.uniform:
        return build_local_mask(layout.n_max, q)
    return np.stack(
        [build_local_mask(layout.n_max, q, layout.n_max - int(n)) for n in layout.n_tokens]
    )


def encode(
    tokens: Tensor,
    mask: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    layout: TokenLayout,
) -> PyramidFeatures:
    """Run the pre-norm encoder and collect every layer's frame tokens.

    Each layer computes attention over LN'd inputs (plus residual unless
    ``attention_residual`` is off) followed by a residual MLP block.
    """
    b, n, d = tokens.shape
    r = config.r
    hd = d // r
    scale = 1.0 / np.sqrt(hd)
    bias = _attention_bias(mask, tokens.data.dtype)

    h = tokens
    per_layer: list[Tensor] = []
    for i in range(config.l):
        pre = f"enc{i}"
        x = ad.layer_norm(h, params[f"{pre}.ln1.w"], params[f"{pre}.ln1.b"])
        qkv = x @ params[f"{pre}.qkv.w"] + params[f"{pre}.qkv.b"]
        qkv = qkv.reshape(b, n, 3, r, hd).transpose(2, 0, 3, 1, 4)
        q_h, k_h, v_h = qkv[0], qkv[1], qkv[2]
        scores = (q_h @ k_h.swapaxes(-1, -2)) * scale
        attn = ad.softmax(scores, axis=-1, bias=bias)
        o = (attn @ v_h).transpose(0, 2, 1, 3).reshape(b, n, d)
        o = o @ params[f"{pre}.out.w"] + params[f"{pre}.out.b"]
        h = o + h if config.attention_residual else o
        x2 = ad.layer_norm(h, params[f"{pre}.ln2.w"], params[f"{pre}.ln2.b"])
        m = ad.relu(x2 @ params[f"{pre}.mlp.w1"] + params[f"{pre}.mlp.b1"])
        m = m @ params[f"{pre}.mlp.w2"] + params[f"{pre}.mlp.b2"]
        h = m + h
        per_layer.append(h)

    if not np.isfinite(per_layer[-1].data.sum()):
        raise NonFiniteError("encoder produced non-finite activations")

    f = layout.f
    if layout.uniform:
        vs = layout.v_start
        a0 = int(layout.a_start[0])
        frames = [
            ad.concat([t[:, vs : vs + f], t[:, a0 : a0 + f]], axis=1)
            for t in per_layer
        ]
        z = ad.stack(frames, axis=2)
    else:
        idx = np.zeros((b, 2 * f), dtype=np.int64)
        valid = np.zeros((b, 2 * f), dtype=tokens.data.dtype)
        for s in range(b):
            fi = int(layout.lengths[s])
            idx[s, :fi] = layout.v_start + np.arange(fi)
            idx[s, f : f + fi] = int(layout.a_start[s]) + np.arange(fi)
            valid[s, :fi] = 1
            valid[s, f : f + fi] = 1
        gathered = [_gather_tokens(t, idx) * valid[..., None] for t in per_layer]
        z = ad.stack(gathered, axis=2)

    cls = None
    if layout.cls_pos is not None:
        cls = ad.stack([t[:, layout.cls_pos] for t in per_layer], axis=1)
    return PyramidFeatures(z=z, cls=cls, layout=layout)


def _gather_tokens(t: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample token gather: (B, n, d)[b, idx[b]] -> (B, m, d)."""
    b = t.shape[0]
    data = t.data[np.arange(b)[:, None], idx]
    shape = t.data.shape
    dtype = t.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (np.arange(b)[:, None], idx), g)
        return (full,)

    return Tensor._make(data, (t,), vjp)


def head_dfd(cls: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Detection head: three linear layers over (B, l, d) -> logits (B, l, 2)."""
    h = ad.relu(ad.layer_norm(cls @ params["dfd.w1"] + params["dfd.b1"],
                              params["dfd.ln1.w"], params["dfd.ln1.b"]))
    h = ad.relu(ad.layer_norm(h @ params["dfd.w2"] + params["dfd.b2"],
                              params["dfd.ln2.w"], params["dfd.ln2.b"]))
    return h @ params["dfd.w3"] + params["dfd.b3"]


def _head_stack(x: Tensor, params: dict[str, Tensor], name: str,
                mask: np.ndarray | None) -> Tensor:
    h = ad.conv1d_same(x, params[f"{name}.w0"], params[f"{name}.b0"])
    h = ad.relu(ad.layer_norm(h, params[f"{name}.ln0.w"], params[f"{name}.ln0.b"]))
    if mask is not None:
        h = h * mask
    h = ad.conv1d_same(h, params[f"{name}.w1"], params[f"{name}.b1"])
    h = ad.relu(ad.layer_norm(h, params[f"{name}.ln1.w"], params[f"{name}.ln1.b"]))
    if mask is not None:
        h = h * mask
    return ad.conv1d_same(h, params[f"{name}.w2"], params[f"{name}.b2"])


def heads_tfl(
    pyramid: PyramidFeatures,
    params: dict[str, Tensor],
    config: ModelConfig,
    frame_valid: np.ndarray | None = None,
) -> TflPredictions:
    """Classification and regression conv heads over every pyramid level.

    One weight set per head serves all levels and both modality tracks. The
    classification output is a sigmoid probability; regression distances go
    through softplus so that onsets lie behind (d_s >= 0) and offsets ahead
    (d_e <= 0) of each frame.
    """
    z = pyramid.z
    b, two_f, l, d = z.shape
    f = two_f // 2
    # (B, 2f, l, d) -> (2, B, l, f, d) -> one flat conv batch per track
    zv = z[:, :f].transpose(0, 2, 1, 3)
    za = z[:, f:].transpose(0, 2, 1, 3)
    flat = ad.concat([zv, za], axis=0).reshape(2 * b * l, f, d)

    mask = None
    if frame_valid is not None:
        per_sample = np.asarray(frame_valid, dtype=z.data.dtype)
        tiled = np.repeat(per_sample, l, axis=0)
        mask = np.concatenate([tiled, tiled], axis=0)[..., None]
        flat = flat * mask

    cls_out = _head_stack(flat, params, "cls_head", mask)
    reg_out = _head_stack(flat, params, "reg_head", mask)

    a_hat = ad.sigmoid(cls_out).reshape(2, b, l, f).transpose(1, 0, 2, 3)
    reg = ad.softplus(reg_out).reshape(2, b, l, f, 2).transpose(1, 0, 2, 3, 4)
    d_s = reg[..., 0]
    d_e = -reg[..., 1]
    return TflPredictions(a_hat=a_hat, d_s=d_s, d_e=d_e)


class Network:
    """Configured parameter set plus the full forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            params = init_parameters(config, np.random.default_rng(seed), dtype)
        self.params = params
        self._mask_cache: dict[tuple, np.ndarray] = {}

    def astype(self, dtype) -> "Network":
        params = {
            k: Tensor(v.data.astype(dtype), requires_grad=True)
            for k, v in self.params.items()
        }
        return Network(self.config, dtype=dtype, params=params)

    def _mask(self, layout: TokenLayout) -> np.ndarray:
        key = (layout.n_max, tuple(int(x) for x in layout.n_tokens))
        cached = self._mask_cache.get(key)
        if cached is None:
            cached = mask_for_layout(layout, self.config.q)
            if len(self._mask_cache) > 8:
                self._mask_cache.clear()
            self._mask_cache[key] = cached
        return cached

    def forward(self, visual, audio, lengths: np.ndarray | None = None):
        """Returns TflPredictions for TFL or logits (B, l, 2) for DFD."""
        if not isinstance(visual, Tensor):
            visual = np.asarray(visual, dtype=self.dtype)
        if not isinstance(audio, Tensor):
            audio = np.asarray(audio, dtype=self.dtype)
        v = _as_batch(visual)
        a = _as_batch(audio)
        frame_valid = None
        if lengths is not None:
            lengths = np.asarray(lengths, dtype=np.int64)
            if (lengths < v.shape[1]).any():
                frame_valid = np.arange(v.shape[1])[None, :] < lengths[:, None]
        vp = project_features(v, self.params, self.config, frame_valid)
        ap = project_features(a, self.params, self.config, frame_valid)
        tokens, layout = assemble_tokens(vp, ap, self.params, self.config, lengths)
        pyramid = encode(tokens, self._mask(layout), self.params, self.config, layout)
        if self.config.task == DFD:
            return head_dfd(pyramid.cls, self.params)
        return heads_tfl(pyramid, self.params, self.config, frame_valid)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(network: Network, path: str | Path) -> None:
    """Named parameter table with embedded config, little-endian float32."""
    cfg_json = json.dumps(dataclasses.asdict(network.config)).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, len(cfg_json)),
        cfg_json,
        struct.pack("<I", len(network.params)),
    ]
    for name in sorted(network.params):
        data = np.ascontiguousarray(network.params[name].data, dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, dtype=np.float32) -> Network:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 10 or bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack("<HI", view[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 10
    try:
        cfg = ModelConfig(**json.loads(bytes(view[off : off + cfg_len])))
        off += cfg_len
        (count,) = struct.unpack("<I", view[off : off + 4])
        off += 4
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", view[off : off + 2])
            off += 2
            name = bytes(view[off : off + name_len]).decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack("<B", view[off : off + 1])
            off += 1
            shape = struct.unpack(f"<{ndim}I", view[off : off + 4 * ndim])
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=off)
            off += 4 * size
            params[name] = Tensor(
                arr.reshape(shape).astype(dtype), requires_grad=True
            )
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Network(cfg, dtype=dtype, params=params)
