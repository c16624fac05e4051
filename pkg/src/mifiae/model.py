"""MIFI-AE: masked-volume autoencoder with multi-scale fusion and cross-modal
co-attention feeding a Cox risk head.

All functions take batched inputs (leading patient axis ``B``).  Patients
never interact inside the network; batching only amortises op overhead.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import attention_param_shapes, multihead_attention, sinusoidal_encoding
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"MIFI"
CHECKPOINT_VERSION = 1
ZERO_INIT = ("risk.w", "dec.out.w")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (16, 16, 16)
    base_channels: int = 4
    n_stages: int = 3
    tabular_dim: int = 8
    embed_dim: int = 32
    heads: int = 4
    window: int = 2
    linformer_k: int = 16
    mffsm_heads: int = 1
    cmifm_steps: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must have 3 extents, got {self.input_shape}")
        if self.n_stages != 3:
            raise ConfigError("n_stages is fixed at 3")
        if self.cmifm_steps != 3:
            raise ConfigError("cmifm_steps is fixed at 3")
        for name in ("base_channels", "tabular_dim", "embed_dim", "heads", "window",
                     "linformer_k", "mffsm_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        step = 2 ** self.n_stages
        if any(s < 1 or s % step for s in self.input_shape):
            raise ConfigError(f"input_shape {self.input_shape} must be divisible by {step}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.base_channels % self.mffsm_heads:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by mffsm_heads {self.mffsm_heads}")
        if (8 * self.base_channels) % self.heads:
            raise ConfigError(f"bottleneck channels {8 * self.base_channels} not divisible by heads")

    @property
    def scale_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial extents of F1, F2, F3."""
        return [tuple(s // 2 ** i for s in self.input_shape) for i in (1, 2, 3)]

    @property
    def sequence_length(self) -> int:
        return int(sum(np.prod(s) for s in self.scale_shapes))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown model key {key!r}")
            try:
                kwargs[key] = tuple(int(x) for x in val.split(",")) if key == "input_shape" else int(val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
        return cls(**kwargs)


@dataclass
class ForwardOutput:
    reconstruction: Tensor
    risk: Tensor
    f_img: Tensor
    f_tab: Tensor
    intermediates: list[Tensor]
    gtv: Tensor = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _conv_shape(c_out, c_in, k):
    return (c_out, c_in, k, k, k)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor, in registration order."""
    C, E = cfg.base_channels, cfg.embed_dim
    B = 8 * C
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in, k):
        shapes[f"{name}.w"] = _conv_shape(c_out, c_in, k)
        shapes[f"{name}.b"] = (c_out,)

    def lin(name, n_out, n_in):
        shapes[f"{name}.w"] = (n_out, n_in)
        shapes[f"{name}.b"] = (n_out,)

    def norm(name, n):
        shapes[f"{name}.g"] = (n,)
        shapes[f"{name}.b"] = (n,)

    def attn(name, dim, kv_len=None, kv_proj=None):
        for k, s in attention_param_shapes(dim, kv_len, kv_proj).items():
            shapes[f"{name}.{k}"] = s

    conv("enc.stem", C, 1, 3)
    for i in (1, 2, 3):
        c_in, c_out = C * 2 ** (i - 1), C * 2 ** i
        conv(f"enc{i}.conv1", c_out, c_in, 3)
        conv(f"enc{i}.conv2", c_out, c_out, 3)
        conv(f"enc{i}.skip", c_out, c_in, 1)
        conv(f"enc{i}.proj", C, c_out, 1)

    norm("bott.ln1", B)
    attn("bott.attn", B)
    norm("bott.ln2", B)
    lin("bott.ffn1", 2 * B, B)
    lin("bott.ffn2", B, 2 * B)

    attn("mffsm.attn", C, cfg.sequence_length, cfg.linformer_k)

    for i in (3, 2, 1):
        c_in, c_out = C * 2 ** i + C, C * 2 ** (i - 1)
        conv(f"dec{i}.conv1", c_out, c_in, 3)
        conv(f"dec{i}.conv2", c_out, c_out, 3)
        conv(f"dec{i}.skip", c_out, c_in, 1)
    conv("dec.out", 1, C, 1)

    for i in (1, 2, 3):
        lin(f"cmifm.img{i}", E, C)
    lin("cmifm.tab", E, cfg.tabular_dim)
    for s in range(1, cfg.cmifm_steps + 1):
        p = f"cmifm.step{s}"
        norm(f"{p}.ln_t", E)
        norm(f"{p}.ln_i", E)
        attn(f"{p}.tab_to_img", E)
        attn(f"{p}.img_to_tab", E)
        norm(f"{p}.ln_ft", E)
        lin(f"{p}.ffn_t1", 2 * E, E)
        lin(f"{p}.ffn_t2", E, 2 * E)
        norm(f"{p}.ln_fi", E)
        lin(f"{p}.ffn_i1", 2 * E, E)
        lin(f"{p}.ffn_i2", E, 2 * E)

    lin("risk", 1, 2 * E)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Kaiming-uniform (fan-in) weights, unit norm gains, zero biases.

    The two output maps (risk head and the final 1x1 reconstruction conv)
    start at zero.  A random risk head wastes early Cox gradients undoing a
    random ranking; a random reconstruction head starts far above the
    zero predictor and its first large steps kill the decoder's ReLUs.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1 or name in ZERO_INIT:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _conv(x, params, name, stride=1):
    w = params[f"{name}.w"]
    return T.conv3d(x, w, params[f"{name}.b"], stride=stride, pad=w.shape[-1] // 2)


def _residual(x, params, name, stride=1):
    h = T.relu(_conv(x, params, f"{name}.conv1", stride))
    h = _conv(h, params, f"{name}.conv2")
    return T.relu(T.add(h, _conv(x, params, f"{name}.skip", stride)))


def _ffn(x, params, name1, name2):
    h = T.relu(T.linear(x, params[f"{name1}.w"], params[f"{name1}.b"]))
    return T.linear(h, params[f"{name2}.w"], params[f"{name2}.b"])


def _ln(x, params, name):
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def apply_mask(ct: Tensor, mask: Tensor) -> Tensor:
    """Gross tumour volume: the CT multiplied voxelwise by a binary mask."""
    if ct.shape != mask.shape:
        raise ShapeError(f"apply_mask: ct {ct.shape} vs mask {mask.shape}")
    if not np.isin(mask.data, (0.0, 1.0)).all():
        raise ValueError("apply_mask: mask must be binary")
    return T.mul(ct, mask)


def encode(gtv: Tensor, params: dict[str, Tensor], cfg: ModelConfig):
    """Returns ``(bottleneck, [F1, F2, F3])``; each F_i has ``C`` channels."""
    if gtv.ndim != 5 or gtv.shape[1] != 1 or gtv.shape[2:] != cfg.input_shape:
        raise ShapeError(f"encode: input {gtv.shape} does not match config {cfg.input_shape}")
    x = T.relu(_conv(gtv, params, "enc.stem"))
    feats = []
    for i in (1, 2, 3):
        x = _residual(x, params, f"enc{i}", stride=2)
        feats.append(_conv(x, params, f"enc{i}.proj"))
    return x, feats


def _windows(extent: int, window: int) -> tuple[int, int]:
    w = min(window, extent)
    return w, (-extent) % w


def bottleneck_attend(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """One pre-norm windowed self-attention block over non-overlapping cubes.

    The window edge is clipped to each spatial extent; remainders are
    zero-padded and cropped after.
    """
    nb, ch, *sp = x.shape
    wins, pads = zip(*(_windows(s, cfg.window) for s in sp))
    if any(pads):
        x_in = T.pad(x, [(0, 0), (0, 0)] + [(0, p) for p in pads])
    else:
        x_in = x
    ps = [s + p for s, p in zip(sp, pads)]
    n = [p // w for p, w in zip(ps, wins)]
    tok = T.reshape(x_in, (nb, ch, n[0], wins[0], n[1], wins[1], n[2], wins[2]))
    tok = T.permute(tok, (0, 2, 4, 6, 3, 5, 7, 1))
    tok = T.reshape(tok, (nb, n[0] * n[1] * n[2], wins[0] * wins[1] * wins[2], ch))

    h = _ln(tok, params, "bott.ln1")
    tok = T.add(tok, multihead_attention(h, h, h, _sub(params, "bott.attn"), cfg.heads))
    tok = T.add(tok, _ffn(_ln(tok, params, "bott.ln2"), params, "bott.ffn1", "bott.ffn2"))

    out = T.reshape(tok, (nb, n[0], n[1], n[2], wins[0], wins[1], wins[2], ch))
    out = T.permute(out, (0, 7, 1, 4, 2, 5, 3, 6))
    out = T.reshape(out, (nb, ch, *ps))
    if any(pads):
        out = out[:, :, :sp[0], :sp[1], :sp[2]]
    return out


def mffsm(feats: list[Tensor], params: dict[str, Tensor], cfg: ModelConfig) -> list[Tensor]:
    """Flatten the three scales into one token sequence, attend, split back."""
    if len(feats) != 3:
        raise ShapeError(f"mffsm: expected 3 feature maps, got {len(feats)}")
    C = cfg.base_channels
    nb = feats[0].shape[0]
    flat, sizes = [], []
    for f in feats:
        if f.ndim != 5 or f.shape[1] != C or f.shape[0] != nb:
            raise ShapeError(f"mffsm: feature map {f.shape} does not have {C} channels")
        m = int(np.prod(f.shape[2:]))
        sizes.append(m)
        flat.append(T.reshape(f, (nb, C, m)))
    seq = T.permute(T.concat(flat, axis=2), (0, 2, 1))
    length = seq.shape[1]
    if length != cfg.sequence_length:
        raise ShapeError(f"mffsm: sequence length {length} vs configured {cfg.sequence_length}")
    pe = Tensor(np.broadcast_to(sinusoidal_encoding(length, C), (nb, length, C)).copy())
    h = T.add(seq, pe)
    att = multihead_attention(h, h, h, _sub(params, "mffsm.attn"), cfg.mffsm_heads,
                              kv_proj=cfg.linformer_k)
    seq = T.permute(T.add(seq, att), (0, 2, 1))
    parts = T.split(seq, sizes, axis=2)
    return [T.reshape(p, f.shape) for p, f in zip(parts, feats)]


def decode(bottleneck: Tensor, fused: list[Tensor], params: dict[str, Tensor],
           cfg: ModelConfig) -> Tensor:
    if len(fused) != 3:
        raise ShapeError(f"decode: expected 3 skip maps, got {len(fused)}")
    x = bottleneck
    for i in (3, 2, 1):
        skip = fused[i - 1]
        if skip.shape[2:] != x.shape[2:]:
            raise ShapeError(f"decode: skip {skip.shape} vs decoder state {x.shape} at stage {i}")
        x = T.concat([x, skip], axis=1)
        x = T.nearest_upsample3d(x, 2)
        x = _residual(x, params, f"dec{i}")
    return _conv(x, params, "dec.out")


def _co_attention_step(tab: Tensor, img: Tensor, params: dict[str, Tensor], step: int,
                       heads: int) -> tuple[Tensor, Tensor]:
    p = f"cmifm.step{step}"
    tn = _ln(tab, params, f"{p}.ln_t")
    im = _ln(img, params, f"{p}.ln_i")
    tab = T.add(tab, multihead_attention(tn, im, im, _sub(params, f"{p}.tab_to_img"), heads))
    img = T.add(img, multihead_attention(im, tn, tn, _sub(params, f"{p}.img_to_tab"), heads))
    tab = T.add(tab, _ffn(_ln(tab, params, f"{p}.ln_ft"), params, f"{p}.ffn_t1", f"{p}.ffn_t2"))
    img = T.add(img, _ffn(_ln(img, params, f"{p}.ln_fi"), params, f"{p}.ffn_i1", f"{p}.ffn_i2"))
    return tab, img


def image_tokens(feats: list[Tensor], params: dict[str, Tensor]) -> list[Tensor]:
    """Per-scale image vectors: global average pool, then embed to ``E``."""
    out = []
    for i, f in enumerate(feats, 1):
        pooled = T.mean(f, axis=(2, 3, 4))
        out.append(T.linear(pooled, params[f"cmifm.img{i}.w"], params[f"cmifm.img{i}.b"]))
    return out


def cmifm(feats: list[Tensor], tabular: Tensor, params: dict[str, Tensor],
          cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Chain three co-attention steps; only the tabular stream is carried forward."""
    if len(feats) != cfg.cmifm_steps:
        raise ShapeError(f"cmifm: expected {cfg.cmifm_steps} scales, got {len(feats)}")
    if tabular.ndim != 2 or tabular.shape[1] != cfg.tabular_dim:
        raise ShapeError(f"cmifm: tabular {tabular.shape} vs tabular_dim {cfg.tabular_dim}")
    nb, E = tabular.shape[0], cfg.embed_dim
    tab = T.linear(tabular, params["cmifm.tab.w"], params["cmifm.tab.b"])
    tab = T.reshape(tab, (nb, 1, E))
    img = None
    for step, tok in enumerate(image_tokens(feats, params), 1):
        tab, img = _co_attention_step(tab, T.reshape(tok, (nb, 1, E)), params, step, cfg.heads)
    return T.reshape(img, (nb, E)), T.reshape(tab, (nb, E))


def unfused_features(feats: list[Tensor], tabular: Tensor, params: dict[str, Tensor],
                     cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Stand-in for CMIFM when it is ablated: mean image token, raw tabular embedding."""
    toks = image_tokens(feats, params)
    f_img = T.scale(T.add(T.add(toks[0], toks[1]), toks[2]), 1.0 / 3.0)
    f_tab = T.linear(tabular, params["cmifm.tab.w"], params["cmifm.tab.b"])
    return f_img, f_tab


def risk_head(f_img: Tensor, f_tab: Tensor, params: dict[str, Tensor]) -> Tensor:
    if f_img.shape != f_tab.shape:
        raise ShapeError(f"risk_head: f_img {f_img.shape} vs f_tab {f_tab.shape}")
    joint = T.concat([f_img, f_tab], axis=-1)
    r = T.linear(joint, params["risk.w"], params["risk.b"])
    return T.reshape(r, r.shape[:-1])


def forward_batch(ct: Tensor, mask: Tensor, tabular: Tensor, params: dict[str, Tensor],
                  cfg: ModelConfig, use_mffsm: bool = True, use_cmifm: bool = True) -> ForwardOutput:
    """Batched forward pass; ``ct``/``mask`` are ``[B,1,H,W,D]``, ``tabular`` ``[B,k]``."""
    if tabular.ndim != 2 or tabular.shape[0] != ct.shape[0]:
        raise ShapeError(f"forward: tabular {tabular.shape} vs volumes {ct.shape}")
    gtv = apply_mask(ct, mask)
    bottleneck, feats = encode(gtv, params, cfg)
    bottleneck = bottleneck_attend(bottleneck, params, cfg)
    fused = mffsm(feats, params, cfg) if use_mffsm else feats
    recon = decode(bottleneck, fused, params, cfg)
    if use_cmifm:
        f_img, f_tab = cmifm(feats, tabular, params, cfg)
    else:
        f_img, f_tab = unfused_features(feats, tabular, params, cfg)
    risk = risk_head(f_img, f_tab, params)
    return ForwardOutput(recon, risk, f_img, f_tab, feats, gtv)


def forward(ct: Tensor, mask: Tensor, tabular: Tensor, params: dict[str, Tensor],
            cfg: ModelConfig, use_mffsm: bool = True, use_cmifm: bool = True) -> ForwardOutput:
    """Single-patient forward: ``ct``/``mask`` ``[1,H,W,D]``, ``tabular`` ``[k]``."""
    out = forward_batch(T.reshape(ct, (1, *ct.shape)), T.reshape(mask, (1, *mask.shape)),
                        T.reshape(tabular, (1, *tabular.shape)), params, cfg,
                        use_mffsm=use_mffsm, use_cmifm=use_cmifm)

    def one(t):
        return t[0]

    return ForwardOutput(one(out.reconstruction), one(out.risk), one(out.f_img), one(out.f_tab),
                         [one(f) for f in out.intermediates], one(out.gtv))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def write_tensors(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, u32 version, then per tensor
    (u32 name length, utf-8 name, u32 rank, u32 extents, float64 LE data)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8 or struct.unpack_from("<I", buf, 4)[0] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    out, pos = {}, 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def save_params(path: str | Path, params: dict[str, Tensor]) -> None:
    write_tensors(path, {k: v.data for k, v in params.items()})


def load_params(path: str | Path, cfg: ModelConfig) -> dict[str, Tensor]:
    arrays = read_tensors(path)
    shapes = param_shapes(cfg)
    if set(arrays) != set(shapes):
        missing = sorted(set(shapes) - set(arrays))
        extra = sorted(set(arrays) - set(shapes))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:3]}, extra {extra[:3]})")
    params = {}
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    return params
