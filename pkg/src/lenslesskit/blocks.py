"""
Reconstruction blocks (self-attention, axial attention, gMLP), patch
embeddings, and the encoder-decoder that strings them together.

Shapes follow the token convention ``(batch, n, d)`` for sequences and
``(batch, H, W, C)`` for grids.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "BLOCK_KINDS", "ConfigError", "ModelSpec", "GmlpParams", "AttentionParams", "AxialParams",
    "patchify", "unpatchify", "overlapped_patch_embed", "self_attention", "axial_attention",
    "gmlp_block", "gmlp_block_mults", "gmlp_param_count", "self_attention_mults",
    "axial_attention_mults", "Reconstructor", "build_encoder", "build_decoder", "forward",
]

BLOCK_KINDS = ("gmlp", "vit_sa", "vit_aa")


class ConfigError(ValueError):
    """Inconsistent model configuration, raised when the model is built."""


def _uniform(rng, shape, fan_in, dtype, name):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)


def _const(shape, value, dtype, name):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)


# ---------------------------------------------------------------- patches

def patchify(x, P):
    """``(B, H, W, C) -> (B, n, d)`` with ``n = HW/P**2`` and ``d = C P**2``.

    A single ``(H, W, C)`` image is treated as a batch of one. Patch features
    are ordered (row-in-patch, column-in-patch, channel).
    """
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    B, H, W, C = x.shape
    if H % P or W % P:
        raise ConfigError(f"patch size {P} does not divide image {H}x{W}")
    g = T.space_to_depth(x, P)
    return T.reshape(g, (B, (H // P) * (W // P), P * P * C))


def unpatchify(p, P, H, W):
    """Exact inverse of :func:`patchify`."""
    B, n, d = p.shape
    g = T.reshape(p, (B, H // P, W // P, d))
    return T.depth_to_space(g, P)


def overlapped_patch_embed(x, w, b, P):
    """Convolution with kernel ``2P-1``, stride ``P`` and padding ``P-1``.

    Adjacent tokens share ``P-1`` input rows/columns of receptive field; the
    output grid is exactly ``(H/P, W/P)``.
    """
    H, W = x.shape[1:3]
    if H % P or W % P:
        raise ConfigError(f"patch size {P} does not divide image {H}x{W}")
    k = 2 * P - 1
    if w.shape[:2] != (k, k):
        raise ConfigError(f"overlapped embedding for P={P} needs a {k}x{k} kernel, got {w.shape[:2]}")
    return T.add_bias(T.conv2d(x, w, stride=P, padding=P - 1), b)


# ---------------------------------------------------------------- attention

@dataclass
class AttentionParams:
    """Projections ``q, k`` of shape ``(d, key_dim)`` and ``v`` of shape ``(d, l)``."""

    q: Tensor
    k: Tensor
    v: Tensor
    divisor: float

    @classmethod
    def init(cls, d, l, rng, dtype=np.float64, key_dim=None, divisor=None, prefix="attn"):
        kd = key_dim or l
        return cls(
            _uniform(rng, (d, kd), d, dtype, f"{prefix}.q"),
            _uniform(rng, (d, kd), d, dtype, f"{prefix}.k"),
            _uniform(rng, (d, l), d, dtype, f"{prefix}.v"),
            float(divisor if divisor is not None else math.sqrt(d)),
        )

    def tensors(self):
        return {"q": self.q, "k": self.k, "v": self.v}

    @property
    def count(self):
        return self.q.size + self.k.size + self.v.size


def _attend(p, params):
    if p.shape[-1] != params.q.shape[0]:
        raise ValueError(f"attention: token dim {p.shape[-1]} != parameter rows {params.q.shape[0]}")
    q = T.matmul(p, params.q)
    k = T.matmul(p, params.k)
    v = T.matmul(p, params.v)
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = T.scale(T.bmm(q, kt), 1.0 / params.divisor)
    return T.bmm(T.softmax_rows(logits), v)


def self_attention(p, params: AttentionParams):
    """``softmax((pq)(pk)^T / divisor) pv`` over the tokens of ``p`` (B, n, d).

    There is no positional term, so permuting tokens permutes the output.
    """
    if p.ndim == 2:
        p = T.reshape(p, (1,) + p.shape)
    return _attend(p, params)


def self_attention_mults(n, d, l, key_dim=None, batch=1):
    """Multiplications in :func:`self_attention`: projections, logits, scaling,
    softmax normalisation and the weighted sum."""
    kd = key_dim or l
    return batch * (n * d * (2 * kd + l) + n * n * kd + 2 * n * n + n * n * l)


@dataclass
class AxialParams:
    height: AttentionParams
    width: AttentionParams

    @classmethod
    def init(cls, c_in, l, rng, dtype=np.float64, divisor=None, mode="sequential", prefix="axial"):
        h = AttentionParams.init(c_in, l, rng, dtype, divisor=divisor, prefix=f"{prefix}.h")
        w_in = l if mode == "sequential" else c_in
        w = AttentionParams.init(w_in, l, rng, dtype, divisor=divisor, prefix=f"{prefix}.w")
        return cls(h, w)

    def tensors(self):
        out = {f"h_{k}": v for k, v in self.height.tensors().items()}
        out.update({f"w_{k}": v for k, v in self.width.tensors().items()})
        return out

    @property
    def count(self):
        return self.height.count + self.width.count


def _height_pass(x, params):
    B, H, W, C = x.shape
    cols = T.reshape(T.transpose(x, (0, 2, 1, 3)), (B * W, H, C))
    y = _attend(cols, params)
    return T.transpose(T.reshape(y, (B, W, H, y.shape[-1])), (0, 2, 1, 3))


def _width_pass(x, params):
    B, H, W, C = x.shape
    rows = T.reshape(x, (B * H, W, C))
    y = _attend(rows, params)
    return T.reshape(y, (B, H, W, y.shape[-1]))


def axial_attention(x, params: AxialParams, mode="sequential"):
    """Attention along the height axis (each column independently), then along
    the width axis (each row). ``mode="parallel"`` sums the two passes, both
    taken from ``x``, instead of composing them."""
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if mode == "sequential":
        return _width_pass(_height_pass(x, params.height), params.width)
    if mode == "parallel":
        return T.add(_height_pass(x, params.height), _width_pass(x, params.width))
    raise ConfigError(f"unknown axial mode {mode!r}")


def axial_attention_mults(Hg, Wg, c_in, l, mode="sequential", batch=1):
    h = Wg * self_attention_mults(Hg, c_in, l)
    w = Hg * self_attention_mults(Wg, l if mode == "sequential" else c_in, l)
    return batch * (h + w)


# ---------------------------------------------------------------- gMLP

@dataclass
class GmlpParams:
    """Patch mixer ``w (d, h)``, gate ``u (h, h)`` with bias ``b (h)``, token mixer ``v (h, l)``.

    With ``spatial`` the gate acts over tokens instead: ``u (n, n)``, ``b (n)``.
    """

    w: Tensor
    u: Tensor
    b: Tensor
    v: Tensor
    spatial: bool = False

    @classmethod
    def init(cls, d, h, l, rng, dtype=np.float64, spatial=False, n_tokens=None, prefix="gmlp"):
        g = n_tokens if spatial else h
        if spatial and not n_tokens:
            raise ConfigError("spatial gate needs the token count")
        return cls(
            _uniform(rng, (d, h), d, dtype, f"{prefix}.w"),
            _uniform(rng, (g, g), g, dtype, f"{prefix}.u"),
            _const((g,), 1.0, dtype, f"{prefix}.b"),
            _uniform(rng, (h, l), h, dtype, f"{prefix}.v"),
            spatial,
        )

    def tensors(self):
        return {"w": self.w, "u": self.u, "b": self.b, "v": self.v}

    @property
    def count(self):
        return self.w.size + self.u.size + self.b.size + self.v.size


def gmlp_block(p, params: GmlpParams, act=T.gelu, out_act=T.identity):
    """``r = out_act(((act(p w) u + b) * act(p w)) v)`` in four stages::

        q = act(p w)      patch mixer
        s = q u + b       gate
        t = q * s         gated mixer (Hadamard)
        r = out_act(t v)  token mixer
    """
    if p.ndim == 2:
        p = T.reshape(p, (1,) + p.shape)
    if p.shape[-1] != params.w.shape[0]:
        raise ValueError(f"gmlp: token dim {p.shape[-1]} != w rows {params.w.shape[0]}")
    q = act(T.matmul(p, params.w))
    if params.spatial:
        B, n, h = q.shape
        if params.u.shape[0] != n:
            raise ValueError(f"gmlp: spatial gate built for {params.u.shape[0]} tokens, got {n}")
        qt = T.transpose(q, (0, 2, 1))
        ut = T.transpose(params.u, (1, 0))
        s = T.transpose(T.add_bias(T.matmul(qt, ut), params.b), (0, 2, 1))
    else:
        s = T.add_bias(T.matmul(q, params.u), params.b)
    t = T.mul(q, s)
    return out_act(T.matmul(t, params.v))


def gmlp_block_mults(n, d, h, l, batch=1, spatial=False):
    """Stage-by-stage multiplications: ``ndh + nhh + nh + nhl`` (feature gate)."""
    gate = n * n * h if spatial else n * h * h
    return batch * (n * d * h + gate + n * h + n * h * l)


def gmlp_param_count(d, h, l):
    """``h (d + (h + 1) + l)``."""
    return h * (d + (h + 1) + l)


# ---------------------------------------------------------------- model

@dataclass
class ModelSpec:
    """Declarative encoder-decoder description.

    Stage 0 embeds ``patch_size`` patches of the input image; later stages
    work on the same token grid with unit patches, mapping the previous
    embedding to the next. The decoder is ``decoder_layers`` 3x3
    convolutions, the last one emitting ``out_channels * patch_size**2``
    channels that are rearranged back to pixels, followed by a bilinear
    resize to ``out_size``.
    """

    block_kind: str = "gmlp"
    embed_dims: tuple = (512,)
    patch_size: int = 4
    mlp_ratio: int = 6
    in_size: tuple = (160, 160)
    out_size: tuple = (80, 80)
    in_channels: int = 3
    out_channels: int | None = None
    decoder_channels: int = 64
    decoder_layers: int = 4
    residual: bool = False
    spatial_gate: bool = False
    axial_mode: str = "sequential"
    seed: int = 0

    def __post_init__(self):
        self.embed_dims = tuple(int(e) for e in self.embed_dims)
        self.in_size = tuple(int(s) for s in self.in_size)
        self.out_size = tuple(int(s) for s in self.out_size)
        if self.out_channels is None:
            self.out_channels = self.in_channels

    def validate(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind: unknown {self.block_kind!r}; expected one of {BLOCK_KINDS}")
        if not self.embed_dims:
            raise ConfigError("embed_dims: must be non-empty")
        H, W = self.in_size
        if self.patch_size < 1 or H % self.patch_size or W % self.patch_size:
            raise ConfigError(f"patch_size: {self.patch_size} does not divide in_size {self.in_size}")
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers: need at least one layer")
        if self.axial_mode not in ("sequential", "parallel"):
            raise ConfigError(f"axial_mode: unknown {self.axial_mode!r}")
        if self.spatial_gate and self.block_kind != "gmlp":
            raise ConfigError("spatial_gate: only meaningful for gmlp blocks")
        return self

    @property
    def token_grid(self):
        return self.in_size[0] // self.patch_size, self.in_size[1] // self.patch_size

    def stages(self):
        """``(patch, c_in, embed)`` per stage."""
        out, c = [], self.in_channels
        for i, e in enumerate(self.embed_dims):
            out.append((self.patch_size if i == 0 else 1, c, e))
            c = e
        return out

    def to_dict(self):
        d = asdict(self)
        d["embed_dims"] = list(self.embed_dims)
        d["in_size"] = list(self.in_size)
        d["out_size"] = list(self.out_size)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown ModelSpec field")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class _Stage:
    kind: str
    patch: int
    c_in: int
    embed: int
    block: object
    embed_w: Tensor | None = None
    embed_b: Tensor | None = None
    bn_gamma: Tensor | None = None
    bn_beta: Tensor | None = None
    running: dict = field(default_factory=dict)


class Reconstructor:
    """Encoder-decoder ``y = dec(enc(x))`` built from a :class:`ModelSpec`."""

    bn_momentum = 0.1

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec.validate()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(spec.seed)
        self.stages = build_encoder(spec, rng, self.dtype)
        self.decoder = build_decoder(spec, rng, self.dtype)

    # parameters -------------------------------------------------------
    def named_parameters(self):
        out = {}
        for i, st in enumerate(self.stages):
            pre = f"stage{i}"
            if st.embed_w is not None:
                out[f"{pre}.embed.w"] = st.embed_w
                out[f"{pre}.embed.b"] = st.embed_b
            for k, v in st.block.tensors().items():
                out[f"{pre}.{st.kind}.{k}"] = v
            out[f"{pre}.bn.gamma"] = st.bn_gamma
            out[f"{pre}.bn.beta"] = st.bn_beta
        for j, (w, b) in enumerate(self.decoder):
            out[f"decoder{j}.w"] = w
            out[f"decoder{j}.b"] = b
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def param_megabytes(self, precision=4):
        return self.param_count() * precision / 1e6

    def state_dict(self):
        state = {k: v.data for k, v in self.named_parameters().items()}
        for i, st in enumerate(self.stages):
            for k, v in st.running.items():
                state[f"stage{i}.bn.running_{k}"] = v
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        for k, p in params.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks {k}")
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype).copy()
        for i, st in enumerate(self.stages):
            for name in ("mean", "var"):
                key = f"stage{i}.bn.running_{name}"
                if key in state:
                    st.running[name] = np.asarray(state[key], dtype=self.dtype).copy()

    # forward ------------------------------------------------------------
    def encode(self, x, training=True):
        g = x
        for st in self.stages:
            g = _stage_forward(st, g, self.spec, training, self.bn_momentum)
        return g

    def decode(self, g):
        spec = self.spec
        for j, (w, b) in enumerate(self.decoder):
            g = T.add_bias(T.conv2d(g, w, stride=1, padding=1), b)
            if j < len(self.decoder) - 1:
                g = T.gelu(g)
        g = T.depth_to_space(g, spec.patch_size)
        return T.bilinear_resize(g, spec.out_size)

    def __call__(self, x, training=True):
        return forward(self, x, training)


def _stage_forward(st, g, spec, training, momentum):
    B, H, W, _ = g.shape
    if st.kind == "vit_aa":
        tokens = overlapped_patch_embed(g, st.embed_w, st.embed_b, st.patch)
        y = axial_attention(tokens, st.block, spec.axial_mode)
        if spec.residual:
            y = T.add(y, tokens)
        Hg, Wg = y.shape[1:3]
        flat = y
    else:
        tokens = patchify(g, st.patch)
        fn = gmlp_block if st.kind == "gmlp" else self_attention
        flat = fn(tokens, st.block)
        if spec.residual:
            flat = T.add(flat, tokens)
        Hg, Wg = H // st.patch, W // st.patch
    if training or not st.running:
        out, (mean, var) = T.batch_norm(flat, st.bn_gamma, st.bn_beta)
        if training:
            if st.running:
                st.running["mean"] = ((1 - momentum) * st.running["mean"] + momentum * mean).astype(mean.dtype)
                st.running["var"] = ((1 - momentum) * st.running["var"] + momentum * var).astype(var.dtype)
            else:
                st.running = {"mean": mean.copy(), "var": var.copy()}
    else:
        out, _ = T.batch_norm(flat, st.bn_gamma, st.bn_beta, stats=(st.running["mean"], st.running["var"]))
    return T.reshape(out, (B, Hg, Wg, st.embed))


def build_encoder(spec: ModelSpec, rng, dtype=np.float32):
    """Patch embedding plus one block per embedding dim, each followed by batch norm."""
    spec.validate()
    stages = []
    Hg, Wg = spec.token_grid
    for i, (P, c_in, e) in enumerate(spec.stages()):
        pre = f"stage{i}"
        st = _Stage(spec.block_kind, P, c_in, e, None)
        if spec.block_kind == "gmlp":
            d = c_in * P * P
            st.block = GmlpParams.init(d, spec.mlp_ratio * d, e, rng, dtype, spatial=spec.spatial_gate,
                                       n_tokens=Hg * Wg, prefix=f"{pre}.gmlp")
            if spec.residual and d != e:
                raise ConfigError(f"residual: stage {i} maps {d} features to {e}")
        elif spec.block_kind == "vit_sa":
            d = c_in * P * P
            st.block = AttentionParams.init(d, e, rng, dtype, prefix=f"{pre}.vit_sa")
            if spec.residual and d != e:
                raise ConfigError(f"residual: stage {i} maps {d} features to {e}")
        else:
            k = 2 * P - 1
            st.embed_w = _uniform(rng, (k, k, c_in, e), k * k * c_in, dtype, f"{pre}.embed.w")
            st.embed_b = _const((e,), 0.0, dtype, f"{pre}.embed.b")
            st.block = AxialParams.init(e, e, rng, dtype, divisor=math.sqrt(c_in * P),
                                        mode=spec.axial_mode, prefix=f"{pre}.vit_aa")
        st.bn_gamma = _const((e,), 1.0, dtype, f"{pre}.bn.gamma")
        st.bn_beta = _const((e,), 0.0, dtype, f"{pre}.bn.beta")
        stages.append(st)
    return stages


def build_decoder(spec: ModelSpec, rng, dtype=np.float32):
    """``decoder_layers`` 3x3 convolutions as ``(weight, bias)`` pairs."""
    chans = [spec.embed_dims[-1]] + [spec.decoder_channels] * (spec.decoder_layers - 1)
    chans.append(spec.out_channels * spec.patch_size ** 2)
    layers = []
    for j in range(spec.decoder_layers):
        ci, co = chans[j], chans[j + 1]
        w = _uniform(rng, (3, 3, ci, co), 9 * ci, dtype, f"decoder{j}.w")
        b = _const((co,), 0.0, dtype, f"decoder{j}.b")
        layers.append((w, b))
    return layers


def forward(model: Reconstructor, x, training=True):
    """Run the model on ``x`` of shape ``(B, H, W, C)`` (or one ``(H, W, C)`` image)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != tuple(model.spec.in_size) + (model.spec.in_channels,):
        raise ValueError(f"input {x.shape[1:]} does not match spec "
                         f"{tuple(model.spec.in_size) + (model.spec.in_channels,)}")
    return model.decode(model.encode(x, training))
