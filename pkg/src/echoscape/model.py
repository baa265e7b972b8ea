"""EchoPT: a three-branch next-frame predictor for sonar energyscapes.

Branches (all fused at half resolution):

* transformer: frames are cut into patches, each patch position becomes a
  token holding that patch from every input frame. Tokens are embedded,
  given a learned position vector, concatenated with the velocity
  scalars, batch-normalised and passed through parallel pre-norm blocks.
  The tokens are unembedded back to a full-size map that feeds two convs.
* conv: a strided conv over the depth-stacked frames and a transposed conv.
* MLP: the velocity scalars mapped to a small spatial map.

A fusion conv, an upsampling transposed conv and an output conv with a
final relu produce the predicted frame.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .sim import Energyscape


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EchoPTConfig:
    num_ranges: int = 128
    num_azimuths: int = 64
    n_frames: int = 3
    patch_h: int = 16
    patch_w: int = 8
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    qkv_dim: int = 64
    ffn_dim: int = 128
    # transformer conv a, transformer conv b, conv branch, fusion, upsampler
    conv_channels: tuple = (4, 8, 8, 8, 4)
    mlp_dims: tuple = (10, 10, 200)
    mlp_map: tuple = (20, 10)
    velocity_inputs: int = 8
    conv_kernel: tuple = (3, 3)
    tconv_kernel: tuple = (3, 3)
    out_kernel: tuple = (3, 3)
    pos_slots: int = 0
    velocity_scale: tuple = (0.3, 1.0)
    # conv-branch downsampling = fusion-head upsampling factor
    fusion_stride: int = 1

    def __post_init__(self):
        for name in ("conv_channels", "mlp_dims", "mlp_map", "conv_kernel", "tconv_kernel",
                     "out_kernel", "velocity_scale"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.num_ranges % self.patch_h or self.num_azimuths % self.patch_w:
            raise ConfigError(f"grid {self.num_ranges}x{self.num_azimuths} is not divisible by "
                              f"patch {self.patch_h}x{self.patch_w}")
        if self.qkv_dim % self.n_heads:
            raise ConfigError(f"qkv_dim {self.qkv_dim} not divisible by n_heads {self.n_heads}")
        if self.velocity_inputs != 2 * (self.n_frames + 1):
            raise ConfigError(f"velocity_inputs must be 2*(n_frames+1) = {2 * (self.n_frames + 1)}")
        if self.fusion_stride < 1:
            raise ConfigError("fusion_stride must be >= 1")
        if self.num_ranges % self.fusion_stride or self.num_azimuths % self.fusion_stride:
            raise ConfigError(f"grid sides must be divisible by fusion_stride {self.fusion_stride}")
        if len(self.conv_channels) != 5:
            raise ConfigError("conv_channels needs five entries")
        if self.mlp_dims[-1] != self.mlp_map[0] * self.mlp_map[1]:
            raise ConfigError(f"last MLP width {self.mlp_dims[-1]} must equal map size {self.mlp_map}")
        if min(self.tconv_kernel) < self.fusion_stride:
            raise ConfigError(f"tconv_kernel must be at least fusion_stride {self.fusion_stride}")
        if self.pos_slots and self.pos_slots < self.num_patches:
            raise ConfigError(f"pos_slots {self.pos_slots} < number of patches {self.num_patches}")

    @property
    def num_patches(self):
        return (self.num_ranges // self.patch_h) * (self.num_azimuths // self.patch_w)

    @property
    def width(self):
        """Token width inside the transformer (embedding plus velocity scalars)."""
        return self.embed_dim + self.velocity_inputs

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_scale(cls):
        """Dimensions of the full-size network (about nine million parameters)."""
        return cls(num_ranges=500, num_azimuths=100, patch_h=25, patch_w=5, embed_dim=376,
                   n_layers=8, n_heads=6, qkv_dim=384, ffn_dim=500, conv_kernel=(20, 5),
                   tconv_kernel=(20, 5), out_kernel=(20, 5), pos_slots=2000,
                   conv_channels=(16, 32, 16, 16, 4), fusion_stride=2)


@dataclass
class ModelParams:
    cfg: EchoPTConfig
    tensors: dict
    bn: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype):
        tensors = {k: T.Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                   for k, v in self.tensors.items()}
        bn = {}
        for k, s in self.bn.items():
            ns = T.BatchNormState(s.running_mean.size, s.momentum, s.eps, dtype)
            ns.running_mean = s.running_mean.astype(dtype)
            ns.running_var = s.running_var.astype(dtype)
            bn[k] = ns
        return ModelParams(self.cfg, tensors, bn)

    def state_arrays(self):
        out = {k: v.data for k, v in self.tensors.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def load_state_arrays(self, arrays):
        for k, v in self.tensors.items():
            v.data[...] = arrays[k]
        for k, s in self.bn.items():
            s.running_mean[...] = arrays[f"{k}.running_mean"]
            s.running_var[...] = arrays[f"{k}.running_var"]

    def copy(self):
        p = self.astype(self.dtype)
        return p

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta["config"] = self.cfg.to_dict()
        return save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = load_arrays(path)
        cfg = EchoPTConfig.from_dict(meta["config"])
        params = build_model(cfg, np.random.default_rng(0), dtype)
        params.load_state_arrays(arrays)
        return params


def count_params(params) -> int:
    """Learnable scalars (batch-norm running statistics are not counted)."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return int(sum(t.data.size for t in tensors.values()))


def build_model(cfg: EchoPTConfig, rng, dtype=np.float32) -> ModelParams:
    cfg.validate()
    tensors = {}
    bn = {}

    def weight(name, shape, fan_in, gain=1.0):
        bound = gain * math.sqrt(3.0 / fan_in)
        tensors[name] = T.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                                 requires_grad=True, name=name)

    def const(name, shape, value):
        tensors[name] = T.Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)

    relu_gain = math.sqrt(2.0)
    F, ph, pw = cfg.n_frames, cfg.patch_h, cfg.patch_w
    E, W, Q = cfg.embed_dim, cfg.width, cfg.qkv_dim
    patch_in = F * ph * pw

    weight("embed.w", (patch_in, E), patch_in)
    const("embed.b", (E,), 0.0)
    weight("posembed", (cfg.pos_slots or cfg.num_patches, E), E)
    const("bn_in.gamma", (W,), 1.0)
    const("bn_in.beta", (W,), 0.0)
    bn["bn_in"] = T.BatchNormState(W, dtype=dtype)
    for i in range(cfg.n_layers):
        p = f"block{i}."
        const(p + "ln.gamma", (W,), 1.0)
        const(p + "ln.beta", (W,), 0.0)
        for m in ("q", "k", "v"):
            weight(p + m + ".w", (W, Q), W)
            const(p + m + ".b", (Q,), 0.0)
        weight(p + "o.w", (Q, W), Q, 1.0 / math.sqrt(2 * cfg.n_layers))
        const(p + "o.b", (W,), 0.0)
        weight(p + "ffn1.w", (W, cfg.ffn_dim), W, relu_gain)
        const(p + "ffn1.b", (cfg.ffn_dim,), 0.0)
        weight(p + "ffn2.w", (cfg.ffn_dim, W), cfg.ffn_dim, 1.0 / math.sqrt(2 * cfg.n_layers))
        const(p + "ffn2.b", (W,), 0.0)
    const("ln_out.gamma", (W,), 1.0)
    const("ln_out.beta", (W,), 0.0)
    weight("unembed.w", (W, ph * pw), W)

    ca, cb, cc, cd, ct = cfg.conv_channels
    kh, kw = cfg.conv_kernel
    th, tw = cfg.tconv_kernel
    oh, ow = cfg.out_kernel
    weight("tf_conv_a.w", (ca, 1, kh, kw), kh * kw, relu_gain)
    const("tf_conv_a.b", (ca,), 0.0)
    weight("tf_conv_b.w", (cb, ca, kh, kw), ca * kh * kw, relu_gain)
    const("tf_conv_b.b", (cb,), 0.0)
    const("tf_ln.gamma", (cb,), 1.0)
    const("tf_ln.beta", (cb,), 0.0)

    weight("conv_c.w", (cc, F, kh, kw), F * kh * kw, relu_gain)
    weight("tconv_1.w", (cc, cc, th, tw), cc * th * tw, relu_gain)
    const("tconv_1.b", (cc,), 0.0)

    dims = (cfg.velocity_inputs,) + cfg.mlp_dims
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        name = "fc" if i == 0 else f"fc_{i}"
        weight(name + ".w", (a, b), a, relu_gain)
        const(name + ".b", (b,), 0.0)

    fused = ca + cb + cc + 1
    weight("fuse_d.w", (cd, fused, kh, kw), fused * kh * kw, relu_gain)
    # strided upsampling: each output sees about 1/stride^2 of the kernel taps
    weight("tconv_2.w", (cd, ct, th, tw), cd * th * tw / cfg.fusion_stride ** 2, relu_gain)
    const("tconv_2.b", (ct,), 0.0)
    weight("conv2.w", (1, ct, oh, ow), ct * oh * ow)
    const("conv2.b", (1,), 0.0)
    return ModelParams(cfg, tensors, bn)


# -- forward -----------------------------------------------------------------

def _attention(h, p, pre, n_heads):
    B, P, _ = h.shape
    Q = p[pre + "q.w"].shape[1]
    d = Q // n_heads

    def heads(t):
        return t.reshape(B, P, n_heads, d).transpose(0, 2, 1, 3)

    q = heads(h @ p[pre + "q.w"] + p[pre + "q.b"])
    k = heads(h @ p[pre + "k.w"] + p[pre + "k.b"])
    v = heads(h @ p[pre + "v.w"] + p[pre + "v.b"])
    att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)))
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, P, Q)
    return ctx @ p[pre + "o.w"] + p[pre + "o.b"]


def _patchify(x, cfg):
    B, F, R, A = x.shape
    nr, na = R // cfg.patch_h, A // cfg.patch_w
    t = x.reshape(B, F, nr, cfg.patch_h, na, cfg.patch_w).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(B, nr * na, F * cfg.patch_h * cfg.patch_w)


def _unpatchify(tokens, cfg):
    B = tokens.shape[0]
    nr, na = cfg.num_ranges // cfg.patch_h, cfg.num_azimuths // cfg.patch_w
    t = tokens.reshape(B, nr, na, cfg.patch_h, cfg.patch_w).transpose(0, 1, 3, 2, 4)
    return t.reshape(B, 1, cfg.num_ranges, cfg.num_azimuths)


def forward_tensor(params: ModelParams, frames, velocities, training=False):
    """Batched forward on normalised inputs.

    ``frames`` is (B, n_frames, R, A); ``velocities`` (B, velocity_inputs),
    already scaled. Returns a (B, 1, R, A) tensor.
    """
    cfg, p = params.cfg, params.tensors
    x = T.as_tensor(frames, p["embed.w"].dtype)
    vel = np.asarray(velocities, dtype=x.dtype)
    B = x.shape[0]
    if x.shape[1:] != (cfg.n_frames, cfg.num_ranges, cfg.num_azimuths):
        raise T.ShapeError(f"input stack {x.shape[1:]} does not match config "
                           f"({cfg.n_frames}, {cfg.num_ranges}, {cfg.num_azimuths})")
    if vel.shape != (B, cfg.velocity_inputs):
        raise T.ShapeError(f"velocities {vel.shape} do not match ({B}, {cfg.velocity_inputs})")
    P = cfg.num_patches

    # transformer branch
    tok = _patchify(x, cfg) @ p["embed.w"] + p["embed.b"]
    tok = tok + p["posembed"][:P]
    vtok = T.Tensor(np.broadcast_to(vel[:, None, :], (B, P, cfg.velocity_inputs)).copy())
    h = T.concat([tok, vtok], axis=2)
    h = T.batch_norm(h, p["bn_in.gamma"], p["bn_in.beta"], params.bn["bn_in"], training, axis=2)
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        n = T.layer_norm(h, p[pre + "ln.gamma"], p[pre + "ln.beta"])
        ffn = T.relu(n @ p[pre + "ffn1.w"] + p[pre + "ffn1.b"]) @ p[pre + "ffn2.w"] + p[pre + "ffn2.b"]
        h = h + _attention(n, p, pre, cfg.n_heads) + ffn
    h = T.layer_norm(h, p["ln_out.gamma"], p["ln_out.beta"])
    img = _unpatchify(h @ p["unembed.w"], cfg)
    a = T.relu(T.conv2d(img, p["tf_conv_a.w"], p["tf_conv_a.b"]))
    b = T.conv2d(a, p["tf_conv_b.w"], p["tf_conv_b.b"])
    b = T.layer_norm(b.transpose(0, 2, 3, 1), p["tf_ln.gamma"], p["tf_ln.beta"]).transpose(0, 3, 1, 2)
    b = T.relu(b)

    # conv branch over the depth-stacked frames
    c = T.relu(T.conv2d(x, p["conv_c.w"], None, stride=cfg.fusion_stride))
    c = T.relu(T.conv_transpose2d(c, p["tconv_1.w"], p["tconv_1.b"], stride=1))
    Hh, Wh = c.shape[2:]

    # velocity MLP branch
    m = T.Tensor(vel)
    dims = (cfg.velocity_inputs,) + cfg.mlp_dims
    for i in range(len(dims) - 1):
        name = "fc" if i == 0 else f"fc_{i}"
        m = m @ p[name + ".w"] + p[name + ".b"]
        if i < len(dims) - 2:
            m = T.relu(m)
    m = m.reshape(B, 1, *cfg.mlp_map)

    fused = T.concat([T.resize_bilinear(a, Hh, Wh), T.resize_bilinear(b, Hh, Wh), c,
                      T.resize_bilinear(m, Hh, Wh)], axis=1)
    d = T.relu(T.conv2d(fused, p["fuse_d.w"], None))
    u = T.relu(T.conv_transpose2d(d, p["tconv_2.w"], p["tconv_2.b"], stride=cfg.fusion_stride))
    out = T.conv2d(u, p["conv2.w"], p["conv2.b"])
    return T.relu(out)


# -- user-facing wrappers ----------------------------------------------------

def scale_velocities(cfg: EchoPTConfig, vel):
    vel = np.asarray(vel, dtype=np.float64)
    s = np.tile(np.asarray(cfg.velocity_scale, dtype=np.float64), cfg.velocity_inputs // 2)
    return vel / s


def input_scale(frames):
    """Per-stack normalisation constant: RMS over the input frames."""
    f = np.asarray(frames, dtype=np.float64)
    axes = tuple(range(1, f.ndim))
    s = np.sqrt(np.mean(f * f, axis=axes))
    return np.where(s > 0, s, 1.0)


def predict_arrays(params: ModelParams, frames, velocities, batch_size=32):
    """Predict next frames for (B, n_frames, R, A) inputs; returns float64 (B, R, A)."""
    frames = np.asarray(frames)
    out = np.empty((frames.shape[0],) + frames.shape[2:], dtype=np.float64)
    dtype = params.dtype
    for i in range(0, frames.shape[0], batch_size):
        f = frames[i:i + batch_size].astype(np.float64)
        s = input_scale(f)
        xin = (f / s[:, None, None, None]).astype(dtype)
        vin = scale_velocities(params.cfg, velocities[i:i + batch_size]).astype(dtype)
        y = forward_tensor(params, xin, vin, training=False).data[:, 0]
        out[i:i + batch_size] = y * s[:, None, None]
    return out


def forward(params: ModelParams, stack) -> Energyscape:
    """Predict the frame that follows a :class:`~echoscape.dataset.FrameStack`."""
    cfg = params.cfg
    frames = stack.frame_array()
    if frames.shape != (cfg.n_frames, cfg.num_ranges, cfg.num_azimuths):
        raise T.ShapeError(f"stack of shape {frames.shape} does not match the model grid "
                           f"({cfg.n_frames}, {cfg.num_ranges}, {cfg.num_azimuths})")
    y = predict_arrays(params, frames[None], stack.velocity_vector()[None])[0]
    last = stack.frames[-1]
    period = last.timestamp - stack.frames[-2].timestamp if stack.n_frames > 1 else 0.2
    return last.with_data(y, last.timestamp + period)
