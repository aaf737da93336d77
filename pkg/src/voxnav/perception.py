"""Forward evaluation of the voxel encoder and actor/critic networks.

The voxel grid is consumed with its z slices as input channels, so every
convolution is 2D over the x-y plane.  A 3D-convolution encoder with the same
layer budget is kept as the comparison variant.  Everything here is inference
only: weights come from a deterministic init or a weight file.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WEIGHTS_MAGIC = b"VXNET1"


class ShapeError(ValueError):
    pass


def mish(x):
    """x * tanh(softplus(x)), with softplus evaluated as logaddexp(0, x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * np.tanh(np.logaddexp(0.0, x))


_ACTIVATIONS = {"none": lambda x: x, "mish": mish}


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True, eq=False)
class Conv2dLayer:
    weights: np.ndarray  # (O, C, k, k)
    bias: np.ndarray  # (O,)
    stride: int = 1
    padding: int = 0
    activation: str = "none"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ShapeError(f"conv2d weights must be (O, C, k, k) with odd k, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d bias length must equal output channels")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ShapeError("non-finite conv parameters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    def output_shape(self, in_shape) -> tuple:
        C, H, W = in_shape
        if C != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {C}")
        k, s, p = self.kernel, self.stride, self.padding
        return (self.out_channels, (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1)


@dataclass(frozen=True, eq=False)
class Conv3dLayer:
    weights: np.ndarray  # (O, C, k, k, k)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: str = "none"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 5 or len(set(w.shape[2:])) != 1 or w.shape[2] % 2 == 0:
            raise ShapeError(f"conv3d weights must be (O, C, k, k, k) with odd k, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError("conv3d bias length must equal output channels")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    def output_shape(self, in_shape) -> tuple:
        C, D, H, W = in_shape
        if C != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {C}")
        k, s, p = self.kernel, self.stride, self.padding
        return (self.out_channels,) + tuple((n + 2 * p - k) // s + 1 for n in (D, H, W))


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"dense weights {w.shape} / bias {b.shape} mismatch")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"dense expected {self.in_features} inputs, got {x.shape[-1]}")
        return _ACTIVATIONS[self.activation](x @ self.weights.T + self.bias)


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gain: np.ndarray
    offset: np.ndarray
    eps: float = 1e-5

    @classmethod
    def default(cls, dim: int) -> "LayerNormParams":
        return cls(np.ones(dim), np.zeros(dim))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + self.eps) * self.gain + self.offset


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x, layer: Conv2dLayer) -> np.ndarray:
    """(C, H, W) -> (O, H', W') zero-padded strided cross-correlation plus activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {x.shape}")
    layer.output_shape(x.shape)
    k, s, p = layer.kernel, layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]  # (C, H', W', k, k)
    y = np.tensordot(layer.weights, win, axes=([1, 2, 3], [0, 3, 4]))  # (O, H', W')
    y += layer.bias[:, None, None]
    return _ACTIVATIONS[layer.activation](y)


def conv3d_forward(x, layer: Conv3dLayer) -> np.ndarray:
    """(C, D, H, W) -> (O, D', H', W')."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"conv3d input must be (C, D, H, W), got {x.shape}")
    layer.output_shape(x.shape)
    k, s, p = layer.kernel, layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    y = np.tensordot(layer.weights, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    y += layer.bias[:, None, None, None]
    return _ACTIVATIONS[layer.activation](y)


# ---------------------------------------------------------------------------
# network description


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes of one actor or critic network.

    ``variant`` is ``"2d"`` (z slices as channels) or ``"3d"`` (single-channel
    volume, 3D kernels).  ``use_voxels=False`` drops the CNN branch entirely.
    """

    obs_dim: int = 506
    out_dim: int = 29
    voxel_shape: tuple = (40, 32, 32)
    variant: str = "2d"
    use_voxels: bool = True
    conv_channels: int = 8
    n_conv: int = 3
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    cnn_hidden: int = 64
    cnn_out: int = 64
    mlp_hidden: int = 256
    mlp_out: int = 256
    fusion_out: int = 256

    def __post_init__(self):
        if self.variant not in ("2d", "3d"):
            raise ValueError("variant must be '2d' or '3d'")

    def conv_shapes(self) -> list[tuple]:
        """Input shape followed by every conv output shape."""
        if self.variant == "2d":
            shapes = [tuple(self.voxel_shape)]
        else:
            shapes = [(1,) + tuple(self.voxel_shape)]
        k, s, p = self.kernel, self.stride, self.padding
        for _ in range(self.n_conv):
            spatial = tuple((n + 2 * p - k) // s + 1 for n in shapes[-1][1:])
            shapes.append((self.conv_channels,) + spatial)
        return shapes

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.conv_shapes()[-1]))

    def shape_chain(self) -> list:
        return self.conv_shapes() + [self.flat_dim, self.cnn_out]


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    # float32-representable so a weight-file round trip is lossless
    return rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class PolicyNet:
    spec: NetworkSpec
    mlp1: DenseLayer
    ln_mlp: LayerNormParams
    mlp2: DenseLayer
    convs: tuple
    cnn1: Optional[DenseLayer]
    ln_cnn: Optional[LayerNormParams]
    cnn2: Optional[DenseLayer]
    fusion: DenseLayer
    head: DenseLayer

    def __post_init__(self):
        sp = self.spec
        _expect(self.mlp1.in_features == sp.obs_dim, f"mlp1 input {self.mlp1.in_features} != obs_dim {sp.obs_dim}")
        _expect(self.mlp2.in_features == self.mlp1.out_features, "mlp1 -> mlp2 mismatch")
        _expect(len(self.ln_mlp.gain) == self.mlp1.out_features, "mlp layer-norm size mismatch")
        fused = self.mlp2.out_features
        if sp.use_voxels:
            shapes = sp.conv_shapes()
            _expect(len(self.convs) == sp.n_conv, "conv count mismatch")
            for layer, s_in, s_out in zip(self.convs, shapes[:-1], shapes[1:]):
                _expect(layer.output_shape(s_in) == s_out, f"conv shape chain broken at {s_in} -> {s_out}")
            _expect(self.cnn1.in_features == sp.flat_dim, "flatten -> cnn1 mismatch")
            _expect(self.cnn2.in_features == self.cnn1.out_features, "cnn1 -> cnn2 mismatch")
            _expect(self.cnn2.out_features == sp.cnn_out, "cnn output size mismatch")
            fused += self.cnn2.out_features
        _expect(self.fusion.in_features == fused, f"fusion input {self.fusion.in_features} != {fused}")
        _expect(self.head.in_features == self.fusion.out_features, "fusion -> head mismatch")
        _expect(self.head.out_features == sp.out_dim, "head output size mismatch")

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int = 0) -> "PolicyNet":
        rng = np.random.default_rng(seed)

        def dense(n_in, n_out, act):
            return DenseLayer(_uniform(rng, n_in, (n_out, n_in)), _uniform(rng, n_in, n_out), act)

        mlp1 = dense(spec.obs_dim, spec.mlp_hidden, "none")
        mlp2 = dense(spec.mlp_hidden, spec.mlp_out, "none")
        convs, cnn1, cnn2, ln_cnn = (), None, None, None
        if spec.use_voxels:
            shapes = spec.conv_shapes()
            k = spec.kernel
            layers = []
            for s_in in shapes[:-1]:
                c_in = s_in[0]
                if spec.variant == "2d":
                    fan = c_in * k * k
                    w = _uniform(rng, fan, (spec.conv_channels, c_in, k, k))
                    layers.append(Conv2dLayer(w, _uniform(rng, fan, spec.conv_channels),
                                              spec.stride, spec.padding, "mish"))
                else:
                    fan = c_in * k ** 3
                    w = _uniform(rng, fan, (spec.conv_channels, c_in, k, k, k))
                    layers.append(Conv3dLayer(w, _uniform(rng, fan, spec.conv_channels),
                                              spec.stride, spec.padding, "mish"))
            convs = tuple(layers)
            cnn1 = dense(spec.flat_dim, spec.cnn_hidden, "none")
            ln_cnn = LayerNormParams.default(spec.cnn_hidden)
            cnn2 = dense(spec.cnn_hidden, spec.cnn_out, "none")
        fused = spec.mlp_out + (spec.cnn_out if spec.use_voxels else 0)
        fusion = dense(fused, spec.fusion_out, "mish")
        head = dense(spec.fusion_out, spec.out_dim, "none")
        return cls(spec, mlp1, LayerNormParams.default(spec.mlp_hidden), mlp2, convs,
                   cnn1, ln_cnn, cnn2, fusion, head)

    def named_arrays(self) -> dict:
        out = {}
        for name in ("mlp1", "mlp2", "cnn1", "cnn2", "fusion", "head"):
            layer = getattr(self, name)
            if layer is not None:
                out[f"{name}.weight"] = layer.weights
                out[f"{name}.bias"] = layer.bias
        for name in ("ln_mlp", "ln_cnn"):
            ln = getattr(self, name)
            if ln is not None:
                out[f"{name}.gain"] = ln.gain
                out[f"{name}.offset"] = ln.offset
        for i, c in enumerate(self.convs):
            tag = "conv2d" if isinstance(c, Conv2dLayer) else "conv3d"
            out[f"{tag}{i}.weight"] = c.weights
            out[f"{tag}{i}.bias"] = c.bias
        return out

    @classmethod
    def from_arrays(cls, spec: NetworkSpec, arrays: dict) -> "PolicyNet":
        def dense(name, act):
            return DenseLayer(arrays[f"{name}.weight"], arrays[f"{name}.bias"], act)

        convs, cnn1, cnn2, ln_cnn = [], None, None, None
        if spec.use_voxels:
            for i in range(spec.n_conv):
                if spec.variant == "2d":
                    convs.append(Conv2dLayer(arrays[f"conv2d{i}.weight"], arrays[f"conv2d{i}.bias"],
                                             spec.stride, spec.padding, "mish"))
                else:
                    convs.append(Conv3dLayer(arrays[f"conv3d{i}.weight"], arrays[f"conv3d{i}.bias"],
                                             spec.stride, spec.padding, "mish"))
            cnn1, cnn2 = dense("cnn1", "none"), dense("cnn2", "none")
            ln_cnn = LayerNormParams(arrays["ln_cnn.gain"], arrays["ln_cnn.offset"])
        return cls(spec, dense("mlp1", "none"), LayerNormParams(arrays["ln_mlp.gain"], arrays["ln_mlp.offset"]),
                   dense("mlp2", "none"), tuple(convs), cnn1, ln_cnn, cnn2, dense("fusion", "mish"),
                   dense("head", "none"))


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


@dataclass(frozen=True, eq=False)
class ActorCritic:
    """Two networks with the same structure and separate parameters."""

    actor: PolicyNet
    critic: PolicyNet

    @classmethod
    def init(cls, actor_obs_dim: int = 506, critic_obs_dim: int = 506 + 3 + 1089, seed: int = 0,
             action_dim: int = 29, **spec_kwargs) -> "ActorCritic":
        a = PolicyNet.init(NetworkSpec(obs_dim=actor_obs_dim, out_dim=action_dim, **spec_kwargs), seed)
        c = PolicyNet.init(NetworkSpec(obs_dim=critic_obs_dim, out_dim=1, **spec_kwargs), seed + 1)
        return cls(a, c)


# ---------------------------------------------------------------------------
# forward passes


def _grid_array(grid) -> np.ndarray:
    occ = getattr(grid, "occupancy", grid)
    return np.asarray(occ, dtype=np.float64)


def conv_features(grid, net: PolicyNet) -> list[np.ndarray]:
    """Feature map after each conv layer (activation applied)."""
    x = _grid_array(grid)
    if tuple(x.shape) != tuple(net.spec.voxel_shape):
        raise ShapeError(f"grid shape {x.shape} != {net.spec.voxel_shape}")
    feats = []
    if net.spec.variant == "2d":
        for layer in net.convs:
            x = conv2d_forward(x, layer)
            feats.append(x)
    else:
        x = x[None]
        for layer in net.convs:
            x = conv3d_forward(x, layer)
            feats.append(x)
    return feats


def encode_voxel(grid, net: PolicyNet) -> np.ndarray:
    """Voxel grid -> CNN feature vector (length ``spec.cnn_out``)."""
    if not net.spec.use_voxels:
        raise ShapeError("network has no voxel branch")
    flat = conv_features(grid, net)[-1].reshape(-1)
    h = mish(net.ln_cnn(net.cnn1(flat)))
    return net.cnn2(h)


def encode_scalars(x, net: PolicyNet) -> np.ndarray:
    h = mish(net.ln_mlp(net.mlp1(x)))
    return net.mlp2(h)


def network_forward(scalars, grid, net: PolicyNet) -> np.ndarray:
    parts = [encode_scalars(scalars, net)]
    if net.spec.use_voxels:
        parts.append(encode_voxel(grid, net))
    f = np.concatenate(parts)
    latent = net.fusion(mish(f))
    return net.head(latent)


def forward_policy(obs, grid, params: ActorCritic):
    """Actor action (length 29) and critic value (scalar).

    ``obs`` provides ``actor_scalars`` and ``critic_scalars`` (the latter
    including the privileged terms).
    """
    action = network_forward(obs.actor_scalars, grid, params.actor)
    critic_in = obs.critic_scalars
    if critic_in is None:
        raise ShapeError("critic needs privileged observations")
    value = network_forward(critic_in, grid, params.critic)
    return action, float(value[0])


# ---------------------------------------------------------------------------
# compute accounting


def macs_per_site(layer) -> int:
    """Multiply-accumulates per output element: C*k^2 (2D) or C*k^3 (3D)."""
    if isinstance(layer, Conv2dLayer):
        return layer.in_channels * layer.kernel ** 2
    if isinstance(layer, Conv3dLayer):
        return layer.in_channels * layer.kernel ** 3
    if isinstance(layer, DenseLayer):
        return layer.in_features
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def layer_macs(spec: NetworkSpec, density: float = 1.0) -> list[tuple[str, int]]:
    """MACs for each encoder layer of ``spec``.

    ``density`` scales conv cost by the fraction of active output sites, the
    accounting a sparse convolution would get (rulebook overhead excluded).
    """
    if not 0 <= density <= 1:
        raise ValueError("density must lie in [0, 1]")
    shapes = spec.conv_shapes()
    k = spec.kernel
    rows = []
    for i, (s_in, s_out) in enumerate(zip(shapes[:-1], shapes[1:])):
        per_site = s_in[0] * (k ** 2 if spec.variant == "2d" else k ** 3)
        rows.append((f"conv{i}", int(round(int(np.prod(s_out)) * per_site * density))))
    rows.append(("cnn1", spec.flat_dim * spec.cnn_hidden))
    rows.append(("cnn2", spec.cnn_hidden * spec.cnn_out))
    return rows


def count_flops(obj, input_shape=None, density: float = 1.0) -> int:
    """Exact multiply-accumulate count.

    Accepts a NetworkSpec (whole voxel encoder), a conv layer together with
    its input shape, or a dense layer.
    """
    if isinstance(obj, NetworkSpec):
        return sum(m for _, m in layer_macs(obj, density))
    if isinstance(obj, (Conv2dLayer, Conv3dLayer)):
        if input_shape is None:
            raise ValueError("conv layers need an input shape")
        out = obj.output_shape(input_shape)
        return int(round(int(np.prod(out)) * macs_per_site(obj) * density))
    if isinstance(obj, DenseLayer):
        return obj.in_features * obj.out_features
    raise TypeError(f"cannot count MACs of {type(obj).__name__}")


def count_params(net: PolicyNet, encoder_only: bool = True) -> int:
    arrays = net.named_arrays()
    if encoder_only:
        arrays = {k: v for k, v in arrays.items() if k.startswith(("conv", "cnn", "ln_cnn"))}
    return int(sum(a.size for a in arrays.values()))


# ---------------------------------------------------------------------------
# running observation normalisation


class RunningNormalizer:
    """Per-dimension running mean/variance merged batch by batch (Chan et al.)."""

    def __init__(self, dim: int, eps: float = 1e-8):
        self.dim = dim
        self.eps = eps
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0

    @classmethod
    def identity(cls, dim: int) -> "RunningNormalizer":
        n = cls(dim, eps=0.0)
        return n

    def update(self, batch) -> None:
        x = np.asarray(batch, dtype=np.float64).reshape(-1, self.dim)
        n = len(x)
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_m2 = ((x - b_mean) ** 2).sum(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_m2 / n, n
            return
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_m2 + delta ** 2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)

    def invert(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * np.sqrt(self.var + self.eps) + self.mean

    def flipped(self, perm: np.ndarray, sign: np.ndarray) -> "RunningNormalizer":
        """Statistics of the mirrored observation ``sign * x[perm]``."""
        out = RunningNormalizer(self.dim, self.eps)
        out.mean = sign * self.mean[perm]
        out.var = self.var[perm].copy()
        out.count = self.count
        return out


def normalizer_update(norm: RunningNormalizer, batch) -> RunningNormalizer:
    norm.update(batch)
    return norm


def normalizer_apply(norm: RunningNormalizer, x) -> np.ndarray:
    return norm.apply(x)


# ---------------------------------------------------------------------------
# weight file


def save_weights(path, arrays: dict) -> None:
    """Magic, entry count, manifest of (tag, shape), then f32 data in manifest order."""
    names = list(arrays)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            tag = name.encode("utf-8")
            shape = np.shape(arrays[name])
            fh.write(struct.pack("<H", len(tag)) + tag)
            fh.write(struct.pack("<B", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())


def load_weights(path) -> dict:
    data = Path(path).read_bytes()
    if data[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad weights magic")
    off = len(WEIGHTS_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        manifest.append((name, shape))
    out = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        out[name] = arr.reshape(shape)
    return out


def save_actor_critic(path, ac: ActorCritic) -> None:
    arrays = {f"actor.{k}": v for k, v in ac.actor.named_arrays().items()}
    arrays.update({f"critic.{k}": v for k, v in ac.critic.named_arrays().items()})
    save_weights(path, arrays)


def load_actor_critic(path, actor_spec: NetworkSpec, critic_spec: NetworkSpec) -> ActorCritic:
    arrays = load_weights(path)
    pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return ActorCritic(PolicyNet.from_arrays(actor_spec, pick("actor.")),
                       PolicyNet.from_arrays(critic_spec, pick("critic.")))
