"""3-D encoder-decoder that maps one image to a displacement field."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..volcore import DimensionError, DisplacementField, Volume3D, as_array
from . import layers as L


class StateError(RuntimeError):
    """Backward requested without a valid forward cache."""


class CheckpointError(ValueError):
    """Checkpoint file malformed or built for a different config."""


N_POOLS = 3
N_ENCODER_CONVS = 8


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the U-Net.

    Encoder: four stages of two convs (widths ``base * 2**s``) with a max
    pool after the first three. Decoder: three upsample + skip-concat levels
    of two convs each, then a full-resolution head of ``head_channels`` convs
    and a final conv to 3 channels. That is 8 encoder and 10 decoder convs.
    """

    base_channels: int = 16
    kernel_size: int = 3
    negative_slope: float = 0.2
    encoder_bn: tuple[bool, ...] = (True,) * N_ENCODER_CONVS
    head_channels: tuple[int, int, int] | None = None
    final_init_scale: float = 1e-5
    bn_momentum: float = 0.1
    input_dims: tuple[int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_bn", tuple(bool(b) for b in self.encoder_bn))
        if self.head_channels is not None:
            object.__setattr__(self, "head_channels", tuple(int(c) for c in self.head_channels))
        if self.input_dims is not None:
            object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if len(self.encoder_bn) != N_ENCODER_CONVS:
            raise ValueError(f"encoder_bn needs {N_ENCODER_CONVS} entries")
        if self.head_channels is not None and (
                len(self.head_channels) != 3 or min(self.head_channels) < 1):
            raise ValueError("head_channels needs three positive widths")

    @property
    def head(self) -> tuple[int, int, int]:
        if self.head_channels is not None:
            return self.head_channels
        b = self.base_channels
        return (b, max(b // 2, 1), max(b // 2, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_bn"] = list(self.encoder_bn)
        d["head_channels"] = list(self.head_channels) if self.head_channels else None
        d["input_dims"] = list(self.input_dims) if self.input_dims else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for key in ("encoder_bn", "head_channels", "input_dims"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def conv_layers(self) -> list[tuple[str, int, int]]:
        """``(name, in_channels, out_channels)`` for every conv in execution order."""
        b = self.base_channels
        widths = [b * 2 ** s for s in range(N_POOLS + 1)]
        convs = []
        cin = 1
        for s, wdt in enumerate(widths):
            convs.append((f"enc{s}a", cin, wdt))
            convs.append((f"enc{s}b", wdt, wdt))
            cin = wdt
        for s in reversed(range(N_POOLS)):
            convs.append((f"dec{s}a", cin + widths[s], widths[s]))
            convs.append((f"dec{s}b", widths[s], widths[s]))
            cin = widths[s]
        for i, wdt in enumerate(self.head):
            convs.append((f"head{i}", cin, wdt))
            cin = wdt
        convs.append(("final", cin, 3))
        return convs

    def bn_layers(self) -> list[tuple[str, int]]:
        enc = [c for c in self.conv_layers() if c[0].startswith("enc")]
        return [(name, cout) for (name, _, cout), on in zip(enc, self.encoder_bn) if on]

    def parameter_count(self) -> int:
        k3 = self.kernel_size ** 3
        n = sum(cout * cin * k3 + cout for _, cin, cout in self.conv_layers())
        return n + sum(2 * c for _, c in self.bn_layers())


@dataclass(frozen=True)
class PaddingPlan:
    """Symmetric zero padding of each axis to the next multiple of ``2**N_POOLS``."""

    original: tuple[int, int, int]
    padded: tuple[int, int, int]
    low: tuple[int, int, int]
    high: tuple[int, int, int]

    @classmethod
    def for_dims(cls, dims, multiple: int = 2 ** N_POOLS) -> "PaddingPlan":
        dims = tuple(int(d) for d in dims)
        padded = tuple(-(-d // multiple) * multiple for d in dims)
        low = tuple((p - d) // 2 for p, d in zip(padded, dims))
        high = tuple(p - d - lo for p, d, lo in zip(padded, dims, low))
        return cls(dims, padded, low, high)

    def pad(self, x: np.ndarray) -> np.ndarray:
        """Pad the trailing three axes."""
        widths = [(0, 0)] * (x.ndim - 3) + list(zip(self.low, self.high))
        return np.pad(x, widths)

    def crop(self, x: np.ndarray) -> np.ndarray:
        sl = tuple(slice(lo, lo + n) for lo, n in zip(self.low, self.original))
        return x[(Ellipsis,) + sl]


def _kaiming_uniform(rng, shape, slope):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class UNet3D:
    """Registration network holding parameters, gradients and batch-norm buffers.

    >>> net = UNet3D(NetConfig(base_channels=2))
    >>> field = net.forward_volume(Volume3D.zeros((8, 8, 8)))
    """

    def __init__(self, config: NetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        k = config.kernel_size
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for name, cin, cout in config.conv_layers():
            if name == "final":
                w = rng.standard_normal((cout, cin, k, k, k)) * config.final_init_scale
            else:
                w = _kaiming_uniform(rng, (cout, cin, k, k, k), config.negative_slope)
            self.params[f"{name}.w"] = w
            self.params[f"{name}.b"] = np.zeros(cout)
        for name, c in config.bn_layers():
            self.params[f"{name}.gamma"] = np.ones(c)
            self.params[f"{name}.beta"] = np.zeros(c)
            self.buffers[f"{name}.running_mean"] = np.zeros(c)
            self.buffers[f"{name}.running_var"] = np.ones(c)
        self.grads = {key: np.zeros_like(v) for key, v in self.params.items()}
        self._cache: dict | None = None
        self._bn = {name for name, _ in config.bn_layers()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def invalidate(self) -> None:
        self._cache = None

    # -- forward / backward over padded tensors -----------------------------

    def _block_forward(self, name, h, mode, cache, act=True):
        h, cache[name + ".conv"] = L.conv3d_forward(h, self.params[name + ".w"],
                                                    self.params[name + ".b"])
        if name in self._bn:
            h, cache[name + ".bn"] = L.batchnorm3d_forward(
                h, self.params[name + ".gamma"], self.params[name + ".beta"],
                self.buffers[name + ".running_mean"], self.buffers[name + ".running_var"],
                mode=mode, momentum=self.config.bn_momentum)
        if act:
            h, cache[name + ".act"] = L.leaky_relu_forward(h, self.config.negative_slope)
        return h

    def _block_backward(self, name, d, cache, act=True):
        if act:
            d = L.leaky_relu_backward(d, cache[name + ".act"])
        if name in self._bn:
            d, dgamma, dbeta = L.batchnorm3d_backward(d, cache[name + ".bn"])
            self.grads[name + ".gamma"] += dgamma
            self.grads[name + ".beta"] += dbeta
        d, dw, db = L.conv3d_backward(d, cache[name + ".conv"])
        self.grads[name + ".w"] += dw
        self.grads[name + ".b"] += db
        return d

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        """Map ``(N, 1, X, Y, Z)`` with dims divisible by 8 to ``(N, 3, X, Y, Z)``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"input must have shape (N, 1, X, Y, Z), got {x.shape}")
        cache: dict = {}
        skips = []
        h = x
        for s in range(N_POOLS + 1):
            h = self._block_forward(f"enc{s}a", h, mode, cache)
            h = self._block_forward(f"enc{s}b", h, mode, cache)
            if s < N_POOLS:
                skips.append(h)
                h, cache[f"pool{s}"] = L.maxpool3d_forward(h)
        for s in reversed(range(N_POOLS)):
            h, cache[f"up{s}"] = L.upsample_trilinear_forward(h)
            h, cache[f"cat{s}"] = L.concat_forward(h, skips[s])
            h = self._block_forward(f"dec{s}a", h, mode, cache)
            h = self._block_forward(f"dec{s}b", h, mode, cache)
        for i in range(3):
            h = self._block_forward(f"head{i}", h, mode, cache)
        out = self._block_forward("final", h, mode, cache, act=False)
        self._cache = cache if mode == "train" else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last train-mode forward.

        Returns the gradient with respect to the network input.
        """
        if self._cache is None:
            raise StateError("backward needs a train-mode forward with the current parameters")
        cache = self._cache
        d = self._block_backward("final", dout, cache, act=False)
        for i in reversed(range(3)):
            d = self._block_backward(f"head{i}", d, cache)
        dskips = {}
        for s in range(N_POOLS):
            d = self._block_backward(f"dec{s}b", d, cache)
            d = self._block_backward(f"dec{s}a", d, cache)
            d, dskips[s] = L.concat_backward(d, cache[f"cat{s}"])
            d = L.upsample_trilinear_backward(d, cache[f"up{s}"])
        for s in reversed(range(N_POOLS + 1)):
            if s < N_POOLS:
                d = L.maxpool3d_backward(d, cache[f"pool{s}"]) + dskips[s]
            d = self._block_backward(f"enc{s}b", d, cache)
            d = self._block_backward(f"enc{s}a", d, cache)
        return d

    # -- volume-level API ----------------------------------------------------

    def check_dims(self, dims) -> None:
        want = self.config.input_dims
        if want is not None and tuple(dims) != tuple(want):
            raise DimensionError(f"input dims {tuple(dims)} do not match network config {want}")

    def forward_volume(self, p, mode: str = "infer") -> DisplacementField:
        """Predict the displacement field for one volume at its own resolution."""
        arr = as_array(p).astype(np.float64, copy=False)
        self.check_dims(arr.shape)
        plan = PaddingPlan.for_dims(arr.shape)
        out = self.forward(plan.pad(arr)[None, None], mode=mode)
        self._plan = plan
        field = np.moveaxis(plan.crop(out[0]), 0, -1)
        spacing = p.spacing if isinstance(p, Volume3D) else (1.0, 1.0, 1.0)
        return DisplacementField(field, spacing)

    def backward_field(self, field_grad: np.ndarray) -> None:
        """Backpropagate ``dL/du`` of shape ``(X, Y, Z, 3)`` from :meth:`forward_volume`."""
        if self._cache is None:
            raise StateError("backward needs a train-mode forward with the current parameters")
        plan = self._plan
        g = np.asarray(field_grad)
        if g.shape != plan.original + (3,):
            raise ValueError(f"field gradient shape {g.shape} does not match {plan.original}")
        self.backward(plan.pad(np.moveaxis(g, -1, 0))[None])


def net_forward(p, net: UNet3D, mode: str = "train") -> DisplacementField:
    return net.forward_volume(p, mode=mode)


def net_backward(net: UNet3D, field_grad) -> None:
    net.backward_field(field_grad)


class Adam:
    """Adam with bias correction over a dict of arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adam_step(net: UNet3D, opt: Adam) -> None:
    opt.step(net.grads)
    net.invalidate()


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = "MCKPT1"


def _ckpt_arrays(net: UNet3D, opt: Adam | None):
    arrays = [(f"param:{k}", v) for k, v in net.params.items()]
    arrays += [(f"buffer:{k}", v) for k, v in net.buffers.items()]
    if opt is not None:
        arrays += [(f"adam_m:{k}", v) for k, v in opt.m.items()]
        arrays += [(f"adam_v:{k}", v) for k, v in opt.v.items()]
    return arrays


def save_checkpoint(path, net: UNet3D, opt: Adam | None = None, extra: dict | None = None) -> None:
    """Write a header (config, digest, step) followed by raw little-endian float64 arrays."""
    arrays = _ckpt_arrays(net, opt)
    meta = {"extra": extra or {}}
    if opt is not None:
        meta["adam"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    lines = [
        _CKPT_MAGIC,
        f"config_hash {net.config.digest()}",
        f"step {opt.t if opt is not None else 0}",
        "config " + json.dumps(net.config.to_dict(), sort_keys=True),
        "meta " + json.dumps(meta, sort_keys=True),
        f"arrays {len(arrays)}",
    ]
    lines += [f"{name} {' '.join(str(s) for s in v.shape) or '-'}" for name, v in arrays]
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays)
    Path(path).write_bytes(header + payload)


def load_checkpoint(path, expected: NetConfig | None = None):
    """Return ``(net, opt_or_None, extra)``; rejects a config digest mismatch."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("utf-8").split("\n")
    if lines[0] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    digest = lines[1].split()[1]
    step = int(lines[2].split()[1])
    config = NetConfig.from_dict(json.loads(lines[3][len("config "):]))
    meta = json.loads(lines[4][len("meta "):])
    if config.digest() != digest:
        raise CheckpointError(f"{path}: header digest does not match stored config")
    if expected is not None and expected.digest() != digest:
        raise CheckpointError(f"{path}: checkpoint was built for a different network config")
    n = int(lines[5].split()[1])
    specs = []
    for line in lines[6:6 + n]:
        name, *shape = line.split()
        specs.append((name, () if shape == ["-"] else tuple(int(s) for s in shape)))

    net = UNet3D(config)
    opt = None
    if "adam" in meta:
        a = meta["adam"]
        opt = Adam(net.params, lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        opt.t = step
    targets = {"param": net.params, "buffer": net.buffers}
    if opt is not None:
        targets.update({"adam_m": opt.m, "adam_v": opt.v})
    offset = sep + 2
    for name, shape in specs:
        kind, key = name.split(":", 1)
        size = int(np.prod(shape)) * 8
        chunk = raw[offset:offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"{path}: truncated payload at {name}")
        dest = targets[kind][key]
        if dest.shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, expected {dest.shape}")
        dest[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return net, opt, meta.get("extra", {})
