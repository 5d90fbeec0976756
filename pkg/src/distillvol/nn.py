"""Network blocks and builders for the teacher and student architectures.

All networks map an (N, 4, D, H, W) scan patch to (N, 3, D, H, W) region
logits in WT, TC, ET order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHITECTURES = ("unet", "res_unet", "cascaded_unet")

# encoder residual blocks per level for the residual UNet
RES_UNET_ENCODER_BLOCKS = (1, 2, 2, 4)


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    levels: int = 4
    in_modalities: int = 4
    out_regions: int = 3
    norm: str = "instance"  # "instance" | "group"
    groups: int = 8
    activation: str = "leaky_relu"  # "relu" | "leaky_relu"
    slope: float = 1e-2
    stages: int = 2  # cascaded UNet only

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.out_regions != 3:
            raise ValueError("out_regions must be 3 (WT, TC, ET)")
        if self.norm not in ("instance", "group"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")

    @property
    def norm_spec(self):
        return "instance" if self.norm == "instance" else ("group", self.groups)

    @property
    def activation_spec(self):
        return ("leaky_relu", self.slope) if self.activation == "leaky_relu" else ("relu",)

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(arch: str, base_channels: int = 16, **overrides) -> NetConfig:
    """The paper's norm/activation pairing for each architecture."""
    presets = {
        "unet": dict(norm="instance", activation="leaky_relu", slope=1e-2, levels=4),
        "res_unet": dict(norm="group", groups=8, activation="relu", levels=4),
        "cascaded_unet": dict(norm="instance", activation="relu", levels=4, stages=2),
    }
    if arch not in presets:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    kwargs = {**presets[arch], "base_channels": base_channels, **overrides}
    return NetConfig(**kwargs)


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Container whose Tensor attributes with requires_grad are parameters."""

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield from sub.named_parameters(f"{full}.{i}.{j}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                subs = item if isinstance(item, (list, tuple)) else [item]
                for sub in subs:
                    if isinstance(sub, Module):
                        yield from sub.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], source: str = "state") -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(
                f"{source} does not fit {type(self).__name__}: "
                f"missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
                f"unexpected {unexpected[:3]}{'...' if len(unexpected) > 3 else ''}"
            )
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(
                    f"{source} does not fit {type(self).__name__}: parameter {name} "
                    f"has shape {arr.shape}, expected {p.shape}"
                )
            p.data = arr.astype(p.dtype).copy()


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, bias=False, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * kernel**3
        self.weight = _param(
            (rng.standard_normal((cout, cin, kernel, kernel, kernel)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        )
        self.bias = _param(np.zeros(cout, dtype=dtype)) if bias else None
        self._stride = stride
        self._padding = kernel // 2

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias, self._stride, self._padding)


class Norm(Module):
    def __init__(self, channels, spec, dtype=np.float32):
        if spec == "instance":
            self._groups = channels
        else:
            _, groups = spec
            if channels % groups:
                raise ValueError(f"group_norm: {channels} channels not divisible into {groups} groups")
            self._groups = groups
        self.weight = _param(np.ones(channels, dtype=dtype))
        self.bias = _param(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        return T.group_norm(x, self._groups, self.weight, self.bias)


def activate(x: Tensor, spec) -> Tensor:
    if spec[0] == "relu":
        return T.relu(x)
    return T.leaky_relu(x, spec[1])


class ConvNormAct(Module):
    def __init__(self, cin, cout, stride=1, norm="instance", activation=("relu",), rng=None, dtype=np.float32):
        self.conv = Conv(cin, cout, 3, stride, rng=rng, dtype=dtype)
        self.norm = Norm(cout, norm, dtype)
        self._act = activation

    def forward(self, x):
        return activate(self.norm(self.conv(x)), self._act)


class ResidualBlock(Module):
    """Pre-activation block: norm, act, conv, norm, act, conv, plus identity."""

    def __init__(self, channels, norm="instance", activation=("relu",), rng=None, dtype=np.float32):
        self.norm1 = Norm(channels, norm, dtype)
        self.conv1 = Conv(channels, channels, 3, rng=rng, dtype=dtype)
        self.norm2 = Norm(channels, norm, dtype)
        self.conv2 = Conv(channels, channels, 3, rng=rng, dtype=dtype)
        self._act = activation

    def forward(self, x):
        h = self.conv1(activate(self.norm1(x), self._act))
        h = self.conv2(activate(self.norm2(h), self._act))
        return x + h


class UNetLevel(Module):
    """Encoder level of the plain UNet; stride 2 replaces max pooling."""

    def __init__(self, cin, cout, norm, activation, stride, rng=None, dtype=np.float32):
        self.first = ConvNormAct(cin, cout, stride, norm, activation, rng, dtype)
        self.second = ConvNormAct(cout, cout, 1, norm, activation, rng, dtype)

    def forward(self, x):
        return self.second(self.first(x))


class UNetUp(Module):
    """Decoder level: 1x1 channel reduction, upsample, concat skip, two convs."""

    def __init__(self, cin, cout, norm, activation, rng=None, dtype=np.float32):
        self.reduce = Conv(cin, cout, 1, rng=rng, dtype=dtype)
        self.first = ConvNormAct(2 * cout, cout, 1, norm, activation, rng, dtype)
        self.second = ConvNormAct(cout, cout, 1, norm, activation, rng, dtype)

    def forward(self, x, skip):
        up = T.upsample(self.reduce(x))
        return self.second(self.first(T.concat([up, skip], axis=1)))


class FusedEncoderLevel(Module):
    """One level of per-modality encoders merged by elementwise maximum.

    Used as the gradient-check block of the cascaded architecture: input
    channels are split one per encoder.
    """

    def __init__(self, encoders, cin, cout, rng=None, dtype=np.float32):
        self.convs = [Conv(cin, cout, 3, rng=rng, dtype=dtype) for _ in range(encoders)]
        self.blocks = [ResidualBlock(cout, "instance", ("relu",), rng, dtype) for _ in range(encoders)]
        self._cin = cin

    def forward(self, x):
        feats = [
            block(conv(x[:, i * self._cin : (i + 1) * self._cin]))
            for i, (conv, block) in enumerate(zip(self.convs, self.blocks))
        ]
        return fuse_max(feats)


def fuse_max(features: Sequence[Tensor]) -> Tensor:
    fused = features[0]
    for f in features[1:]:
        fused = T.elementwise_max(fused, f)
    return fused


# ---------------------------------------------------------------------------
# networks


class Network(Module):
    arch: str = ""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        # cascade members are evaluated at a fixed resolution inside ensembles
        self._input_extent: Optional[tuple[int, int, int]] = None
        self._inference_patch: Optional[tuple[int, int, int]] = None

    @property
    def divisor(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    @property
    def input_extent(self):
        return self._input_extent

    @input_extent.setter
    def input_extent(self, value):
        self._input_extent = None if value is None else tuple(int(v) for v in value)

    @property
    def inference_patch(self):
        return self._inference_patch

    @inference_patch.setter
    def inference_patch(self, value):
        self._inference_patch = None if value is None else tuple(int(v) for v in value)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_modalities:
            raise ValueError(f"{self.arch}: expected input (N,{self.cfg.in_modalities},D,H,W), got {x.shape}")
        bad = [e for e in x.shape[2:] if e % self.divisor]
        if bad:
            raise ValueError(
                f"{self.arch}: spatial extents {x.shape[2:]} must be divisible by {self.divisor}"
            )

    def save(self, path: Union[str, Path]) -> None:
        T.save_weights(path, self.state_dict())

    def load(self, path: Union[str, Path]) -> None:
        self.load_state_dict(T.load_weights(path), source=f"checkpoint {path} (architecture {self.arch})")


class UNet(Network):
    arch = "unet"

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        norm, act = cfg.norm_spec, cfg.activation_spec
        widths = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        cins = [cfg.in_modalities] + widths[:-1]
        self.encoder = [
            UNetLevel(cin, cout, norm, act, 1 if i == 0 else 2, rng, dtype)
            for i, (cin, cout) in enumerate(zip(cins, widths))
        ]
        self.decoder = [UNetUp(widths[i + 1], widths[i], norm, act, rng, dtype) for i in reversed(range(cfg.levels - 1))]
        self.head = Conv(widths[0], cfg.out_regions, 1, bias=True, rng=rng, dtype=dtype)

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        for level in self.encoder:
            x = level(x)
            feats.append(x)
        return feats

    def forward(self, x):
        self.check_input(x)
        feats = self.encode(x)
        h = feats[-1]
        for up, skip in zip(self.decoder, reversed(feats[:-1])):
            h = up(h, skip)
        return self.head(h)


class ResUNet(Network):
    arch = "res_unet"

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        norm, act = cfg.norm_spec, cfg.activation_spec
        widths = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        for w in widths:
            if norm != "instance" and w % norm[1]:
                raise ValueError(f"group_norm: {w} channels not divisible into {norm[1]} groups")
        self.stem = Conv(cfg.in_modalities, widths[0], 3, rng=rng, dtype=dtype)
        self.down = [Conv(widths[i], widths[i + 1], 3, 2, rng=rng, dtype=dtype) for i in range(cfg.levels - 1)]
        self.encoder_blocks = [
            [ResidualBlock(w, norm, act, rng, dtype) for _ in range(n)]
            for w, n in zip(widths, RES_UNET_ENCODER_BLOCKS)
        ]
        self.reduce = [Conv(widths[i + 1], widths[i], 1, rng=rng, dtype=dtype) for i in reversed(range(cfg.levels - 1))]
        self.decoder_blocks = [ResidualBlock(widths[i], norm, act, rng, dtype) for i in reversed(range(cfg.levels - 1))]
        # pre-activation blocks leave the trunk unnormalized; close it before the head
        self.head_norm = Norm(widths[0], norm, dtype)
        self._act = act
        self.head = Conv(widths[0], cfg.out_regions, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x):
        self.check_input(x)
        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.encoder_blocks):
            if i:
                h = self.down[i - 1](h)
            for block in blocks:
                h = block(h)
            skips.append(h)
        for reduce, block, skip in zip(self.reduce, self.decoder_blocks, reversed(skips[:-1])):
            h = block(T.upsample(reduce(h)) + skip)
        return self.head(activate(self.head_norm(h), self._act))


class ModalityEncoder(Module):
    def __init__(self, cin, widths, rng=None, dtype=np.float32):
        self.convs = [Conv(cin, widths[0], 3, rng=rng, dtype=dtype)] + [
            Conv(widths[i], widths[i + 1], 3, 2, rng=rng, dtype=dtype) for i in range(len(widths) - 1)
        ]
        self.blocks = [ResidualBlock(w, "instance", ("relu",), rng, dtype) for w in widths]

    def forward(self, x):
        feats = []
        for conv, block in zip(self.convs, self.blocks):
            x = block(conv(x))
            feats.append(x)
        return feats


class CascadeStage(Module):
    """Multi-encoder UNet: one encoder per modality, max-fused skips, shared decoder."""

    def __init__(self, cin_per_modality, cfg: NetConfig, rng, dtype=np.float32):
        widths = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.encoders = [ModalityEncoder(cin_per_modality, widths, rng, dtype) for _ in range(cfg.in_modalities)]
        self.reduce = [Conv(widths[i + 1], widths[i], 1, rng=rng, dtype=dtype) for i in reversed(range(cfg.levels - 1))]
        self.merge = [Conv(2 * widths[i], widths[i], 3, rng=rng, dtype=dtype) for i in reversed(range(cfg.levels - 1))]
        self.decoder_blocks = [ResidualBlock(widths[i], "instance", ("relu",), rng, dtype) for i in reversed(range(cfg.levels - 1))]
        self.head_norm = Norm(widths[0], "instance", dtype)
        self.head = Conv(widths[0], cfg.out_regions, 1, bias=True, rng=rng, dtype=dtype)

    def fused_features(self, inputs: Sequence[Tensor]) -> list[Tensor]:
        per_encoder = [enc(x) for enc, x in zip(self.encoders, inputs)]
        return [fuse_max(level) for level in zip(*per_encoder)]

    def forward(self, inputs):
        feats = self.fused_features(inputs)
        h = feats[-1]
        for reduce, merge, block, skip in zip(self.reduce, self.merge, self.decoder_blocks, reversed(feats[:-1])):
            h = block(merge(T.concat([T.upsample(reduce(h)), skip], axis=1)))
        return self.head(T.relu(self.head_norm(h)))


class CascadedUNet(Network):
    """Stages of identical topology at increasing scale.

    Stage s sees the input downsampled by 2**(stages - 1 - s); every stage
    after the first also receives the previous stage's region probabilities,
    upsampled x2, as three extra channels for each modality encoder.
    """

    arch = "cascaded_unet"

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        self.stages = [
            CascadeStage(1 if s == 0 else 1 + cfg.out_regions, cfg, rng, dtype) for s in range(cfg.stages)
        ]

    @property
    def divisor(self) -> int:
        return 2 ** (self.cfg.levels - 1 + self.cfg.stages - 1)

    def stage_inputs(self, x: Tensor, probs: Optional[Tensor], stage: int) -> list[Tensor]:
        xs = x
        for _ in range(self.cfg.stages - 1 - stage):
            xs = T.avg_pool2x(xs)
        mods = [xs[:, m : m + 1] for m in range(self.cfg.in_modalities)]
        if probs is None:
            return mods
        up = T.upsample(probs)
        return [T.concat([m, up], axis=1) for m in mods]

    def forward(self, x):
        self.check_input(x)
        probs = None
        logits = None
        for s, stage in enumerate(self.stages):
            logits = stage(self.stage_inputs(x, probs, s))
            probs = T.sigmoid(logits)
        return logits


def _builder(cls, expected_norm, expected_act):
    def build(cfg: NetConfig, seed: int = 0, dtype=np.float32):
        if cfg.norm != expected_norm:
            raise ValueError(f"{cls.arch} requires {expected_norm} normalization, got {cfg.norm}")
        if cfg.activation != expected_act:
            raise ValueError(f"{cls.arch} requires {expected_act} activation, got {cfg.activation}")
        return cls(cfg, np.random.default_rng(seed), dtype)

    return build


_build_unet = _builder(UNet, "instance", "leaky_relu")
_build_res_unet = _builder(ResUNet, "group", "relu")
_build_cascade = _builder(CascadedUNet, "instance", "relu")


def build_unet(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return _build_unet(cfg, seed, dtype)


def build_res_unet(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ResUNet:
    if cfg.levels != len(RES_UNET_ENCODER_BLOCKS):
        raise ValueError(f"res_unet needs levels == 4 (block schedule 1,2,2,4), got {cfg.levels}")
    return _build_res_unet(cfg, seed, dtype)


def build_cascaded_unet(cfg: NetConfig, stages: Optional[int] = None, seed: int = 0, dtype=np.float32) -> CascadedUNet:
    if stages is not None:
        cfg = NetConfig(**{**cfg.to_dict(), "stages": stages})
    return _build_cascade(cfg, seed, dtype)


def build_network(arch: str, cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Network:
    if arch == "unet":
        return build_unet(cfg, seed, dtype)
    if arch == "res_unet":
        return build_res_unet(cfg, seed, dtype)
    if arch == "cascaded_unet":
        return build_cascaded_unet(cfg, seed=seed, dtype=dtype)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


# ---------------------------------------------------------------------------
# whole-volume inference


def _tile_starts(extent: int, patch: int, step: int) -> list[int]:
    if extent <= patch:
        return [0]
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


Predictor = Union[Network, Callable[[Tensor], Tensor]]


def forward_full_volume(
    net: Predictor,
    scan: Union[np.ndarray, Tensor],
    patch: Optional[Sequence[int]] = None,
    overlap: float = 0.5,
) -> np.ndarray:
    """Sliding-window inference; returns (3, D, H, W) region probabilities.

    Overlapping logits are averaged with uniform weights before the sigmoid.
    Volumes smaller than the patch are zero-padded and cropped back.
    """
    image = scan.data if isinstance(scan, Tensor) else np.asarray(scan)
    if image.ndim == 4:
        image = image[None]
    if image.shape[0] != 1:
        raise ValueError(f"forward_full_volume expects a single case, got batch {image.shape[0]}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    ext = image.shape[2:]
    if patch is None:
        div = getattr(net, "divisor", 1)
        patch = tuple(-(-e // div) * div for e in ext)
    patch = tuple(int(p) for p in patch)
    padded = tuple(max(e, p) for e, p in zip(ext, patch))
    if padded != ext:
        image = np.pad(image, ((0, 0), (0, 0)) + tuple((0, p - e) for p, e in zip(padded, ext)))

    starts = [_tile_starts(e, p, max(1, int(round(p * (1.0 - overlap))))) for e, p in zip(padded, patch)]
    acc = None
    counts = np.zeros(padded, dtype=np.float64)
    with T.no_grad():
        for d, h, w in itertools.product(*starts):
            window = (slice(d, d + patch[0]), slice(h, h + patch[1]), slice(w, w + patch[2]))
            logits = net(Tensor(image[(slice(None), slice(None)) + window])).data[0]
            if acc is None:
                acc = np.zeros((logits.shape[0],) + padded, dtype=np.float64)
            acc[(slice(None),) + window] += logits
            counts[window] += 1.0
    mean_logits = (acc / counts)[(slice(None),) + tuple(slice(0, e) for e in ext)]
    with T.no_grad():
        return T.sigmoid(Tensor(mean_logits.astype(np.float32))).data


# ---------------------------------------------------------------------------
# checkpoints: weights in DVW1 plus a JSON sidecar describing the network


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(net: Network, path: Union[str, Path]) -> None:
    net.save(path)
    meta = {
        "arch": net.arch,
        "net": net.cfg.to_dict(),
        "inference_patch": list(net.inference_patch) if net.inference_patch else None,
        "input_extent": list(net.input_extent) if net.input_extent else None,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(
    path: Union[str, Path], arch: Optional[str] = None, cfg: Optional[NetConfig] = None
) -> Network:
    """Rebuild a network from its sidecar (or the given arch/cfg) and load weights."""
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    arch = meta.get("arch", arch)
    if arch is None:
        raise ValueError(f"checkpoint {path}: no sidecar and no architecture given")
    if "net" in meta:
        cfg = NetConfig(**meta["net"])
    if cfg is None:
        raise ValueError(f"checkpoint {path}: no sidecar and no network config given")
    net = build_network(arch, cfg)
    net.load(path)
    net.inference_patch = meta.get("inference_patch")
    net.input_extent = meta.get("input_extent")
    return net
