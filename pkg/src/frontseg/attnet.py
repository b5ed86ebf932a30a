"""Five-level U-Net with additive attention gates on every skip connection."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .functional import bilinear_weights
from .tensor import DTYPE, ParamSpec, Tensor


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    Level ``l`` carries ``base_channels * 2**l`` feature maps; each gate
    reduces its skip to ``max(1, F_x // 2)`` intermediate maps.
    """

    depth: int = 5
    base_channels: int = 32
    input_side: int = 512
    in_channels: int = 1
    out_channels: int = 1
    kernel_size: int = 5
    up_kernel: int = 2
    leaky_slope: float = 0.1
    attention: bool = True

    def validate(self) -> "ModelConfig":
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.up_kernel != 2:
            raise ValueError("only 2x2 stride-2 transposed convolutions are supported")
        step = 2 ** (self.depth - 1)
        if self.input_side < step or self.input_side % step:
            raise ValueError(f"input_side {self.input_side} must be a positive multiple of {step} for depth {self.depth}")
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def f_int(self, level: int) -> int:
        return max(1, self.channels(level) // 2)


@dataclass
class AttentionGateParams:
    """Parameters of one gate: 1x1 strided skip projection, 1x1 gating projection, 1x1 psi."""

    W_x: Tensor
    W_g: Tensor
    b_g: Tensor
    psi: Tensor
    b_psi: Tensor

    def __post_init__(self):
        f_int = self.W_x.shape[0]
        if f_int < 1:
            raise ValueError("F_int must be >= 1")
        if self.W_g.shape[0] != f_int or self.b_g.shape != (f_int,) or self.psi.shape != (1, f_int, 1, 1):
            raise ValueError(
                f"inconsistent gate shapes: W_x {self.W_x.shape}, W_g {self.W_g.shape}, "
                f"b_g {self.b_g.shape}, psi {self.psi.shape}"
            )
        if self.b_psi.shape != (1,):
            raise ValueError(f"b_psi must have shape (1,), got {self.b_psi.shape}")


def attention_gate(x: Tensor, g: Tensor, p: AttentionGateParams, return_native: bool = False):
    """Gate skip features ``x`` with the coarser gating signal ``g``.

    Coefficients are computed at ``g``'s resolution as
    ``sigmoid(psi . relu(W_x x + W_g g + b_g) + b_psi)``, with ``x`` brought
    down by a stride-2 1x1 convolution, then upsampled bilinearly to ``x``'s
    size and multiplied into every channel of ``x``.

    Returns ``(x_hat, alpha)``, plus the pre-upsampling coefficients when
    ``return_native`` is set.
    """
    if x.ndim != 4 or g.ndim != 4:
        raise ValueError("attention_gate expects 4-D tensors")
    h, w = x.shape[2:]
    if g.shape[0] != x.shape[0] or (g.shape[2] * 2, g.shape[3] * 2) != (h, w):
        raise ValueError(f"gating signal {g.shape} must have exactly half the spatial size of the skip {x.shape}")
    theta = F.conv2d(x, p.W_x, None, stride=2)
    phi = F.conv2d(g, p.W_g, p.b_g)
    act = F.relu(F.add(theta, phi))
    native = F.sigmoid(F.conv2d(act, p.psi, p.b_psi))
    alpha = F.upsample_bilinear(native, h, w)
    x_hat = F.mul(x, alpha)
    return (x_hat, alpha, native) if return_native else (x_hat, alpha)


@dataclass
class AttentionMaps:
    """Gate coefficients from one forward pass; index 0 is the finest gate (alpha^1)."""

    native: List[np.ndarray] = field(default_factory=list)
    upsampled: List[np.ndarray] = field(default_factory=list)


def extract_attention_maps(maps: AttentionMaps, out_side: int) -> List[np.ndarray]:
    """Bilinearly resize every native map to ``out_side``; each entry is (B, out_side, out_side)."""
    out = []
    for a in maps.native:
        grid = a[:, 0]
        ah = bilinear_weights(grid.shape[1], out_side)
        aw = bilinear_weights(grid.shape[2], out_side)
        out.append(ah @ grid.astype(np.float64) @ aw.T)
    return out


class AttentionUNet:
    """Parameter container and forward pass.

    ``params`` holds trainable tensors and ``buffers`` holds batch-norm
    running statistics, both keyed by dotted names in a fixed order.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    # ----------------------------------------------------------- structure
    @staticmethod
    def param_specs(config: ModelConfig) -> List[ParamSpec]:
        config.validate()
        k = config.kernel_size
        specs: List[ParamSpec] = []

        def block(prefix: str, cin: int, cout: int):
            specs.extend(
                [
                    ParamSpec(f"{prefix}.conv.weight", (cout, cin, k, k), "he_normal"),
                    ParamSpec(f"{prefix}.conv.bias", (cout,), "zeros"),
                    ParamSpec(f"{prefix}.bn.weight", (cout,), "ones"),
                    ParamSpec(f"{prefix}.bn.bias", (cout,), "zeros"),
                    ParamSpec(f"{prefix}.bn.running_mean", (cout,), "buffer_zeros"),
                    ParamSpec(f"{prefix}.bn.running_var", (cout,), "buffer_ones"),
                ]
            )

        cin = config.in_channels
        for lvl in range(config.depth):
            c = config.channels(lvl)
            block(f"enc{lvl}.block0", cin, c)
            block(f"enc{lvl}.block1", c, c)
            cin = c
        for lvl in reversed(range(config.depth - 1)):
            c, c_up = config.channels(lvl), config.channels(lvl + 1)
            fi = config.f_int(lvl)
            specs.extend(
                [
                    ParamSpec(f"gate{lvl}.W_x", (fi, c, 1, 1), "he_normal"),
                    ParamSpec(f"gate{lvl}.W_g", (fi, c_up, 1, 1), "he_normal"),
                    ParamSpec(f"gate{lvl}.b_g", (fi,), "zeros"),
                    ParamSpec(f"gate{lvl}.psi", (1, fi, 1, 1), "he_normal"),
                    ParamSpec(f"gate{lvl}.b_psi", (1,), "zeros"),
                    ParamSpec(f"up{lvl}.weight", (c_up, c, config.up_kernel, config.up_kernel), "he_normal_transposed"),
                    ParamSpec(f"up{lvl}.bias", (c,), "zeros"),
                ]
            )
            block(f"dec{lvl}.block0", 2 * c, c)
            block(f"dec{lvl}.block1", c, c)
        specs.append(ParamSpec("head.weight", (config.out_channels, config.channels(0), 1, 1), "he_normal"))
        specs.append(ParamSpec("head.bias", (config.out_channels,), "zeros"))
        names = [s.name for s in specs]
        assert len(set(names)) == len(names)
        return specs

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "AttentionUNet":
        rng = np.random.default_rng(seed)
        params: Dict[str, Tensor] = {}
        buffers: Dict[str, np.ndarray] = {}
        for spec in cls.param_specs(config):
            if spec.init == "he_normal":
                fan_in = int(np.prod(spec.shape[1:]))
                arr = rng.standard_normal(spec.shape) * np.sqrt(2.0 / fan_in)
            elif spec.init == "he_normal_transposed":
                arr = rng.standard_normal(spec.shape) * np.sqrt(2.0 / spec.shape[0])
            elif spec.init in ("zeros", "buffer_zeros"):
                arr = np.zeros(spec.shape)
            elif spec.init in ("ones", "buffer_ones"):
                arr = np.ones(spec.shape)
            else:  # pragma: no cover
                raise ValueError(spec.init)
            if spec.init.startswith("buffer"):
                buffers[spec.name] = arr.astype(DTYPE)
            else:
                params[spec.name] = Tensor(arr, requires_grad=True, name=spec.name)
        return cls(config, params, buffers)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=DTYPE)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=DTYPE)

    def copy(self) -> "AttentionUNet":
        clone = AttentionUNet.build(self.config, 0)
        clone.load_state_dict(self.state_dict())
        return clone

    def gate_params(self, lvl: int) -> AttentionGateParams:
        p = self.params
        return AttentionGateParams(
            p[f"gate{lvl}.W_x"], p[f"gate{lvl}.W_g"], p[f"gate{lvl}.b_g"], p[f"gate{lvl}.psi"], p[f"gate{lvl}.b_psi"]
        )

    # ------------------------------------------------------------- forward
    def _block(self, prefix: str, x: Tensor, training: bool) -> Tensor:
        p, pad = self.params, self.config.kernel_size // 2
        h = F.conv2d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"], stride=1, padding=pad)
        h = F.batch_norm2d(
            h,
            p[f"{prefix}.bn.weight"],
            p[f"{prefix}.bn.bias"],
            self.buffers[f"{prefix}.bn.running_mean"],
            self.buffers[f"{prefix}.bn.running_var"],
            training,
        )
        return F.leaky_relu(h, self.config.leaky_slope)

    def forward(self, batch, training: bool = False, gated: Optional[bool] = None) -> Tuple[Tensor, AttentionMaps]:
        """Probability map (B, out_channels, S, S) and the gate coefficients.

        ``gated=False`` passes skips through unchanged (plain U-Net on the
        same weights); by default it follows ``config.attention``.
        """
        cfg = self.config
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (B, {cfg.in_channels}, S, S), got {x.shape}")
        if x.shape[2] != cfg.input_side or x.shape[3] != cfg.input_side:
            raise ValueError(f"input side {x.shape[2]}x{x.shape[3]} != configured {cfg.input_side}")
        gated = cfg.attention if gated is None else gated

        skips = []
        h = x
        for lvl in range(cfg.depth):
            h = self._block(f"enc{lvl}.block0", h, training)
            h = self._block(f"enc{lvl}.block1", h, training)
            if lvl < cfg.depth - 1:
                skips.append(h)
                h = F.max_pool2d(h)

        maps = AttentionMaps()
        native_maps, up_maps = {}, {}
        for lvl in reversed(range(cfg.depth - 1)):
            skip = skips[lvl]
            if gated:
                skip, _, native = attention_gate(skip, h, self.gate_params(lvl), return_native=True)
                native_maps[lvl] = native.data.copy()
                up_maps[lvl] = F.upsample_bilinear(Tensor(native.data), cfg.input_side, cfg.input_side).data
            up = F.conv_transpose2d(h, self.params[f"up{lvl}.weight"], self.params[f"up{lvl}.bias"], stride=2)
            h = F.concat([skip, up], axis=1)
            h = self._block(f"dec{lvl}.block0", h, training)
            h = self._block(f"dec{lvl}.block1", h, training)
        maps.native = [native_maps[lvl] for lvl in sorted(native_maps)]
        maps.upsampled = [up_maps[lvl] for lvl in sorted(up_maps)]

        logits = F.conv2d(h, self.params["head.weight"], self.params["head.bias"])
        return F.sigmoid(logits), maps

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0) -> AttentionUNet:
    return AttentionUNet.build(config, seed)


def forward(model: AttentionUNet, batch, mode: str = "eval") -> Tuple[Tensor, AttentionMaps]:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(batch, training=(mode == "train"))


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
