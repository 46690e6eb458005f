"""Deep-image-prior reconstruction engine.

An untrained encoder-decoder with skip paths is fitted to a single noisy
image. Snapshots of the clamped output are handed to an observer every
``eval_every`` iterations; the observer can end the run early.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .images import save_png, validate_image

log = logging.getLogger(__name__)

STATE_FORMAT_VERSION = 1
STRUCTURAL_FIELDS = (
    "depth",
    "filters_down",
    "filters_up",
    "filters_skip",
    "kernel_down",
    "kernel_up",
    "kernel_skip",
    "input_channels",
)
_PER_SCALE = ("filters_down", "filters_up", "filters_skip", "kernel_down", "kernel_up", "kernel_skip")

Observer = Callable[[int, np.ndarray], bool | None]


class ConfigError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


class StateFileError(ValueError):
    pass


class ReconstructionError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class DipConfig:
    """Full hyperparameterization of the prior network and its loop.

    Per-scale fields accept a scalar (broadcast to every scale) or a
    sequence of length ``depth``.
    """

    depth: int = 5
    filters_down: tuple[int, ...] | int = 128
    filters_up: tuple[int, ...] | int = 128
    filters_skip: tuple[int, ...] | int = 4
    kernel_down: tuple[int, ...] | int = 3
    kernel_up: tuple[int, ...] | int = 3
    kernel_skip: tuple[int, ...] | int = 1
    input_channels: int = 32
    input_noise_amplitude: float = 0.1
    perturb_sigma: float = 1.0 / 30.0
    learning_rate: float = 0.01
    max_iterations: int = 3000
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.depth, int) or self.depth < 1:
            raise ConfigError(f"depth: must be an integer >= 1, got {self.depth!r}")
        for name in _PER_SCALE:
            value = getattr(self, name)
            vals = (value,) * self.depth if isinstance(value, int) else tuple(value)
            if len(vals) != self.depth:
                raise ConfigError(f"{name}: expected {self.depth} entries, got {len(vals)}")
            if any(int(v) != v or v < 1 for v in vals):
                raise ConfigError(f"{name}: entries must be integers >= 1, got {vals}")
            if name.startswith("kernel") and any(v % 2 == 0 for v in vals):
                raise ConfigError(f"{name}: kernel sizes must be odd, got {vals}")
            object.__setattr__(self, name, tuple(int(v) for v in vals))
        if self.input_channels < 1:
            raise ConfigError(f"input_channels: must be >= 1, got {self.input_channels}")
        if not self.input_noise_amplitude > 0:
            raise ConfigError(f"input_noise_amplitude: must be > 0, got {self.input_noise_amplitude}")
        if not self.perturb_sigma >= 0:
            raise ConfigError(f"perturb_sigma: must be >= 0, got {self.perturb_sigma}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate: must be >= 0, got {self.learning_rate}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every: must be >= 1, got {self.eval_every}")
        if self.max_iterations < self.eval_every:
            raise ConfigError(
                f"max_iterations: must be >= eval_every ({self.eval_every}), got {self.max_iterations}"
            )

    def replace(self, **changes) -> "DipConfig":
        d = self.to_dict()
        d.update(changes)
        return DipConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in _PER_SCALE:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DipConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DipConfig fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def structure(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k in STRUCTURAL_FIELDS}

    def fingerprint(self) -> str:
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _conv(cin: int, cout: int, k: int, stride: int = 1) -> list[nn.Module]:
    layers: list[nn.Module] = []
    if k > 1:
        layers.append(nn.ReflectionPad2d(k // 2))
    layers.append(nn.Conv2d(cin, cout, k, stride=stride))
    return layers


def _conv_bn_act(cin: int, cout: int, k: int, stride: int = 1) -> list[nn.Module]:
    return [*_conv(cin, cout, k, stride), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2)]


class _Level(nn.Module):
    def __init__(self, cin, nd, nu, ns, kd, ku, ks, deeper: nn.Module | None, deeper_out: int):
        super().__init__()
        self.skip = nn.Sequential(*_conv_bn_act(cin, ns, ks))
        self.down = nn.Sequential(*_conv_bn_act(cin, nd, kd, stride=2), *_conv_bn_act(nd, nd, kd))
        self.deeper = deeper
        self.merge = nn.Sequential(
            nn.BatchNorm2d(ns + deeper_out),
            *_conv_bn_act(ns + deeper_out, nu, ku),
            *_conv_bn_act(nu, nu, 1),
        )

    def forward(self, x):
        s = self.skip(x)
        d = self.down(x)
        if self.deeper is not None:
            d = self.deeper(d)
        d = F.interpolate(d, size=s.shape[-2:], mode="bilinear", align_corners=False)
        return self.merge(torch.cat([s, d], dim=1))


class HourglassNet(nn.Module):
    """Encoder-decoder with a skip branch at every scale and a sigmoid RGB head."""

    def __init__(self, config: DipConfig):
        super().__init__()
        c = config
        level = None
        for i in reversed(range(c.depth)):
            cin = c.input_channels if i == 0 else c.filters_down[i - 1]
            deeper_out = c.filters_down[i] if level is None else c.filters_up[i + 1]
            level = _Level(
                cin, c.filters_down[i], c.filters_up[i], c.filters_skip[i],
                c.kernel_down[i], c.kernel_up[i], c.kernel_skip[i],
                level, deeper_out,
            )
        self.body = level
        self.head = nn.Conv2d(c.filters_up[0], 3, 1)

    def forward(self, x):
        return torch.sigmoid(self.head(self.body(x)))


def padded_shape(shape: tuple[int, int], config: DipConfig) -> tuple[int, int]:
    """Spatial shape after reflection padding up to a multiple of 2**depth."""
    m = 2**config.depth
    h, w = shape
    ph, pw = math.ceil(h / m) * m, math.ceil(w / m) * m
    coarsest = min(ph, pw) // m
    max_pad = max(max(config.kernel_down), max(config.kernel_up), max(config.kernel_skip)) // 2
    if coarsest <= max_pad or ph - h >= h or pw - w >= w:
        raise ConfigError(f"image {h}x{w} too small for {config.depth} halvings")
    return ph, pw


@dataclass
class NetworkState:
    weights: dict
    fingerprint: str
    base_input: torch.Tensor
    structure: dict = field(default_factory=dict)

    def check_compatible(self, config: DipConfig) -> None:
        if config.fingerprint() != self.fingerprint:
            raise FingerprintMismatch(
                f"state fingerprint {self.fingerprint} does not match config {config.fingerprint()}"
            )

    def instantiate(self, config: DipConfig) -> HourglassNet:
        self.check_compatible(config)
        net = HourglassNet(config)
        net.load_state_dict(self.weights)
        return net


def build_network(config: DipConfig, seed: int, shape: tuple[int, int]) -> NetworkState:
    """Seeded initialization of weights and of the uniform-noise base input.

    ``shape`` is the reference image's (height, width); the base input is
    drawn at the padded size.
    """
    ph, pw = padded_shape(shape, config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = HourglassNet(config)
    base = draw_base_input(config, seed, (ph, pw))
    return NetworkState(_clone_weights(net), config.fingerprint(), base, config.structure())


def draw_base_input(config: DipConfig, seed: int, padded: tuple[int, int]) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(1, config.input_channels, *padded, generator=gen) * config.input_noise_amplitude


def derive_seed(seed: int, tag: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{tag}".encode()).digest()[:4], "little")


def _clone_weights(net: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def forward(state: NetworkState, config: DipConfig, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Output of a state on its own base input, as an H×W×3 array.

    Batch norm runs on batch statistics, as it does inside the fitting loop.
    """
    net = state.instantiate(config)
    net.train()
    with torch.no_grad():
        out = net(state.base_input)
    h, w = shape or out.shape[-2:]
    return _to_image(out[..., :h, :w])


def count_parameters(state_or_net) -> int:
    if isinstance(state_or_net, NetworkState):
        return sum(v.numel() for k, v in state_or_net.weights.items() if _is_param(k))
    return sum(p.numel() for p in state_or_net.parameters())


def _is_param(key: str) -> bool:
    return not key.endswith(("running_mean", "running_var", "num_batches_tracked"))


def perturb_input(base_input: torch.Tensor, perturb_sigma: float, generator: torch.Generator) -> torch.Tensor:
    if perturb_sigma == 0:
        return base_input.clone()
    noise = torch.randn(base_input.shape, generator=generator, dtype=base_input.dtype)
    return base_input + noise * perturb_sigma


def l2_loss(output, reference) -> float | torch.Tensor:
    """Mean squared difference. Tensors in, tensor out (differentiable); arrays in, float out."""
    if isinstance(output, torch.Tensor):
        if output.shape != reference.shape:
            raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(reference.shape)}")
        return torch.mean((output - reference) ** 2)
    a = np.asarray(output, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def save_state(state: NetworkState, path: str | Path) -> Path:
    path = Path(path)
    blob = {
        "format_version": STATE_FORMAT_VERSION,
        "fingerprint": state.fingerprint,
        "structure": json.dumps(state.structure, sort_keys=True),
        "weights": state.weights,
        "base_input": state.base_input,
    }
    torch.save(blob, path)
    return path


def load_state(path: str | Path, config: DipConfig | None = None) -> NetworkState:
    """Load a saved state; if ``config`` is given the fingerprint must match it."""
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise StateFileError(f"{path}: unreadable network state ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != STATE_FORMAT_VERSION:
        raise StateFileError(f"{path}: unsupported network state format")
    try:
        state = NetworkState(
            weights=blob["weights"],
            fingerprint=blob["fingerprint"],
            base_input=blob["base_input"],
            structure=json.loads(blob["structure"]),
        )
    except (KeyError, ValueError) as exc:
        raise StateFileError(f"{path}: corrupt network state ({exc})") from exc
    if config is not None:
        state.check_compatible(config)
    return state


@dataclass
class TraceEntry:
    iteration: int
    snapshot_ref: str
    raw_score: float | None = None
    smoothed_score: float | None = None


@dataclass
class ReconstructionTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    final_choice: int | None = None
    stopped_early: bool = False
    warm_started: bool = False
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> list[int]:
        return [e.iteration for e in self.entries]

    def entry(self, iteration: int) -> TraceEntry:
        for e in self.entries:
            if e.iteration == iteration:
                return e
        raise KeyError(iteration)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "warm_started": self.warm_started,
            "stopped_early": self.stopped_early,
            "final_choice": self.final_choice,
            "entries": [asdict(e) for e in self.entries],
            "loss_curve": self.loss_curve,
            **self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _to_image(out: torch.Tensor) -> np.ndarray:
    return out[0].clamp(0.0, 1.0).permute(1, 2, 0).detach().cpu().numpy().astype(np.float64)


def reconstruct(
    noisy: np.ndarray,
    config: DipConfig,
    warm_start: NetworkState | None = None,
    observer: Observer | None = None,
    run_dir: str | Path | None = None,
    reset_input: bool = False,
) -> tuple[ReconstructionTrace, NetworkState]:
    """Fit the prior network to ``noisy`` and return (trace, final state).

    Every ``eval_every`` iterations the clamped output (from the forward pass
    of that iteration, before its gradient step) is written to
    ``run_dir/snap_{iteration:06d}.png`` when ``run_dir`` is set and passed to
    ``observer(iteration, snapshot)``. A truthy return ends the run.

    A warm start reuses the stored base input unless ``reset_input`` is set,
    in which case a new one is drawn from a stream derived from ``config.seed``.
    """
    noisy = validate_image(noisy, "noisy")
    h, w = noisy.shape[:2]
    if warm_start is not None:
        warm_start.check_compatible(config)
        state = warm_start
        ph, pw = padded_shape((h, w), config)
        if tuple(state.base_input.shape[-2:]) != (ph, pw):
            log.warning("warm-start base input shape differs from image; drawing a fresh base input")
            reset_input = True
        if reset_input:
            fresh = draw_base_input(config, derive_seed(config.seed, "warm-input"), (ph, pw))
            state = NetworkState(state.weights, state.fingerprint, fresh, state.structure)
    else:
        state = build_network(config, config.seed, (h, w))

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    net = state.instantiate(config)
    net.train()
    base = state.base_input.clone()
    target = torch.from_numpy(noisy.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "perturb"))
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    trace = ReconstructionTrace(warm_started=warm_start is not None, config=config.to_dict())
    for it in range(1, config.max_iterations + 1):
        opt.zero_grad(set_to_none=True)
        out = net(perturb_input(base, config.perturb_sigma, gen))[..., :h, :w]
        loss = l2_loss(out, target)
        value = float(loss.item())
        if not math.isfinite(value):
            raise ReconstructionError(f"non-finite loss {value}", it)
        trace.loss_curve.append(value)

        stop = False
        if it % config.eval_every == 0:
            snapshot = _to_image(out)
            ref = f"snap_{it:06d}.png"
            if run_dir is not None:
                save_png(snapshot, run_dir / ref)
            trace.entries.append(TraceEntry(it, ref))
            if observer is not None:
                stop = bool(observer(it, snapshot))
        if stop:
            trace.stopped_early = True
            break
        loss.backward()
        opt.step()

    trace.final_choice = trace.entries[-1].iteration if trace.entries else None
    final = NetworkState(_clone_weights(net), state.fingerprint, base, dict(state.structure))
    return trace, final


def prune_snapshots(run_dir: str | Path, keep: Sequence[str]) -> int:
    """Delete every ``snap_*.png`` in ``run_dir`` not named in ``keep``."""
    removed = 0
    keep = set(keep)
    for p in Path(run_dir).glob("snap_*.png"):
        if p.name not in keep:
            p.unlink()
            removed += 1
    return removed
