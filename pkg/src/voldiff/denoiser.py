"""Time-conditioned denoisers and the desk-scale training loop.

Two implementations of the predictor interface live here: a closed-form
Gaussian oracle (exact posterior mean, used for end-to-end verification)
and a small trainable 3D U-Net with Adam, per-epoch EMA of the weights,
and rigid-transform augmentation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .param import PredictionKind, forward_diffuse, make_target
from .schedule import NoiseSchedule, build_linear_schedule
from .volume import Volume


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, last_good_epoch: int):
        super().__init__(msg)
        self.last_good_epoch = last_good_epoch


class Denoiser(Protocol):
    kind: PredictionKind

    def predict(self, xt: np.ndarray, t: int) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Closed-form Gaussian oracle
# ---------------------------------------------------------------------------

class GaussianOracle:
    """Exact denoiser for data distributed N(mean, var) iid per voxel.

    The Sample-kind prediction is the conjugate posterior mean
    E[x0|xt] = (sqrt(ab)*var*xt + (1-ab)*mean) / (ab*var + 1-ab); other
    kinds are obtained from the same posterior by target algebra.
    """

    def __init__(self, mean, var: float, schedule: NoiseSchedule,
                 kind: PredictionKind = PredictionKind.SAMPLE):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = float(var)
        self.schedule = schedule
        self.kind = kind

    def predict(self, xt: np.ndarray, t: int) -> np.ndarray:
        if not (0 <= t < self.schedule.T):
            raise ValueError(f"t={t} outside schedule of length {self.schedule.T}")
        ab = float(self.schedule.alpha_bar[t])
        xt = np.asarray(xt, dtype=np.float64)
        sa = math.sqrt(ab)
        x0_hat = (sa * self.var * xt + (1.0 - ab) * self.mean) / (ab * self.var + 1.0 - ab)
        if self.kind is PredictionKind.SAMPLE:
            return x0_hat
        eps_hat = (xt - sa * x0_hat) / math.sqrt(1.0 - ab)
        return make_target(self.kind, x0_hat, eps_hat, ab)


class ConstantDenoiser:
    """Always predicts the Sample-kind target for a single fixed image."""

    def __init__(self, image, kind: PredictionKind = PredictionKind.SAMPLE):
        self.image = np.asarray(image, dtype=np.float64)
        self.kind = PredictionKind.SAMPLE
        if kind is not PredictionKind.SAMPLE:
            raise ValueError("ConstantDenoiser only supports the sample kind")

    def predict(self, xt: np.ndarray, t: int) -> np.ndarray:
        return np.broadcast_to(self.image, np.shape(xt)).copy()


# ---------------------------------------------------------------------------
# Tiny 3D U-Net
# ---------------------------------------------------------------------------

def _num_groups(channels: int) -> int:
    for g in (4, 2):
        if channels % g == 0 and channels > g:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features of the timestep, log-spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype,
                                                        device=t.device) / max(half - 1, 1))
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm = nn.GroupNorm(_num_groups(cout), cout)
        self.temb = nn.Linear(time_dim, cout)

    def forward(self, x, emb):
        h = self.conv(x)
        h = h + self.temb(emb)[:, :, None, None, None]
        return F.silu(self.norm(h))


class TinyUNet(nn.Module):
    """Minimal encoder-decoder with skip connections, group norm, SiLU,
    nearest-neighbor upsampling, and a bias-free final projection."""

    def __init__(self, widths: Sequence[int] = (8, 16), time_dim: int = 16):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 1:
            raise ValueError("need at least one level")
        self.widths = widths
        self.time_dim = time_dim
        self.stem = nn.Conv3d(1, widths[0], 3, padding=1)
        self.enc = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.enc.append(_ConvBlock(prev, w, time_dim))
            prev = w
        self.dec = nn.ModuleList()
        for i in reversed(range(len(widths) - 1)):
            self.dec.append(_ConvBlock(widths[i + 1] + widths[i], widths[i], time_dim))
        self.final = nn.Conv3d(widths[0], 1, 1, bias=False)

    @property
    def levels(self) -> int:
        return len(self.widths)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        div = 2 ** (self.levels - 1)
        if any(s % div for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} not divisible by {div}")
        emb = sinusoidal_embedding(t.to(x.dtype), self.time_dim)
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb)
            if i < self.levels - 1:
                skips.append(h)
                h = F.avg_pool3d(h, 2)
        for block, skip in zip(self.dec, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.final(h)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def get_weights(net: nn.Module) -> np.ndarray:
    """Flatten all parameters (declaration order) to one float64 vector."""
    with torch.no_grad():
        return np.concatenate([p.detach().cpu().numpy().ravel().astype(np.float64)
                               for p in net.parameters()])


def set_weights(net: nn.Module, vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            chunk = vec[offset:offset + n].reshape(p.shape)
            p.copy_(torch.as_tensor(chunk, dtype=p.dtype))
            offset += n
    if offset != vec.size:
        raise ValueError(f"weight vector length {vec.size} != model size {offset}")


def unet_forward(net: TinyUNet, xt: np.ndarray, t: int) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(xt), dtype=dtype)[None, None]
    with torch.no_grad():
        out = net(x, torch.tensor([t]))
    return out[0, 0].cpu().numpy()


def unet_backward(net: TinyUNet, xt: np.ndarray, t: int,
                  upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, forward(xt, t)> with respect to all parameters."""
    if np.shape(upstream) != np.shape(xt):
        raise ValueError("upstream shape must match input shape")
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(xt), dtype=dtype)[None, None]
    u = torch.as_tensor(np.asarray(upstream), dtype=dtype)[None, None]
    net.zero_grad(set_to_none=True)
    out = net(x, torch.tensor([t]))
    (out * u).sum().backward()
    grads = []
    for p in net.parameters():
        g = p.grad
        grads.append(np.zeros(p.numel()) if g is None
                     else g.detach().cpu().numpy().ravel().astype(np.float64))
    return np.concatenate(grads)


class UNetDenoiser:
    """Frozen U-Net exposed through the predictor interface."""

    def __init__(self, net: TinyUNet, kind: PredictionKind,
                 weights: Optional[np.ndarray] = None):
        self.net = net
        self.kind = kind
        if weights is not None:
            set_weights(net, weights)
        self.net.eval()

    def predict(self, xt: np.ndarray, t: int) -> np.ndarray:
        return unet_forward(self.net, xt, t)


# ---------------------------------------------------------------------------
# Optimizer and EMA
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), v=np.zeros(n))


def adam_step(weights: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam update with bias correction; mutates state in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergedError("non-finite gradient", last_good_epoch=-1)
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    return weights - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class EmaState:
    momentum: float = 0.1
    shadow: Optional[np.ndarray] = None


def ema_update(ema: EmaState, weights: np.ndarray) -> EmaState:
    """shadow <- (1-momentum)*shadow + momentum*weights; first call copies."""
    weights = np.asarray(weights, dtype=np.float64)
    if ema.shadow is None:
        return EmaState(momentum=ema.momentum, shadow=weights.copy())
    if ema.shadow.shape != weights.shape:
        raise ValueError("EMA shadow dimension does not match model")
    shadow = (1.0 - ema.momentum) * ema.shadow + ema.momentum * weights
    return EmaState(momentum=ema.momentum, shadow=shadow)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def rigid_transform(v: Volume, angles_rad, shift_mm) -> Volume:
    """Rotate about the volume center and translate, with trilinear
    resampling and zero fill outside the field."""
    from scipy import ndimage

    cx, cy, cz = np.asarray(angles_rad, dtype=np.float64)
    shift_mm = np.asarray(shift_mm, dtype=np.float64)
    Rx = np.array([[1, 0, 0], [0, math.cos(cx), -math.sin(cx)], [0, math.sin(cx), math.cos(cx)]])
    Ry = np.array([[math.cos(cy), 0, math.sin(cy)], [0, 1, 0], [-math.sin(cy), 0, math.cos(cy)]])
    Rz = np.array([[math.cos(cz), -math.sin(cz), 0], [math.sin(cz), math.cos(cz), 0], [0, 0, 1]])
    R = Rx @ Ry @ Rz
    center = (np.array(v.data.shape, dtype=np.float64) - 1) / 2.0
    shift_vox = shift_mm / v.spacing
    # output voxel o samples input at R.T @ (o - center - shift) + center
    matrix = R.T
    offset = center - matrix @ (center + shift_vox)
    out = ndimage.affine_transform(np.asarray(v.data, dtype=np.float64), matrix,
                                   offset=offset, order=1, mode="constant", cval=0.0)
    return Volume(data=out.astype(np.float32), spacing=v.spacing.copy(),
                  direction=v.direction.copy(), origin=v.origin.copy())


def augment(v: Volume, seed: int, rot_deg: float = 10.0,
            trans_mm: float = 5.0) -> Volume:
    """One random rigid transform: per-axis rotations up to +-rot_deg,
    translations up to +-trans_mm."""
    rng = np.random.default_rng(seed)
    angles = np.deg2rad(rng.uniform(-rot_deg, rot_deg, size=3))
    shift_mm = rng.uniform(-trans_mm, trans_mm, size=3)
    return rigid_transform(v, angles, shift_mm)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    rotation_deg: float = 10.0
    translation_mm: float = 5.0
    seed: int = 0
    widths: tuple = (8, 16)
    time_dim: int = 16
    ema_momentum: float = 0.1
    schedule: NoiseSchedule = field(default_factory=build_linear_schedule)

    def __post_init__(self):
        if self.rotation_deg < 0 or self.translation_mm < 0:
            raise ValueError("augmentation limits must be nonnegative")


@dataclass
class TrainResult:
    weights: np.ndarray
    ema: EmaState
    loss_history: list[float]
    diverged: bool
    last_good_epoch: int
    net: TinyUNet


def train(dataset: Sequence, kind: PredictionKind, cfg: TrainConfig,
          batch_hook: Optional[Callable[[int, int, np.ndarray], np.ndarray]] = None
          ) -> TrainResult:
    """Desk-scale training: per step sample batch/t/eps, diffuse forward,
    regress on the kind's target with MSE, Adam update; EMA of weights at
    each epoch end. A non-finite loss flags divergence and leaves weights
    and EMA at the last finite epoch.

    batch_hook, when given, may rewrite the noised batch before the forward
    pass (fault-injection and instrumentation hook).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    images = []
    for item in dataset:
        vol = item if isinstance(item, Volume) else Volume(data=np.asarray(item))
        images.append(vol)
    torch.manual_seed(cfg.seed)
    net = TinyUNet(cfg.widths, cfg.time_dim).double()
    rng = np.random.default_rng(cfg.seed)
    weights = get_weights(net)
    adam = AdamState.zeros(weights.size)
    ema = EmaState(momentum=cfg.ema_momentum)
    sched = cfg.schedule
    history: list[float] = []
    diverged = False
    last_good = 0
    good_weights = weights.copy()
    n = len(images)
    augmenting = cfg.rotation_deg > 0 or cfg.translation_mm > 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        epoch_ok = True
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            batch_x0, batch_xt, batch_tgt, batch_t = [], [], [], []
            for i in idx:
                vol = images[i]
                if augmenting:
                    vol = augment(vol, seed=int(rng.integers(2 ** 62)),
                                  rot_deg=cfg.rotation_deg, trans_mm=cfg.translation_mm)
                x0 = np.asarray(vol.data, dtype=np.float64)
                t = int(rng.integers(0, sched.T))
                eps = rng.standard_normal(x0.shape)
                ab = float(sched.alpha_bar[t])
                batch_x0.append(x0)
                batch_xt.append(forward_diffuse(x0, eps, ab))
                batch_tgt.append(make_target(kind, x0, eps, ab))
                batch_t.append(t)
            xt = np.stack(batch_xt)
            if batch_hook is not None:
                xt = batch_hook(epoch, step, xt)
            x = torch.as_tensor(xt, dtype=torch.float64)[:, None]
            tgt = torch.as_tensor(np.stack(batch_tgt), dtype=torch.float64)[:, None]
            net.zero_grad(set_to_none=True)
            pred = net(x, torch.as_tensor(batch_t))
            loss = F.mse_loss(pred, tgt)
            loss_val = float(loss.item())
            if not math.isfinite(loss_val):
                epoch_ok = False
                epoch_losses.append(loss_val)
                break
            loss.backward()
            grads = np.concatenate([p.grad.detach().numpy().ravel() for p in net.parameters()])
            if not np.all(np.isfinite(grads)):
                epoch_ok = False
                break
            weights = adam_step(weights, grads, adam, cfg.learning_rate)
            set_weights(net, weights)
            epoch_losses.append(loss_val)
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        history.append(mean_loss)
        if not epoch_ok or not math.isfinite(mean_loss):
            diverged = True
            weights = good_weights
            set_weights(net, weights)
            break
        last_good = epoch
        good_weights = weights.copy()
        ema = ema_update(ema, weights)
    return TrainResult(weights=weights, ema=ema, loss_history=history,
                       diverged=diverged, last_good_epoch=last_good, net=net)


def save_loss_history(path, history: Sequence[float], diverged: bool) -> None:
    with open(path, "w") as f:
        f.write("epoch,mean_loss,diverged\n")
        for i, loss in enumerate(history, start=1):
            flag = int(diverged and i == len(history))
            f.write(f"{i},{loss!r},{flag}\n")


# ---------------------------------------------------------------------------
# Weight files: JSON header line + little-endian float32 blob
# ---------------------------------------------------------------------------

def save_weights(path, weights: np.ndarray, kind: PredictionKind,
                 widths: Sequence[int], schedule: NoiseSchedule,
                 epoch: int, ema_momentum: float, time_dim: int = 16) -> None:
    header = {
        "format": "voldiff-weights",
        "kind": str(kind),
        "widths": list(int(w) for w in widths),
        "time_dim": time_dim,
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start,
                     "beta_end": schedule.beta_end},
        "epoch": epoch,
        "ema_momentum": ema_momentum,
        "param_count": int(np.asarray(weights).size),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        f.write(np.asarray(weights, dtype="<f4").tobytes())


def save_oracle_stub(path, mean: float, std: float, kind: PredictionKind,
                     schedule: NoiseSchedule) -> None:
    header = {
        "format": "voldiff-oracle",
        "kind": str(kind),
        "mean": float(mean),
        "std": float(std),
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start,
                     "beta_end": schedule.beta_end},
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())


def load_denoiser(path) -> Denoiser:
    """Load a serialized denoiser: either a trained U-Net weight file or a
    Gaussian-oracle stub."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    sched = header["schedule"]
    schedule = build_linear_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
    kind = PredictionKind.from_str(header["kind"])
    fmt = header.get("format")
    if fmt == "voldiff-oracle":
        return GaussianOracle(header["mean"], header["std"] ** 2, schedule, kind)
    if fmt == "voldiff-weights":
        weights = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        if weights.size != header["param_count"]:
            raise IOError(f"{path}: truncated weight blob")
        net = TinyUNet(header["widths"], header.get("time_dim", 16)).double()
        den = UNetDenoiser(net, kind, weights)
        den.schedule = schedule
        return den
    raise IOError(f"{path}: unrecognized weight file format {fmt!r}")
