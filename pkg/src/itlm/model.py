"""ResUnet model, masked losses, Adam, gradient checking, and weight I/O.

torch (CPU) provides the tensor/autodiff engine; the architecture, the
training-facing surface, and the "ITLM" weights container are defined here.
Training runs in float32; grad_check switches the model to float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

WEIGHTS_MAGIC = b"ITLM"
WEIGHTS_VERSION = 1

ENCODER_WIDTHS = (16, 32, 64)
BOTTLENECK_WIDTH = 128


class WeightsError(ValueError):
    pass


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """Cross-correlation with reflect padding for 3x3 kernels; 1x1 unpadded."""
    k = weight.shape[-1]
    if k == 3:
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    elif k != 1:
        raise ValueError("only 1x1 and 3x3 kernels are supported")
    return F.conv2d(x, weight, bias, stride=stride)


def batch_norm(
    x: torch.Tensor,
    scale: torch.Tensor,
    offset: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> torch.Tensor:
    if train and x.shape[0] < 2:
        raise ValueError("batch norm in train mode needs batch size >= 2")
    return F.batch_norm(x, running_mean, running_var, scale, offset, train, momentum, eps)


class ConvBNRelu(nn.Module):
    def __init__(self, cin, cout, kernel=3, stride=1, relu=True):
        super().__init__()
        pad = 0  # padding handled by conv2d() reflect
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x):
        x = conv2d(x, self.conv.weight, None, self.conv.stride[0])
        x = batch_norm(
            x,
            self.bn.weight,
            self.bn.bias,
            self.bn.running_mean,
            self.bn.running_var,
            self.training,
            self.bn.momentum,
            self.bn.eps,
        )
        return F.relu(x) if self.relu else x


class ResidualBlock(nn.Module):
    """Two 3x3 conv+BN with ReLU, identity or 1x1-projection shortcut."""

    def __init__(self, cin, cout):
        super().__init__()
        self.a = ConvBNRelu(cin, cout)
        self.b = ConvBNRelu(cout, cout, relu=False)
        self.proj = None if cin == cout else ConvBNRelu(cin, cout, kernel=1, relu=False)

    def forward(self, x):
        short = x if self.proj is None else self.proj(x)
        return F.relu(self.b(self.a(x)) + short)


class ResUnet(nn.Module):
    """3-level residual encoder-decoder with skip concatenation.

    Encoder widths 16/32/64, bottleneck 128, nearest x2 upsampling in the
    decoder, 1x1 head. Spatial dims are preserved for inputs divisible by 8.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        w = ENCODER_WIDTHS
        self.stem = ConvBNRelu(in_channels, w[0])
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = w[0]
        for cw in w:
            self.enc_blocks.append(ResidualBlock(cin, cw))
            self.downs.append(ConvBNRelu(cw, cw, stride=2))
            cin = cw
        self.bottleneck = ResidualBlock(w[-1], BOTTLENECK_WIDTH)
        self.up_convs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        cin = BOTTLENECK_WIDTH
        for cw in reversed(w):
            self.up_convs.append(ConvBNRelu(cin, cw))
            self.dec_blocks.append(ResidualBlock(cw + cw, cw))
            cin = cw
        self.head = nn.Conv2d(w[0], out_channels, 1)

        # per-channel input standardization, stored with the weights
        self.register_buffer("input_mean", torch.zeros(in_channels))
        self.register_buffer("input_std", torch.ones(in_channels))
        self.register_buffer("target_mean", torch.zeros(1))
        self.register_buffer("target_std", torch.ones(1))

    def forward(self, x):
        x = (x - self.input_mean[None, :, None, None]) / self.input_std[None, :, None, None]
        x = self.stem(x)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up_convs, self.dec_blocks, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=self.input_mean.dtype))
        self.input_std.copy_(torch.as_tensor(np.maximum(std, 1e-6), dtype=self.input_std.dtype))

    def set_target_stats(self, mean: float, std: float) -> None:
        self.target_mean.fill_(float(mean))
        self.target_std.fill_(max(float(std), 1e-6))


def make_clp_model(in_channels: int = 23) -> ResUnet:
    return ResUnet(in_channels, 3)


def make_property_model(in_channels: int = 24) -> ResUnet:
    return ResUnet(in_channels, 1)


def cross_entropy_masked(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean NLL at the true class over masked pixels; empty mask is an error."""
    mask = mask.bool()
    if not torch.any(mask):
        raise ValueError("loss mask selects no pixels")
    logp = F.log_softmax(logits, dim=1)
    # gather true-class log-probs; labels outside the mask are clamped to 0
    safe_labels = torch.where(mask, labels, torch.zeros_like(labels)).long()
    nll = -logp.gather(1, safe_labels.unsqueeze(1)).squeeze(1)
    return nll[mask].mean()


def mse_masked(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.bool()
    if not torch.any(mask):
        raise ValueError("loss mask selects no pixels")
    diff = pred.squeeze(1) - target
    return (diff[mask] ** 2).mean()


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(named_params, state: AdamState, lr: float = 0.001, trainable=None) -> None:
    """One Adam update over (name, tensor) pairs with populated .grad.

    `trainable`, when given, is a set of names; others are skipped (frozen).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in named_params:
        if trainable is not None and name not in trainable:
            continue
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
        state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.add_(-lr * m_hat / (v_hat.sqrt() + state.eps))


def grad_check(
    model: ResUnet,
    x: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    loss_kind: str,
    epsilon: float = 2e-6,
    n_params_sampled: int = 64,
    seed: int = 0,
) -> float:
    """Max error of autodiff gradients vs central finite differences,
    relative to the model's gradient scale.

    Runs entirely in float64 on randomly sampled parameter entries. The
    denominator includes the max absolute gradient over the whole model:
    a perturbed parameter shifts ReLU preactivations everywhere downstream,
    so FD of the total loss carries kink noise of that scale regardless of
    how small the probed entry's own gradient is. Epsilon defaults to 2e-6,
    small enough to keep kink crossings rare, large enough to stay above
    float64 cancellation noise.
    """
    model = model.double()
    model.eval()  # frozen batch-norm stats so FD perturbations see a pure function
    xt = torch.as_tensor(x, dtype=torch.float64)
    if xt.ndim == 3:
        xt = xt[None]
    if loss_kind == "ce":
        lt = torch.as_tensor(labels, dtype=torch.long)[None]
    else:
        lt = torch.as_tensor(labels, dtype=torch.float64)[None]
    mt = torch.as_tensor(mask, dtype=torch.bool)[None]

    def loss_fn():
        out = model(xt)
        if loss_kind == "ce":
            return cross_entropy_masked(out, lt, mt)
        return mse_masked(out, lt, mt)

    model.zero_grad()
    loss_fn().backward()

    params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    grad_scale = max(float(p.grad.abs().max()) for _, p in params)
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for _ in range(n_params_sampled):
        pi = int(rng.integers(len(params)))
        name, p = params[pi]
        flat = p.detach().view(-1)
        ei = int(rng.integers(flat.numel()))
        analytic = float(p.grad.view(-1)[ei])
        orig = float(flat[ei])
        with torch.no_grad():
            flat[ei] = orig + epsilon
            lp = float(loss_fn())
            flat[ei] = orig - epsilon
            lm = float(loss_fn())
            flat[ei] = orig
        fd = (lp - lm) / (2 * epsilon)
        denom = max(abs(analytic), abs(fd), grad_scale, 1e-8)
        max_rel = max(max_rel, abs(analytic - fd) / denom)
    return max_rel


# --- ITLM weights container ------------------------------------------------


def _arch_descriptor(model: ResUnet) -> dict:
    return {
        "kind": "resunet",
        "in_channels": model.in_channels,
        "out_channels": model.out_channels,
        "encoder_widths": list(ENCODER_WIDTHS),
        "bottleneck_width": BOTTLENECK_WIDTH,
    }


def save_weights(model: ResUnet, path) -> None:
    """ITLM container: magic, u32 version, u64 manifest length, JSON manifest,
    raw little-endian float32 tensor data in manifest order."""
    state = model.state_dict()
    names = sorted(state.keys())
    tensors = []
    offset = 0
    entries = []
    for name in names:
        t = state[name].detach().cpu()
        if t.dtype in (torch.int64, torch.long):
            t = t.to(torch.float32)  # num_batches_tracked counters
        arr = np.ascontiguousarray(t.numpy().astype("<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        tensors.append(arr)
        offset += arr.nbytes
    manifest = {
        "tensors": entries,
        "architecture": _arch_descriptor(model),
        "normalization": {
            "input_mean": model.input_mean.tolist(),
            "input_std": model.input_std.tolist(),
            "target_mean": model.target_mean.tolist(),
            "target_std": model.target_std.tolist(),
        },
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for arr in tensors:
            f.write(arr.tobytes())


def load_weights(path) -> ResUnet:
    with open(path, "rb") as f:
        if f.read(4) != WEIGHTS_MAGIC:
            raise WeightsError(f"bad weights magic in {path!s}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != WEIGHTS_VERSION:
            raise WeightsError(f"unsupported weights version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        blob = f.read()

    arch = manifest["architecture"]
    model = ResUnet(arch["in_channels"], arch["out_channels"])
    state = model.state_dict()
    present = {e["name"] for e in manifest["tensors"]}
    missing = sorted(set(state.keys()) - present)
    if missing:
        raise WeightsError(f"weights manifest missing tensors: {', '.join(missing)}")
    new_state = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(shape)
        ref = state[name]
        new_state[name] = torch.as_tensor(arr.copy()).to(ref.dtype).reshape(ref.shape)
    model.load_state_dict(new_state)
    return model
