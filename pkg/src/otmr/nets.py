"""Networks: unrolled reconstruction, deformation generator, synthesis map and
spectrally normalized critics, plus the parameter bundle and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.grad import conv2d_input

from .errors import FormatError, NumericError, ValidationError
from .kspace import data_consistency, magnitude
from .warp import warp_image

BUNDLES = ("theta", "s", "m", "gamma", "omega")
CHECKPOINT_FORMAT = "otmr-checkpoint-1"


@dataclass
class NetSpec:
    """Architecture sizes shared by all encoder-decoders and critics."""

    depth: int = 4
    base_channels: int = 8
    cascades: int = 4
    critic_channels: int = 8
    activation: str = "relu"
    instance_norm: bool = True
    power_iterations: int = 1
    field_stride: int = 1
    synthesis: str = "unet"

    def validate(self, image_size=None):
        if self.depth < 2:
            raise ValidationError("encoder-decoders need at least 2 down/up-sampling stages")
        if self.base_channels < 1 or self.critic_channels < 1:
            raise ValidationError("channel counts must be positive")
        if self.cascades < 1:
            raise ValidationError("at least one reconstruction cascade is required")
        if self.activation not in ("relu",):
            raise ValidationError(f"unsupported activation {self.activation!r}")
        if self.power_iterations < 1:
            raise ValidationError("spectral normalization needs >= 1 power iteration per forward")
        if self.synthesis not in ("unet", "pointwise"):
            raise ValidationError(f"synthesis must be 'unet' or 'pointwise', got {self.synthesis!r}")
        if self.field_stride < 1:
            raise ValidationError("field_stride must be >= 1")
        if image_size is not None:
            cells = image_size / 2**self.depth
            if cells != int(cells) or cells < 2:
                raise ValidationError(f"image size {image_size} is not divisible down to >= 2 pixels at depth {self.depth}")
            if image_size % self.field_stride:
                raise ValidationError(f"image size {image_size} is not a multiple of field_stride {self.field_stride}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown net spec keys: {sorted(unknown)}")
        return cls(**d)


# --- encoder-decoder --------------------------------------------------------


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, norm=True):
        layers = [nn.Conv2d(cin, cout, 3, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout))
        layers += [nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout))
        layers.append(nn.ReLU())
        super().__init__(*layers)


class UNet(nn.Module):
    """Encoder-decoder with ``depth`` down- and up-sampling stages and skips."""

    def __init__(self, cin, cout, base=8, depth=4, norm=True, zero_out=False):
        super().__init__()
        chans = [base * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        prev = cin
        for c in chans[:-1]:
            self.down.append(ConvBlock(prev, c, norm))
            prev = c
        self.bottom = ConvBlock(chans[-2], chans[-1], norm)
        self.upconv = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(depth)):
            self.upconv.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.up.append(ConvBlock(2 * chans[i], chans[i], norm))
        self.out = nn.Conv2d(base, cout, 1)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.bottom(x)
        for upconv, block in zip(self.upconv, self.up):
            x = block(torch.cat([upconv(x), skips.pop()], dim=1))
        return self.out(x)


def unet_param_count(cin, cout, base, depth):
    """Closed-form parameter count of :class:`UNet` (convolutions with bias)."""

    def conv(a, b, k):
        return k * k * a * b + b

    chans = [base * 2**i for i in range(depth + 1)]
    total, prev = 0, cin
    for c in chans[:-1]:
        total += conv(prev, c, 3) + conv(c, c, 3)
        prev = c
    total += conv(chans[-2], chans[-1], 3) + conv(chans[-1], chans[-1], 3)
    for i in range(depth):
        total += conv(chans[i + 1], chans[i], 2)
        total += conv(2 * chans[i], chans[i], 3) + conv(chans[i], chans[i], 3)
    return total + conv(base, cout, 1)


# --- reconstruction, alignment, synthesis -----------------------------------


class ReconstructionNet(nn.Module):
    """Unrolled cascades of residual refinement followed by data consistency.

    Each refiner sees the current estimate and a guide image (the synthesized
    target-modality image, or zeros when no guide is given).
    """

    def __init__(self, spec):
        super().__init__()
        self.refiners = nn.ModuleList(
            UNet(4, 2, spec.base_channels, spec.depth, spec.instance_norm, zero_out=True) for _ in range(spec.cascades)
        )

    def forward(self, x_under, measured_kspace, mask, guide=None):
        if guide is None:
            guide = torch.zeros_like(x_under)
        x = x_under
        for i, refiner in enumerate(self.refiners):
            x = x + refiner(torch.cat([x, guide], dim=1))
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after reconstruction cascade {i}", {"block": i})
            x = data_consistency(x, measured_kspace, mask)
        return x


class AlignmentNet(nn.Module):
    """Deformation generator plus bilinear resampler.

    Consumes the auxiliary image and the magnitude of the current target
    estimate; returns ``(field, aligned)``. With ``field_stride > 1`` the raw
    output is averaged over stride-sized cells and bilinearly upsampled, so the
    field lives on a coarse control grid. This keeps the displacement
    identifiable in flat regions where the images carry no alignment signal.
    """

    def __init__(self, spec):
        super().__init__()
        self.generator = UNet(2, 2, spec.base_channels, spec.depth, spec.instance_norm, zero_out=True)
        self.field_stride = spec.field_stride

    def forward(self, x_t1, x_t2r):
        if x_t1.shape[-2:] != x_t2r.shape[-2:] or x_t1.shape[0] != x_t2r.shape[0]:
            raise ValidationError(f"shape mismatch: {tuple(x_t1.shape)} vs {tuple(x_t2r.shape)}")
        target = magnitude(x_t2r) if x_t2r.shape[1] == 2 else x_t2r
        field = self.generator(torch.cat([x_t1, target], dim=1))
        k = self.field_stride
        if k > 1:
            field = F.interpolate(F.avg_pool2d(field, k), size=field.shape[-2:], mode="bilinear", align_corners=False)
        return field, warp_image(x_t1, field)


class SynthesisNet(nn.Module):
    """Maps a (aligned) one-channel auxiliary image to a two-channel target image.

    ``synthesis="pointwise"`` swaps the encoder-decoder for a per-pixel MLP
    (1x1 convolutions). A network with spatial support can learn to translate
    its output, which lets it absorb a global shift produced by the alignment
    generator; the per-pixel variant cannot, so any spatial correction has to
    come from the deformation field.
    """

    def __init__(self, spec):
        super().__init__()
        if spec.synthesis == "pointwise":
            hidden = 2 * spec.base_channels
            self.net = nn.Sequential(
                nn.Conv2d(1, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, 2, 1)
            )
        else:
            self.net = UNet(1, 2, spec.base_channels, spec.depth, spec.instance_norm)

    def forward(self, x_t1a):
        if not torch.isfinite(x_t1a).all():
            raise NumericError("non-finite input to the synthesis network")
        out = self.net(x_t1a)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite synthesis output")
        return out


# --- spectral normalization -------------------------------------------------


def _unit(v, eps=1e-12):
    return v / (v.norm() + eps)


def spectral_norm_matrix(weight, n_iter=50, seed=0):
    """Top singular value of a matrix by power iteration (reference helper)."""
    g = torch.Generator().manual_seed(seed)
    v = _unit(torch.randn(weight.shape[1], generator=g, dtype=weight.dtype))
    for _ in range(n_iter):
        u = _unit(weight @ v)
        v = _unit(weight.t() @ u)
    return float(torch.dot(u, weight @ v))


class SpectralLinear(nn.Module):
    """Linear layer whose weight is divided by its estimated top singular value."""

    def __init__(self, fin, fout, n_iter=1, seed=0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(fout, fin))
        self.bias = nn.Parameter(torch.zeros(fout))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)
        self.n_iter = n_iter
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("u", _unit(torch.randn(fout, generator=g)))
        self.register_buffer("v", _unit(torch.randn(fin, generator=g)))
        with torch.no_grad():
            self._power(30)

    def _power(self, steps):
        w = self.weight.detach()
        u, v = self.u.to(w.dtype), self.v.to(w.dtype)
        for _ in range(steps):
            v = _unit(w.t() @ u)
            u = _unit(w @ v)
        self.u, self.v = u, v

    def sigma(self):
        return torch.dot(self.u.to(self.weight.dtype), self.weight @ self.v.to(self.weight.dtype))

    def normalized_weight(self):
        if self.training:
            with torch.no_grad():
                self._power(self.n_iter)
        return self.weight / self.sigma()

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SpectralConv2d(nn.Module):
    """Convolution normalized by the operator norm of the convolution itself.

    The persistent right singular vector lives in input space, so it is
    (re)initialized whenever the input spatial size changes.
    """

    def __init__(self, cin, cout, k=3, stride=1, padding=1, n_iter=1, seed=0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)
        self.stride, self.padding, self.n_iter, self.seed = stride, padding, n_iter, seed
        self.register_buffer("v", torch.empty(0))

    def _op(self, x, w):
        return F.conv2d(x, w, stride=self.stride, padding=self.padding)

    def _power(self, steps):
        w = self.weight.detach()
        v = self.v.to(w.dtype)
        for _ in range(steps):
            u = _unit(self._op(v, w))
            v = _unit(conv2d_input(v.shape, w, u, stride=self.stride, padding=self.padding))
        self.v = v

    def _ensure(self, shape):
        want = (1, self.weight.shape[1], *shape)
        if tuple(self.v.shape) != want:
            g = torch.Generator().manual_seed(self.seed)
            self.v = _unit(torch.randn(want, generator=g, dtype=self.weight.dtype))
            with torch.no_grad():
                self._power(max(self.n_iter, 30))
        elif self.training:
            with torch.no_grad():
                self._power(self.n_iter)

    def sigma(self):
        v = self.v.to(self.weight.dtype)
        with torch.no_grad():
            u = _unit(self._op(v, self.weight))
        return (u * self._op(v, self.weight)).sum()

    def forward(self, x):
        self._ensure(x.shape[-2:])
        return F.conv2d(x, self.weight / self.sigma(), self.bias, stride=self.stride, padding=self.padding)


class Critic(nn.Module):
    """Kantorovich potential: two strided spectral convs, mean pool, spectral linear.

    Every layer has operator norm <= 1 (up to power-iteration error) and
    LeakyReLU and mean pooling are 1-Lipschitz, so the potential is
    1-Lipschitz in L2 and therefore in L1.
    """

    def __init__(self, spec, seed=0):
        super().__init__()
        c = spec.critic_channels
        n = spec.power_iterations
        self.conv1 = SpectralConv2d(2, c, 3, stride=2, padding=1, n_iter=n, seed=seed + 1)
        self.conv2 = SpectralConv2d(c, 2 * c, 3, stride=2, padding=1, n_iter=n, seed=seed + 2)
        self.head = SpectralLinear(2 * c, 1, n_iter=n, seed=seed + 3)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        # mean pooling over n positions has L2 gain 1/sqrt(n)
        h = h.flatten(2).mean(-1)
        return self.head(h)[:, 0]


def critic_value(critic, img):
    return critic(img)


# --- parameter bundle -------------------------------------------------------


@dataclass
class ModelState:
    spec: NetSpec
    seed: int
    theta: ReconstructionNet
    s: AlignmentNet
    m: SynthesisNet
    gamma: Critic
    omega: Critic
    step: int = 0

    def bundle(self, name):
        if name not in BUNDLES:
            raise KeyError(name)
        return getattr(self, name)

    def bundles(self):
        return {name: self.bundle(name) for name in BUNDLES}

    def param_count(self):
        return {name: sum(p.numel() for p in mod.parameters()) for name, mod in self.bundles().items()}

    def param_hash(self, name):
        h = hashlib.sha256()
        for key, p in self.bundle(name).named_parameters():
            h.update(key.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def to(self, dtype):
        for mod in self.bundles().values():
            mod.to(dtype)
        return self

    def train(self, flag=True):
        for mod in self.bundles().values():
            mod.train(flag)
        return self

    def eval(self):
        return self.train(False)


def init_state(spec, seed=0):
    """Deterministically build every network from ``seed``.

    Refinement and deformation output layers start at zero, so cascades are
    no-op perturbations and the initial field is the identity.
    """
    if not isinstance(spec, NetSpec):
        raise ValidationError("init_state expects a NetSpec")
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        theta = ReconstructionNet(spec)
        s = AlignmentNet(spec)
        m = SynthesisNet(spec)
        gamma = Critic(spec, seed=1000 * seed + 10)
        omega = Critic(spec, seed=1000 * seed + 20)
    return ModelState(spec, int(seed), theta, s, m, gamma, omega)


# --- checkpoints ------------------------------------------------------------


def _module_arrays(state):
    out = {}
    for name, mod in state.bundles().items():
        for key, t in mod.state_dict().items():
            out[f"{name}/{key}"] = t.detach().cpu().numpy()
    return out


def checkpoint_bytes(state, optimizers=None, extra=None):
    """Serialize to an ``.npz`` archive of named tensors plus a JSON metadata blob.

    Keys are ``<bundle>/<tensor-name>`` for parameters and buffers and
    ``optim/<bundle>/<index>/<field>`` for Adam moments.
    """
    arrays = _module_arrays(state)
    optim_meta = {}
    for name, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        optim_meta[name] = {"param_groups": sd["param_groups"]}
        for idx, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"optim/{name}/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(state.spec),
        "seed": state.seed,
        "step": state.step,
        "optim": optim_meta,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(path, state, optimizers=None, extra=None):
    from .imageio import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(state, optimizers, extra))


def read_checkpoint(path):
    """Return ``(meta, arrays)`` without building networks."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise FormatError(f"{path}: checkpoint lacks metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    return meta, arrays


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild a :class:`ModelState`; returns ``(state, meta, optimizer_arrays)``."""
    meta, arrays = read_checkpoint(path)
    spec = NetSpec.from_dict(meta["spec"])
    state = init_state(spec, meta["seed"]).to(dtype)
    state.step = int(meta["step"])
    for name, mod in state.bundles().items():
        params = dict(mod.named_parameters())
        buffers = dict(mod.named_buffers())
        for key in list(params) + list(buffers):
            akey = f"{name}/{key}"
            if akey not in arrays:
                raise FormatError(f"checkpoint is missing tensor {akey}")
            t = torch.from_numpy(arrays[akey].copy())
            if key in params:
                if params[key].shape != t.shape:
                    raise FormatError(f"{akey}: shape {tuple(t.shape)} != {tuple(params[key].shape)}")
                with torch.no_grad():
                    params[key].copy_(t)
            else:
                owner, _, attr = key.rpartition(".")
                sub = mod.get_submodule(owner) if owner else mod
                sub._buffers[attr] = t
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    return state, meta, optim


def restore_optimizer(opt, name, meta, optim_arrays):
    """Load Adam moments saved by :func:`checkpoint_bytes` into ``opt``."""
    if name not in meta.get("optim", {}):
        return opt
    sd = opt.state_dict()
    state = {}
    for key, arr in optim_arrays.items():
        bname, idx, field_ = key.split("/")
        if bname != name:
            continue
        state.setdefault(int(idx), {})[field_] = torch.from_numpy(arr.copy())
    sd["state"] = state
    sd["param_groups"] = [
        {**g, "params": cur["params"]} for g, cur in zip(meta["optim"][name]["param_groups"], sd["param_groups"])
    ]
    opt.load_state_dict(sd)
    return opt
