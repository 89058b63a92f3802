"""Generator (embedder + output layer), semantic decoder, patch discriminators and checkpoints."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    base_width: int = 64
    n_downsamples: int = 2
    n_resblocks: int = 6
    out_channels: int = 3

    def __post_init__(self):
        if self.n_resblocks < 1:
            raise ValueError("n_resblocks must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.n_downsamples < 0:
            raise ValueError("n_downsamples must be >= 0")

    @property
    def stride(self) -> int:
        return 2 ** self.n_downsamples


class ResBlock(nn.Module):
    def __init__(self, chan: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(chan, chan, 3, bias=False),
            nn.BatchNorm2d(chan),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(chan, chan, 3, bias=False),
            nn.BatchNorm2d(chan),
        )

    def forward(self, x):
        return x + self.net(x)


class Generator(nn.Module):
    """ResNet encoder/decoder. ``embedder`` is everything but the final output layer,
    so ``output_layer(embedder(x))`` is the generator output."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, w, 7, bias=False),
                  nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
        c = w
        for _ in range(spec.n_downsamples):
            layers += [nn.Conv2d(c, c * 2, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(c * 2), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResBlock(c) for _ in range(spec.n_resblocks)]
        for _ in range(spec.n_downsamples):
            layers += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1, bias=False),
                       nn.BatchNorm2d(c // 2), nn.ReLU(inplace=True)]
            c //= 2
        self.embedder = nn.Sequential(*layers)
        self.output_layer = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, spec.out_channels, 7), nn.Tanh())
        self.embed_channels = c

    def _check(self, x):
        h, w = x.shape[-2:]
        s = self.spec.stride
        if h % s or w % s:
            raise ValueError(f"input {h}x{w} is not divisible by {s}")
        if x.shape[-3] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[-3]}")

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.embedder(x)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        emb = self.embed(x)
        return emb, self.output_layer(emb)


class SemanticDecoder(nn.Module):
    def __init__(self, in_channels: int = 64, widths: Tuple[int, ...] = (64, 32, 16)):
        super().__init__()
        layers, c = [], in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.LeakyReLU(0.2, inplace=True)]
            c = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c, 1, 1)
        self.in_channels = in_channels

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} embedding channels, got {emb.shape[-3]}")
        return self.head(self.body(emb))[:, 0]

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        """Per-pixel foreground probability, shape ``(N, H, W)``."""
        return torch.sigmoid(self.logits(emb))


class PatchDiscriminator(nn.Module):
    """70x70 Markovian discriminator returning one raw score per patch."""

    def __init__(self, in_channels: int = 3, width: int = 64):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        c = width
        for mult, stride in ((2, 2), (4, 2), (8, 1)):
            layers += [nn.Conv2d(c, width * mult, 4, stride=stride, padding=1, bias=False),
                       nn.BatchNorm2d(width * mult), nn.LeakyReLU(0.2, inplace=True)]
            c = width * mult
        layers += [nn.Conv2d(c, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def patch_map_size(n: int) -> int:
    for k, s, p in ((4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1)):
        n = (n + 2 * p - k) // s + 1
    return n


class NetworkBundle(nn.Module):
    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        self.generator = Generator(spec)
        self.semantic = SemanticDecoder(self.generator.embed_channels)
        self.disc = PatchDiscriminator(spec.out_channels)
        self.disc_t = PatchDiscriminator(spec.out_channels)

    def generator_parameters(self):
        return list(self.generator.parameters()) + list(self.semantic.parameters())

    def discriminator_parameters(self):
        return list(self.disc.parameters()) + list(self.disc_t.parameters())


# --------------------------------------------------------------------------- forwards

def build_generator(spec: GeneratorSpec = GeneratorSpec()) -> Generator:
    return Generator(spec)


def generator_forward(generator: Generator, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(embedding, PL-highlighted image) from one forward pass."""
    return generator(image)


def semantic_forward(decoder: SemanticDecoder, embedding: torch.Tensor) -> torch.Tensor:
    return decoder(embedding)


def discriminator_forward(disc: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    return disc(image)


@torch.no_grad()
def predict(generator: Generator, decoder: SemanticDecoder, image: torch.Tensor) -> torch.Tensor:
    """Probability map using only the embedder and the semantic decoder (inference mode)."""
    was = generator.training, decoder.training
    generator.eval()
    decoder.eval()
    try:
        return decoder(generator.embed(image))
    finally:
        generator.train(was[0])
        decoder.train(was[1])


def binarize(probs, tau: float = 0.5):
    if not 0 < tau < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    return (probs >= tau).astype(np.uint8) if isinstance(probs, np.ndarray) else (probs >= tau).to(torch.uint8)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def init_weights(module: nn.Module, seed: int = 0, scheme: str = "normal", gain: float = 0.02) -> nn.Module:
    """Conv weights ~ N(0, gain^2) (or Xavier-normal with ``gain``), norm scales ~ N(1, gain^2), biases 0."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                if scheme == "normal":
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * gain)
                elif scheme == "xavier":
                    fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(m.weight)
                    std = gain * (2.0 / (fan_in + fan_out)) ** 0.5
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                else:
                    raise ValueError(f"unknown init scheme {scheme!r}")
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * gain)
                m.bias.zero_()
    return module


def build_bundle(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0, scheme: str = "normal") -> NetworkBundle:
    torch.manual_seed(seed)
    return init_weights(NetworkBundle(spec), seed, scheme)


# --------------------------------------------------------------------------- checkpoints

def _flatten_optimizer(name: str, opt: torch.optim.Optimizer, arrays: Dict[str, np.ndarray]) -> dict:
    sd = opt.state_dict()
    scalars = {}
    for pid, state in sd["state"].items():
        for key, val in state.items():
            if torch.is_tensor(val):
                arrays[f"{name}/{pid}/{key}"] = val.detach().cpu().numpy()
            else:
                scalars[f"{pid}/{key}"] = val
    return {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(name: str, opt: torch.optim.Optimizer, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    state: Dict[int, dict] = {}
    prefix = f"{name}/"
    for key, arr in arrays.items():
        if key.startswith(prefix):
            pid, field_ = key[len(prefix):].split("/", 1)
            t = torch.from_numpy(arr.copy())
            if field_ == "step":
                t = t.reshape(())
            state.setdefault(int(pid), {})[field_] = t
    for key, val in meta.get("scalars", {}).items():
        pid, field_ = key.split("/", 1)
        state.setdefault(int(pid), {})[field_] = val
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | os.PathLike, bundle: NetworkBundle, meta: dict,
                    optimizers: Dict[str, torch.optim.Optimizer] | None = None) -> None:
    """Write a zip archive: ``meta.json``, ``index.json`` and one raw little-endian
    float32 blob per named array under ``arrays/``. Written atomically."""
    arrays: Dict[str, np.ndarray] = {f"model/{k}": v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}
    opt_meta = {name: _flatten_optimizer(f"optim/{name}", opt, arrays) for name, opt in (optimizers or {}).items()}
    index = {}
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
            for i, (name, arr) in enumerate(arrays.items()):
                index[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "file": f"arrays/{i:05d}.bin"}
                zf.writestr(index[name]["file"], np.ascontiguousarray(arr, dtype="<f4").tobytes())
            full_meta = dict(meta, spec=asdict(bundle.spec), optimizers=opt_meta)
            zf.writestr("meta.json", json.dumps(full_meta, indent=2, sort_keys=True))
            zf.writestr("index.json", json.dumps(index, indent=2))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_checkpoint(path: str | os.PathLike) -> Tuple[dict, Dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        index = json.loads(zf.read("index.json"))
        arrays = {}
        for name, info in index.items():
            arr = np.frombuffer(zf.read(info["file"]), dtype="<f4").reshape(info["shape"])
            arrays[name] = arr.astype(info["dtype"]) if info["dtype"] != "float32" else arr.copy()
    return meta, arrays


class CheckpointMismatch(ValueError):
    pass


def load_checkpoint(path: str | os.PathLike, bundle: NetworkBundle | None = None,
                    optimizers: Dict[str, torch.optim.Optimizer] | None = None) -> Tuple[NetworkBundle, dict]:
    meta, arrays = read_checkpoint(path)
    spec = GeneratorSpec(**meta["spec"])
    if bundle is None:
        bundle = NetworkBundle(spec)
    expected = bundle.state_dict()
    diffs = []
    for k, v in expected.items():
        got = arrays.get(f"model/{k}")
        if got is None:
            diffs.append(f"{k}: missing")
        elif tuple(got.shape) != tuple(v.shape):
            diffs.append(f"{k}: checkpoint {tuple(got.shape)} vs model {tuple(v.shape)}")
    if diffs:
        raise CheckpointMismatch("checkpoint does not match model:\n  " + "\n  ".join(diffs[:20]))
    bundle.load_state_dict({k: torch.from_numpy(arrays[f"model/{k}"]).to(v.dtype) for k, v in expected.items()})
    for name, opt in (optimizers or {}).items():
        _restore_optimizer(f"optim/{name}", opt, meta["optimizers"][name], arrays)
    return bundle, meta
