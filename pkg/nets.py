"""
Model contract: feature extractor G, projection head H with learnable prototypes P,
one-vs-all head F_OVA, weak/strong augmentation views, mixup and checkpoints.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class ForwardOutput:
    """Everything one forward pass produces"""
    features: torch.Tensor
    z: torch.Tensor
    ova_logits: torch.Tensor
    ova_probs: torch.Tensor
    proto_logits: torch.Tensor

    def __getitem__(self, index) -> "ForwardOutput":
        return ForwardOutput(
            features=self.features[index],
            z=self.z[index],
            ova_logits=self.ova_logits[index],
            ova_probs=self.ova_probs[index],
            proto_logits=self.proto_logits[index],
        )

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def ova_pos(self) -> torch.Tensor:
        """p^c(z=1|x), shape (B, C)"""
        return self.ova_probs[..., 1]

    @property
    def ova_neg(self) -> torch.Tensor:
        """p^c(z=0|x), shape (B, C)"""
        return self.ova_probs[..., 0]


class MLPBackbone(nn.Module):
    """Two hidden layers for vector data"""

    def __init__(self, in_dim: int, hidden_dim: int):
        super().__init__()
        self.out_dim = hidden_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.flatten(1))


class ConvBackbone(nn.Module):
    """Three conv blocks for tiny images (N, C, H, W)"""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        blocks = []
        channels = in_channels
        for out in (width, width * 2, width * 4):
            blocks += [
                nn.Conv2d(channels, out, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            channels = out
        self.net = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.out_dim = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ProjectionHead(nn.Module):
    """feature -> unit-norm embedding z; one hidden layer"""

    def __init__(self, in_dim: int, hidden_dim: int, proj_dim: int):
        super().__init__()
        self.out_dim = proj_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, proj_dim),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(h), dim=1)


class ModelBundle(nn.Module):
    """Shared extractor G, projection head H, OVA head F_OVA and prototype matrix P"""

    def __init__(self, backbone: nn.Module, num_classes: int, proj_dim: int = 128, hidden_dim: int = 256,
                 tau: float = 0.1, input_shape: Sequence[int] = ()):
        super().__init__()
        self.num_classes = num_classes
        self.tau = tau
        self.input_shape = tuple(input_shape)
        self.G = backbone
        self.H = ProjectionHead(backbone.out_dim, hidden_dim, proj_dim)
        self.F_ova = nn.Linear(backbone.out_dim, num_classes)
        self.prototypes = nn.Parameter(F.normalize(torch.randn(num_classes, proj_dim), dim=1))
        self.register_buffer("prototypes_ready", torch.tensor(False))

    @property
    def proj_dim(self) -> int:
        return self.H.out_dim

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if self.prototypes.shape[1] != self.H.out_dim:
            raise ConfigurationError(
                f"Prototype dim {self.prototypes.shape[1]} does not match projection dim {self.H.out_dim}"
            )
        h = self.G(x)
        z = self.H(h)
        logits = self.F_ova(h)
        # sigmoid pair (p(z=0), p(z=1)) sums to one analytically
        ova_probs = torch.stack((torch.sigmoid(-logits), torch.sigmoid(logits)), dim=-1)
        proto_logits = z @ self.prototypes.t() / self.tau
        return ForwardOutput(features=h, z=z, ova_logits=logits, ova_probs=ova_probs, proto_logits=proto_logits)

    @torch.no_grad()
    def renormalize_prototypes(self):
        self.prototypes.copy_(F.normalize(self.prototypes, dim=1))

    @torch.no_grad()
    def set_prototypes(self, prototypes: torch.Tensor):
        self.prototypes.copy_(F.normalize(prototypes.to(self.prototypes), dim=1))
        self.prototypes_ready.fill_(True)

    @property
    def has_prototypes(self) -> bool:
        return bool(self.prototypes_ready.item())


def build_model(input_shape: Sequence[int], num_classes: int, proj_dim: int = 128, hidden_dim: int = 256,
                tau: float = 0.1, seed: Optional[int] = None) -> ModelBundle:
    """Pick the MLP backbone for vectors and the conv backbone for (C, H, W) images"""
    if seed is not None:
        torch.manual_seed(seed)
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) == 3:
        backbone = ConvBackbone(input_shape[0])
    elif len(input_shape) <= 1:
        backbone = MLPBackbone(input_shape[0] if input_shape else 1, hidden_dim)
    else:
        backbone = MLPBackbone(int(np.prod(input_shape)), hidden_dim)
    return ModelBundle(backbone, num_classes, proj_dim=proj_dim, hidden_dim=hidden_dim, tau=tau,
                       input_shape=input_shape)


def forward(bundle: ModelBundle, batch: torch.Tensor) -> ForwardOutput:
    if batch.shape[0] == 0:
        raise ConfigurationError("forward needs a nonempty batch")
    return bundle(batch)


# ============================================================================
# AUGMENTATION
# ============================================================================

@dataclass(frozen=True)
class AugmentationPolicy:
    """
    Weak and strong perturbations.

    Vector data: weak adds Gaussian noise of std weak_sigma * scale; strong adds
    std strong_sigma * scale and zeroes a strong_dropout fraction of coordinates.
    Image data: weak is pad-crop + horizontal flip; strong adds brightness/contrast
    jitter and random erasing on top.
    """
    kind: str = "vector"
    weak_sigma: float = 0.05
    strong_sigma: float = 0.15
    strong_dropout: float = 0.2
    scale: float = 1.0
    pad: int = 4
    flip: bool = True
    jitter: float = 0.4
    erase_prob: float = 0.5
    erase_frac: float = 0.25

    @classmethod
    def zero(cls, kind: str = "vector") -> "AugmentationPolicy":
        return cls(kind=kind, weak_sigma=0.0, strong_sigma=0.0, strong_dropout=0.0, pad=0, flip=False,
                   jitter=0.0, erase_prob=0.0)

    @classmethod
    def for_features(cls, features: np.ndarray) -> "AugmentationPolicy":
        """Default policy sized to a dataset (feature std sets the vector noise scale)"""
        kind = "image" if features.ndim == 4 else "vector"
        return cls(kind=kind, scale=float(np.std(features)) or 1.0)


def _vector_views(policy: AugmentationPolicy, x: torch.Tensor, gen: torch.Generator):
    noise_w = torch.randn(x.shape, generator=gen, dtype=x.dtype, device="cpu").to(x.device)
    noise_s = torch.randn(x.shape, generator=gen, dtype=x.dtype, device="cpu").to(x.device)
    keep = (torch.rand(x.shape, generator=gen, device="cpu") >= policy.strong_dropout).to(x.device)
    weak = x + policy.weak_sigma * policy.scale * noise_w
    strong = (x + policy.strong_sigma * policy.scale * noise_s) * keep.to(x.dtype)
    return weak, strong


def _weak_image(policy: AugmentationPolicy, x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    out = x
    if policy.pad > 0:
        padded = F.pad(x, (policy.pad,) * 4)
        offsets = torch.randint(0, 2 * policy.pad + 1, (n, 2), generator=gen)
        out = torch.stack([
            padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets.tolist())
        ])
    if policy.flip:
        flips = (torch.rand(n, generator=gen) < 0.5).to(x.device)
        out = torch.where(flips.view(n, 1, 1, 1), out.flip(-1), out)
    return out


def _strong_image(policy: AugmentationPolicy, weak: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = weak.shape
    out = weak
    if policy.jitter > 0:
        brightness = 1 + (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * policy.jitter
        contrast = 1 + (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * policy.jitter
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        out = (out - mean) * contrast.to(out) + mean * brightness.to(out)
    if policy.erase_prob > 0:
        eh, ew = max(1, int(h * policy.erase_frac)), max(1, int(w * policy.erase_frac))
        erase = (torch.rand(n, generator=gen) < policy.erase_prob).tolist()
        corners = torch.stack((torch.randint(0, h - eh + 1, (n,), generator=gen),
                               torch.randint(0, w - ew + 1, (n,), generator=gen)), dim=1).tolist()
        out = out.clone()
        for i, (do_erase, (y0, x0)) in enumerate(zip(erase, corners)):
            if do_erase:
                out[i, :, y0:y0 + eh, x0:x0 + ew] = 0
    return out


def make_views(policy: AugmentationPolicy, batch: torch.Tensor, seed: Optional[int] = None,
               generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return (weak, strong) views in the same sample order; deterministic given seed or generator state"""
    gen = generator if generator is not None else torch.Generator().manual_seed(0 if seed is None else seed)
    if policy.kind == "image":
        weak = _weak_image(policy, batch, gen)
        return weak, _strong_image(policy, weak, gen)
    return _vector_views(policy, batch, gen)


# ============================================================================
# MIXUP
# ============================================================================

@dataclass
class MixupDraw:
    """x_mix = lam * x + (1 - lam) * x[pair_index]"""
    mixed: torch.Tensor
    lam: float
    pair_index: torch.Tensor

    def partner(self, values: torch.Tensor) -> torch.Tensor:
        return values[self.pair_index]


def mixup_batch(x: torch.Tensor, alpha: float, seed: Optional[int] = None,
                rng: Optional[np.random.Generator] = None) -> MixupDraw:
    """
    Mix a batch with a random permutation of itself, lam ~ Beta(alpha, alpha).

    Batches smaller than 2 come back unmixed with the identity pairing and lam = 1.
    """
    if alpha <= 0:
        raise ConfigurationError(f"mixup alpha must be positive, got {alpha}")
    n = x.shape[0]
    if n < 2:
        return MixupDraw(mixed=x, lam=1.0, pair_index=torch.arange(n, device=x.device))
    rng = rng if rng is not None else np.random.default_rng(seed)
    lam = float(rng.beta(alpha, alpha))
    index = torch.as_tensor(rng.permutation(n), device=x.device)
    return MixupDraw(mixed=lam * x + (1 - lam) * x[index], lam=lam, pair_index=index)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(path: Union[str, Path], model: ModelBundle, epoch: int, hyper: Dict[str, Any],
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    scheduler: Optional[Any] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write weights, prototypes, hyper-parameter echo and epoch counter in one file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "model": model.state_dict(),
        "model_meta": {
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "proj_dim": model.proj_dim,
            "hidden_dim": model.H.net[0].out_features,
            "tau": model.tau,
        },
        "hyper": hyper,
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "extra": extra or {},
    }
    torch.save(state, path)
    return path


def load_checkpoint(path: Union[str, Path], model: Optional[ModelBundle] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    scheduler: Optional[Any] = None, map_location: str = "cpu") -> Tuple[ModelBundle, Dict[str, Any]]:
    """
    Restore a checkpoint; builds the model from its stored shape when none is given.

    Raises:
        ConfigurationError: missing checkpoint file
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Checkpoint not found: {path}")
    state = torch.load(path, map_location=map_location, weights_only=False)
    if model is None:
        meta = state["model_meta"]
        model = build_model(meta["input_shape"], meta["num_classes"], proj_dim=meta["proj_dim"],
                            hidden_dim=meta["hidden_dim"], tau=meta["tau"])
    model.load_state_dict(state["model"])
    if optimizer is not None and state.get("optimizer") is not None:
        optimizer.load_state_dict(state["optimizer"])
    if scheduler is not None and state.get("scheduler") is not None:
        scheduler.load_state_dict(state["scheduler"])
    return model, state
