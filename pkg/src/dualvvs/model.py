"""Backbone ``f`` with named recordable layers, projection head ``g``, RP head ``h``."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BLOCK_LAYERS = tuple(f"layer{s}.{b}" for s in (1, 2, 3, 4) for b in (0, 1))
LAYER_REGISTRY = ("stem",) + BLOCK_LAYERS
CHECKPOINT_VERSION = 1
RP_CLASSES = 8


@dataclass
class BackboneConfig:
    architecture: str = "tiny_conv"
    feature_dim: int = 64
    input_size: int = 32
    # tiny_conv stage widths, last one equal to feature_dim; None derives them from feature_dim
    widths: Optional[list] = None

    def __post_init__(self):
        if self.architecture not in ("resnet18", "tiny_conv"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")
        if self.architecture == "resnet18" and self.feature_dim != 512:
            raise ValueError("resnet18 has feature_dim 512")
        if self.widths is not None:
            self.widths = [int(w) for w in self.widths]
            if len(self.widths) != 4 or self.widths[-1] != self.feature_dim:
                raise ValueError("tiny_conv needs 4 stage widths ending in feature_dim")

    @property
    def stage_widths(self) -> list:
        if self.widths is not None:
            return list(self.widths)
        n = self.feature_dim
        return [max(1, n // 8), max(1, n // 4), max(1, n // 2), n]


@dataclass
class HeadConfig:
    projection_dim: int = 128
    hidden_dim: int = 512
    rp_classes: int = RP_CLASSES

    def __post_init__(self):
        if self.rp_classes != RP_CLASSES:
            raise ValueError("the relative-position head always has 8 classes")
        if self.projection_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("head dimensions must be positive")


@dataclass
class ActivationMatrix:
    layer_name: str
    values: np.ndarray  # [n_stimuli, n_features]

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("activation values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite activations in {self.layer_name}")


def _conv_unit(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


class TinyConv(nn.Module):
    """Four stages of two conv-BN-ReLU units, named like ResNet-18 blocks.

    The stem has stride 2, so a 32x32 input reaches the stages at 16, 8, 4, 2.
    """

    def __init__(self, widths):
        super().__init__()
        self.stem = _conv_unit(3, widths[0], 2)
        cin = widths[0]
        for s, w in enumerate(widths, start=1):
            stride = 1 if s == 1 else 2
            setattr(self, f"layer{s}", nn.Sequential(_conv_unit(cin, w, stride), _conv_unit(w, w, 1)))
            cin = w
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = self.stem(x)
        for s in (1, 2, 3, 4):
            x = getattr(self, f"layer{s}")(x)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


def _resnet18():
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    # small-image stem: 3x3 conv, no max-pool
    net.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    return net


class MLP(nn.Module):
    def __init__(self, d_in, hidden, d_out):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class DualTaskModel(nn.Module):
    """``f`` (backbone), ``g`` (projection head) and ``h`` (RP classifier head)."""

    def __init__(self, backbone: BackboneConfig, heads: HeadConfig, seed: int = 0):
        super().__init__()
        self.backbone_config = backbone
        self.head_config = heads
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            if backbone.architecture == "resnet18":
                self.f = _resnet18()
            else:
                self.f = TinyConv(backbone.stage_widths)
            n = backbone.feature_dim
            self.g = MLP(n, heads.hidden_dim, heads.projection_dim)
            self.h = MLP(2 * n, heads.hidden_dim, heads.rp_classes)
        finally:
            torch.random.set_rng_state(gen_state)
        self.frozen = False

    # -- layer registry ---------------------------------------------------
    def layer_modules(self) -> dict:
        if self.backbone_config.architecture == "resnet18":
            mods = {"stem": self.f.relu}  # stem ReLU, only used once in torchvision ResNet
        else:
            mods = {"stem": self.f.stem}
        for name in BLOCK_LAYERS:
            stage, block = name.split(".")
            mods[name] = getattr(self.f, stage)[int(block)]
        return mods

    @property
    def layer_names(self) -> tuple:
        return LAYER_REGISTRY

    # -- forward pieces -----------------------------------------------------
    def _check_images(self, images: torch.Tensor):
        k = self.backbone_config.input_size
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [batch, 3, k, k] images, got {tuple(images.shape)}")
        if images.shape[2] != images.shape[3] or images.shape[2] not in (k, k // 2):
            raise ValueError(
                f"images must be {k}x{k} (or {k // 2}x{k // 2} quadrant blocks), "
                f"got {images.shape[2]}x{images.shape[3]}"
            )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return self.f(images)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.backbone_config.feature_dim:
            raise ValueError(f"expected [batch, {self.backbone_config.feature_dim}] features")
        return self.g(features)

    def rp_logits(self, feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
        if feat_a.shape != feat_b.shape:
            raise ValueError(f"feature batches differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
        if feat_a.ndim != 2 or feat_a.shape[1] != self.backbone_config.feature_dim:
            raise ValueError(f"expected [batch, {self.backbone_config.feature_dim}] features")
        return self.h(torch.cat([feat_a, feat_b], dim=1))

    def rp_log_probs(self, feat_a, feat_b):
        return F.log_softmax(self.rp_logits(feat_a, feat_b), dim=1)

    def classify_rp(self, feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
        """Softmax over the 8 directions for the ordered concatenation (a, b)."""
        return F.softmax(self.rp_logits(feat_a, feat_b), dim=1)

    def forward(self, images):
        return self.encode(images)

    # -- modes ----------------------------------------------------------------
    def freeze(self) -> "DualTaskModel":
        """Evaluation mode with gradients disabled (probe mode)."""
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def unfreeze(self) -> "DualTaskModel":
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    # -- activations ---------------------------------------------------------
    @torch.no_grad()
    def record_activations(self, images, layer_names: Iterable[str], batch_size: int = 64) -> dict:
        """Flattened (row-major) post-activation outputs of the named layers.

        Runs in evaluation mode; the previous mode is restored afterwards.
        """
        layer_names = list(layer_names)
        mods = self.layer_modules()
        unknown = [n for n in layer_names if n not in mods]
        if unknown:
            raise KeyError(f"unknown layer(s) {unknown}; valid names: {list(LAYER_REGISTRY)}")
        data = images.get if hasattr(images, "get") else (lambda idx: np.asarray(images[idx]))
        count = len(images)
        captured: dict = {}
        hooks = []
        for name in layer_names:
            def hook(_m, _i, out, name=name):
                captured[name] = out.detach().flatten(1)
            hooks.append(mods[name].register_forward_hook(hook))
        was_training = self.training
        self.eval()
        chunks = {n: [] for n in layer_names}
        dtype = next(self.parameters()).dtype
        try:
            for start in range(0, count, batch_size):
                x = torch.as_tensor(data(slice(start, min(count, start + batch_size))), dtype=dtype)
                self.encode(x)
                for n in layer_names:
                    chunks[n].append(captured[n].cpu().numpy())
        finally:
            for hk in hooks:
                hk.remove()
            self.train(was_training)
        return {n: ActivationMatrix(n, np.concatenate(chunks[n])) for n in layer_names}

    # -- bookkeeping ------------------------------------------------------------
    def part_parameter_counts(self) -> dict:
        return {part: sum(p.numel() for p in getattr(self, part).parameters()) for part in "fgh"}

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def expected_parameter_counts(backbone: BackboneConfig, heads: HeadConfig) -> dict:
    """Parameter counts derived from the configs alone (no module walking)."""
    n, hid = backbone.feature_dim, heads.hidden_dim
    g = n * hid + hid + hid * heads.projection_dim + heads.projection_dim
    h = 2 * n * hid + hid + hid * heads.rp_classes + heads.rp_classes
    if backbone.architecture == "tiny_conv":
        def unit(cin, cout):
            return 9 * cin * cout + 2 * cout
        w = backbone.stage_widths
        f = unit(3, w[0])
        cin = w[0]
        for width in w:
            f += unit(cin, width) + unit(width, width)
            cin = width
    else:
        def basic(cin, cout, down):
            c = 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout
            if down:
                c += cin * cout + 2 * cout
            return c
        f = 9 * 3 * 64 + 2 * 64
        cin = 64
        for s, width in enumerate((64, 128, 256, 512)):
            f += basic(cin, width, s > 0) + basic(width, width, False)
            cin = width
    return {"f": f, "g": g, "h": h}


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(model: DualTaskModel, path, epoch: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(model.backbone_config),
        "heads": asdict(model.head_config),
        "epoch": int(epoch),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, backbone: Optional[BackboneConfig] = None,
                    heads: Optional[HeadConfig] = None) -> tuple[DualTaskModel, dict]:
    """Load a checkpoint; if configs are given they must match the stored ones."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    stored_b = BackboneConfig(**payload["backbone"])
    stored_h = HeadConfig(**payload["heads"])
    if backbone is not None and asdict(backbone) != asdict(stored_b):
        raise ValueError(f"checkpoint backbone {asdict(stored_b)} does not match {asdict(backbone)}")
    if heads is not None and asdict(heads) != asdict(stored_h):
        raise ValueError(f"checkpoint heads {asdict(stored_h)} does not match {asdict(heads)}")
    model = DualTaskModel(stored_b, stored_h)
    model.load_state_dict(payload["state_dict"])
    meta = {k: payload[k] for k in ("epoch", "extra")}
    return model, meta


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
