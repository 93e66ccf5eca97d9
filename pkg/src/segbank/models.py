"""Student/teacher segmentation nets, contrastive heads and the EMA update.

The bundled tiny backbone reaches output stride 8 in four conv blocks and is
meant for desk-scale runs; larger backbones can be dropped in behind the same
forward contract (features at stride 8, logits at stride 8).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

OUTPUT_STRIDE = 8
ATTENTION_ROLES = ("projection", "prediction")


def _bn_forward(bn: nn.BatchNorm1d, x: torch.Tensor) -> torch.Tensor:
    # BatchNorm1d cannot compute batch statistics from a single row; fall
    # back to running statistics in that case instead of crashing.
    if bn.training and x.shape[0] == 1:
        bn.eval()
        try:
            return bn(x)
        finally:
            bn.train()
    return bn(x)


class ProjectionHead(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear, default width 256."""

    def __init__(self, in_dim: int, dim: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, dim)
        self.bn = nn.BatchNorm1d(dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return self.fc2(F.relu(_bn_forward(self.bn, self.fc1(x))))


class PredictionHead(ProjectionHead):
    """Same architecture as the projection head, applied after it."""

    def __init__(self, dim: int = 256):
        super().__init__(dim, dim)


class AttentionModuleSet(nn.Module):
    """2*C scoring perceptrons indexed by (class, role).

    Each maps a feature vector to a single relevance value in (0, 1):
    Linear -> BatchNorm -> LeakyReLU -> Linear(1) -> sigmoid.
    """

    def __init__(self, class_count: int, dim: int = 256):
        super().__init__()
        self.class_count = class_count
        self.fc1 = nn.ModuleDict()
        self.bn = nn.ModuleDict()
        self.fc2 = nn.ModuleDict()
        for role in ATTENTION_ROLES:
            for c in range(class_count):
                key = f"{role}_{c}"
                self.fc1[key] = nn.Linear(dim, dim)
                self.bn[key] = nn.BatchNorm1d(dim)
                self.fc2[key] = nn.Linear(dim, 1)

    def score(self, class_id: int, role: str, vectors: torch.Tensor) -> torch.Tensor:
        """Score a batch of vectors with the module of (class_id, role).

        Returns a 1-D tensor of values strictly inside (0, 1).
        """
        if role not in ATTENTION_ROLES:
            raise KeyError(f"unknown attention role {role!r}")
        if not 0 <= class_id < self.class_count:
            raise KeyError(f"class id {class_id} outside [0, {self.class_count})")
        key = f"{role}_{class_id}"
        h = F.leaky_relu(_bn_forward(self.bn[key], self.fc1[key](vectors)))
        return torch.sigmoid(self.fc2[key](h)).squeeze(-1)


class TinyBackbone(nn.Module):
    """Conv blocks with strides (2, 2, 2, 1): output stride 8.

    The last stage stacks dilated 3x3 convs (rates 1, 2, 4) so the stride-8
    features see large context relative to the input, cheap because it runs
    at 1/64 of the input resolution.
    """

    def __init__(self, width: int = 64):
        super().__init__()
        blocks = []
        in_ch = 3
        for s in (2, 2, 2):
            blocks += [nn.Conv2d(in_ch, width, 3, stride=s, padding=1),
                       nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
            in_ch = width
        for d in (1, 2, 4):
            blocks += [nn.Conv2d(width, width, 3, padding=d, dilation=d),
                       nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = width

    def forward(self, x):
        return self.blocks(x)


class SegModel(nn.Module):
    """Backbone + pixel classifier + contrastive heads + attention modules.

    One instance plays the student, a structurally identical copy plays the
    teacher; the teacher is advanced only by ema_update.
    """

    def __init__(self, class_count: int, width: int = 64, embed_dim: int = 256):
        super().__init__()
        self.class_count = class_count
        self.backbone = TinyBackbone(width)
        self.classifier = nn.Conv2d(self.backbone.out_dim, class_count, 1)
        self.projection = ProjectionHead(self.backbone.out_dim, embed_dim)
        self.prediction = PredictionHead(embed_dim)
        self.attention = AttentionModuleSet(class_count, embed_dim)

    def _check_dims(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected BxCxHxW RGB batch, got {tuple(x.shape)}")
        if x.shape[2] % OUTPUT_STRIDE or x.shape[3] % OUTPUT_STRIDE:
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be "
                             f"divisible by {OUTPUT_STRIDE}")

    def forward_features(self, x):
        """B x D' x H/8 x W/8 backbone features."""
        self._check_dims(x)
        return self.backbone(x)

    def forward_logits(self, x):
        return self.classifier(self.forward_features(x))

    def forward_segmentation(self, x):
        """Per-pixel class distributions, B x C x H/8 x W/8 (sums to 1)."""
        return torch.softmax(self.forward_logits(x), dim=1)


def ema_update(teacher: nn.Module, student: nn.Module, tau: float) -> None:
    """Teacher <- tau * teacher + (1 - tau) * student, elementwise.

    Covers every learnable parameter (backbone, classifier, heads, attention);
    batch-norm running statistics are copied from the student, since averaging
    them across momentum updates is not meaningful. The arithmetic is kept as
    a single out-of-place expression so results are reproducible bit for bit.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher/student parameter structure mismatch")
    with torch.no_grad():
        for name, p_t in t_params.items():
            p_s = s_params[name]
            if p_t.shape != p_s.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{tuple(p_t.shape)} vs {tuple(p_s.shape)}")
            p_t.copy_(p_t * tau + p_s * (1.0 - tau))
        for (name_t, b_t), (name_s, b_s) in zip(teacher.named_buffers(),
                                                student.named_buffers()):
            if name_t != name_s:
                raise ValueError("teacher/student buffer structure mismatch")
            b_t.copy_(b_s)


def make_teacher(student: nn.Module) -> nn.Module:
    """Deep-copy the student into a gradient-free teacher."""
    import copy
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher
