"""Per-frustum segmentation network, fusion heads and decoration.

The segmentation network follows the PointNet v1 instance-segmentation
layout: a shared per-point encoder, a max-pooled global feature concatenated
with the frustum's one-hot class vector, and a per-point decoder whose
penultimate activations are the per-point segmentation features.

Fusion variants turn those into per-point decoration channels:

* ``A``: a single mask channel (ground-truth ``seg_label`` or predicted). It is
  repeated across the semantic channels when points are decorated, so every
  variant writes rows of the same width.
* ``B``: an MLP over the point's own non-coordinate channels.
* ``C``: an MLP over the segmentation features.
* ``D``: an MLP over the concatenated outputs of the ``C`` and ``B`` branches.

Without a downstream detector, every variant is trained through an auxiliary
2-class head on its decoration, supervised with ``seg_label``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import DivergedLoss, MissingMask, ShapeMismatch
from .frustum import FrustumBatch, build_frustums, stack_batch
from .hidden import RecodedCloud
from .kitti_io import load_checkpoint, save_checkpoint

VARIANTS = ("A", "B", "C", "D")
MASK_SOURCES = ("pred", "gt")
SEMANTIC_DIM = 16


@dataclass(frozen=True)
class SeenConfig:
    d_in: int = 4
    n_cls: int = 3
    variant: str = "D"
    mask_source: str = "pred"
    enc: tuple[int, ...] = (64, 64)
    global_dim: int = 256
    dec: tuple[int, ...] = (128, 64)
    seg_mlp: tuple[int, ...] = (32, 16)
    point_mlp: tuple[int, ...] = (16, 16)
    fuse_mlp: tuple[int, ...] = (32, SEMANTIC_DIM)
    # Coordinates are multiplied by this before entering the network; a power of
    # two so it survives the f32 checkpoint exactly.
    coord_scale: float = 0.0625

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {self.mask_source!r}")
        if self.variant in ("B", "D") and self.d_in <= 3:
            raise ValueError(f"variant {self.variant} needs non-coordinate point channels")
        if self.variant != "A" and self.decoration_dim != SEMANTIC_DIM:
            raise ValueError(f"variant {self.variant} head must end in {SEMANTIC_DIM} channels")

    @property
    def seg_feat_dim(self) -> int:
        return self.dec[-1]

    @property
    def decoration_dim(self) -> int:
        return {"A": 1, "B": self.point_mlp[-1], "C": self.seg_mlp[-1], "D": self.fuse_mlp[-1]}[self.variant]


def _layer_shapes(cfg: SeenConfig) -> list[tuple[str, int, int]]:
    shapes = []
    width = cfg.d_in
    for i, w in enumerate(cfg.enc):
        shapes.append((f"seg.enc{i}", width, w))
        width = w
    local = width
    shapes.append(("seg.glob", local, cfg.global_dim))
    width = local + cfg.global_dim + cfg.n_cls
    for i, w in enumerate(cfg.dec):
        shapes.append((f"seg.dec{i}", width, w))
        width = w
    shapes.append(("seg.head", width, 2))

    def stack(prefix, width, widths):
        for i, w in enumerate(widths):
            shapes.append((f"{prefix}{i}", width, w))
            width = w
        return width

    if cfg.variant in ("C", "D"):
        seg_out = stack("fuse.seg.", cfg.seg_feat_dim, cfg.seg_mlp)
    if cfg.variant in ("B", "D"):
        point_out = stack("fuse.point.", cfg.d_in - 3, cfg.point_mlp)
    if cfg.variant == "D":
        stack("fuse.out.", seg_out + point_out, cfg.fuse_mlp)
    shapes.append(("aux", cfg.decoration_dim, 2))
    return shapes


def init_params(cfg: SeenConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    params = {}
    for name, fan_in, fan_out in _layer_shapes(cfg):
        params[f"{name}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros((1, fan_out))
    return params


class Outputs(NamedTuple):
    logits: ad.Var
    seg_feat: ad.Var
    global_feat: ad.Var
    decoration: ad.Var
    aux_logits: ad.Var


def _dense(x, P, name, act=True):
    y = ad.linear(x, P[f"{name}.w"], P[f"{name}.b"])
    return ad.relu(y) if act else y


def _mlp(x, P, prefix, n, final_act):
    for i in range(n):
        x = _dense(x, P, f"{prefix}{i}", act=final_act or i < n - 1)
    return x


def network_input(feats: np.ndarray, cfg: SeenConfig) -> np.ndarray:
    """(B, m, d_in) -> (B*m, d_in) float64 with coordinates rescaled."""
    if feats.ndim != 3 or feats.shape[2] != cfg.d_in:
        raise ShapeMismatch(f"expected (B, m, {cfg.d_in}) features, got {feats.shape}")
    x = feats.reshape(-1, cfg.d_in).astype(np.float64)
    x[:, :3] *= cfg.coord_scale
    return x


def seg_forward(feats: np.ndarray, one_hot: np.ndarray, P: dict[str, ad.Var], cfg: SeenConfig):
    """Return (logits, segmentation features, global feature) Vars for a (B, m, d_in) batch."""
    B, m, _ = feats.shape
    if one_hot.shape != (B, cfg.n_cls):
        raise ShapeMismatch(f"one-hot shape {one_hot.shape}, expected {(B, cfg.n_cls)}")
    x = ad.Var(network_input(feats, cfg))
    local = _mlp(x, P, "seg.enc", len(cfg.enc), final_act=True)
    g = ad.segment_max(_dense(local, P, "seg.glob"), m)
    gcat = ad.concat([g, ad.Var(one_hot)])
    h = ad.concat([local, ad.repeat_rows(gcat, m)])
    seg_feat = _mlp(h, P, "seg.dec", len(cfg.dec), final_act=True)
    logits = _dense(seg_feat, P, "seg.head", act=False)
    return logits, seg_feat, g


def predicted_mask(logits: np.ndarray) -> np.ndarray:
    """Foreground iff its logit is strictly larger; ties go to background."""
    return (logits[:, 1] > logits[:, 0]).astype(np.float64)[:, None]


def fusion_forward(variant: str, seg_feat: ad.Var, point_feat: ad.Var, mask: np.ndarray | None,
                   P: dict[str, ad.Var], cfg: SeenConfig) -> ad.Var:
    if seg_feat.shape[0] != point_feat.shape[0]:
        raise ShapeMismatch(f"segmentation features have {seg_feat.shape[0]} rows, point features {point_feat.shape[0]}")
    if variant == "A":
        if mask is None:
            raise MissingMask("variant A needs a ground-truth or predicted mask")
        mask = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        if mask.shape[0] != seg_feat.shape[0]:
            raise ShapeMismatch(f"mask has {mask.shape[0]} rows, expected {seg_feat.shape[0]}")
        return ad.Var(mask)
    if variant == "B":
        return _mlp(point_feat, P, "fuse.point.", len(cfg.point_mlp), final_act=False)
    if variant == "C":
        return _mlp(seg_feat, P, "fuse.seg.", len(cfg.seg_mlp), final_act=False)
    if variant == "D":
        a = _mlp(seg_feat, P, "fuse.seg.", len(cfg.seg_mlp), final_act=True)
        b = _mlp(point_feat, P, "fuse.point.", len(cfg.point_mlp), final_act=True)
        return _mlp(ad.concat([a, b]), P, "fuse.out.", len(cfg.fuse_mlp), final_act=False)
    raise ValueError(f"unknown fusion variant {variant!r}")


@dataclass
class SeenModel:
    config: SeenConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: SeenConfig, seed: int = 0) -> "SeenModel":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def leaves(self) -> dict[str, ad.Var]:
        return {k: ad.Var(v) for k, v in self.params.items()}

    def forward(self, batch: FrustumBatch, P: dict[str, ad.Var] | None = None) -> Outputs:
        cfg = self.config
        P = self.leaves() if P is None else P
        feats = batch.features
        logits, seg_feat, g = seg_forward(feats, batch.one_hot, P, cfg)
        point_feat = ad.Var(feats.reshape(-1, cfg.d_in)[:, 3:].astype(np.float64))
        mask = None
        if cfg.variant == "A":
            if cfg.mask_source == "gt":
                mask = batch.seg_label.reshape(-1, 1)
            else:
                mask = predicted_mask(logits.value)
        deco = fusion_forward(cfg.variant, seg_feat, point_feat, mask, P, cfg)
        aux = _dense(deco, P, "aux", act=False)
        return Outputs(logits, seg_feat, g, deco, aux)

    def loss(self, batch: FrustumBatch, P: dict[str, ad.Var] | None = None) -> tuple[ad.Var, Outputs]:
        """Segmentation cross-entropy plus the auxiliary head's cross-entropy."""
        out = self.forward(batch, P)
        labels = batch.seg_label.reshape(-1)
        total = ad.add(ad.softmax_cross_entropy(out.logits, labels), ad.softmax_cross_entropy(out.aux_logits, labels))
        return total, out

    # ------------------------------------------------------------ persistence

    def to_tensors(self) -> dict[str, np.ndarray]:
        cfg = self.config
        meta = np.array([[cfg.d_in, cfg.n_cls, VARIANTS.index(cfg.variant),
                          MASK_SOURCES.index(cfg.mask_source), cfg.coord_scale]])
        return {"meta.config": meta, **self.params}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "SeenModel":
        meta = tensors["meta.config"].ravel()
        P = {k: v.astype(np.float64) for k, v in tensors.items() if not k.startswith("meta.")}

        def widths(prefix):
            out, i = [], 0
            while f"{prefix}{i}.w" in P:
                out.append(P[f"{prefix}{i}.w"].shape[1])
                i += 1
            return tuple(out)

        variant = VARIANTS[int(meta[2])]
        base = SeenConfig()
        cfg = SeenConfig(
            d_in=int(meta[0]),
            n_cls=int(meta[1]),
            variant=variant,
            mask_source=MASK_SOURCES[int(meta[3])],
            enc=widths("seg.enc"),
            global_dim=P["seg.glob.w"].shape[1],
            dec=widths("seg.dec"),
            seg_mlp=widths("fuse.seg.") or base.seg_mlp,
            point_mlp=widths("fuse.point.") or base.point_mlp,
            fuse_mlp=widths("fuse.out.") or base.fuse_mlp,
            coord_scale=float(meta[4]),
        )
        expected = {f"{n}.{s}" for n, _, _ in _layer_shapes(cfg) for s in "wb"}
        if expected != set(P):
            raise ShapeMismatch(f"checkpoint tensors do not match a variant-{variant} model")
        return cls(cfg, P)

    def save(self, path) -> None:
        save_checkpoint(path, self.to_tensors())

    @classmethod
    def load(cls, path) -> "SeenModel":
        return cls.from_tensors(load_checkpoint(path))


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 50
    lr: float = 0.05
    batch_size: int = 16
    stop_at_accuracy: float | None = None


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    aux_accuracy: float


@dataclass
class TrainResult:
    model: SeenModel
    history: list[EpochStats] = field(default_factory=list)


def _subset(batch: FrustumBatch, idx: np.ndarray) -> FrustumBatch:
    return FrustumBatch(batch.points[idx], batch.one_hot[idx], batch.indices[idx], batch.origin_counts[idx])


def train(batch: FrustumBatch, model_cfg: SeenConfig, cfg: TrainConfig,
          model: SeenModel | None = None) -> TrainResult:
    """Mini-batch gradient descent with a fixed step on the summed cross-entropies.

    Deterministic for a given ``cfg.seed``: the same stream initialises the
    weights and shuffles the frustums each epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = SeenModel(model_cfg, init_params(model_cfg, rng))
    else:
        model = SeenModel(model.config, {k: v.copy() for k, v in model.params.items()})
    history: list[EpochStats] = []
    n = len(batch)
    if n == 0:
        return TrainResult(model, history)
    for epoch in range(1, cfg.epochs + 1):
        loss_sum = correct = aux_correct = 0.0
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sub = _subset(batch, order[start : start + cfg.batch_size])
            P = model.leaves()
            total, out = model.loss(sub, P)
            value = float(total.value[0, 0])
            if not math.isfinite(value):
                last = history[-1].epoch if history else 0
                raise DivergedLoss(f"loss became {value} in epoch {epoch}", last_finite_epoch=last)
            total.backward()
            for k, leaf in P.items():
                if leaf.grad is not None:
                    model.params[k] = model.params[k] - cfg.lr * leaf.grad
            labels = sub.seg_label.reshape(-1)
            rows = labels.size
            loss_sum += value * rows
            correct += float((out.logits.value.argmax(axis=1) == labels).sum())
            aux_correct += float((out.aux_logits.value.argmax(axis=1) == labels).sum())
        total_rows = n * batch.m
        history.append(EpochStats(epoch, loss_sum / total_rows, correct / total_rows, aux_correct / total_rows))
        if cfg.stop_at_accuracy is not None and history[-1].accuracy >= cfg.stop_at_accuracy:
            break
    return TrainResult(model, history)


def evaluate(model: SeenModel, batch: FrustumBatch, chunk: int = 64) -> dict[str, float]:
    """Per-point segmentation and auxiliary-head accuracy, plus mean loss."""
    n_rows = correct = aux_correct = loss_sum = 0.0
    for start in range(0, len(batch), chunk):
        sub = _subset(batch, np.arange(start, min(start + chunk, len(batch))))
        total, out = model.loss(sub)
        labels = sub.seg_label.reshape(-1)
        n_rows += labels.size
        loss_sum += float(total.value[0, 0]) * labels.size
        correct += float((out.logits.value.argmax(axis=1) == labels).sum())
        aux_correct += float((out.aux_logits.value.argmax(axis=1) == labels).sum())
    if n_rows == 0:
        return {"loss": float("nan"), "accuracy": float("nan"), "aux_accuracy": float("nan")}
    return {"loss": loss_sum / n_rows, "accuracy": correct / n_rows, "aux_accuracy": aux_correct / n_rows}


# ---------------------------------------------------------------- decoration

def semantic_channels(deco: np.ndarray) -> np.ndarray:
    """Widen a fusion output to the semantic width (the 1-channel mask is repeated)."""
    if deco.shape[1] == SEMANTIC_DIM:
        return deco
    if deco.shape[1] == 1:
        return np.repeat(deco, SEMANTIC_DIM, axis=1)
    raise ShapeMismatch(f"decoration has {deco.shape[1]} channels, expected 1 or {SEMANTIC_DIM}")


@dataclass
class DecoratedCloud:
    """Rows of the original ``D`` channels followed by the decoration channels."""

    points: np.ndarray
    frame_id: str = ""
    n_base: int = 4


def decorate(batch: FrustumBatch, model: SeenModel) -> DecoratedCloud:
    """Decorate every resampled row of a batch, frustum by frustum."""
    d = model.config.d_in
    if len(batch) == 0:
        return DecoratedCloud(np.zeros((0, d + SEMANTIC_DIM), dtype=np.float32), n_base=d)
    if batch.points.shape[2] != d + 3:
        raise ShapeMismatch(f"batch has {batch.points.shape[2]} channels, model expects {d + 3}")
    deco = semantic_channels(model.forward(batch).decoration.value)
    base = batch.features.reshape(-1, d)
    rows = np.concatenate([base, deco.astype(np.float32)], axis=1)
    return DecoratedCloud(rows, n_base=d)


def decorate_cloud(cloud: RecodedCloud | np.ndarray, model: SeenModel) -> DecoratedCloud:
    """Decorate each recoded row in place, running every frustum at its native size."""
    rows = cloud.points if isinstance(cloud, RecodedCloud) else np.asarray(cloud, dtype=np.float32)
    frame_id = cloud.frame_id if isinstance(cloud, RecodedCloud) else ""
    cfg = model.config
    if rows.shape[1] != cfg.d_in + 3:
        raise ShapeMismatch(f"cloud has {rows.shape[1]} channels, model expects {cfg.d_in + 3}")
    out = np.zeros((len(rows), cfg.d_in + SEMANTIC_DIM), dtype=np.float32)
    out[:, : cfg.d_in] = rows[:, : cfg.d_in]
    index = rows[:, -1].astype(np.int64)
    for f in build_frustums(rows, None, cfg.n_cls):
        deco = semantic_channels(model.forward(stack_batch([f])).decoration.value)
        out[index == f.index, cfg.d_in :] = deco
    return DecoratedCloud(out, frame_id=frame_id, n_base=cfg.d_in)
