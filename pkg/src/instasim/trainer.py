"""Training loop for the dual projection heads.

Frozen ingested embeddings are the constants; the only trainable
parameters are the two MLPs. Each optimizer step consumes
batch_size * grad_accum triplets (grad_accum micro-batches), averages
the per-triplet gradient over the whole chunk, and applies one AdamW
update. Within a micro-batch every triplet sees its own hard negative
plus the positives of the other triplets whose instance differs
(in-batch negatives); the loss functions themselves stay agnostic to
where negatives came from.

Everything is sequential and seed-derived: file order of the triplet
list never matters because triplets are canonically sorted before the
per-epoch shuffle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import EmbeddingBundle
from .errors import InvalidInput, MissingItem
from .heads import (
    AdamWState,
    DualHead,
    adamw_init,
    adamw_step,
    apply_head,
    clone_head,
    init_dual_head,
    mlp_backward,
    mlp_forward,
    zero_grads,
)
from .losses import LossConfig, cls_loss, patch_loss, total_loss
from .metrics import cosine_similarity, triplet_correct
from .records import ImageManifest, Triplet, manifest_index
from .rng import derived_rng
from .sinkhorn import SinkhornConfig, subsample_tokens

__all__ = [
    "TrainConfig",
    "TrainResult",
    "train",
    "train_step",
    "apply_head",
]


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_accum: int = 4
    epochs: int = 3
    seed: int = 0
    hidden_dim: int = 512
    out_dim: int | None = None
    activation: str = "gelu"
    loss: LossConfig = field(default_factory=LossConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidInput("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise InvalidInput("batch_size and grad_accum must be >= 1")
        if self.epochs < 0:
            raise InvalidInput("epochs must be >= 0")
        if self.hidden_dim < 1:
            raise InvalidInput("hidden_dim must be >= 1")
        self.loss.validate()
        self.sinkhorn.validate()


@dataclass
class TrainResult:
    final_head: DualHead
    best_head: DualHead
    best_epoch: int
    history: list[dict]


class _TrainData:
    """Per-image access to the frozen embeddings a run trains on."""

    def __init__(self, cls_bundle: EmbeddingBundle, patch_bundle: EmbeddingBundle | None, cfg: TrainConfig):
        if cls_bundle.token_kind != "CLS":
            raise InvalidInput("training expects a CLS-kind bundle for global vectors")
        if cfg.loss.lam > 0 and patch_bundle is None:
            raise InvalidInput("lambda > 0 requires a patch bundle")
        if patch_bundle is not None and patch_bundle.token_kind != "PATCH":
            raise InvalidInput("patch bundle must be PATCH kind")
        self.cls_bundle = cls_bundle
        self.patch_bundle = patch_bundle
        self.cfg = cfg
        self.use_patch = cfg.loss.lam > 0 and patch_bundle is not None
        self._patch_cache: dict[str, np.ndarray] = {}

    def require(self, image_id: str) -> None:
        if image_id not in self.cls_bundle.items:
            raise MissingItem(f"image {image_id!r} missing from CLS bundle")
        if self.use_patch and image_id not in self.patch_bundle.items:
            raise MissingItem(f"image {image_id!r} missing from patch bundle")

    def cls_vec(self, image_id: str) -> np.ndarray:
        return self.cls_bundle.get(image_id).astype(np.float64).ravel()

    def patch_mat(self, image_id: str) -> np.ndarray:
        if image_id not in self._patch_cache:
            Z = self.patch_bundle.get(image_id).astype(np.float64)
            Z = subsample_tokens(
                Z, self.cfg.sinkhorn.max_tokens, derived_rng(self.cfg.seed, "tokens", image_id).integers(2**31)
            )
            self._patch_cache[image_id] = Z
        return self._patch_cache[image_id]


def _batch_negative_ids(t: Triplet, micro: list[Triplet], inst_of: dict[str, str]) -> list[str]:
    """The triplet's hard negative plus other same-micro-batch positives
    from different instances. Duplicates are kept."""
    negs = [t.hard_negative]
    for u in micro:
        if u is t:
            continue
        if inst_of[u.anchor] != inst_of[t.anchor]:
            negs.append(u.positive)
    return negs


def _micro_batch_pass(
    head: DualHead,
    micro: list[Triplet],
    data: _TrainData,
    inst_of: dict[str, str],
    param_grads: dict[str, np.ndarray],
) -> float:
    """Forward+backward one micro-batch; accumulates parameter gradients
    in place and returns the summed per-triplet loss."""
    cfg = data.cfg
    image_ids = sorted(
        {t.anchor for t in micro}
        | {t.positive for t in micro}
        | {n for t in micro for n in _batch_negative_ids(t, micro, inst_of)}
    )

    cls_out: dict[str, np.ndarray] = {}
    cls_cache: dict[str, tuple] = {}
    cls_out_grad: dict[str, np.ndarray] = {}
    patch_out: dict[str, np.ndarray] = {}
    patch_cache: dict[str, tuple] = {}
    patch_out_grad: dict[str, np.ndarray] = {}
    for image_id in image_ids:
        y, cache = mlp_forward(head.cls_head, data.cls_vec(image_id), head.activation)
        cls_out[image_id] = y
        cls_cache[image_id] = cache
        cls_out_grad[image_id] = np.zeros_like(y)
        if data.use_patch:
            Z, zcache = mlp_forward(head.patch_head, data.patch_mat(image_id), head.activation)
            patch_out[image_id] = Z
            patch_cache[image_id] = zcache
            patch_out_grad[image_id] = np.zeros_like(Z)

    loss_sum = 0.0
    for t in micro:
        neg_ids = _batch_negative_ids(t, micro, inst_of)
        c_loss, g_a, g_p, g_ns = cls_loss(
            cls_out[t.anchor], cls_out[t.positive], [cls_out[n] for n in neg_ids], cfg.loss
        )
        cls_out_grad[t.anchor] += g_a
        cls_out_grad[t.positive] += g_p
        for i, n in enumerate(neg_ids):
            cls_out_grad[n] += g_ns[i]

        p_loss = 0.0
        if data.use_patch:
            p_loss, gz_a, gz_p, gz_ns = patch_loss(
                patch_out[t.anchor],
                patch_out[t.positive],
                [patch_out[n] for n in neg_ids],
                cfg.loss,
                cfg.sinkhorn,
            )
            patch_out_grad[t.anchor] += cfg.loss.lam * gz_a
            patch_out_grad[t.positive] += cfg.loss.lam * gz_p
            for i, n in enumerate(neg_ids):
                patch_out_grad[n] += cfg.loss.lam * gz_ns[i]
        loss_sum += total_loss(c_loss, p_loss, cfg.loss)

    for image_id in image_ids:
        _, grads = mlp_backward(
            head.cls_head, cls_cache[image_id], cls_out_grad[image_id], head.activation
        )
        for pname, g in grads.items():
            param_grads[f"cls.{pname}"] += g
        if data.use_patch:
            _, grads = mlp_backward(
                head.patch_head, patch_cache[image_id], patch_out_grad[image_id], head.activation
            )
            for pname, g in grads.items():
                param_grads[f"patch.{pname}"] += g
    return loss_sum


def train_step(
    head: DualHead,
    opt_state: AdamWState,
    chunk: list[Triplet],
    data: _TrainData,
    inst_of: dict[str, str],
    cfg: TrainConfig,
) -> float:
    """One optimizer step over up to batch_size * grad_accum triplets.

    Gradients are accumulated across micro-batches, averaged per
    triplet, then applied with AdamW. Returns the mean triplet loss.
    """
    if not chunk:
        raise InvalidInput("empty triplet chunk")
    param_grads = zero_grads(head)
    loss_sum = 0.0
    for start in range(0, len(chunk), cfg.batch_size):
        micro = chunk[start : start + cfg.batch_size]
        loss_sum += _micro_batch_pass(head, micro, data, inst_of, param_grads)
    n = len(chunk)
    for name in param_grads:
        param_grads[name] /= n
    adamw_step(head, param_grads, opt_state, cfg.lr, cfg.weight_decay)
    return loss_sum / n


def _validation_accuracy(head: DualHead, val: list[Triplet], data: _TrainData) -> float:
    correct = 0
    for t in val:
        a, _ = mlp_forward(head.cls_head, data.cls_vec(t.anchor), head.activation)
        p, _ = mlp_forward(head.cls_head, data.cls_vec(t.positive), head.activation)
        n, _ = mlp_forward(head.cls_head, data.cls_vec(t.hard_negative), head.activation)
        if triplet_correct(cosine_similarity(a, p), cosine_similarity(a, n)):
            correct += 1
    return correct / len(val)


def train(
    manifests: list[ImageManifest],
    cls_bundle: EmbeddingBundle,
    triplets: list[Triplet],
    cfg: TrainConfig,
    patch_bundle: EmbeddingBundle | None = None,
    initial_head: DualHead | None = None,
) -> TrainResult:
    """Full training run with per-epoch validation and best-checkpoint
    selection on validation triplet accuracy.

    Validation similarity is the same cosine + strict comparison used
    by the evaluation suite. An epoch is one pass over the training
    triplets; best checkpoint is the earliest epoch achieving the
    highest validation accuracy.
    """
    cfg.validate()
    data = _TrainData(cls_bundle, patch_bundle, cfg)
    index = manifest_index(manifests)
    for t in triplets:
        for image_id in (t.anchor, t.positive, t.hard_negative):
            if image_id not in index:
                raise MissingItem(f"triplet references image {image_id!r} not in manifests")
            data.require(image_id)
    inst_of = {image_id: rec.instance_id for image_id, rec in index.items()}

    if initial_head is None:
        head = init_dual_head(
            in_dim=cls_bundle.dim,
            hidden_dim=cfg.hidden_dim,
            out_dim=cfg.out_dim,
            activation=cfg.activation,
            seed=cfg.seed,
        )
    else:
        head = clone_head(initial_head)

    if cfg.epochs == 0:
        return TrainResult(final_head=head, best_head=clone_head(head), best_epoch=0, history=[])

    ordered = sorted(triplets, key=lambda t: (t.anchor, t.positive, t.hard_negative, t.hard_negative_kind))
    train_set = [t for t in ordered if index[t.anchor].split == "train"]
    val_set = [t for t in ordered if index[t.anchor].split == "val"]
    if not train_set:
        raise InvalidInput("train split has no triplets")
    if not val_set:
        raise InvalidInput("val split has no triplets")
    train_inst = {inst_of[t.anchor] for t in train_set}
    val_inst = {inst_of[t.anchor] for t in val_set}
    if train_inst & val_inst:
        raise InvalidInput(
            f"train/val splits share instances: {sorted(train_inst & val_inst)[:5]}"
        )

    opt_state = adamw_init(head)
    chunk_len = cfg.batch_size * cfg.grad_accum
    history: list[dict] = []
    best_head = clone_head(head)
    best_epoch = 0
    best_acc = -1.0
    for epoch in range(1, cfg.epochs + 1):
        perm = derived_rng(cfg.seed, "epoch", epoch).permutation(len(train_set))
        shuffled = [train_set[i] for i in perm]
        loss_total = 0.0
        for start in range(0, len(shuffled), chunk_len):
            chunk = shuffled[start : start + chunk_len]
            loss_total += train_step(head, opt_state, chunk, data, inst_of, cfg) * len(chunk)
        train_loss = loss_total / len(shuffled)
        val_acc = _validation_accuracy(head, val_set, data)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best_head = clone_head(head)
            best_epoch = epoch
    return TrainResult(final_head=head, best_head=best_head, best_epoch=best_epoch, history=history)
