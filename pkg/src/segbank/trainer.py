"""Training loop: teacher-student distillation with a feature memory bank.

Per step, in order: (1) teacher pseudo-labels on the clean unlabeled images;
(2) A strong views with replayed pseudo-labels, weakly augmented labeled
images; (3) student forwards; (4) the four losses with warmup gating;
(5) SGD step on the student; (6) EMA teacher update; (7) teacher feature
extraction -> quality filter -> attention ranking -> bank enqueue;
(8) class-frequency update from labels and pseudo-labels.

Everything trains at the stride-8 output grid; labels are downsampled with a
top-left nearest-neighbor pick, and evaluation upsamples predictions back to
native resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import augment
from .augment import GeomRecord, apply as apply_transform, classmix, \
    replay_geometry, sample_transform
from .bank import FeatureRecord, MemoryBank, per_image_quota, quality_filter, \
    rank_and_select
from .config import TrainConfig, config_from_dict, config_to_dict
from .data import ClassFrequencyTable, SegDataset, class_weights, \
    downsample_labels, load_dataset, load_split, make_split, save_split, \
    update_frequencies
from .losses import LossWeights, contrastive_loss, entropy_loss, pseudo_loss, \
    supervised_loss, total_loss
from .metrics import ConfusionMatrix, mean_iou, per_class_iou
from .models import OUTPUT_STRIDE, SegModel, ema_update, make_teacher


def poly_lr(iteration: int, lr0: float, power: float, total_iters: int) -> float:
    """lr0 * (1 - iter/T)^power."""
    return lr0 * (1.0 - iteration / total_iters) ** power


def tau_schedule(iteration: int, total_iters: int, tau_start: float = 0.995,
                 tau_end: float = 1.0) -> float:
    """Linear ramp of the EMA momentum from tau_start to tau_end."""
    return tau_start + (tau_end - tau_start) * iteration / total_iters


@dataclass
class PseudoLabelPack:
    """Teacher argmax and max-probability on the stride-8 grid, per image."""
    labels: np.ndarray       # (B, h, w) int64
    confidence: np.ndarray   # (B, h, w) float32


def generate_pseudo_labels(teacher, x_u: torch.Tensor) -> PseudoLabelPack:
    """Argmax pseudo-labels from the clean unlabeled batch.

    Ties resolve to the lowest class index (argmax convention); nothing here
    is connected to the autograd graph.
    """
    teacher.eval()
    with torch.no_grad():
        probs = teacher.forward_segmentation(x_u)
        conf, labels = probs.max(dim=1)
    return PseudoLabelPack(labels.cpu().numpy().astype(np.int64),
                           conf.cpu().numpy().astype(np.float32))


def upsample_map(arr: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor integer upsampling; exact inverse of downsample_labels."""
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


class _Cycler:
    """Endless dataset-index stream, reshuffled each epoch."""

    def __init__(self, indices, rng: np.random.Generator):
        if not len(indices):
            raise ValueError("cannot cycle an empty index set")
        self.indices = np.asarray(indices)
        self.rng = rng
        self._order = []

    def take(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(self.indices))
            out.append(int(self._order.pop(0)))
        return out


def evaluate(model, dataset: SegDataset, indices=None) -> tuple[float, list]:
    """Run the model over a dataset and return (mIoU, per-class IoU).

    Predictions are made at stride 8 and nearest-neighbor upsampled back to
    the native label resolution. Images whose sides are not multiples of 8
    are edge-padded on the right/bottom for the forward pass only.
    """
    model.eval()
    cm = ConfusionMatrix(dataset.class_count)
    idx = range(len(dataset)) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            gt = dataset.load_label(i)
            if gt is None:
                continue
            img = dataset.load_image(i)
            h, w = img.shape[:2]
            h2 = math.ceil(h / OUTPUT_STRIDE) * OUTPUT_STRIDE
            w2 = math.ceil(w / OUTPUT_STRIDE) * OUTPUT_STRIDE
            if (h2, w2) != (h, w):
                img = np.pad(img, ((0, h2 - h), (0, w2 - w), (0, 0)), mode="edge")
            probs = model.forward_segmentation(_to_tensor(img)[None])
            pred = probs[0].argmax(dim=0).cpu().numpy()
            pred = upsample_map(pred, OUTPUT_STRIDE)[:h, :w]
            cm.update(pred, gt, ignore_index=dataset.ignore_index)
    ious = [None if np.isnan(v) else float(v) for v in per_class_iou(cm)]
    return mean_iou(cm), ious


class Trainer:
    """Owns all mutable training state; one instance per run."""

    def __init__(self, cfg: TrainConfig, train_data: SegDataset,
                 val_data: Optional[SegDataset] = None,
                 domain_data: Optional[SegDataset] = None,
                 split=None):
        cfg.validate()
        self.cfg = cfg
        self.train_data = train_data
        self.val_data = val_data
        self.domain_data = domain_data
        if cfg.domain_adaptation and domain_data is None:
            raise ValueError("domain_adaptation requires a domain dataset")

        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        ss = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rng_data = np.random.default_rng(ss[0])
        self.rng_aug = np.random.default_rng(ss[1])

        if split is None:
            split = make_split(train_data, cfg.data.labeled_ratio, cfg.data.split_seed)
        self.split = split
        id_to_idx = {s.sample_id: i for i, s in enumerate(train_data.samples)}
        self.labeled_idx = [id_to_idx[i] for i in split.labeled_ids]
        self.unlabeled_idx = [id_to_idx[i] for i in split.unlabeled_ids]
        if not self.labeled_idx:
            raise ValueError("split contains no labeled samples")
        if not self.unlabeled_idx:
            # degenerate but allowed: recycle labeled images as unlabeled
            self.unlabeled_idx = list(self.labeled_idx)

        c = cfg.data.class_count
        self.student = SegModel(c, width=cfg.model.width, embed_dim=cfg.model.embed_dim)
        self.teacher = make_teacher(self.student)
        self.optimizer = torch.optim.SGD(self.student.parameters(), lr=cfg.optim.lr0,
                                         momentum=cfg.optim.momentum,
                                         weight_decay=cfg.optim.weight_decay)
        self.bank = MemoryBank(c, cfg.psi)
        self.freq = ClassFrequencyTable.empty(c, source="labeled_plus_pseudo")
        self.iteration = 0
        self.best_miou = -1.0

        self._labeled_cycler = _Cycler(self.labeled_idx, self.rng_data)
        self._unlabeled_cycler = _Cycler(self.unlabeled_idx, self.rng_data)
        self._domain_cycler = _Cycler(range(len(domain_data)), self.rng_data) \
            if domain_data is not None else None
        self._labeled_slot = 0  # parity alternates target/source under adaptation

    # ------------------------------------------------------------------
    # batch composition
    # ------------------------------------------------------------------

    def _maybe_crop(self, img, lab, rng):
        cs = self.cfg.crop_size
        if cs is None:
            return img, lab
        h, w = img.shape[:2]
        if h < cs or w < cs:
            raise ValueError(f"image {h}x{w} smaller than crop_size {cs}")
        oy = int(rng.integers(0, h - cs + 1))
        ox = int(rng.integers(0, w - cs + 1))
        img = img[oy:oy + cs, ox:ox + cs]
        lab = lab[oy:oy + cs, ox:ox + cs] if lab is not None else None
        return img, lab

    def compose_batch(self):
        """Draw (labeled, unlabeled) sample lists for one step.

        Labeled entries are (image, label, is_target). Under domain
        adaptation, labeled slots alternate evenly between the target
        labeled set and the source-domain set; only target samples may
        later feed the memory bank.
        """
        cfg = self.cfg
        labeled = []
        for _ in range(cfg.batch_labeled):
            from_domain = cfg.domain_adaptation and self._labeled_slot % 2 == 1
            self._labeled_slot += 1
            if from_domain:
                j = self._domain_cycler.take(1)[0]
                img, lab = self.domain_data.load_image(j), self.domain_data.load_label(j)
            else:
                j = self._labeled_cycler.take(1)[0]
                img, lab = self.train_data.load_image(j), self.train_data.load_label(j)
            img, lab = self._maybe_crop(img, lab, self.rng_data)
            labeled.append((img, lab, not from_domain))
        unlabeled = []
        for j in self._unlabeled_cycler.take(cfg.batch_unlabeled):
            img, _ = self._maybe_crop(self.train_data.load_image(j), None, self.rng_data)
            unlabeled.append(img)
        return labeled, unlabeled

    # ------------------------------------------------------------------
    # augmentation paths
    # ------------------------------------------------------------------

    def _augment_labeled(self, labeled):
        """ClassMix within the batch, then per-sample weak transforms."""
        cfg, rng = self.cfg, self.rng_aug
        ignore = cfg.data.ignore_index
        images, labels_ds = [], []
        for i, (img, lab, _) in enumerate(labeled):
            if len(labeled) >= 2 and rng.uniform() < cfg.aug_weak.classmix_p:
                j = int(rng.integers(0, len(labeled) - 1))
                j += j >= i
                img, lab, _ = classmix(labeled[j][0], labeled[j][1], img, lab,
                                       rng, ignore_index=ignore)
            t = sample_transform(cfg.aug_weak, img.shape[:2], rng)
            img_a, lab_a, _ = apply_transform(t, img, lab, ignore_index=ignore)
            images.append(_to_tensor(img_a))
            labels_ds.append(downsample_labels(lab_a, OUTPUT_STRIDE))
        return torch.stack(images), \
            torch.from_numpy(np.stack(labels_ds)).long()

    def _augment_unlabeled_views(self, unlabeled, pack: PseudoLabelPack):
        """A strong views per unlabeled image with replayed pseudo-labels.

        ClassMix pastes classes between batch members using the full-res
        pseudo-labels (confidence transported with the pasted pixels), then
        each view gets its own sampled strong transform whose geometry is
        replayed onto label and confidence maps before the x8 downsample.
        """
        cfg, rng = self.cfg, self.rng_aug
        ignore = cfg.data.ignore_index
        pl_full = [upsample_map(pack.labels[i], OUTPUT_STRIDE)
                   for i in range(len(unlabeled))]
        conf_full = [upsample_map(pack.confidence[i], OUTPUT_STRIDE)
                     for i in range(len(unlabeled))]
        views = []
        for _ in range(cfg.num_augmentations):
            imgs, pls, confs = [], [], []
            for i, img in enumerate(unlabeled):
                pl, conf = pl_full[i], conf_full[i]
                if len(unlabeled) >= 2 and rng.uniform() < cfg.aug_strong.classmix_p:
                    j = int(rng.integers(0, len(unlabeled) - 1))
                    j += j >= i
                    img, pl, mask = classmix(unlabeled[j], pl_full[j], img, pl,
                                             rng, ignore_index=ignore)
                    conf = np.where(mask, conf_full[j], conf)
                t = sample_transform(cfg.aug_strong, img.shape[:2], rng)
                img_a, _, rec = apply_transform(t, img, ignore_index=ignore)
                pl_a = replay_geometry(pl, rec, fill=ignore)
                conf_a = replay_geometry(conf, rec, fill=np.float32(0.0))
                imgs.append(_to_tensor(img_a))
                pls.append(downsample_labels(pl_a, OUTPUT_STRIDE))
                confs.append(downsample_labels(conf_a, OUTPUT_STRIDE))
            views.append((torch.stack(imgs),
                          torch.from_numpy(np.stack(pls)).long(),
                          torch.from_numpy(np.stack(confs)).float()))
        return views

    # ------------------------------------------------------------------
    # contrastive plumbing
    # ------------------------------------------------------------------

    def _group_projected(self, feature_maps, label_maps):
        """Run g and q over every valid pixel once, then group P by class.

        feature_maps: list of (B, D', h, w) student features
        label_maps: list of (B, h, w) int64 tensors aligned with them
        """
        ignore = self.cfg.data.ignore_index
        vecs, labs = [], []
        for feats, labels in zip(feature_maps, label_maps):
            f = feats.permute(0, 2, 3, 1).reshape(-1, feats.shape[1])
            l = labels.reshape(-1)
            keep = l != ignore
            if keep.any():
                vecs.append(f[keep])
                labs.append(l[keep])
        if not vecs:
            return {}
        v = torch.cat(vecs)
        l = torch.cat(labs)
        p = self.student.prediction(self.student.projection(v))
        return {int(c): p[l == c] for c in torch.unique(l).tolist()}

    def _update_bank(self, x_l: torch.Tensor, y_l_ds: torch.Tensor, is_target):
        """Teacher-side candidate extraction and FIFO insertion (step 7)."""
        cfg = self.cfg
        quota = per_image_quota(cfg.psi, len(self.labeled_idx))
        self.teacher.eval()
        with torch.no_grad():
            feats = self.teacher.forward_features(x_l)
            probs = torch.softmax(self.teacher.classifier(feats), dim=1)
            conf, pred = probs.max(dim=1)
            for i in range(x_l.shape[0]):
                if not is_target[i]:
                    continue  # bank holds target-domain features only
                f = feats[i].permute(1, 2, 0).cpu().numpy()
                gt = y_l_ds[i].cpu().numpy()
                if cfg.use_quality_filter:
                    cands = quality_filter(f, pred[i].cpu().numpy(),
                                           conf[i].cpu().numpy(), gt, cfg.phi,
                                           ignore_index=cfg.data.ignore_index)
                else:
                    cands = quality_filter(f, gt, np.ones_like(gt, dtype=np.float32),
                                           gt, 0.0, ignore_index=cfg.data.ignore_index)
                for c, cand in cands.items():
                    z = self.teacher.projection(torch.from_numpy(cand.vectors))
                    if cfg.use_attention:
                        scores = self.teacher.attention.score(c, "projection", z)
                        scores = scores.cpu().numpy()
                    else:
                        scores = np.full(len(cand.vectors), 0.5, dtype=np.float32)
                    sel = rank_and_select(scores, quota)
                    z_np = z.cpu().numpy().astype(np.float32)
                    records = [FeatureRecord(z_np[j], c, float(cand.confidences[j]),
                                             float(scores[j]), self.iteration)
                               for j in sel]
                    self.bank.enqueue(c, records)

    # ------------------------------------------------------------------
    # the step itself
    # ------------------------------------------------------------------

    def _alpha(self):
        if not self.cfg.class_balancing or self.freq.counts.sum() == 0:
            return None
        return torch.from_numpy(class_weights(self.freq)).float()

    def train_step(self, labeled, unlabeled) -> dict:
        cfg = self.cfg
        it = self.iteration
        warm = it < cfg.warmup_iters
        w = cfg.loss
        use_pseudo = not warm and w.lam_pseudo > 0
        use_contr = not warm and w.lam_contr > 0
        contr_unlab = use_contr and cfg.contrastive_inputs in ("unlabeled", "both")
        contr_lab = use_contr and cfg.contrastive_inputs in ("labeled", "both")
        # the unlabeled pathway is skipped entirely when nothing consumes it
        unlab_active = use_pseudo or w.lam_ent > 0 or contr_unlab

        self.student.train()
        x_l, y_l_ds = self._augment_labeled(labeled)
        feats_l = self.student.forward_features(x_l)
        probs_l = torch.softmax(self.student.classifier(feats_l), dim=1)
        alpha = self._alpha()
        zero = torch.zeros(())
        l_sup = supervised_loss(probs_l, y_l_ds, alpha,
                                ignore_index=cfg.data.ignore_index)
        l_pseudo, l_ent, l_contr = zero, zero, zero

        pack = None
        if unlab_active:
            x_u = torch.stack([_to_tensor(im) for im in unlabeled])
            pack = generate_pseudo_labels(self.teacher, x_u)
            views = self._augment_unlabeled_views(unlabeled, pack)
            view_feats = [self.student.forward_features(v[0]) for v in views]
            view_probs = [torch.softmax(self.student.classifier(f), dim=1)
                          for f in view_feats]
            if w.lam_ent > 0:
                l_ent = entropy_loss(view_probs)
            if use_pseudo:
                l_pseudo = pseudo_loss(view_probs, [v[1] for v in views],
                                       [v[2] for v in views], alpha,
                                       s=cfg.sharpen_s,
                                       ignore_index=cfg.data.ignore_index)

        if use_contr:
            feature_maps, label_maps = [], []
            if contr_lab:
                feature_maps.append(feats_l)
                label_maps.append(y_l_ds)
            if contr_unlab:
                feature_maps.extend(view_feats)
                label_maps.extend(v[1] for v in views)
            preds_by_class = self._group_projected(feature_maps, label_maps)
            targets_by_class = {c: self.bank.targets(c)
                                for c in range(cfg.data.class_count)}
            attention = self.student.attention if cfg.use_attention else None
            l_contr = contrastive_loss(preds_by_class, targets_by_class, attention)

        total = total_loss(l_sup, l_pseudo, l_ent, l_contr, w, iteration=it)

        lr = poly_lr(it, cfg.optim.lr0, cfg.optim.poly_power, cfg.total_iters)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        tau = tau_schedule(it, cfg.total_iters, cfg.tau_start, cfg.tau_end)
        ema_update(self.teacher, self.student, tau)

        if w.lam_contr > 0:
            self._update_bank(x_l, y_l_ds, [s[2] for s in labeled])

        for i in range(y_l_ds.shape[0]):
            update_frequencies(self.freq, y_l_ds[i].numpy(),
                               ignore_index=cfg.data.ignore_index)
        if pack is not None:
            for i in range(pack.labels.shape[0]):
                update_frequencies(self.freq, pack.labels[i],
                                   ignore_index=cfg.data.ignore_index)

        self.iteration += 1
        return {"iter": it, "l_sup": float(l_sup.detach()),
                "l_pseudo": float(l_pseudo.detach()),
                "l_ent": float(l_ent.detach()), "l_contr": float(l_contr.detach()),
                "total": float(total.detach()), "lr": lr, "tau": tau}

    # ------------------------------------------------------------------
    # orchestration
    # ------------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save({"student": self.student.state_dict(),
                    "teacher": self.teacher.state_dict(),
                    "optimizer": self.optimizer.state_dict(),
                    "iteration": self.iteration,
                    "bank": self.bank.state_dict(),
                    "frequencies": self.freq.counts,
                    "best_miou": self.best_miou,
                    "config": config_to_dict(self.cfg)}, path)

    def load_checkpoint_state(self, state: dict) -> None:
        self.student.load_state_dict(state["student"])
        self.teacher.load_state_dict(state["teacher"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.iteration = state["iteration"]
        self.bank = MemoryBank.from_state_dict(state["bank"])
        self.freq.counts = np.asarray(state["frequencies"])
        self.best_miou = state.get("best_miou", -1.0)

    def validate(self) -> dict:
        miou, ious = evaluate(self.student, self.val_data)
        self.student.train()
        return {"iter": self.iteration, "miou": miou, "per_class_iou": ious}

    def train(self, log_path=None, quiet: bool = False) -> dict:
        """Run the configured number of steps with periodic validation.

        Writes one JSON object per line to ``log_path`` (defaults to
        ``out_dir/metrics.jsonl``), saves best/final checkpoints under
        out_dir, and returns a summary dict.
        """
        cfg = self.cfg
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if log_path is None:
            log_path = out_dir / "metrics.jsonl"
        save_split(self.split, out_dir / "split.txt")
        log = open(log_path, "w", encoding="utf-8")
        try:
            while self.iteration < cfg.total_iters:
                labeled, unlabeled = self.compose_batch()
                record = self.train_step(labeled, unlabeled)
                log.write(json.dumps(record) + "\n")
                run_val = self.val_data is not None and (
                    self.iteration % cfg.val_interval == 0
                    or self.iteration == cfg.total_iters)
                if run_val:
                    val = self.validate()
                    log.write(json.dumps(val) + "\n")
                    log.flush()
                    if not quiet:
                        print(f"iter {self.iteration}: total {record['total']:.4f} "
                              f"val mIoU {val['miou']:.4f}")
                    if val["miou"] > self.best_miou:
                        self.best_miou = val["miou"]
                        self.save_checkpoint(out_dir / "best.pt")
                if cfg.checkpoint_interval and \
                        self.iteration % cfg.checkpoint_interval == 0:
                    self.save_checkpoint(out_dir / f"iter{self.iteration}.pt")
        except KeyboardInterrupt:
            if not quiet:
                print(f"interrupted at iteration {self.iteration}; saving checkpoint")
        finally:
            log.close()
            self.save_checkpoint(out_dir / "final.pt")
        return {"iterations": self.iteration, "best_miou": self.best_miou,
                "checkpoint": str(out_dir / "final.pt")}


# ----------------------------------------------------------------------
# entry points used by the CLI
# ----------------------------------------------------------------------

def build_trainer(cfg: TrainConfig) -> Trainer:
    d = cfg.data
    train_data = load_dataset(d.root, Path(d.root) / d.manifest, d.class_count,
                              ignore_index=d.ignore_index)
    val_data = None
    if d.val_manifest:
        val_root = d.val_root or d.root
        val_data = load_dataset(val_root, Path(val_root) / d.val_manifest,
                                d.class_count, ignore_index=d.ignore_index)
    domain_data = None
    if d.domain_manifest:
        domain_data = load_dataset(d.domain_root or d.root,
                                   Path(d.domain_root or d.root) / d.domain_manifest,
                                   d.class_count, ignore_index=d.ignore_index)
    split = load_split(d.split_file) if d.split_file else None
    return Trainer(cfg, train_data, val_data, domain_data, split=split)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(state: dict) -> tuple[SegModel, TrainConfig]:
    cfg = config_from_dict(state["config"])
    model = SegModel(cfg.data.class_count, width=cfg.model.width,
                     embed_dim=cfg.model.embed_dim)
    model.load_state_dict(state["student"])
    model.eval()
    return model, cfg
