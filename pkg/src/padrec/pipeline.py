"""The three training phases: pre-train, rec-anchored alignment, fine-tune.

Phase 1 trains the recommendation-specific expert with BCE over sampled
negatives. Phase 2 trains the alignment expert with a BCE term plus a
gamma-weighted alignment term between the projected text embeddings and
the collaborative embeddings of the items in each batch (four variants,
from no alignment to fully frozen collaborative tables). Phase 3 removes
the alignment term and fine-tunes the gated mixture of all experts.

Every phase is deterministic given (config, seed, dataset, text matrix):
rngs fan out from the master seed by name, users are shuffled by a
dedicated stream, and checkpoints snapshot the best-validation epoch.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad, kernels
from .autodiff import Tensor, bce_with_logits, make_rng
from .checkpoint import Checkpoint, restore_model, snapshot_model
from .data import SplitDataset
from .evaluate import evaluate_ranking, ndcg_at_k
from .model import ModelConfig, PadModel, bucketize, text_checksum
from .optim import AdamW

ALIGN_VARIANTS = ("none", "non_anchored", "rec_anchored", "rec_anchored_frozen")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    gamma: float = 0.2
    weight_decay: float = 0.1
    patience: int = 10
    max_epochs: int = 50
    seed: int = 0
    eval_k: int = 10
    alignment_variant: str = "rec_anchored"
    kernel_kind: str = "gaussian"  # gaussian|laplacian|linear|cosine|infonce
    bandwidths: tuple[float, ...] = ()
    betas: tuple[float, ...] = ()
    infonce_temperature: float = 0.2
    mmd_estimator: str = "biased"
    experts: tuple[str, ...] = ("id", "align", "llm")
    gating: str = "frequency_aware"
    eval_batch: int = 256

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience, max_epochs must be >= 1")
        if self.alignment_variant not in ALIGN_VARIANTS:
            raise ValueError(f"unknown alignment variant {self.alignment_variant!r}")
        if not self.experts:
            raise ValueError("expert mask must be non-empty")

    def kernel_bank(self) -> kernels.MultiKernel | None:
        if self.kernel_kind == "infonce":
            return None
        if self.kernel_kind in ("linear", "cosine"):
            return kernels.MultiKernel.single(kernels.KernelSpec(self.kernel_kind))
        bws = self.bandwidths or tuple(2.0 ** s for s in range(-3, 2))
        betas = self.betas or tuple(1.0 for _ in bws)
        if len(betas) != len(bws):
            raise ValueError("betas and bandwidths lengths differ")
        return kernels.MultiKernel(tuple(
            (b, kernels.KernelSpec(self.kernel_kind, bw))
            for b, bw in zip(betas, bws)))


def negative_sample(rng: np.random.Generator, positives: np.ndarray,
                    n_items: int) -> np.ndarray:
    """One uniform negative per positive, never equal to it."""
    if n_items < 2:
        raise ValueError("negative sampling needs a catalog of >= 2 items")
    positives = np.asarray(positives)
    draws = rng.integers(0, n_items - 1, size=positives.shape)
    return draws + (draws >= positives)


def early_stop(history: list[float], patience: int) -> tuple[bool, int]:
    """(stop now?, best epoch) with 1-based epochs; earliest best wins ties."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best_index = int(np.argmax(history))
    return len(history) - best_index - 1 >= patience, best_index + 1


def _emit_metrics(row: dict, metrics_path: str | None, echo: bool) -> None:
    line = json.dumps(row, sort_keys=True)
    if echo:
        sys.stdout.write(line + "\n")
        sys.stdout.flush()
    if metrics_path:
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def _batches(dataset: SplitDataset, batch_size: int,
             rng: np.random.Generator, max_len: int):
    """Shuffled (ids, lengths, targets) training batches, right-padded."""
    order = rng.permutation(dataset.n_users)
    for lo in range(0, len(order), batch_size):
        rows = order[lo: lo + batch_size]
        prefixes, targets = zip(*(dataset.task(int(u), "train") for u in rows))
        lengths = np.array([min(len(p), max_len) for p in prefixes])
        width = int(lengths.max())
        ids = np.zeros((len(rows), width), dtype=np.int64)
        for i, p in enumerate(prefixes):
            p = p[-max_len:]
            ids[i, : len(p)] = p
        yield ids, lengths, np.asarray(targets, dtype=np.int64)


def _val_ndcg(model: PadModel, dataset: SplitDataset, tcfg: TrainConfig,
              single_expert: str | None, experts=None) -> tuple[float, float]:
    ranks, _ = evaluate_ranking(
        model, dataset, "val", experts=experts, single_expert=single_expert,
        k=tcfg.eval_k, batch_size=tcfg.eval_batch, with_report=False)
    hr = float(np.mean(ranks <= tcfg.eval_k) * 100.0)
    ndcg = float(np.mean([ndcg_at_k(r, tcfg.eval_k) for r in ranks]) * 100.0)
    return hr, ndcg


def _train_phase(
    phase: str,
    model: PadModel,
    dataset: SplitDataset,
    tcfg: TrainConfig,
    batch_loss_fn,
    trainable: dict[str, Tensor],
    single_expert: str | None,
    experts=None,
    metrics_path: str | None = None,
    echo: bool = False,
    keep: str = "best",
) -> tuple[dict[str, np.ndarray], dict]:
    """Shared epoch loop: train, validate, early-stop.

    keep="best" returns the best-validation parameters; keep="final" returns
    the last epoch's (the align phase trains its own loss to convergence, so
    selecting by the downstream metric would undo the alignment).
    """
    if not trainable:
        raise ValueError(f"{phase}: nothing to train")
    if dataset.n_users == 0:
        raise ValueError(f"{phase}: empty training set")
    opt = AdamW(trainable, lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                no_decay={"gate.buckets"})
    shuffle_rng = make_rng(tcfg.seed, f"{phase}/shuffle")
    history: list[float] = []
    best_params = {k: p.data.copy() for k, p in model.params().items()}
    loss_rows: list[dict] = []
    for epoch in range(1, tcfg.max_epochs + 1):
        t0 = time.perf_counter()
        sums = {"loss": 0.0, "bce": 0.0, "mmd": 0.0}
        n_examples = 0
        for ids, lengths, targets in _batches(
                dataset, tcfg.batch_size, shuffle_rng, model.cfg.max_len):
            with ad.Tape() as tape:
                loss, bce_val, mmd_val = batch_loss_fn(
                    epoch, ids, lengths, targets)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            b = len(targets)
            n_examples += b
            sums["loss"] += loss.item() * b
            sums["bce"] += bce_val * b
            sums["mmd"] += mmd_val * b
        hr, ndcg = _val_ndcg(model, dataset, tcfg, single_expert, experts)
        history.append(ndcg)
        stop, best = early_stop(history, tcfg.patience)
        if (keep == "best" and best == epoch) or keep == "final":
            best_params = {k: p.data.copy() for k, p in model.params().items()}
        row = {
            "phase": phase,
            "epoch": epoch,
            "loss": sums["loss"] / n_examples,
            "loss_bce": sums["bce"] / n_examples,
            "loss_mmd": sums["mmd"] / n_examples,
            "val_hr10": hr,
            "val_ndcg10": ndcg,
            "wall_seconds": time.perf_counter() - t0,
        }
        loss_rows.append({k: row[k] for k in
                          ("epoch", "loss", "loss_bce", "loss_mmd",
                           "val_hr10", "val_ndcg10")})
        _emit_metrics(row, metrics_path, echo)
        if stop:
            break
    meta = {
        "phase": phase,
        "best_epoch": (early_stop(history, tcfg.patience)[1]
                       if keep == "best" else len(history)),
        "epochs_run": len(history),
        "val_ndcg10_history": history,
        "metrics": loss_rows,
        "seed": tcfg.seed,
    }
    return best_params, meta


def _config_snapshot(tcfg: TrainConfig, mcfg: ModelConfig, phase: str,
                     meta: dict) -> dict:
    return {
        "phase": phase,
        "train": {k: list(v) if isinstance(v, tuple) else v
                  for k, v in vars(tcfg).items()},
        "model": {k: list(v) if isinstance(v, tuple) else v
                  for k, v in vars(mcfg).items()},
        "meta": meta,
    }


def _build_model(mcfg: ModelConfig, dataset: SplitDataset,
                 text_matrix: np.ndarray, seed: int) -> PadModel:
    model = PadModel(dataset.n_items, text_matrix, mcfg, seed)
    model.buckets = bucketize(dataset.train_freq, mcfg.n_buckets)
    return model


def pretrain(tcfg: TrainConfig, mcfg: ModelConfig, dataset: SplitDataset,
             text_matrix: np.ndarray, metrics_path: str | None = None,
             echo: bool = False) -> Checkpoint:
    """Phase 1: BCE training of the recommendation-specific expert."""
    model = _build_model(mcfg, dataset, text_matrix, tcfg.seed)
    checksum = model.text_checksum
    neg_rng = make_rng(tcfg.seed, "pretrain/negatives")
    drop_rng = make_rng(tcfg.seed, "pretrain/dropout")

    def batch_loss(epoch, ids, lengths, targets):
        negatives = negative_sample(neg_rng, targets, dataset.n_items)
        u = model.encode("id", ids, lengths, training=True, rng=drop_rng)
        pos = model.score(u, model.item_embedding("id", targets))
        neg = model.score(u, model.item_embedding("id", negatives))
        logits = ad.concat([ad.reshape(pos, (-1, 1)),
                            ad.reshape(neg, (-1, 1))], axis=-1)
        labels = np.zeros(logits.data.shape)
        labels[:, 0] = 1.0
        bce = bce_with_logits(logits, labels)
        return bce, bce.item(), 0.0

    best, meta = _train_phase(
        "pretrain", model, dataset, tcfg, batch_loss,
        model.trainable("pretrain"), single_expert="id",
        metrics_path=metrics_path, echo=echo)
    if text_checksum(model.bank.text.data) != checksum:
        raise AssertionError("text matrix changed during pretrain")
    for k, p in model.params().items():
        p.data = best[k]
    return snapshot_model(model, _config_snapshot(tcfg, mcfg, "pretrain", meta))


def _align_trainable(model: PadModel, variant: str) -> dict[str, Tensor]:
    if variant == "non_anchored":
        # only the MMD path receives gradients
        keys = {"collab_align"} | {
            k for k in model.params() if k.startswith("mlp_align.")}
        return {k: v for k, v in model.params().items() if k in keys}
    return model.trainable("align",
                           freeze_collab=(variant == "rec_anchored_frozen"))


def align_phase(tcfg: TrainConfig, mcfg: ModelConfig, dataset: SplitDataset,
                text_matrix: np.ndarray, pretrain_ckpt: Checkpoint,
                metrics_path: str | None = None, echo: bool = False
                ) -> Checkpoint:
    """Phase 2: alignment-expert training with the configured variant."""
    variant = tcfg.alignment_variant
    model = _build_model(mcfg, dataset, text_matrix, tcfg.seed)
    restore_model(model, pretrain_ckpt)
    model.bank.collab_align.data = model.bank.collab_rec.data.copy()
    checksum = model.text_checksum
    bank = tcfg.kernel_bank()
    neg_rng = make_rng(tcfg.seed, "align/negatives")
    drop_rng = make_rng(tcfg.seed, "align/dropout")
    freeze_collab_side = variant == "rec_anchored_frozen"

    def alignment_term(ids, lengths, targets) -> Tensor:
        valid = [row[:n] for row, n in zip(ids, lengths)]
        items = np.unique(np.concatenate(valid + [targets]))
        text_rows = ad.stop_gradient(ad.gather(model.bank.text, items))
        text_side = model._mlp("mlp_align", text_rows)
        collab_side = ad.gather(model.bank.collab_align, items)
        if freeze_collab_side:
            collab_side = ad.stop_gradient(collab_side)
        if bank is None:  # InfoNCE variant
            if len(items) < 2:
                return Tensor(np.zeros(()))
            return kernels.infonce_loss(text_side, collab_side,
                                        tcfg.infonce_temperature)
        if tcfg.mmd_estimator == "unbiased" and len(items) >= 2:
            return kernels.mmd2_unbiased(text_side, collab_side, bank)
        return kernels.mmd2_biased(text_side, collab_side, bank)

    def batch_loss(epoch, ids, lengths, targets):
        negatives = negative_sample(neg_rng, targets, dataset.n_items)
        u = model.encode("align", ids, lengths, training=True, rng=drop_rng)
        pos = model.score(u, model.item_embedding("align", targets))
        neg = model.score(u, model.item_embedding("align", negatives))
        logits = ad.concat([ad.reshape(pos, (-1, 1)),
                            ad.reshape(neg, (-1, 1))], axis=-1)
        labels = np.zeros(logits.data.shape)
        labels[:, 0] = 1.0
        bce = bce_with_logits(logits, labels)
        mmd = alignment_term(ids, lengths, targets)
        if variant == "none":
            loss = bce
        elif variant == "non_anchored":
            loss = ad.scale(mmd, tcfg.gamma)
        else:
            loss = ad.add(bce, ad.scale(mmd, tcfg.gamma))
        return loss, bce.item(), mmd.item()

    rec_before = model.bank.collab_rec.data.copy()
    align_before = model.bank.collab_align.data.copy()
    best, meta = _train_phase(
        "align", model, dataset, tcfg, batch_loss,
        _align_trainable(model, variant), single_expert="align",
        metrics_path=metrics_path, echo=echo, keep="final")
    if text_checksum(model.bank.text.data) != checksum:
        raise AssertionError("text matrix changed during alignment")
    if variant == "rec_anchored_frozen":
        if not (np.array_equal(rec_before, model.bank.collab_rec.data)
                and np.array_equal(align_before, model.bank.collab_align.data)):
            raise AssertionError("frozen collaborative tables changed")
    meta["alignment_variant"] = variant
    for k, p in model.params().items():
        p.data = best[k]
    return snapshot_model(model, _config_snapshot(tcfg, mcfg, "align", meta))


def finetune_phase(tcfg: TrainConfig, mcfg: ModelConfig, dataset: SplitDataset,
                   text_matrix: np.ndarray, pretrain_ckpt: Checkpoint,
                   align_ckpt: Checkpoint, metrics_path: str | None = None,
                   echo: bool = False, gate_monitor=None) -> Checkpoint:
    """Phase 3: gated triple-expert fine-tuning with BCE only."""
    experts = tuple(tcfg.experts)
    mcfg = replace(mcfg, experts=experts, gating=tcfg.gating)
    model = _build_model(mcfg, dataset, text_matrix, tcfg.seed)
    restore_model(model, pretrain_ckpt)
    align_keys = {k for k in align_ckpt.sections
                  if k.startswith(("mlp_align.", "enc_align.")) or
                  k in ("collab_align", "fuse.w", "fuse.b")}
    restore_model(model, Checkpoint(
        {k: align_ckpt.sections[k] for k in align_keys}, {}),
        allow_subset=True)
    checksum = model.text_checksum
    neg_rng = make_rng(tcfg.seed, "finetune/negatives")
    drop_rng = make_rng(tcfg.seed, "finetune/dropout")

    def batch_loss(epoch, ids, lengths, targets):
        negatives = negative_sample(neg_rng, targets, dataset.n_items)
        reprs = {e: model.encode(e, ids, lengths, training=True, rng=drop_rng)
                 for e in experts}
        pos, w_pos = model.fused_logit(ids, lengths, targets,
                                       experts=experts, reprs=reprs)
        neg, w_neg = model.fused_logit(ids, lengths, negatives,
                                       experts=experts, reprs=reprs)
        if gate_monitor is not None:
            gate_monitor(w_pos.data)
            gate_monitor(w_neg.data)
        logits = ad.concat([ad.reshape(pos, (-1, 1)),
                            ad.reshape(neg, (-1, 1))], axis=-1)
        labels = np.zeros(logits.data.shape)
        labels[:, 0] = 1.0
        bce = bce_with_logits(logits, labels)
        return bce, bce.item(), 0.0

    best, meta = _train_phase(
        "finetune", model, dataset, tcfg, batch_loss,
        model.trainable("finetune", experts=experts), single_expert=None,
        experts=experts, metrics_path=metrics_path, echo=echo)
    if text_checksum(model.bank.text.data) != checksum:
        raise AssertionError("text matrix changed during finetune")
    meta["experts"] = list(experts)
    meta["gating"] = tcfg.gating
    for k, p in model.params().items():
        p.data = best[k]
    return snapshot_model(model, _config_snapshot(tcfg, mcfg, "finetune", meta))


def load_model_from(ckpt: Checkpoint, dataset: SplitDataset,
                    text_matrix: np.ndarray) -> PadModel:
    """Rebuild a model (buckets included) from a phase checkpoint."""
    mdict = dict(ckpt.config["model"])
    mdict["experts"] = tuple(mdict.get("experts", ("id", "align", "llm")))
    mcfg = ModelConfig(**mdict)
    seed = ckpt.config["train"]["seed"]
    model = _build_model(mcfg, dataset, text_matrix, seed)
    restore_model(model, ckpt)
    return model
