"""Two-stage training (coarse first, then refine with the coarse net frozen),
the Adam optimizer, dataset loading and split evaluation."""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import losses as L
from . import tensor as T
from .errors import DataError, ParameterError, TrainingError
from .matte import Matte, composite, composite_tensor, identity_matte
from .metrics import evaluate_sample, image_metrics
from .network import (
    CoarseNetParams,
    CoarsePrediction,
    RefineNetParams,
    coarse_forward,
    init_coarse,
    init_refine,
    refine_forward,
)

log = logging.getLogger(__name__)

REPORT_KEYS = ("group", "f_epe", "f_roi", "m_iou", "c_mse", "i_mse", "psnr", "ssim", "n")


@dataclass
class TrainConfig:
    stage: str = "coarse"
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 3e-4  # 1e-3 saturates the sigmoid filter head within one epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    coarse_weights: L.CoarseLossWeights = field(default_factory=L.CoarseLossWeights)
    refine_weights: L.RefineLossWeights = field(default_factory=L.RefineLossWeights)
    seed: int = 0
    split: str = "train"
    eval_split: str | None = None
    eval_interval: int = 0
    depth: int = 4
    base_features: int = 16
    blocks: int = 5
    features: int = 32

    def __post_init__(self):
        if self.stage not in ("coarse", "refine"):
            raise ParameterError("stage must be 'coarse' or 'refine'", stage=self.stage)
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1", batch_size=self.batch_size)
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0", learning_rate=self.learning_rate)
        if isinstance(self.coarse_weights, dict):
            self.coarse_weights = L.CoarseLossWeights(**self.coarse_weights)
        if isinstance(self.refine_weights, dict):
            self.refine_weights = L.RefineLossWeights(**self.refine_weights)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError("unknown training config keys", keys=unknown)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"stage": self.stage, "epochs": self.epochs}
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


class Adam:
    def __init__(self, params: list[T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


# -- data ------------------------------------------------------------------------


@dataclass
class MatteDataset:
    """Samples stacked channel-first, ready for batching."""

    ids: list[str]
    groups: list[str]
    images: np.ndarray  # N x 3 x H x W
    backgrounds: np.ndarray  # N x 3 x H x W
    masks: np.ndarray  # N x 1 x H x W, ground-truth probability (feathered)
    filters: np.ndarray  # N x 3 x H x W
    flows: np.ndarray  # N x 2 x H x W

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "MatteDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MatteDataset(
            [self.ids[i] for i in idx],
            [self.groups[i] for i in idx],
            self.images[idx],
            self.backgrounds[idx],
            self.masks[idx],
            self.filters[idx],
            self.flows[idx],
        )

    def gt_matte(self, i: int) -> Matte:
        return Matte.from_chw(self.masks[i], self.filters[i], self.flows[i])

    @staticmethod
    def from_samples(samples, ids=None, groups=None) -> "MatteDataset":
        def chw(a):
            return np.asarray(a, dtype=np.float32).transpose(2, 0, 1)

        mattes = [s.gt for s in samples]
        return MatteDataset(
            list(ids or [f"s{i}" for i in range(len(samples))]),
            list(groups or ["all"] * len(samples)),
            np.stack([chw(io.quantize(s.input)) for s in samples]),
            np.stack([chw(s.background) for s in samples]),
            np.stack([m.mask[None].astype(np.float32) for m in mattes]),
            np.stack([chw(m.filter) for m in mattes]),
            np.stack([chw(m.flow) for m in mattes]),
        )


def load_dataset(manifest_path, split: str | None = "train") -> MatteDataset:
    records = io.read_manifest(manifest_path)
    if split is not None:
        records = [r for r in records if r.get("split", "train") == split]
    if not records:
        raise DataError("no samples in the requested split", manifest=str(manifest_path), split=split)
    base = Path(manifest_path).parent
    imgs, bgs, masks, filts, flows = [], [], [], [], []
    for r in records:
        m = io.read_matte(base / r["matte_path"])
        imgs.append(io.read_image(base / r["input_path"]).transpose(2, 0, 1))
        bgs.append(io.read_image(base / r["background_path"]).transpose(2, 0, 1))
        mask, filt, flow = m.to_chw()
        masks.append(mask)
        filts.append(filt)
        flows.append(flow)
    f32 = lambda xs: np.stack(xs).astype(np.float32)  # noqa: E731
    return MatteDataset(
        [r["id"] for r in records],
        [r.get("group", "all") for r in records],
        f32(imgs),
        f32(bgs),
        f32(masks),
        f32(filts),
        f32(flows),
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# -- losses on a batch -------------------------------------------------------------


def coarse_losses(params: CoarseNetParams, data: MatteDataset, idx, weights: L.CoarseLossWeights):
    img = data.images[idx]
    pred = coarse_forward(params, img)
    prob = pred.mask_prob()
    target_mask = (data.masks[idx] >= 0.5).astype(img.dtype)
    l_m = L.mask_loss(prob, target_mask)
    l_c = L.filter_loss(pred.filter, data.filters[idx])
    l_r = L.flow_loss(pred.flow, data.flows[idx])
    recon = composite_tensor(prob, pred.filter, pred.flow, data.backgrounds[idx])
    l_i = L.reconstruction_loss(recon, img)
    total = L.coarse_total(l_m, l_c, l_r, l_i, weights)
    return total, {"l_m": l_m.item(), "l_c": l_c.item(), "l_r": l_r.item(), "l_i": l_i.item()}


def refine_losses(params: RefineNetParams, data: MatteDataset, idx, coarse: CoarsePrediction, weights):
    filt, flow = refine_forward(params, data.images[idx], coarse)
    l_c = L.filter_loss(filt, data.filters[idx])
    l_r = L.flow_loss(flow, data.flows[idx])
    return L.refine_total(l_c, l_r, weights), {"l_c": l_c.item(), "l_r": l_r.item()}


def split_refine_loss(params: RefineNetParams, data: MatteDataset, coarse: CoarsePrediction, weights, chunk: int = 8) -> float:
    """Refine total over the whole split, accumulated chunk by chunk to bound memory."""
    total = 0.0
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        total += refine_losses(params, data, idx, _take(coarse, idx), weights)[0].item() * len(idx)
    return total / len(data)


def _check_finite(value: float, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise TrainingError("loss became non-finite", epoch=epoch, batch=batch, value=str(value))


def _epoch_record(epoch: int, sums: dict[str, float], count: int) -> dict:
    return {"epoch": epoch, **{k: v / count for k, v in sums.items()}}


def _save(checkpoint_dir, stage: str, params, config: TrainConfig, epoch: int) -> None:
    if checkpoint_dir is None:
        return
    header = {"format": 1, "stage": stage, "config": params.config(), "seed": config.seed, "epoch": epoch}
    io.write_checkpoint(Path(checkpoint_dir) / f"{stage}.ckpt", header, params.state_dict())


def train_coarse(
    config: TrainConfig,
    data: MatteDataset,
    params: CoarseNetParams | None = None,
    checkpoint_dir=None,
    eval_data: MatteDataset | None = None,
) -> tuple[CoarseNetParams, TrainReport]:
    if len(data) == 0:
        raise DataError("training set is empty")
    if len(data) < config.batch_size:
        raise DataError("training set is smaller than one batch", n=len(data), batch_size=config.batch_size)
    params = params or init_coarse(config.seed, config.depth, config.base_features)
    opt = Adam(params.tensors(), config.learning_rate, config.beta1, config.beta2, config.eps)
    report = TrainReport("coarse")
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        sums: dict[str, float] = defaultdict(float)
        n = 0
        for b, idx in enumerate(_batches(len(data), config.batch_size, rng)):
            opt.zero_grad()
            total, parts = coarse_losses(params, data, idx, config.coarse_weights)
            _check_finite(total.item(), epoch, b)
            total.backward()
            opt.step()
            sums["loss"] += total.item() * len(idx)
            for k, v in parts.items():
                sums[k] += v * len(idx)
            n += len(idx)
        rec = _epoch_record(epoch, sums, n)
        if eval_data is not None and config.eval_interval and epoch % config.eval_interval == 0:
            rec["eval"] = evaluate_split(params, None, eval_data)["model"]
        report.epochs.append(rec)
        log.info("coarse epoch %d loss %.5f", epoch, rec["loss"])
        _save(checkpoint_dir, "coarse", params, config, epoch)
    report.wall_time = time.perf_counter() - t0
    return params, report


def predict_coarse(params: CoarseNetParams, images: np.ndarray, chunk: int = 16) -> CoarsePrediction:
    """Frozen coarse outputs for a stack of images (no graph kept)."""
    logits, filt, flow = [], [], []
    for start in range(0, len(images), chunk):
        p = coarse_forward(params, images[start : start + chunk])
        logits.append(p.mask_logits.data)
        filt.append(p.filter.data)
        flow.append(p.flow.data)
    return CoarsePrediction(
        T.Tensor(np.concatenate(logits)), T.Tensor(np.concatenate(filt)), T.Tensor(np.concatenate(flow))
    )


def _take(pred: CoarsePrediction, idx) -> CoarsePrediction:
    return CoarsePrediction(
        T.Tensor(pred.mask_logits.data[idx]), T.Tensor(pred.filter.data[idx]), T.Tensor(pred.flow.data[idx])
    )


def params_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(params.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def train_refine(
    config: TrainConfig,
    data: MatteDataset,
    frozen_coarse: CoarseNetParams,
    params: RefineNetParams | None = None,
    checkpoint_dir=None,
) -> tuple[RefineNetParams, TrainReport]:
    if len(data) == 0:
        raise DataError("training set is empty")
    if len(data) < config.batch_size:
        raise DataError("training set is smaller than one batch", n=len(data), batch_size=config.batch_size)
    params = params or init_refine(config.seed + 1, config.blocks, config.features)
    # the coarse net is frozen, so its outputs are computed once and never differentiated
    coarse_out = predict_coarse(frozen_coarse, data.images)
    opt = Adam(params.tensors(), config.learning_rate, config.beta1, config.beta2, config.eps)
    report = TrainReport("refine")
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch, 1])
        sums: dict[str, float] = defaultdict(float)
        n = 0
        for b, idx in enumerate(_batches(len(data), config.batch_size, rng)):
            opt.zero_grad()
            total, parts = refine_losses(params, data, idx, _take(coarse_out, idx), config.refine_weights)
            _check_finite(total.item(), epoch, b)
            total.backward()
            opt.step()
            sums["loss"] += total.item() * len(idx)
            for k, v in parts.items():
                sums[k] += v * len(idx)
            n += len(idx)
        report.epochs.append(_epoch_record(epoch, sums, n))
        log.info("refine epoch %d loss %.5f", epoch, report.epochs[-1]["loss"])
        _save(checkpoint_dir, "refine", params, config, epoch)
    report.wall_time = time.perf_counter() - t0
    return params, report


# -- inference and evaluation --------------------------------------------------------


def predict_mattes(
    coarse: CoarseNetParams, refine: RefineNetParams | None, images: np.ndarray, chunk: int = 16
) -> list[Matte]:
    """Predicted mattes (soft mask probabilities) for ``N x 3 x H x W`` images."""
    out = []
    for start in range(0, len(images), chunk):
        batch = images[start : start + chunk]
        pred = predict_coarse(coarse, batch, chunk)
        prob = T.channel_softmax(pred.mask_logits).data[:, 1]
        if refine is not None:
            filt, flow = refine_forward(refine, batch, pred)
            filt, flow = filt.data, flow.data
        else:
            filt, flow = pred.filter.data, pred.flow.data
        for i in range(len(batch)):
            out.append(Matte.from_chw(prob[i], filt[i], flow[i]))
    return out


def _row(group: str, mattes: list[Matte], data: MatteDataset, idx: list[int]) -> dict:
    vals = defaultdict(list)
    for m, i in zip(mattes, idx):
        # back to the exact k/255 values the float32 stacks approximate
        bg = io.quantize(data.backgrounds[i].transpose(1, 2, 0))
        img = io.quantize(data.images[i].transpose(1, 2, 0))
        # inputs are 8-bit PNGs, so reconstructions are scored after the same rounding
        mm = evaluate_sample(m, data.gt_matte(i), bg, img, quantize=True)
        im = image_metrics(io.quantize(composite(m, bg)), img)
        for k, v in {**mm.as_dict(), "psnr": im.psnr, "ssim": im.ssim}.items():
            vals[k].append(v)
    row = {"group": group}
    row.update({k: float(np.mean(v)) for k, v in vals.items()})
    row["n"] = len(idx)
    return {k: row[k] for k in REPORT_KEYS}


def evaluate_split(
    coarse: CoarseNetParams | None,
    refine: RefineNetParams | None,
    data: MatteDataset,
    predictions: list[Matte] | None = None,
) -> dict[str, list[dict]]:
    """Mean metrics per group for the model and for the identity-matte baseline.

    ``predictions`` overrides the network (e.g. ground truth as prediction).
    """
    if len(data) == 0:
        raise DataError("evaluation split is empty")
    if predictions is None:
        predictions = predict_mattes(coarse, refine, data.images)
    h, w = data.images.shape[-2:]
    baseline = [identity_matte(w, h)] * len(data)
    by_group: dict[str, list[int]] = defaultdict(list)
    for i, g in enumerate(data.groups):
        by_group[g].append(i)
    report: dict[str, list[dict]] = {"model": [], "background": []}
    for g in sorted(by_group):
        idx = by_group[g]
        report["model"].append(_row(g, [predictions[i] for i in idx], data, idx))
        report["background"].append(_row(g, [baseline[i] for i in idx], data, idx))
    return report
