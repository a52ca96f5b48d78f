"""Training loop, inference and evaluation for the fusion module over a frozen backbone."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..backbone import Backbone
from ..data import (AugmentConfig, Dataset, PromptDatabase, PromptPair, TaskKind, augment, load_dataset, rank)
from ..errors import CapacityError, ConfigError, DataError
from ..fusion import PromptFuser, assemble_canvas, stack_prompts
from ..losses import canvas_losses, quadrants
from .config import TrainConfig
from .schedule import lr_for

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step


@dataclass
class Workspace:
    cfg: TrainConfig
    dataset: Dataset
    backbone: Backbone

    @property
    def db(self) -> PromptDatabase:
        return self.dataset.train


def load_workspace(cfg: TrainConfig) -> Workspace:
    try:
        dataset = load_dataset(cfg.paths.data)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    bb_path = Path(cfg.paths.backbone)
    if not bb_path.with_suffix(".json").exists():
        raise DataError(f"no pretrained backbone at {bb_path}")
    backbone = Backbone.load(bb_path)
    check_compatible(cfg, dataset, backbone)
    return Workspace(cfg, dataset, backbone)


def check_compatible(cfg: TrainConfig, dataset: Dataset, backbone: Backbone) -> None:
    bc = backbone.cfg
    if cfg.fusion.dim != bc.dim or cfg.fusion.patch_size != bc.patch_size:
        raise ConfigError(f"fusion dim/patch ({cfg.fusion.dim}, {cfg.fusion.patch_size}) "
                          f"do not match the backbone ({bc.dim}, {bc.patch_size})")
    if dataset.spec.grid != bc.grid or dataset.spec.patch_size != bc.patch_size:
        raise ConfigError("dataset grid does not match the backbone")
    if dataset.spec.kind != cfg.task:
        raise ConfigError(f"dataset task {dataset.spec.kind.value} != config task {cfg.task.value}")


# ---------------------------------------------------------------- shared pieces


def topn_indices(query: np.ndarray, db: PromptDatabase, n: int, exclude: int | None = None) -> list[int]:
    if len(db) == 0:
        raise CapacityError("prompt database is empty")
    order = rank(query, db, {exclude} if exclude is not None else None)
    if n > len(order):
        raise CapacityError(f"requested {n} prompts from a database of {len(order)}")
    return order[:n]


def query_canvas(pairs: Sequence[PromptPair]) -> np.ndarray:
    """[[X_q, Y_q], [X_q, Y_q]] pixel canvases, (B, 2H, 2W, 3)."""
    rows = [np.concatenate([p.image, p.label], axis=1) for p in pairs]
    return np.stack([np.concatenate([r, r], axis=0) for r in rows])


def encode_batch(fuser: PromptFuser, backbone: Backbone, queries: np.ndarray, prompts: Sequence[Sequence[PromptPair]]):
    imgs, lbls = stack_prompts(prompts)
    fused, fq, att = fuser.forward(queries, imgs, lbls, backbone)
    mask = backbone.mask_token
    if mask.dtype != fq.dtype:
        mask = T.Tensor(mask.data, dtype=fq.dtype)
    logits = backbone.encode_continuous(assemble_canvas(fused, fq, mask))
    return logits, fused, fq, att


def decode_quadrant(backbone: Backbone, logits: np.ndarray) -> np.ndarray:
    return backbone.decode(logits.argmax(-1))


def build_fuser(cfg: TrainConfig) -> PromptFuser:
    return PromptFuser(cfg.fusion.dim, cfg.locality, seed=cfg.seed)


def load_fuser(cfg: TrainConfig, checkpoint) -> PromptFuser:
    arrays, meta = T.load_tensors(checkpoint)
    fuser = build_fuser(cfg)
    fuser.load_state(arrays)
    return fuser


# ---------------------------------------------------------------- evaluation


def label_mask(img: np.ndarray) -> np.ndarray:
    """Binary mask from a label image: luminance above 0.5."""
    lum = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return lum > 0.5


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)


@dataclass
class EvalResult:
    task: str
    metric: float
    per_class: dict[int, float] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def miou(self) -> float:
        return self.metric

    def to_dict(self) -> dict:
        name = "mse" if self.task == TaskKind.COLORIZATION.value else "miou"
        return {"task": self.task, name: self.metric, "per_class": {str(k): v for k, v in self.per_class.items()},
                "records": self.records, "wall_clock": self.wall_clock}


def score(task: TaskKind, preds: Sequence[np.ndarray], pairs: Sequence[PromptPair]) -> EvalResult:
    records = []
    if task is TaskKind.COLORIZATION:
        per_class_sum: dict[int, list[float]] = {}
        for pred, pair in zip(preds, pairs):
            mse = float(np.mean((np.asarray(pred, np.float64) - pair.label) ** 2))
            records.append({"id": pair.id, "class": pair.class_tag, "mse": mse})
            per_class_sum.setdefault(pair.class_tag, []).append(mse)
        per_class = {c: float(np.mean(v)) for c, v in sorted(per_class_sum.items())}
        return EvalResult(task.value, float(np.mean([r["mse"] for r in records])), per_class, records)
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    for pred, pair in zip(preds, pairs):
        pm, gm = label_mask(pred), label_mask(pair.label)
        i, u = int(np.logical_and(pm, gm).sum()), int(np.logical_or(pm, gm).sum())
        inter[pair.class_tag] = inter.get(pair.class_tag, 0) + i
        union[pair.class_tag] = union.get(pair.class_tag, 0) + u
        records.append({"id": pair.id, "class": pair.class_tag, "iou": 1.0 if u == 0 else i / u})
    per_class = {c: (1.0 if union[c] == 0 else inter[c] / union[c]) for c in sorted(union)}
    return EvalResult(task.value, float(np.mean(list(per_class.values()))), per_class, records)


def predict(fuser: PromptFuser, backbone: Backbone, queries: Sequence[PromptPair], db: PromptDatabase, n: int,
            exclude_self: bool = False, batch: int = 64) -> list[np.ndarray]:
    """Retrieve top-n (raw, no substitution), fuse, encode, decode the masked quadrant."""
    g = backbone.cfg.grid
    out = []
    with T.no_grad():
        for s in range(0, len(queries), batch):
            chunk = queries[s: s + batch]
            prompts = []
            for q in chunk:
                ex = db._by_id.get(q.id) if exclude_self else None
                prompts.append([db[i] for i in topn_indices(q.image, db, n, ex)])
            logits, *_ = encode_batch(fuser, backbone, np.stack([q.image for q in chunk]), prompts)
            out.extend(decode_quadrant(backbone, logits.data[:, g:, g:]))
    return out


def evaluate(cfg: TrainConfig, ws: Workspace, fuser: PromptFuser, queries: Sequence[PromptPair] | None = None,
             exclude_self: bool = False) -> EvalResult:
    queries = ws.dataset.test if queries is None else queries
    if not queries:
        raise ConfigError("evaluation set is empty")
    t0 = time.perf_counter()
    preds = predict(fuser, ws.backbone, queries, ws.db, cfg.fusion.num_prompts, exclude_self)
    result = score(cfg.task, preds, queries)
    result.wall_clock = time.perf_counter() - t0
    return result


def infer(query: np.ndarray, ws: Workspace, fuser: PromptFuser, n: int | None = None) -> np.ndarray:
    pair = PromptPair(query, np.zeros_like(query), "__query__", -1)
    return predict(fuser, ws.backbone, [pair], ws.db, n or ws.cfg.fusion.num_prompts)[0]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    final: Path
    best: Path
    metrics: Path
    best_metric: float
    best_epoch: int
    history: list[dict]


def split_queries(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng((seed, 1)).permutation(n)
    k = int(round(n * holdout))
    return np.sort(perm[k:]), np.sort(perm[:k])


def _better(task: TaskKind, a: float, b: float) -> bool:
    return a < b if task is TaskKind.COLORIZATION else a > b


def train(cfg: TrainConfig, ws: Workspace | None = None, out_dir=None) -> TrainResult:
    ws = ws or load_workspace(cfg)
    out = Path(out_dir or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    db, bb, n = ws.db, ws.backbone, cfg.fusion.num_prompts
    if n >= len(db):
        raise CapacityError(f"num_prompts {n} needs a larger database than {len(db)}")
    bb_sum = bb.checksum()

    train_idx, val_idx = split_queries(len(db), cfg.holdout, cfg.seed)
    retrieved = {int(i): topn_indices(db[int(i)].image, db, n, exclude=int(i)) for i in train_idx}
    targets = bb.quantize(query_canvas(db.pairs))
    val_pairs = [db[int(i)] for i in val_idx]

    fuser = build_fuser(cfg)
    params = fuser.parameters()
    steps_per_epoch = -(-len(train_idx) // cfg.batch_size)
    meta = {"config": cfg.to_dict(with_paths=False), "backbone_checksum": bb_sum}
    records: list[dict] = [{"config": meta["config"]}]
    metrics_path = out / "metrics.ndjson"
    best_metric, best_epoch, history = None, -1, []
    step = 0
    for epoch in range(cfg.epochs):
        order = train_idx[np.random.default_rng((cfg.seed, 2, epoch)).permutation(len(train_idx))]
        for s in range(0, len(order), cfg.batch_size):
            batch = [int(i) for i in order[s: s + cfg.batch_size]]
            prompts = [augment([db[j] for j in retrieved[i]], db[i], db, cfg.augment, key=epoch * len(db) + i)
                       for i in batch]
            lr = lr_for(step, cfg, steps_per_epoch)
            try:
                logits, *_ = encode_batch(fuser, bb, np.stack([db[i].image for i in batch]), prompts)
                report = canvas_losses(logits, targets[batch], cfg.loss)
                T.backward(report.total)
            except T.NumericError as exc:
                T.get_tape().clear()
                records.append({"step": step, "epoch": epoch, "error": str(exc)})
                _write_ndjson(metrics_path, records)
                raise TrainingAborted(step, exc) from exc
            T.sgd_step(params.values(), lr)
            records.append({"step": step, "epoch": epoch, **report.values(), "lr": lr})
            step += 1
        entry = {"epoch": epoch, "loss": records[-1]["total"]}
        last = epoch == cfg.epochs - 1
        if val_pairs and ((epoch + 1) % cfg.eval_every == 0 or last):
            metric = evaluate(cfg, ws, fuser, val_pairs, exclude_self=True).metric
            entry["val_metric"] = metric
            if best_metric is None or _better(cfg.task, metric, best_metric):
                best_metric, best_epoch = metric, epoch
                T.save_tensors(out / "best", fuser.state(), {**meta, "epoch": epoch, "val_metric": metric})
        history.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        _write_ndjson(metrics_path, records)
    T.save_tensors(out / "final", fuser.state(), {**meta, "epoch": cfg.epochs - 1})
    if best_metric is None:
        T.save_tensors(out / "best", fuser.state(), {**meta, "epoch": cfg.epochs - 1})
        best_metric = float("nan")
    if bb.checksum() != bb_sum:
        raise RuntimeError("backbone weights changed during fusion training")
    return TrainResult(out / "final", out / "best", metrics_path, best_metric, best_epoch, history)


def _write_ndjson(path: Path, records: list[dict]) -> None:
    T.atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8"))


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
