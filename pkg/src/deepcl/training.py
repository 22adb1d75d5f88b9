"""AdamW + polynomial decay training loop for the joint metric/segmentation objective."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import network as N
from . import tensor as T
from .synthdata import ChangeSample
from .tensor import ContractError, NonFiniteError, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "lr", "loss_metric", "loss_ce", "loss_dice",
               "val_f1_seg", "val_f1_metric"]

# ablation rows: (metric loss, decoder); row 6 is the full model
ABLATIONS = {
    1: ("con", "none"),
    2: ("hsac", "none"),
    3: (None, "simple"),
    4: (None, "metric"),
    5: ("con", "metric"),
    6: ("hsac", "metric"),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 0.01
    poly_power: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    use_hsac: bool = True
    use_con: bool = False
    use_seg: bool = True
    use_metric_induction: bool = True
    val_fraction: float = 0.2
    augment: bool = True
    stage_channels: tuple[int, ...] = (8, 16, 24, 32, 48)
    embed_dim: int = 16

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = L.LossConfig(**self.loss)
        self.betas = tuple(self.betas)
        self.stage_channels = tuple(self.stage_channels)
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.poly_power <= 0:
            raise ValueError(f"poly_power must be > 0, got {self.poly_power}")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError(f"betas must lie in (0, 1), got {self.betas}")
        if self.use_hsac and self.use_con:
            raise ValueError("use_hsac and use_con are mutually exclusive")
        if not (self.use_hsac or self.use_con or self.use_seg):
            raise ValueError("no loss selected: enable a metric loss or segmentation")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def decoder(self) -> N.DecoderKind:
        if not self.use_seg:
            return "none"
        return "metric" if self.use_metric_induction else "simple"

    @property
    def metric_loss(self) -> str | None:
        return "hsac" if self.use_hsac else "con" if self.use_con else None

    @classmethod
    def for_ablation(cls, row: int, **kw) -> "TrainConfig":
        metric, decoder = ABLATIONS[row]
        return cls(use_hsac=metric == "hsac", use_con=metric == "con",
                   use_seg=decoder != "none", use_metric_induction=decoder == "metric", **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def poly_lr(it: int, max_iter: int, lr0: float, power: float) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * max(0.0, 1 - it / max_iter) ** power


def uses_weight_decay(name: str) -> bool:
    return not name.endswith(".bias")


def frozen_names(cfg: TrainConfig, params: N.ModelParams) -> set[str]:
    """Parameters with no path to the loss under ``cfg``.

    Only the simple-decoder, segmentation-only ablation has one: the
    projection head feeds neither a metric loss nor the decoder.
    """
    if cfg.metric_loss is None and cfg.decoder == "simple":
        return {n for n in params.names() if n.startswith("proj.")}
    return set()


def adamw_step(params: N.ModelParams, state: OptimState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place on every ``requires_grad`` tensor."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.tensors.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if uses_weight_decay(name):
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


def apply_transform(s: ChangeSample, k: int, flip: bool) -> ChangeSample:
    """Rotate by k*90 degrees, then optionally mirror left-right; same op on all three arrays."""

    def op(a):
        a = np.rot90(a, k, axes=(1, 2))
        return np.ascontiguousarray(a[:, :, ::-1] if flip else a)

    return ChangeSample(op(s.img_t1), op(s.img_t2), op(s.mask), dict(s.meta))


def augment(s: ChangeSample, rng: np.random.Generator) -> ChangeSample:
    k, flip = divmod(int(rng.integers(8)), 2)
    return apply_transform(s, k, bool(flip))


def split_by_seed(samples: Sequence[ChangeSample], val_fraction: float = 0.2):
    """Deterministic train/val partition keyed on each sample's seed (or index)."""
    if val_fraction <= 0:
        return list(samples), []
    period = max(2, round(1 / val_fraction))
    train, val = [], []
    for i, s in enumerate(samples):
        key = s.meta.get("seed", i) if s.meta else i
        (val if int(key) % period == period - 1 else train).append(s)
    return train, val


def stack(samples: Sequence[ChangeSample], dtype=np.float32):
    a = np.stack([s.img_t1 for s in samples]).astype(dtype, copy=False)
    b = np.stack([s.img_t2 for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.mask for s in samples]).astype(dtype, copy=False)
    return a, b, y


@dataclass
class Predictions:
    similarity: np.ndarray  # [N,1,h,w] cosine similarity at embedding resolution
    logits: np.ndarray | None  # [N,1,H,W]

    @property
    def distance(self) -> np.ndarray:
        """1 - cos, nearest-upsampled to input resolution."""
        d = 1.0 - self.similarity
        f = 2
        return d.repeat(f, axis=2).repeat(f, axis=3)


def predict(params: N.ModelParams, samples: Sequence[ChangeSample], batch_size: int = 16) -> Predictions:
    """Tape-free forward pass over ``samples``."""
    sims, logits = [], []
    dtype = next(iter(params.tensors.values())).dtype
    for i in range(0, len(samples), batch_size):
        a, b, _ = stack(samples[i:i + batch_size], dtype)
        out = N.forward(Tensor(a), Tensor(b), params)
        sims.append(out.similarity().data)
        if out.logits is not None:
            logits.append(out.logits.data)
    return Predictions(np.concatenate(sims), np.concatenate(logits) if logits else None)


@dataclass
class TrainResult:
    params: N.ModelParams
    log: list[dict]
    n_train: int
    n_val: int
    seconds: float


def _loss_terms(cfg: TrainConfig, out: N.ForwardOutput, y: np.ndarray):
    metric = ce = dice = None
    if cfg.metric_loss is not None:
        y_small = T.downsample_nearest(y, 2)
        if cfg.metric_loss == "hsac":
            metric = L.hsac_loss(out.u1, out.u2, y_small, cfg.loss.tau)
        else:
            metric = L.contrastive_loss(out.u1, out.u2, y_small, cfg.loss)
    if cfg.use_seg:
        ce = L.cross_entropy_loss(out.logits, y)
        dice = L.dice_loss(out.logits, y)
    return metric, ce, dice


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"]] + [_fmt(r[c]) for c in LOG_COLUMNS[2:]])


def train(cfg: TrainConfig, dataset: Sequence[ChangeSample], out_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise a fresh model on ``dataset``; returns final parameters and per-epoch log."""
    from .evaluation import confusion, metrics, threshold_sweep

    if not dataset:
        raise ValueError("training dataset is empty")
    t0 = time.perf_counter()
    train_set, val_set = split_by_seed(dataset, cfg.val_fraction)
    size = int(train_set[0].img_t1.shape[-1])
    model_cfg = N.EncoderConfig(stage_channels=cfg.stage_channels, embed_dim=cfg.embed_dim,
                                input_size=size, decoder=cfg.decoder)
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = N.init_params(model_cfg, int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(data_seq)
    state = OptimState()
    frozen = frozen_names(cfg, params)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    rows: list[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = {"metric": 0.0, "ce": 0.0, "dice": 0.0}
        lr = cfg.lr0
        for bi in range(steps_per_epoch):
            batch = [train_set[j] for j in order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rng) for s in batch]
            a, b, y = stack(batch)
            for name, p in params.tensors.items():
                p.grad = None
                p.requires_grad = name not in frozen
            try:
                with T.Graph() as g:
                    out = N.forward(Tensor(a), Tensor(b), params)
                    terms = _loss_terms(cfg, out, y)
                    for name, t in zip(("metric", "ce", "dice"), terms):
                        if t is None:
                            continue
                        val = float(t.data)
                        if not math.isfinite(val):
                            raise TrainingError(f"step {step}: loss component {name} is {val}")
                        sums[name] += val
                    loss = L.total_loss(*terms, cfg.loss)
            except NonFiniteError as exc:
                raise TrainingError(f"step {step}: non-finite value in forward pass ({exc})") from exc
            try:
                T.backward(loss, g)
            except NonFiniteError as exc:
                raise TrainingError(f"step {step}: non-finite gradient ({exc})") from exc
            lr = poly_lr(step, max_iter, cfg.lr0, cfg.poly_power)
            adamw_step(params, state, lr, cfg)
            step += 1
        for p in params.tensors.values():
            p.grad = None
            p.requires_grad = False

        row = {"epoch": epoch, "step": step, "lr": lr}
        for name, key in (("metric", "loss_metric"), ("ce", "loss_ce"), ("dice", "loss_dice")):
            active = {"metric": cfg.metric_loss is not None}.get(name, cfg.use_seg)
            row[key] = sums[name] / steps_per_epoch if active else None
        row["val_f1_seg"] = row["val_f1_metric"] = None
        if val_set:
            pred = predict(params, val_set)
            gts = np.stack([s.mask for s in val_set])
            # oracle threshold on the validation split; a monitoring signal only
            _, reports = threshold_sweep(pred.distance, gts)
            row["val_f1_metric"] = max(r.f1 for r in reports)
            if pred.logits is not None:
                row["val_f1_seg"] = metrics(confusion(N.predict_seg(pred.logits), gts)).f1
        rows.append(row)
        log.info("epoch %d/%d step %d lr %.2e metric %s ce %s dice %s val_f1 seg %s metric %s",
                 epoch, cfg.epochs, step, lr, _fmt(row["loss_metric"]), _fmt(row["loss_ce"]),
                 _fmt(row["loss_dice"]), _fmt(row["val_f1_seg"]), _fmt(row["val_f1_metric"]))
        if on_epoch:
            on_epoch(row)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        N.save_checkpoint(params, out / "model.dclm")
        write_log(rows, out / "train_log.csv")
    return TrainResult(params, rows, len(train_set), len(val_set), time.perf_counter() - t0)
