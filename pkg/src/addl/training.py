"""Three-stage optimization of the ADDL networks on a toy corpus.

Stage 1 trains the Gabor-Net and the upsampler jointly through the
differentiable base-codec proxy, with the upsampler's GSAC layers fed the
encoder's own parameter maps. Stage 2 fits the predictor to those maps from
real decoded base layers. Stage 3 fine-tunes the upsampler on parameter maps
that went through the real quantize/dequantize path.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad, ops
from .autodiff.optim import Adam, StepDecay
from .base_codec import decode_base, encode_base, simulate_base
from .corpus import ToyCorpus, heldout_gratings
from .gabor import PARAM_RANGE, gabor_downsample
from .nets import ADDLModel, ModelConfig
from .pipeline import Mode, encode, psnr
from .side_codec import THETA, wrap_theta

Q_MIN, Q_MAX = 10, 90
LOG_FIELDS = ("stage", "step", "lr", "loss", "heldout_loss", "heldout_psnr", "seconds")


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 400
    patch: int = 64
    batch: int = 8
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_floor: float = 1.25e-5
    decay_interval: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    q_range: tuple[int, int] = (Q_MIN, Q_MAX)
    seed: int = 0
    eval_every: int = 50
    heldout_count: int = 8
    heldout_q: int = 50
    pool_size: int = 64
    corpus_dir: str | None = None
    kinds: tuple[str, ...] = ("grating", "edge", "split_grating", "noise")

    def validate(self, model_config: ModelConfig | None = None) -> "TrainConfig":
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        lo, hi = self.q_range
        if not 1 <= lo <= hi <= 100:
            raise ValueError(f"quality range {self.q_range} outside [1, 100]")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        mc = model_config or ModelConfig()
        factor = math.lcm(mc.gabor.factor, 2 * mc.predict.factor)
        if self.patch % factor:
            raise ValueError(f"patch size {self.patch} must be divisible by {factor}")
        return self

    @property
    def interval(self) -> int:
        return self.decay_interval or max(500, self.steps // 10)

    def schedule(self) -> StepDecay:
        return StepDecay(self.lr, self.lr_decay, self.interval, self.lr_floor)

    def corpus(self) -> ToyCorpus:
        return ToyCorpus(self.kinds, directory=self.corpus_dir)


def sample_quality(rng: np.random.Generator, q_range: tuple[int, int] = (Q_MIN, Q_MAX)) -> int:
    """Uniform integer quality factor, both bounds inclusive."""
    return int(rng.integers(q_range[0], q_range[1] + 1))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in LOG_FIELDS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def column(self, name: str) -> list[float]:
        return [float(r[name]) for r in self.rows if r[name] != ""]


def _assert_finite(params: dict[str, Tensor]) -> None:
    bad = [k for k, p in params.items() if not np.isfinite(p.data).all()]
    if bad:
        raise ad.NonFiniteError(f"non-finite weights after update: {bad[:4]}")


def _subset(model: ADDLModel, prefix: str) -> dict[str, Tensor]:
    return {k: v for k, v in model.params().items() if k.startswith(prefix)}


def _stage_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.stage]))


def _heldout(cfg: TrainConfig) -> np.ndarray:
    imgs = heldout_gratings(cfg.heldout_count, cfg.patch, seed=10_000 + cfg.seed)
    return np.stack(imgs)[:, None]


def _run(cfg: TrainConfig, params: dict[str, Tensor], loss_fn: Callable[[np.random.Generator], Tensor],
         evaluate: Callable[[], tuple[float, float]], log: TrainLog) -> TrainLog:
    rng = _stage_rng(cfg)
    opt = Adam(params, cfg.schedule(), (cfg.beta1, cfg.beta2))
    start = time.perf_counter()
    h_loss, h_psnr = evaluate()
    log.add(stage=cfg.stage, step=0, lr=cfg.lr, loss="", heldout_loss=h_loss, heldout_psnr=h_psnr, seconds=0.0)
    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        loss = loss_fn(rng)
        if not np.isfinite(loss.data).all():
            raise ad.NonFiniteError(f"stage {cfg.stage} loss non-finite at step {step}")
        loss.backward()
        lr = opt.step()
        _assert_finite(params)
        row = dict(stage=cfg.stage, step=step, lr=lr, loss=float(loss.data))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            h_loss, h_psnr = evaluate()
            row.update(heldout_loss=h_loss, heldout_psnr=h_psnr)
        row["seconds"] = round(time.perf_counter() - start, 3)
        log.add(**row)
    opt.zero_grad()
    return log


# ------------------------------------------------------------------ stage 1


def stage1_forward(model: ADDLModel, x: Tensor, qs) -> Tensor:
    p = model.gabor_net(x)
    y = gabor_downsample(x, p, model.kernel_support)
    yhat = simulate_base(y, qs)
    return model.upsampler(yhat, p)


def stage1_train(cfg: TrainConfig, model: ADDLModel | None = None, log: TrainLog | None = None):
    cfg = TrainConfig(**{**asdict(cfg), "stage": 1}).validate()
    model = model or ADDLModel(seed=cfg.seed)
    corpus = cfg.corpus()
    params = {**_subset(model, "gabor_net/"), **_subset(model, "upsampler/")}
    heldout = Tensor(_heldout(cfg))

    def loss_fn(rng):
        x = Tensor(corpus.batch(rng, cfg.batch, cfg.patch))
        qs = np.array([sample_quality(rng, cfg.q_range) for _ in range(cfg.batch)], dtype=np.float64)
        return ops.l1_loss(stage1_forward(model, x, qs), x)

    def evaluate():
        with no_grad():
            out = stage1_forward(model, heldout, float(cfg.heldout_q))
        return _l1(out.data, heldout.data), _mean_psnr(out.data, heldout.data)

    return model, _run(cfg, params, loss_fn, evaluate, log or TrainLog())


# ------------------------------------------------------------------ stage 2


def _analyze_batch(model: ADDLModel, x: np.ndarray):
    with no_grad():
        t = Tensor(x)
        p = model.gabor_net(t)
        y = gabor_downsample(t, p, model.kernel_support)
    return p.data, y.data


def _real_base(y: np.ndarray, qs) -> np.ndarray:
    return np.stack([decode_base(encode_base(y[i, 0], int(q)))[None] for i, q in enumerate(qs)])


def prediction_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Range-normalized L1 between maps; theta compared modulo pi."""
    adj = target.copy()
    adj[:, THETA] = pred.data[:, THETA] - wrap_theta(pred.data[:, THETA] - target[:, THETA])
    w = Tensor((1.0 / PARAM_RANGE).reshape(1, 5, 1, 1))
    return ops.l1_loss(pred * w, Tensor(adj) * w)


def prediction_error(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred - target
    d[:, THETA] = wrap_theta(d[:, THETA])
    return float(np.mean(np.abs(d) / PARAM_RANGE.reshape(1, 5, 1, 1)))


def stage2_train(cfg: TrainConfig, model: ADDLModel, log: TrainLog | None = None):
    cfg = TrainConfig(**{**asdict(cfg), "stage": 2}).validate()
    corpus = cfg.corpus()
    frozen = (model.digest("gabor_net/"), model.digest("upsampler/"))
    params = _subset(model, "predict_net/")
    hx = _heldout(cfg)
    hp, hy = _analyze_batch(model, hx)
    hyhat = _real_base(hy, [cfg.heldout_q] * len(hx))

    def loss_fn(rng):
        x = corpus.batch(rng, cfg.batch, cfg.patch)
        qs = [sample_quality(rng, cfg.q_range) for _ in range(cfg.batch)]
        target, y = _analyze_batch(model, x)
        yhat = Tensor(_real_base(y, qs))
        return prediction_loss(model.predict_net(yhat), target)

    def evaluate():
        with no_grad():
            pred = model.predict_net(Tensor(hyhat))
            out = model.upsampler(Tensor(hyhat), pred)
        return prediction_error(pred.data, hp), _mean_psnr(out.data, hx)

    log = _run(cfg, params, loss_fn, evaluate, log or TrainLog())
    if (model.digest("gabor_net/"), model.digest("upsampler/")) != frozen:
        raise AssertionError("stage 2 modified frozen weights")
    return model, log


def constant_midpoint_error(model: ADDLModel, cfg: TrainConfig) -> tuple[float, float]:
    """(predictor error, mid-range constant error) on the held-out set."""
    from .gabor import PARAM_MID

    hx = _heldout(cfg)
    hp, hy = _analyze_batch(model, hx)
    hyhat = _real_base(hy, [cfg.heldout_q] * len(hx))
    with no_grad():
        pred = model.predict_net(Tensor(hyhat)).data
    mid = np.broadcast_to(PARAM_MID.reshape(1, 5, 1, 1), hp.shape).copy()
    return prediction_error(pred, hp), prediction_error(mid, hp)


# ------------------------------------------------------------------ stage 3


@dataclass
class PoolSample:
    x: np.ndarray
    yhat: np.ndarray
    params: np.ndarray  # encoder's I_G
    rebuilt: np.ndarray  # receiver's reconstructed parameter maps


def build_pool(model: ADDLModel, images, qualities, budget_ratio: float = 0.20) -> list[PoolSample]:
    pool = []
    for x, q in zip(images, qualities):
        r = encode(x, int(q), model, budget_ratio, Mode.FULL)
        pool.append(PoolSample(x, r.base, r.params.data, r.reconstructed_params.data))
    return pool


def stage3_forward(model: ADDLModel, batch: list[PoolSample]) -> Tensor:
    yhat = Tensor(np.stack([s.yhat[None] for s in batch]))
    exact = Tensor(np.stack([s.params for s in batch]))
    # identity gradient across the residue quantizer
    rebuilt = ops.straight_through(exact, np.stack([s.rebuilt for s in batch]))
    return model.upsampler(yhat, rebuilt)


def stage3_train(cfg: TrainConfig, model: ADDLModel, log: TrainLog | None = None):
    cfg = TrainConfig(**{**asdict(cfg), "stage": 3}).validate()
    frozen = (model.digest("gabor_net/"), model.digest("predict_net/"))
    corpus = cfg.corpus()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 1]))
    images = [corpus.sample(rng, cfg.patch) for _ in range(cfg.pool_size)]
    pool = build_pool(model, images, [sample_quality(rng, cfg.q_range) for _ in images])
    hx = _heldout(cfg)
    hpool = build_pool(model, list(hx[:, 0]), [cfg.heldout_q] * len(hx))
    params = _subset(model, "upsampler/")

    def loss_fn(rng):
        idx = rng.choice(len(pool), size=min(cfg.batch, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        x = Tensor(np.stack([s.x[None] for s in batch]))
        return ops.l1_loss(stage3_forward(model, batch), x)

    def evaluate():
        with no_grad():
            out = stage3_forward(model, hpool)
        return _l1(out.data, hx), _mean_psnr(out.data, hx)

    log = _run(cfg, params, loss_fn, evaluate, log or TrainLog())
    if (model.digest("gabor_net/"), model.digest("predict_net/")) != frozen:
        raise AssertionError("stage 3 modified frozen weights")
    return model, log


# ------------------------------------------------------------------ helpers


def _l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(a - b)))


def _mean_psnr(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([psnr(a[i, 0], b[i, 0]) for i in range(a.shape[0])]))


@dataclass
class Recipe:
    """Seeded three-stage schedule used to produce reference weights."""

    seed: int = 0
    stage1: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage=1, steps=1200, lr=1e-3, eval_every=100))
    stage2: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage=2, steps=400, lr=1e-3, eval_every=100))
    stage3: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage=3, steps=400, lr=1e-3, eval_every=100, pool_size=128))

    def configs(self):
        for c in (self.stage1, self.stage2, self.stage3):
            yield TrainConfig(**{**asdict(c), "seed": self.seed})


def train_all(recipe: Recipe | None = None, progress: Callable[[str], None] | None = None):
    recipe = recipe or Recipe()
    c1, c2, c3 = recipe.configs()
    log = TrainLog()
    model = ADDLModel(seed=recipe.seed)
    for fn, cfg in ((stage1_train, c1), (stage2_train, c2), (stage3_train, c3)):
        t0 = time.perf_counter()
        model, log = fn(cfg, model, log)
        if progress:
            last = log.rows[-1]
            progress(f"stage {cfg.stage}: {cfg.steps} steps in {time.perf_counter() - t0:.1f}s, "
                     f"heldout psnr {last['heldout_psnr']}")
    return model, log


def recipe_key(recipe: Recipe) -> str:
    """Short hash of everything that determines the trained weights."""
    from . import __version__

    blob = json.dumps({"recipe": asdict(recipe), "config": ModelConfig().to_dict(), "version": __version__},
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_or_train(recipe: Recipe | None = None, cache_dir: str | Path | None = None, retrain: bool = False,
                  progress: Callable[[str], None] | None = None) -> tuple[ADDLModel, TrainLog, bool]:
    """Weights for ``recipe``, reused from ``cache_dir`` when a matching run exists.

    Returns (model, log, trained_now). Cache entries are keyed by
    :func:`recipe_key`; the log is kept next to the weights as CSV.
    """
    from .autodiff.checkpoint import load

    recipe = recipe or Recipe()
    key = recipe_key(recipe)
    weights = log_path = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        weights, log_path = cache / f"addl-{key}.bin", cache / f"addl-{key}.csv"
        if not retrain and weights.exists() and log_path.exists():
            model = ADDLModel.from_weights(load(weights))
            with open(log_path, newline="") as f:
                log = TrainLog([dict(r) for r in csv.DictReader(f)])
            return model, log, False
    model, log = train_all(recipe, progress)
    if weights is not None:
        weights.parent.mkdir(parents=True, exist_ok=True)
        tmp = weights.with_suffix(".tmp")
        tmp.write_bytes(model.to_bytes())
        tmp.replace(weights)
        log.write(log_path)
    return model, log, True
