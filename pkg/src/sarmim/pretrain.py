"""Masked image modeling on feature targets, the two-step schedule and scaling sweeps.

One training step:

1. augment each image (resized crop, flip, contrast jitter, unit-mean scaling);
2. compute the target features of the augmented view (MGF by default);
3. cut targets into stride-16 units, ``D = 16 * 16 * C`` values per unit;
4. mask a random subset of units, encode the visible ones only;
5. decode with mask tokens and regress the targets of masked units (MSE).

All randomness is derived from ``(seed, epoch, sample index)``, so a resumed
run, or a run with more data-loading workers, reproduces the same numbers.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .augment import AugmentConfig, augment, sample_rng
from .backbone import EncoderConfig, MimDecoder, attention_distance, build_encoder
from .checkpoint import EncoderCheckpoint, load_module, restore_optimizer
from .errors import DegenerateInputError, ParameterError, ShapeError, TrainingDivergedError
from .features import DEFAULT_SCALES, TARGET_KINDS, mgf_batch, target_features
from .reporting import provenance, stable_hash, write_csv, write_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    """Partition of a ``G x G`` unit grid into masked and visible indices (both sorted)."""

    grid: tuple[int, int]
    masked: np.ndarray
    visible: np.ndarray
    ratio: float
    seed: object = None

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def bool_mask(self) -> np.ndarray:
        out = np.zeros(self.num_tokens, dtype=bool)
        out[self.masked] = True
        return out


def num_masked(n: int, ratio: float) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    return int(math.floor(ratio * n + 0.5))


def make_mask(grid, ratio, seed=0) -> MaskPlan:
    """Uniformly mask ``round(ratio * G*G)`` units without replacement.

    ``grid`` is ``G`` or ``(G, G)``; ``seed`` is anything accepted by
    :func:`numpy.random.default_rng` (an int, a sequence of ints, a SeedSequence).
    """
    if not 0 < ratio < 1:
        raise ParameterError(f"mask ratio must lie in (0, 1), got {ratio}")
    grid = (grid, grid) if np.isscalar(grid) else tuple(grid)
    n = int(grid[0] * grid[1])
    k = num_masked(n, ratio)
    if k == 0 or k == n:
        raise ParameterError(f"mask ratio {ratio} on {n} units leaves no masked or no visible unit")
    if isinstance(seed, (list, tuple)):
        seed = np.random.SeedSequence(list(seed))
    perm = np.random.default_rng(seed).permutation(n)
    return MaskPlan(grid, np.sort(perm[:k]), np.sort(perm[k:]), float(ratio), seed)


def patchify_target(values: np.ndarray, stride: int) -> np.ndarray:
    """``(..., H, W, C) -> (..., N, stride*stride*C)`` with units row-major."""
    *lead, h, w, c = values.shape
    if h % stride or w % stride:
        raise ShapeError(f"target size {h}x{w} is not divisible by stride {stride}")
    gh, gw = h // stride, w // stride
    x = values.reshape(*lead, gh, stride, gw, stride, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return x.transpose(order).reshape(*lead, gh * gw, stride * stride * c)


def _mask_tensor(mask, shape):
    if isinstance(mask, MaskPlan):
        m = torch.from_numpy(mask.bool_mask())
    elif isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskPlan):
        m = torch.from_numpy(np.stack([p.bool_mask() for p in mask]))
    else:
        m = torch.as_tensor(mask, dtype=torch.bool)
    if m.shape != shape:
        raise ShapeError(f"mask shape {tuple(m.shape)} does not match token shape {tuple(shape)}")
    return m


def normalize_per_patch(target: torch.Tensor, eps=1e-6) -> torch.Tensor:
    mean = target.mean(dim=-1, keepdim=True)
    var = target.var(dim=-1, unbiased=False, keepdim=True)
    return (target - mean) / torch.sqrt(var + eps)


def mim_loss(pred, target, mask, normalize_targets=False) -> torch.Tensor:
    """Mean squared error over the masked tokens only.

    ``pred`` and ``target`` are ``(N, D)`` or ``(B, N, D)``; ``mask`` is a
    :class:`MaskPlan`, a list of them, or a boolean array (True = masked).
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    m = _mask_tensor(mask, pred.shape[:-1])
    if not bool(m.any()):
        raise DegenerateInputError("the mask selects no tokens; the loss is undefined")
    if normalize_targets:
        target = normalize_per_patch(target)
    return ((pred[m] - target[m]) ** 2).mean()


def target_channels(kind, scales=DEFAULT_SCALES, params=None) -> int:
    probe = np.ones((32, 32))
    return target_features(probe, kind, scales, **dict(params or {})).num_channels


def compute_targets(views: np.ndarray, kind, scales=DEFAULT_SCALES, params=None) -> np.ndarray:
    """Target features of a ``(B, H, W)`` batch of (already augmented) views, ``(B, H, W, C)``."""
    params = dict(params or {})
    if kind == "mgf":
        return mgf_batch(views, scales, **params)
    if kind == "pixel":
        return np.asarray(views, dtype=np.float64)[..., None]
    return np.stack([target_features(v, kind, scales, **params).values for v in views])


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1.5e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_epochs: int = 5
    mask_ratio: float = 0.75
    target: str = "mgf"
    scales: tuple[int, ...] = DEFAULT_SCALES
    target_params: dict = field(default_factory=dict)
    normalize_targets: bool = False
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip: float = 0.5
    contrast: float = 0.5
    decoder_width: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    clip_grad: float | None = None
    checkpoint_every: int = 0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("betas", "scales", "crop_scale", "crop_ratio"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.base_lr > 0:
            raise ParameterError("base_lr must be positive")
        if not 0 < self.mask_ratio < 1:
            raise ParameterError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.target not in TARGET_KINDS:
            raise ParameterError(f"unknown target kind {self.target!r}; expected one of {TARGET_KINDS}")

    def augment_config(self, size) -> AugmentConfig:
        return AugmentConfig(size, self.crop_scale, self.crop_ratio, self.hflip, self.contrast)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class LossRecord:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    def rows(self):
        return [{"epoch": e, "loss": l, "lr": r} for e, l, r in zip(self.epochs, self.losses, self.lrs)]

    @property
    def final(self) -> float:
        return self.losses[-1]


def lr_at(step, total_steps, warmup_steps, base_lr, min_lr=0.0) -> float:
    """Linear warmup then half-cycle cosine decay, evaluated per optimizer step."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _param_groups(named_params, weight_decay):
    decay, no_decay = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 or name.endswith("mask_token") else decay).append((name, p))
    return decay, no_decay


def make_optimizer(named_params, lr, weight_decay, betas):
    decay, no_decay = _param_groups(list(named_params), weight_decay)
    opt = torch.optim.AdamW(
        [{"params": [p for _, p in decay], "weight_decay": weight_decay},
         {"params": [p for _, p in no_decay], "weight_decay": 0.0}],
        lr=lr, betas=tuple(betas), foreach=False)
    opt.param_names = {id(p): n for n, p in decay + no_decay}
    return opt


def as_image_array(data) -> np.ndarray:
    """``(N, H, W)`` float32 images from an array or a manifest (train + unlabeled splits)."""
    from .datakit import CorpusManifest

    if isinstance(data, (str, Path)):
        data = CorpusManifest.read(data)
    if isinstance(data, CorpusManifest):
        data = data.filter(split=("train", "unlabeled")).load_images()
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise DegenerateInputError(f"expected a non-empty (N, H, W) image stack, got shape {arr.shape}")
    return arr


class MimModel(torch.nn.Module):
    """Encoder plus decoder, with the batch preparation needed for one MIM step."""

    def __init__(self, encoder_cfg: EncoderConfig, cfg: PretrainConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(encoder_cfg, seed=cfg.seed)
        channels = target_channels(cfg.target, cfg.scales, cfg.target_params)
        self.target_dim = encoder_cfg.stride * encoder_cfg.stride * channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            self.decoder = MimDecoder(encoder_cfg.embed_dim, encoder_cfg.grid, self.target_dim,
                                      cfg.decoder_width, cfg.decoder_depth, cfg.decoder_heads,
                                      encoder_cfg.mlp_ratio, encoder_cfg.ln_eps)

    def forward(self, views: torch.Tensor, ids_keep: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(views, ids_keep), ids_keep)


def prepare_batch(images, indices, epoch, cfg: PretrainConfig, encoder_cfg: EncoderConfig, pool=None):
    """Augmented views, patchified targets and masks for the samples ``indices``."""
    aug = cfg.augment_config(encoder_cfg.input_size)

    def one(i):
        return augment(images[i], sample_rng(cfg.seed, epoch, i, 0), aug)

    views = np.stack(list(pool.map(one, indices)) if pool else [one(i) for i in indices])
    targets = patchify_target(compute_targets(views, cfg.target, cfg.scales, cfg.target_params),
                              encoder_cfg.stride)
    plans = [make_mask(encoder_cfg.grid, cfg.mask_ratio, [cfg.seed, epoch, int(i), 1]) for i in indices]
    return views, targets, plans


def epoch_order(seed, epoch, n) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 2**32 - 1])).permutation(n)


def run_config_hash(encoder_cfg: EncoderConfig, cfg: PretrainConfig) -> str:
    return stable_hash({"encoder": encoder_cfg.to_dict(), "pretrain": cfg.to_dict()})


def pretrain_run(data, encoder_cfg: EncoderConfig, cfg: PretrainConfig, init: EncoderCheckpoint | None = None,
                 resume: EncoderCheckpoint | None = None, run_dir=None, stop_after_epoch=None):
    """Train encoder + decoder by masked feature regression.

    Parameters
    ----------
    data : array ``(N, H, W)``, :class:`~sarmim.datakit.CorpusManifest` or manifest path
    init : encoder weights to start from (decoder and optimizer start fresh)
    resume : checkpoint written by an earlier call; training continues after its epoch
    run_dir : if given, receives ``config.yaml``, ``loss.csv``, ``timing.csv`` and
        ``checkpoints/epoch_NNNN.{npz,json}``
    stop_after_epoch : stop early after this many completed epochs (the schedule
        still spans ``cfg.epochs``), used to produce resumable partial runs

    Returns ``(checkpoint, LossRecord)``; the checkpoint carries encoder,
    decoder and optimizer state.
    """
    images = as_image_array(data)
    model = MimModel(encoder_cfg, cfg)
    if init is not None:
        init.load_encoder(model.encoder)
    opt = make_optimizer(model.named_parameters(), cfg.base_lr, cfg.weight_decay, cfg.betas)

    n = images.shape[0]
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(n // bs, 1)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * min(cfg.warmup_epochs, cfg.epochs)
    run_hash = run_config_hash(encoder_cfg, cfg)
    record = LossRecord()
    start_epoch, global_step = 0, 0

    if resume is not None:
        resume.check_compatible(encoder_cfg)
        if resume.meta.get("run_hash") != run_hash:
            raise ParameterError("resume checkpoint was written with a different pretrain config")
        load_module(model.encoder, resume.section("encoder"), "encoder")
        load_module(model.decoder, resume.section("decoder"), "decoder")
        restore_optimizer(opt, resume.section("optim"))
        start_epoch, global_step = resume.epoch, int(resume.meta["global_step"])
        for row in resume.meta.get("loss_history", []):
            record.epochs.append(row["epoch"])
            record.losses.append(row["loss"])
            record.lrs.append(row["lr"])
            record.wall_clock.append(0.0)

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"tool_version": __version__, "run_hash": run_hash, "encoder": encoder_cfg.to_dict(),
                    "pretrain": cfg.to_dict(), "num_images": int(n),
                    "init": init.meta.get("config_hash") if init is not None else None}
        (run_dir / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True), encoding="utf-8")

    def checkpoint(epoch):
        return EncoderCheckpoint.from_model(
            model.encoder, model.decoder, opt, epoch=epoch, global_step=global_step, run_hash=run_hash,
            pretrain=cfg.to_dict(), target=cfg.target, rng={"seed": cfg.seed, "next_epoch": epoch},
            loss_history=record.rows(), kind="pretrain")

    params = [p for p in model.parameters() if p.requires_grad]
    last_grad_norm = float("nan")
    end_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    model.train()
    try:
        for epoch in range(start_epoch, end_epoch):
            t0 = time.perf_counter()
            order = epoch_order(cfg.seed, epoch, n)
            losses = []
            lr = cfg.base_lr
            for b in range(steps_per_epoch):
                idx = order[b * bs:(b + 1) * bs]
                views, targets, plans = prepare_batch(images, idx, epoch, cfg, encoder_cfg, pool)
                lr = lr_at(global_step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                ids = torch.from_numpy(np.stack([p.visible for p in plans]))
                x = torch.from_numpy(views.astype(np.float32)).unsqueeze(1)
                pred = model(x, ids)
                loss = mim_loss(pred, torch.from_numpy(targets.astype(np.float32)), plans,
                                cfg.normalize_targets)
                if not torch.isfinite(loss):
                    diag = {"epoch": epoch, "step": global_step, "lr": lr, "grad_norm": last_grad_norm,
                            "loss": float(loss.detach())}
                    if run_dir is not None:
                        write_json(run_dir / "divergence.json", diag, provenance(run_hash, cfg.seed))
                    raise TrainingDivergedError(f"non-finite loss at step {global_step}: {diag}", diag)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                max_norm = cfg.clip_grad if cfg.clip_grad else float("inf")
                last_grad_norm = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
                opt.step()
                global_step += 1
                losses.append(float(loss.detach()))
            record.epochs.append(epoch + 1)
            record.losses.append(float(np.mean(losses)))
            record.lrs.append(lr)
            record.wall_clock.append(time.perf_counter() - t0)
            record.step_losses.extend(losses)
            log.info("epoch %d/%d loss %.5f lr %.3g", epoch + 1, cfg.epochs, record.losses[-1], lr)
            done = epoch + 1
            if run_dir is not None and ((cfg.checkpoint_every and done % cfg.checkpoint_every == 0)
                                        or done == end_epoch):
                checkpoint(done).save(run_dir / "checkpoints" / f"epoch_{done:04d}")
    finally:
        if pool is not None:
            pool.shutdown()

    final = checkpoint(record.epochs[-1] if record.epochs else start_epoch)
    if run_dir is not None:
        prov = provenance(run_hash, cfg.seed)
        write_csv(run_dir / "loss.csv", ["epoch", "loss", "lr"], record.rows(), prov)
        timing = [{"epoch": e, "wall_clock_s": w} for e, w in zip(record.epochs, record.wall_clock)]
        write_csv(run_dir / "timing.csv", ["epoch", "wall_clock_s"], timing, prov)
    return final, record


def encoder_only(checkpoint: EncoderCheckpoint) -> EncoderCheckpoint:
    """Drop decoder and optimizer state, keeping the encoder and provenance."""
    arrays = {k: v for k, v in checkpoint.arrays.items() if k.startswith("encoder/")}
    meta = {k: v for k, v in checkpoint.meta.items() if k != "loss_history"}
    return EncoderCheckpoint(arrays, meta)


ATTN_FIELDS = ["stage", "layer", "head", "mean_distance_px", "count"]


def attention_rows(report, stage):
    return [dict(row, stage=stage) for row in report.rows()]


@dataclass
class TwoStepResult:
    checkpoint: EncoderCheckpoint
    stage_a: EncoderCheckpoint
    loss_a: LossRecord | None
    loss_b: LossRecord
    attn_before: object = None
    attn_after: object = None


def two_step(stage_a, stage_b: PretrainConfig, encoder_cfg: EncoderConfig, sar_data,
             stage_a_cfg: PretrainConfig | None = None, attn_images=None, run_dir=None) -> TwoStepResult:
    """Generic-image MIM initialisation followed by SAR MIM on gradient targets.

    ``stage_a`` is either an :class:`EncoderCheckpoint` (external weights) or a
    generic-image stack/manifest, in which case a pixel-target run with
    ``stage_a_cfg`` produces the initialisation.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    loss_a = None
    if isinstance(stage_a, EncoderCheckpoint):
        ckpt_a = stage_a
    else:
        a_cfg = stage_a_cfg or replace(stage_b, target="pixel")
        ckpt_a, loss_a = pretrain_run(stage_a, encoder_cfg, a_cfg,
                                      run_dir=run_dir / "stage_a" if run_dir else None)
    ckpt_a.check_compatible(encoder_cfg)

    attn_before = attn_after = None
    if attn_images is not None:
        attn_before = attention_distance(ckpt_a.build_encoder(), attn_images)
    ckpt_b, loss_b = pretrain_run(sar_data, encoder_cfg, stage_b, init=ckpt_a,
                                  run_dir=run_dir / "stage_b" if run_dir else None)
    if attn_images is not None:
        attn_after = attention_distance(ckpt_b.build_encoder(), attn_images)
        if run_dir is not None:
            rows = attention_rows(attn_before, "before_stage_b") + attention_rows(attn_after, "after_stage_b")
            write_csv(run_dir / "attention_distance.csv", ATTN_FIELDS, rows,
                      provenance(run_config_hash(encoder_cfg, stage_b), stage_b.seed))
    return TwoStepResult(ckpt_b, ckpt_a, loss_a, loss_b, attn_before, attn_after)


SWEEP_FIELDS = ["fraction", "num_images", "dims", "epochs", "param_count", "final_loss",
                "probe_accuracy", "wall_clock_s"]


def data_subset(images: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Nested random subsets: a smaller fraction is always a prefix of a larger one."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"data fraction must lie in (0, 1], got {fraction}")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 7])).permutation(images.shape[0])
    k = max(1, int(round(fraction * images.shape[0])))
    return images[np.sort(order[:k])]


def scaling_sweep(data, probe_train, probe_test, fractions=(1.0,), dims=None, epoch_grid=None,
                  encoder_cfg: EncoderConfig = EncoderConfig(), cfg: PretrainConfig = PretrainConfig(),
                  probe_cfg=None, run_dir=None):
    """Pre-train and linear-probe one model per (fraction, dims, epochs) grid point.

    ``probe_train`` / ``probe_test`` are ``(images, labels)`` pairs (or
    manifests) for the linear probe.  Returns a list of row dicts with the
    fields in :data:`SWEEP_FIELDS`.
    """
    from .evaluation import ProbeConfig, linear_probe

    images = as_image_array(data)
    probe_cfg = probe_cfg or ProbeConfig()
    dims_list = [tuple(d) for d in dims] if dims else [encoder_cfg.dims]
    epochs_list = list(epoch_grid) if epoch_grid else [cfg.epochs]
    rows = []
    for fraction in fractions:
        subset = data_subset(images, fraction, cfg.seed)
        for d in dims_list:
            ecfg = replace(encoder_cfg, dims=d)
            for epochs in epochs_list:
                pcfg = replace(cfg, epochs=int(epochs), warmup_epochs=min(cfg.warmup_epochs, int(epochs)))
                t0 = time.perf_counter()
                ckpt, rec = pretrain_run(subset, ecfg, pcfg)
                result = linear_probe(ckpt, probe_train, probe_test, probe_cfg)
                rows.append({"fraction": float(fraction), "num_images": int(subset.shape[0]), "dims": list(d),
                             "epochs": int(epochs), "param_count": int(ckpt.meta["param_count"]),
                             "final_loss": rec.final, "probe_accuracy": result.accuracy,
                             "wall_clock_s": time.perf_counter() - t0})
                log.info("sweep point %s", rows[-1])
    if run_dir is not None:
        sweep_hash = stable_hash({"encoder": encoder_cfg.to_dict(), "pretrain": cfg.to_dict(),
                                  "fractions": list(fractions), "dims": [list(d) for d in dims_list],
                                  "epochs": epochs_list})
        write_csv(Path(run_dir) / "sweep.csv", SWEEP_FIELDS, rows, provenance(sweep_hash, cfg.seed))
    return rows
