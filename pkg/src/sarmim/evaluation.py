"""Linear probing, N-way K-shot episodes and partial fine-tuning on a frozen encoder."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import unit_mean
from .backbone import Encoder
from .checkpoint import EncoderCheckpoint
from .errors import DegenerateInputError, ParameterError, ShapeError


@dataclass(frozen=True)
class ProbeConfig:
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    batch_size: int = 25
    epochs: int = 30
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("probe epochs and batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class FewShotTask:
    n_way: int
    k_shot: int
    episodes: int = 10
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float
    per_class_accuracy: list
    confusion: np.ndarray
    classes: list = field(default_factory=list)

    def to_dict(self):
        return {"accuracy": self.accuracy, "per_class_accuracy": self.per_class_accuracy,
                "confusion": self.confusion.tolist(), "classes": list(self.classes)}


@dataclass
class FewShotResult:
    mean: float
    std: float
    accuracies: list
    episodes: list

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "accuracies": self.accuracies,
                "episodes": [dict(e) for e in self.episodes]}


class ProbeHead(nn.Module):
    """Feature normalisation (running statistics, no affine) followed by a linear classifier."""

    def __init__(self, dim, num_classes):
        super().__init__()
        self.norm = nn.BatchNorm1d(dim, affine=False, eps=1e-6)
        self.fc = nn.Linear(dim, num_classes)
        nn.init.normal_(self.fc.weight, std=0.01)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        return self.fc(self.norm(x))


def as_encoder(model) -> Encoder:
    if isinstance(model, Encoder):
        return model
    if isinstance(model, (str, Path)):
        model = EncoderCheckpoint.load(model)
    if isinstance(model, EncoderCheckpoint):
        return model.build_encoder()
    raise TypeError(f"expected an Encoder, EncoderCheckpoint or checkpoint path, got {type(model).__name__}")


def labeled_split(data, split=None, classes=None):
    """``(images, labels, class_names)`` from a manifest or an ``(images, labels)`` pair."""
    from .datakit import CorpusManifest

    if isinstance(data, (str, Path)):
        data = CorpusManifest.read(data)
    if isinstance(data, CorpusManifest):
        m = data.filter(split=split) if split else data
        classes = list(classes) if classes is not None else m.classes()
        return m.load_images(), m.labels(classes), classes
    images, labels = data[0], data[1]
    labels = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = list(data[2]) if len(data) > 2 else [str(c) for c in range(int(labels.max()) + 1)]
    return np.asarray(images), labels, list(classes)


def encoder_inputs(images, cfg) -> torch.Tensor:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"images are {x.shape[-2]}x{x.shape[-1]} but the encoder expects "
                         f"{cfg.input_size}x{cfg.input_size}")
    return torch.from_numpy(unit_mean(x).astype(np.float32)).unsqueeze(1)


@torch.no_grad()
def extract_embeddings(model, images, batch_size=128) -> np.ndarray:
    """Mean-pooled final-stage tokens, ``(N, dim)``, for ``(N, H, W)`` amplitude images."""
    encoder = as_encoder(model)
    x = encoder_inputs(images, encoder.cfg)
    was_training = encoder.training
    encoder.eval()
    out = [encoder(x[i:i + batch_size]).mean(dim=1) for i in range(0, x.shape[0], batch_size)]
    encoder.train(was_training)
    return torch.cat(out).numpy()


def _lr_schedule(step, steps_per_epoch, cfg: ProbeConfig):
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.warmup_lr
    total = cfg.epochs * steps_per_epoch
    progress = min((step - warm) / max(total - warm, 1), 1.0)
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def _train_head(forward_features, n_train, labels, head, extra_params, cfg: ProbeConfig, seed):
    """Shared optimisation loop; ``forward_features(idx)`` returns features for a batch of indices."""
    params = list(head.parameters()) + list(extra_params)
    opt = torch.optim.AdamW(params, lr=cfg.base_lr, betas=cfg.betas, weight_decay=cfg.weight_decay,
                            foreach=False)
    gen = torch.Generator().manual_seed(int(seed))
    y = torch.as_tensor(labels, dtype=torch.long)
    bs = min(cfg.batch_size, n_train)
    steps_per_epoch = math.ceil(n_train / bs)
    loss_fn = nn.CrossEntropyLoss()
    step = 0
    head.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(n_train, generator=gen)
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            if idx.numel() < 2:
                continue  # batch statistics need two samples
            lr = _lr_schedule(step, steps_per_epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = loss_fn(head(forward_features(idx)), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
    head.eval()
    return head


def _new_head(dim, num_classes, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return ProbeHead(dim, num_classes)


def _score(pred: np.ndarray, labels: np.ndarray, num_classes: int, classes) -> ProbeResult:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    rows = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / rows[i]) if rows[i] else float("nan") for i in range(num_classes)]
    return ProbeResult(float(np.mean(pred == labels)), per_class, confusion, list(classes))


def _check_classes(labels):
    if np.unique(labels).size < 2:
        raise DegenerateInputError("the training set must contain at least two classes")


def probe_embeddings(train_x, train_y, test_x, test_y, cfg: ProbeConfig = ProbeConfig(), num_classes=None,
                     classes=None, seed=None) -> ProbeResult:
    """Fit the normalisation + linear head on fixed features and score ``test``."""
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    _check_classes(train_y)
    num_classes = num_classes or int(max(train_y.max(), test_y.max()) + 1)
    seed = cfg.seed if seed is None else seed
    xtr = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    head = _new_head(xtr.shape[1], num_classes, seed)
    _train_head(lambda idx: xtr[idx], xtr.shape[0], train_y, head, [], cfg, seed)
    with torch.no_grad():
        pred = head(torch.as_tensor(np.asarray(test_x), dtype=torch.float32)).argmax(dim=1).numpy()
    return _score(pred, test_y, num_classes, classes or [str(i) for i in range(num_classes)])


def linear_probe(model, train, test, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Top-1 accuracy of a linear probe on a frozen encoder.

    ``train``/``test`` are manifests (train/test splits are selected) or
    ``(images, labels)`` pairs.
    """
    encoder = as_encoder(model)
    tr_img, tr_y, classes = labeled_split(train, "train")
    te_img, te_y, _ = labeled_split(test, "test", classes)
    _check_classes(tr_y)
    return probe_embeddings(extract_embeddings(encoder, tr_img), tr_y, extract_embeddings(encoder, te_img), te_y,
                            cfg, num_classes=len(classes), classes=classes)


def episode_rng(seed, episode):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode), 3]))


def sample_episode(train_y, n_way, k_shot, num_classes, seed, episode):
    """Class subset and sorted support indices for one episode."""
    rng = episode_rng(seed, episode)
    if n_way > num_classes:
        raise ParameterError(f"{n_way}-way task needs {n_way} classes, only {num_classes} available")
    chosen = np.sort(rng.choice(num_classes, size=n_way, replace=False))
    support = []
    for c in chosen:
        pool = np.flatnonzero(train_y == c)
        if k_shot > pool.size:
            raise ParameterError(f"{k_shot}-shot sampling impossible: class {c} has {pool.size} training items")
        support.append(rng.choice(pool, size=k_shot, replace=False))
    return chosen, np.sort(np.concatenate(support))


def fewshot_from_embeddings(train_x, train_y, test_x, test_y, task: FewShotTask, cfg: ProbeConfig = ProbeConfig(),
                            num_classes=None) -> FewShotResult:
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    num_classes = num_classes or int(max(train_y.max(), test_y.max()) + 1)
    accs, episodes = [], []
    for e in range(task.episodes):
        chosen, support = sample_episode(train_y, task.n_way, task.k_shot, num_classes, task.seed, e)
        remap = {int(c): i for i, c in enumerate(chosen)}
        query = np.flatnonzero(np.isin(test_y, chosen))
        ytr = np.array([remap[int(c)] for c in train_y[support]])
        yte = np.array([remap[int(c)] for c in test_y[query]])
        res = probe_embeddings(train_x[support], ytr, test_x[query], yte, cfg, num_classes=task.n_way,
                               seed=cfg.seed + e)
        accs.append(res.accuracy)
        episodes.append({"episode": e, "classes": [int(c) for c in chosen], "accuracy": res.accuracy,
                         "support": int(support.size), "query": int(query.size),
                         "per_class": {int(c): res.per_class_accuracy[i] for i, c in enumerate(chosen)}})
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return FewShotResult(float(np.mean(accs)), std, accs, episodes)


def fewshot_eval(model, train, test, task: FewShotTask, cfg: ProbeConfig = ProbeConfig()) -> FewShotResult:
    """Mean and sample standard deviation of probe accuracy over ``task.episodes`` episodes.

    Episode ``e`` draws its classes and support set from
    ``SeedSequence([task.seed, e])`` and trains its head with seed
    ``cfg.seed + e``; queries are the full test split of the drawn classes.
    """
    encoder = as_encoder(model)
    tr_img, tr_y, classes = labeled_split(train, "train")
    te_img, te_y, _ = labeled_split(test, "test", classes)
    return fewshot_from_embeddings(extract_embeddings(encoder, tr_img), tr_y, extract_embeddings(encoder, te_img),
                                   te_y, task, cfg, num_classes=len(classes))


@dataclass
class FinetuneResult:
    result: ProbeResult
    encoder: Encoder
    k_blocks: int


def partial_finetune(model, k_blocks, train, test, cfg: ProbeConfig = ProbeConfig()) -> FinetuneResult:
    """Train the probe head together with the last ``k_blocks`` attention blocks.

    The input encoder is never modified; the tuned copy is returned.
    ``k_blocks=0`` is exactly :func:`linear_probe`.
    """
    encoder = as_encoder(model)
    depth = len(encoder.blocks)
    if not 0 <= k_blocks <= depth:
        raise ParameterError(f"k_blocks must lie in [0, {depth}], got {k_blocks}")
    if k_blocks == 0:
        return FinetuneResult(linear_probe(encoder, train, test, cfg), encoder, 0)

    tuned = copy.deepcopy(encoder)
    tuned.eval()
    for p in tuned.parameters():
        p.requires_grad_(False)
    tail = tuned.blocks[depth - k_blocks:]
    for p in tail.parameters():
        p.requires_grad_(True)

    tr_img, tr_y, classes = labeled_split(train, "train")
    te_img, te_y, _ = labeled_split(test, "test", classes)
    _check_classes(tr_y)

    @torch.no_grad()
    def frozen_prefix(images):
        x = encoder_inputs(images, tuned.cfg)
        out = []
        for i in range(0, x.shape[0], 128):
            units = tuned.units(x[i:i + 128])
            ids = tuned.default_ids(units.shape[0])
            out.append(tuned.global_stage(tuned.local_stages(units), ids, upto=depth - k_blocks))
        return torch.cat(out)

    def tail_features(tokens):
        for blk in tail:
            tokens = blk(tokens)
        return tuned.norm(tokens).mean(dim=1)

    prefix_tr = frozen_prefix(tr_img)
    head = _new_head(tuned.cfg.embed_dim, len(classes), cfg.seed)
    _train_head(lambda idx: tail_features(prefix_tr[idx]), prefix_tr.shape[0], tr_y, head, tail.parameters(),
                cfg, cfg.seed)
    for p in tail.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        pred = head(tail_features(frozen_prefix(te_img))).argmax(dim=1).numpy()
    return FinetuneResult(_score(pred, te_y, len(classes), classes), tuned, k_blocks)


def encoder_checksum(model) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(as_encoder(model).state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
