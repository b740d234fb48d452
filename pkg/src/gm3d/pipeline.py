"""Training orchestration: knowledge-teacher bootstrap, the main loop,
optimizer, checkpointing, and metrics.

Every source of randomness is keyed statelessly from (run seed, purpose,
epoch, sample id), so batch composition cannot reorder per-sample draws and
a checkpoint resume replays the exact run it interrupted. One step:

    1. momentum teacher scores the complete patch set
    2. curriculum mask built from those scores
    3. student forward on the visible patches
    4. frozen knowledge teacher encodes the complete patch set
    5. ranking / point / feature losses, weighted total
    6. backward + AdamW step on the student only
    7. momentum update of the teacher
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, augment, build_dataset
from .diffcore import Value, zero_grads
from .geometry import PointCloud, fps, knn_group, normalize_patches
from .losses import LossWeights, PerPatchLoss, loss_gc, loss_rec_f, loss_rec_p, total_loss
from .masking import CurriculumSchedule, gc_guided_mask, mask_count, n_sel, random_mask
from .model import (
    ModelConfig,
    ParamTree,
    TriModelState,
    copy_tree,
    ema_update,
    encoder_features,
    freeze_tree,
    init_params,
    student_forward,
    teacher_scores,
    tree_digest,
)
from .stats import spearman

__all__ = [
    "TrainConfig",
    "StepMetrics",
    "Checkpoint",
    "AdamWState",
    "PipelineError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "sample_rng",
    "cosine_lr",
    "adamw_step",
    "train_step",
    "train_run",
    "bootstrap_knowledge_teacher",
    "save_checkpoint",
    "load_checkpoint",
    "metrics_to_csv",
    "gc_rank_correlation",
    "METRICS_HEADER",
]

_MAGIC = b"GM3D"
_FORMAT_VERSION = 1
_ADAM_EPS = 1e-8

# rng stream domains
_DOM_SAMPLE = 0
_DOM_SHUFFLE = 1
_DOM_INIT = 2

METRICS_HEADER = "epoch,iter,l_gc,l_rec_p,l_rec_f,l_total,n_sel,lr,rank_corr"


class PipelineError(RuntimeError):
    pass


class CheckpointVersionError(ValueError):
    pass


class CheckpointTruncatedError(ValueError):
    pass


class CheckpointShapeError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    cosine_decay: bool = True
    ema_momentum: float = 0.999
    augment: bool = True
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    bootstrap_epochs: int = 15
    kt_checkpoint: str | None = None  # overrides bootstrapping when set
    drc_pair_normalize: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    curriculum: CurriculumSchedule = field(default_factory=lambda: CurriculumSchedule(e_max=60))
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "train_per_class": 200, "test_per_class": 50,
        "n_points": 128, "seed": 0, "jitter": 0.01,
    })

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.base_lr, self.beta1, self.beta2) <= 0:
            raise ValueError("learning rate and optimizer moments must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        """Build from a JSON document, rejecting unknown keys at every level."""
        doc = dict(doc)
        nested = {
            "loss_weights": LossWeights,
            "curriculum": CurriculumSchedule,
            "model": ModelConfig,
        }
        kwargs = {}
        known = set(cls.__dataclass_fields__)
        for key, value in doc.items():
            if key not in known:
                raise ValueError(f"unknown config key '{key}'")
            if key in nested:
                sub_cls = nested[key]
                sub_known = set(sub_cls.__dataclass_fields__)
                extra = set(value) - sub_known
                if extra:
                    raise ValueError(f"unknown config key '{key}.{sorted(extra)[0]}'")
                kwargs[key] = sub_cls(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepMetrics:
    epoch: int
    iteration: int
    l_gc: float
    l_rec_p: float
    l_rec_f: float
    l_total: float
    n_sel: int
    lr: float
    rank_corr: float

    def __post_init__(self):
        for name in ("l_gc", "l_rec_p", "l_rec_f", "l_total"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise PipelineError(f"non-finite or negative loss term '{name}': {v}")

    def csv_row(self) -> str:
        return ",".join([
            str(self.epoch), str(self.iteration),
            repr(self.l_gc), repr(self.l_rec_p), repr(self.l_rec_f),
            repr(self.l_total), str(self.n_sel), repr(self.lr), repr(self.rank_corr),
        ])


def metrics_to_csv(metrics: list[StepMetrics]) -> str:
    return "\n".join([METRICS_HEADER] + [m.csv_row() for m in metrics]) + "\n"


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_tree(cls, tree: ParamTree) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in tree.items()},
            v={k: np.zeros_like(p.data) for k, p in tree.items()},
        )


@dataclass
class Checkpoint:
    model_config: ModelConfig
    epoch: int  # last completed epoch index
    seed: int
    ema_momentum: float
    opt_step: int
    rng_digest: str
    trees: dict[str, dict[str, np.ndarray]]


def sample_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _DOM_SAMPLE, epoch, sample_id])


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, _DOM_SHUFFLE, epoch])


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _DOM_INIT])


def cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.cosine_decay:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def adamw_step(tree: ParamTree, opt: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over every parameter."""
    opt.step += 1
    bc1 = 1.0 - cfg.beta1**opt.step
    bc2 = 1.0 - cfg.beta2**opt.step
    for name, p in tree.items():
        g = p.grad
        opt.m[name] = cfg.beta1 * opt.m[name] + (1.0 - cfg.beta1) * g
        opt.v[name] = cfg.beta2 * opt.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = (opt.m[name] / bc1) / (np.sqrt(opt.v[name] / bc2) + _ADAM_EPS)
        p.data = p.data - lr * update - lr * cfg.weight_decay * p.data


def _patchify(cloud: PointCloud, cfg: ModelConfig, rng: np.random.Generator):
    centers = fps(cloud, cfg.n_patches, seed=rng)
    return normalize_patches(knn_group(cloud, centers, cfg.patch_size))


@dataclass
class _SampleLosses:
    l_gc: Value
    l_rec_p: Value
    l_rec_f: Value
    rank_corr: float


def _student_sample_losses(
    cloud: PointCloud,
    rng: np.random.Generator,
    state_student: ParamTree,
    make_mask,
    cfg: TrainConfig,
    epoch: int,
    kt: ParamTree | None,
) -> _SampleLosses:
    """Forward + losses for one sample; mask construction is injected."""
    mcfg = cfg.model
    cloud_in = augment(cloud, rng) if cfg.augment else cloud
    ps = _patchify(cloud_in, mcfg, rng)
    part, gc_teacher = make_mask(ps, rng)

    out = student_forward(ps, part, state_student, mcfg)
    l_rec_p_mean, chamfer_vec = loss_rec_p(out.recon, ps.patches[part.masked])

    use_features = kt is not None and epoch >= cfg.loss_weights.warmup_epochs
    if use_features:
        feats = encoder_features(ps, kt, mcfg)
        l_rec_f_mean, feat_vec = loss_rec_f(feats, out.decoder_tokens, part.masked)
        feat_gt = feat_vec.data.copy()
    else:
        l_rec_f_mean = Value(np.zeros((), dtype=chamfer_vec.data.dtype))
        feat_gt = np.zeros_like(chamfer_vec.data)

    # ranking ground truth is detached: plain arrays, no graph
    per_patch = PerPatchLoss(chamfer=chamfer_vec.data.copy(), feature_mse=feat_gt)
    gt = per_patch.combined
    masked_scores = out.gc_scores.take(np.arange(part.n_visible, part.n_patches))
    l_gc = loss_gc(masked_scores, gt, normalize=cfg.drc_pair_normalize)

    rank = spearman(gc_teacher[part.masked], gt) if gc_teacher is not None else 0.0
    return _SampleLosses(l_gc=l_gc, l_rec_p=l_rec_p_mean, l_rec_f=l_rec_f_mean,
                         rank_corr=rank)


def _finalize_step(
    per_sample: list[_SampleLosses],
    tree: ParamTree,
    opt: AdamWState,
    cfg: TrainConfig,
    epoch: int,
    iteration: int,
    ns: int,
) -> StepMetrics:
    """Average losses over the batch, backprop, and update the student."""
    lw = cfg.loss_weights
    inv_b = 1.0 / len(per_sample)
    totals = [total_loss(lw, s.l_gc, s.l_rec_p, s.l_rec_f, epoch) for s in per_sample]
    batch_total = totals[0]
    for t in totals[1:]:
        batch_total = batch_total + t
    batch_total = batch_total * inv_b

    zero_grads(tree.values())
    batch_total.backward()
    lr = cosine_lr(cfg, epoch)
    adamw_step(tree, opt, lr, cfg)

    def mean_of(attr):
        return float(sum(float(getattr(s, attr).data) for s in per_sample) * inv_b)

    return StepMetrics(
        epoch=epoch,
        iteration=iteration,
        l_gc=mean_of("l_gc"),
        l_rec_p=mean_of("l_rec_p"),
        l_rec_f=mean_of("l_rec_f"),
        l_total=float(batch_total.data),
        n_sel=ns,
        lr=lr,
        rank_corr=float(sum(s.rank_corr for s in per_sample) * inv_b),
    )


def train_step(
    batch: list[tuple[int, PointCloud]],
    state: TriModelState,
    opt: AdamWState,
    cfg: TrainConfig,
    epoch: int,
    iteration: int = 0,
) -> StepMetrics:
    """One curriculum-masked training step over a batch of (sample id, cloud)."""
    for tree in (state.teacher, state.knowledge_teacher):
        if any(p.requires_grad for p in tree.values()):
            raise PipelineError("teacher trees must be frozen before every step")

    mcfg = cfg.model
    n_masked = mask_count(mcfg.n_patches, mcfg.mask_ratio)
    ns = n_sel(min(epoch, cfg.curriculum.e_max), cfg.curriculum, n_masked)

    def make_mask(ps, rng):
        scores = teacher_scores(ps, state.teacher, mcfg)  # read before the EMA update
        part = gc_guided_mask(scores.values, n_masked, ns, rng)
        return part, scores.values

    per_sample = [
        _student_sample_losses(
            cloud, sample_rng(cfg.seed, epoch, sid), state.student, make_mask,
            cfg, epoch, state.knowledge_teacher,
        )
        for sid, cloud in batch
    ]
    metrics = _finalize_step(per_sample, state.student, opt, cfg, epoch, iteration, ns)
    ema_update(state)
    return metrics


def _epoch_batches(dataset: Dataset, cfg: TrainConfig, epoch: int):
    order = _shuffle_rng(cfg.seed, epoch).permutation(len(dataset))
    for start in range(0, len(order), cfg.batch_size):
        ids = order[start : start + cfg.batch_size]
        yield [(int(i), dataset.samples[int(i)][0]) for i in ids]


def bootstrap_knowledge_teacher(
    cfg: TrainConfig,
) -> tuple[ParamTree, list[StepMetrics]]:
    """Train a plain random-masking autoencoder and return it frozen.

    Runs for cfg.bootstrap_epochs (0 returns the raw initialization). Uses the
    same rng keying, initialization, and loss path as the main trainer so the
    reduction equivalence is bitwise testable.
    """
    train_ds, _ = build_dataset(cfg.dataset)
    params = init_params(cfg.model, _init_rng(cfg.seed))
    opt = AdamWState.for_tree(params)
    weights = LossWeights(alpha=0.0, beta=cfg.loss_weights.beta, gamma=0.0,
                          warmup_epochs=cfg.loss_weights.warmup_epochs)
    plain_cfg = TrainConfig(**{**cfg.to_dict(), "loss_weights": weights,
                               "curriculum": cfg.curriculum, "model": cfg.model,
                               "epochs": max(cfg.bootstrap_epochs, 1)})
    mcfg = cfg.model
    n_masked = mask_count(mcfg.n_patches, mcfg.mask_ratio)

    def make_mask(ps, rng):
        return random_mask(mcfg.n_patches, mcfg.mask_ratio, rng), None

    metrics: list[StepMetrics] = []
    for epoch in range(cfg.bootstrap_epochs):
        for iteration, batch in enumerate(_epoch_batches(train_ds, plain_cfg, epoch)):
            per_sample = [
                _student_sample_losses(
                    cloud, sample_rng(cfg.seed, epoch, sid), params, make_mask,
                    plain_cfg, epoch, kt=None,
                )
                for sid, cloud in batch
            ]
            metrics.append(
                _finalize_step(per_sample, params, opt, plain_cfg, epoch, iteration, 0)
            )
    return freeze_tree(params), metrics


def _rng_digest(seed: int, epoch: int) -> str:
    return hashlib.sha256(f"{seed}:{epoch}".encode()).hexdigest()


def train_run(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[TriModelState, AdamWState, list[StepMetrics]]:
    """Full pretraining run; optionally checkpoints into `out_dir`.

    With `resume` pointing at a checkpoint written by this function, training
    continues bitwise identically to the uninterrupted run.
    """
    train_ds, _ = build_dataset(cfg.dataset)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ck = load_checkpoint(resume, expected_model_config=cfg.model)
        if ck.rng_digest != _rng_digest(cfg.seed, ck.epoch):
            raise PipelineError(
                "checkpoint rng digest does not match this config's seed"
            )
        state = _state_from_checkpoint(ck)
        opt = _opt_from_checkpoint(ck)
        start_epoch = ck.epoch + 1
    else:
        if cfg.kt_checkpoint:
            kt = freeze_tree(_state_from_checkpoint(
                load_checkpoint(cfg.kt_checkpoint, expected_model_config=cfg.model)
            ).student)
        elif cfg.bootstrap_epochs > 0:
            kt, _ = bootstrap_knowledge_teacher(cfg)
            if out_path is not None:
                _save_single_tree(out_path / "bootstrap.gm3d", kt, cfg)
        else:
            kt = freeze_tree(init_params(cfg.model, _init_rng(cfg.seed)))
        student = init_params(cfg.model, _init_rng(cfg.seed))
        teacher = freeze_tree(copy_tree(student, requires_grad=False))
        state = TriModelState(student=student, teacher=teacher, knowledge_teacher=kt,
                              ema_momentum=cfg.ema_momentum)
        opt = AdamWState.for_tree(student)
        start_epoch = 0

    kt_digest = tree_digest(state.knowledge_teacher)
    metrics: list[StepMetrics] = []
    for epoch in range(start_epoch, cfg.epochs):
        for iteration, batch in enumerate(_epoch_batches(train_ds, cfg, epoch)):
            metrics.append(train_step(batch, state, opt, cfg, epoch, iteration))
        if (
            out_path is not None
            and cfg.checkpoint_every > 0
            and (epoch + 1) % cfg.checkpoint_every == 0
            and epoch + 1 < cfg.epochs
        ):
            save_checkpoint(out_path / f"checkpoint_epoch{epoch}.gm3d", state, opt, cfg, epoch)
        if tree_digest(state.knowledge_teacher) != kt_digest:
            raise PipelineError("knowledge teacher changed during training")

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint.gm3d", state, opt, cfg, cfg.epochs - 1)
        (out_path / "metrics.csv").write_text(metrics_to_csv(metrics))
    return state, opt, metrics


# -- checkpoint container --------------------------------------------------------


def _tree_arrays(tree: ParamTree) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in tree.items()}


def save_checkpoint(
    path: str | Path,
    state: TriModelState,
    opt: AdamWState,
    cfg: TrainConfig,
    epoch: int,
) -> None:
    """Versioned binary container, little-endian float32 payload."""
    trees = {
        "student": _tree_arrays(state.student),
        "teacher": _tree_arrays(state.teacher),
        "knowledge_teacher": _tree_arrays(state.knowledge_teacher),
        "opt_m": opt.m,
        "opt_v": opt.v,
    }
    manifest = [
        {"tree": tname, "name": pname, "shape": list(arr.shape)}
        for tname, tree in trees.items()
        for pname, arr in tree.items()
    ]
    header = json.dumps({
        "model_config": asdict(cfg.model),
        "epoch": epoch,
        "seed": cfg.seed,
        "ema_momentum": state.ema_momentum,
        "opt_step": opt.step,
        "rng_digest": _rng_digest(cfg.seed, epoch),
        "manifest": manifest,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for entry in manifest:
            arr = trees[entry["tree"]][entry["name"]]
            fh.write(arr.astype("<f4").tobytes())


def _save_single_tree(path: Path, tree: ParamTree, cfg: TrainConfig) -> None:
    """Store a lone tree as a checkpoint with all three slots equal to it."""
    state = TriModelState(
        student=dict(tree), teacher=dict(tree), knowledge_teacher=dict(tree),
        ema_momentum=cfg.ema_momentum,
    )
    save_checkpoint(path, state, AdamWState.for_tree(tree), cfg, epoch=-1)


def load_checkpoint(
    path: str | Path, expected_model_config: ModelConfig | None = None
) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + header_len].decode())

    model_config = ModelConfig(**header["model_config"])
    reference = init_params(model_config, np.random.default_rng(0))
    ref_shapes = {name: tuple(v.data.shape) for name, v in reference.items()}

    trees: dict[str, dict[str, np.ndarray]] = {}
    cursor = 16 + header_len
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        blob = raw[cursor : cursor + n_bytes]
        if len(blob) < n_bytes:
            raise CheckpointTruncatedError(
                f"{path}: payload ends inside {entry['tree']}.{entry['name']}"
            )
        cursor += n_bytes
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        trees.setdefault(entry["tree"], {})[entry["name"]] = arr
        if entry["tree"] in ("student", "teacher", "knowledge_teacher"):
            want = ref_shapes.get(entry["name"])
            if want is None or want != shape:
                raise CheckpointShapeError(
                    f"{path}: parameter '{entry['name']}' has shape {shape}, "
                    f"expected {want}"
                )

    for tname in ("student", "teacher", "knowledge_teacher"):
        if set(trees.get(tname, {})) != set(ref_shapes):
            raise CheckpointShapeError(f"{path}: tree '{tname}' is missing parameters")

    if expected_model_config is not None and model_config != expected_model_config:
        for f_name in ModelConfig.__dataclass_fields__:
            if getattr(model_config, f_name) != getattr(expected_model_config, f_name):
                raise CheckpointShapeError(
                    f"{path}: checkpoint model field '{f_name}' = "
                    f"{getattr(model_config, f_name)} does not match expected "
                    f"{getattr(expected_model_config, f_name)}"
                )

    return Checkpoint(
        model_config=model_config,
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
        ema_momentum=float(header["ema_momentum"]),
        opt_step=int(header["opt_step"]),
        rng_digest=header["rng_digest"],
        trees=trees,
    )


def _state_from_checkpoint(ck: Checkpoint) -> TriModelState:
    def tree(name: str, requires_grad: bool) -> ParamTree:
        ref = init_params(ck.model_config, np.random.default_rng(0))
        return {
            k: Value(ck.trees[name][k].copy(), requires_grad=requires_grad) for k in ref
        }

    return TriModelState(
        student=tree("student", True),
        teacher=tree("teacher", False),
        knowledge_teacher=tree("knowledge_teacher", False),
        ema_momentum=ck.ema_momentum,
    )


def _opt_from_checkpoint(ck: Checkpoint) -> AdamWState:
    return AdamWState(
        m={k: v.copy() for k, v in ck.trees["opt_m"].items()},
        v={k: v.copy() for k, v in ck.trees["opt_v"].items()},
        step=ck.opt_step,
    )


# -- evaluation helpers ------------------------------------------------------------


def gc_rank_correlation(
    state: TriModelState,
    cfg: TrainConfig,
    clouds: list[PointCloud],
    epoch: int | None = None,
    draws: int = 3,
    seed: int = 0xC0DE,
) -> float:
    """Mean Spearman correlation between teacher scores and held-out
    per-patch reconstruction loss, over fresh random masks."""
    mcfg = cfg.model
    epoch = cfg.epochs if epoch is None else epoch
    n_masked = mask_count(mcfg.n_patches, mcfg.mask_ratio)
    use_features = epoch >= cfg.loss_weights.warmup_epochs
    corrs = []
    for idx, cloud in enumerate(clouds):
        rng = np.random.default_rng([seed, idx])
        ps = _patchify(cloud, mcfg, rng)
        scores = teacher_scores(ps, state.teacher, mcfg)
        for _ in range(draws):
            part = random_mask(mcfg.n_patches, mcfg.mask_ratio, rng)
            out = student_forward(ps, part, state.student, mcfg)
            _, chamfer_vec = loss_rec_p(out.recon, ps.patches[part.masked])
            gt = chamfer_vec.data.copy()
            if use_features:
                feats = encoder_features(ps, state.knowledge_teacher, mcfg)
                _, feat_vec = loss_rec_f(feats, out.decoder_tokens, part.masked)
                gt = gt + feat_vec.data
            corrs.append(spearman(scores.values[part.masked], gt))
    return float(np.mean(corrs))
