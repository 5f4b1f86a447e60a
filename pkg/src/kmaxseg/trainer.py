"""Semi-supervised training loop: mixed labeled/unlabeled batches, dual-view
forward passes, combined supervised + consistency objective, AdamW stepping,
sliding-window evaluation, checkpointing, and the component-toggle ablation
driver.

Runs are deterministic for a fixed config: batches are seeded per step from
(seed, step), so a resumed run consumes exactly the randomness an
uninterrupted one would.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .data import (
    AugmentConfig,
    AugmentedPair,
    LabelMask,
    PhantomConfig,
    Volume,
    augment_pair,
    generate_phantom,
    load_volume,
    standardize,
)
from .errors import ConfigError, FormatError, NumericError
from .losses import (
    LossBundle,
    LossParts,
    ce_loss,
    dice_loss,
    lambda_schedule,
    query_consistency_per_sample,
    seg_consistency_per_sample,
    total_loss,
)
from .metrics import MetricsReport, jsonable, score_volume
from .model import SegModel, build_model


@dataclass
class PhantomSpec:
    """Synthetic-data source: how many volumes to synthesize and their look."""

    count: int = 20
    val_count: int = 4
    shape: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 3
    class_means: tuple[float, ...] = (0.2, 0.6, 0.9)
    noise_sigma: float = 0.1
    mean_jitter: float = 0.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class TrainConfig:
    """Everything one training run depends on. JSON round-trippable."""

    out_dir: str = "runs/run"
    # data: either a directory produced by `generate` or in-memory phantoms
    data_dir: str | None = None
    val_dir: str | None = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    labeled_fraction: float = 0.1
    crop_shape: tuple[int, int, int] = (16, 16, 16)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # loss
    tau: float = 0.5
    lambda_max: float = 0.1
    ramp_frac: float = 0.1
    use_segc: bool = True
    use_qdc: bool = True
    scale_consistency_by_voxels: bool = True
    # optimization
    lr: float = 1e-4
    weight_decay: float = 1e-2
    steps: int = 2000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    eval_interval: int = 0
    eval_overlap: float = 0.5
    seed: int = 0
    data_seed: int | None = None

    def __post_init__(self):
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ConfigError(
                f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}"
            )
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_labeled < 1:
            raise ConfigError(f"batch_labeled must be >= 1, got {self.batch_labeled}")
        if self.batch_unlabeled < 0:
            raise ConfigError(f"batch_unlabeled must be >= 0, got {self.batch_unlabeled}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_max < 0:
            raise ConfigError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if not (0.0 <= self.ramp_frac <= 1.0):
            raise ConfigError(f"ramp_frac must lie in [0, 1], got {self.ramp_frac}")
        if not (0.0 <= self.eval_overlap < 1.0):
            raise ConfigError(f"eval_overlap must lie in [0, 1), got {self.eval_overlap}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        self.crop_shape = tuple(int(c) for c in self.crop_shape)
        self.phantom.shape = tuple(int(s) for s in self.phantom.shape)
        self.phantom.class_means = tuple(float(m) for m in self.phantom.class_means)
        self.model.validate_crop(self.crop_shape)

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_plain(cls, d)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def _from_plain(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field: {sorted(unknown)[0]}")
    kwargs = {}
    for name, value in d.items():
        ftype = known[name].type
        if name == "model":
            kwargs[name] = ModelConfig.from_dict(value)
        elif name == "augment":
            kwargs[name] = _from_plain(AugmentConfig, value)
        elif name == "phantom":
            kwargs[name] = _from_plain(PhantomSpec, value)
        elif isinstance(value, list) and "tuple" in str(ftype):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# data pools


def _derive_rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(list(entropy))


def _split_indices(count: int, labeled_fraction: float, seed: int) -> tuple[list, list]:
    n_labeled = max(1, int(round(labeled_fraction * count)))
    n_labeled = min(n_labeled, count)
    perm = _derive_rng(seed, 777).permutation(count)
    chosen = set(int(i) for i in perm[:n_labeled])
    labeled = [i for i in range(count) if i in chosen]
    unlabeled = [i for i in range(count) if i not in chosen]
    return labeled, unlabeled


def load_data_dir(data_dir: Path) -> list[tuple[str, Volume, LabelMask]]:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    items = []
    for stem in manifest["volumes"]:
        vol = load_volume(data_dir / f"{stem}_img")
        mask = load_volume(data_dir / f"{stem}_seg")
        if not isinstance(vol, Volume) or not isinstance(mask, LabelMask):
            raise FormatError(f"unexpected payload kinds for {stem} in {data_dir}")
        items.append((stem, vol, mask))
    return items


def build_pools(config: TrainConfig):
    """Materialize (labeled, unlabeled, validation) pools.

    labeled: (id, Volume, LabelMask); unlabeled: (id, Volume) with the mask
    withheld; validation: (id, Volume, LabelMask).
    """
    data_seed = config.data_seed if config.data_seed is not None else config.seed
    if config.data_dir is not None:
        items = load_data_dir(Path(config.data_dir))
        val = load_data_dir(Path(config.val_dir)) if config.val_dir else []
    else:
        spec = config.phantom
        pcfg = PhantomConfig(class_means=tuple(spec.class_means),
                             noise_sigma=spec.noise_sigma,
                             mean_jitter=spec.mean_jitter, spacing=spec.spacing)
        items = []
        for i in range(spec.count):
            vol, mask = generate_phantom([data_seed, i], spec.shape,
                                         spec.num_classes, config=pcfg)
            items.append((f"train{i:03d}", vol, mask))
        val = []
        for i in range(spec.val_count):
            vol, mask = generate_phantom([data_seed, 100_000 + i], spec.shape,
                                         spec.num_classes, config=pcfg)
            val.append((f"val{i:03d}", vol, mask))
    lab_idx, unl_idx = _split_indices(len(items), config.labeled_fraction, data_seed)
    labeled = [items[i] for i in lab_idx]
    unlabeled = [(items[i][0], items[i][1]) for i in unl_idx]
    return labeled, unlabeled, val


def make_batch(labeled_pool, unlabeled_pool, config: TrainConfig,
               seed) -> tuple[list[AugmentedPair], int]:
    """One training batch: labeled pairs first, then unlabeled.

    When the unlabeled pool is empty its slots are filled from the labeled
    pool instead, keeping the batch size fixed. Deterministic in seed.
    """
    if not labeled_pool:
        raise ConfigError("labeled pool is empty")
    rng = np.random.default_rng(seed)
    n_u = config.batch_unlabeled if unlabeled_pool else 0
    n_l = config.batch_labeled + (config.batch_unlabeled - n_u)
    picks_l = rng.integers(0, len(labeled_pool), size=n_l)
    picks_u = rng.integers(0, len(unlabeled_pool), size=n_u) if n_u else []
    child_seeds = rng.integers(0, 2 ** 63 - 1, size=n_l + n_u)
    pairs = []
    for slot, i in enumerate(picks_l):
        _, vol, mask = labeled_pool[int(i)]
        pairs.append(augment_pair(vol, mask, config.crop_shape,
                                  int(child_seeds[slot]), config.augment))
    for slot, i in enumerate(picks_u):
        _, vol = unlabeled_pool[int(i)]
        pairs.append(augment_pair(vol, None, config.crop_shape,
                                  int(child_seeds[n_l + slot]), config.augment))
    return pairs, n_l


def _views_tensor(pairs: list[AugmentedPair], which: str) -> torch.Tensor:
    crops = [standardize(getattr(p, which)).voxels for p in pairs]
    return torch.from_numpy(np.stack(crops)).unsqueeze(1)


# ---------------------------------------------------------------------------
# stepping


@dataclass
class TrainState:
    """Mutable run state: the network, its optimizer, and the step counter."""

    model: SegModel
    optimizer: torch.optim.Optimizer
    step: int = 0


def _check_finite(bundle: LossBundle) -> None:
    for name in ("l_ce", "l_dice", "l_segc", "l_qdc", "l_total"):
        if not np.isfinite(getattr(bundle, name)):
            raise NumericError(f"non-finite loss component: {name}")


def train_step(state: TrainState, pairs: list[AugmentedPair], n_labeled: int,
               lam: float, config: TrainConfig) -> LossBundle:
    """One optimization step over a batch of (weak, strong) view pairs.

    Supervised losses use the weak view of the labeled samples; consistency
    couples the strong and weak views of every sample, with the whole batch
    (both views) as negatives. The strong forward pass is skipped entirely
    when no consistency term can contribute (lambda 0 or both toggles off):
    the gradient is unchanged because those samples then appear in no loss.
    """
    model = state.model
    weak_x = _views_tensor(pairs, "weak")
    out_weak = model(weak_x)

    sup_ce, sup_dice = [], []
    for i in range(n_labeled):
        labels = torch.from_numpy(pairs[i].mask_weak.labels.reshape(-1))
        sup_ce.append(ce_loss(out_weak.seg_probs[i], labels))
        sup_dice.append(dice_loss(out_weak.seg_probs[i], labels))
    l_ce = torch.stack(sup_ce).mean()
    l_dice = torch.stack(sup_dice).mean()

    n_u = len(pairs) - n_labeled
    active = lam > 0 and (config.use_segc or config.use_qdc)
    segc_l = qdc_l = 0.0
    segc_u = qdc_u = 0.0
    if active:
        out_strong = model(_views_tensor(pairs, "strong"))
        num_voxels = out_weak.seg_probs.shape[1]
        scale = config.scale_consistency_by_voxels
        if config.use_segc:
            terms = seg_consistency_per_sample(out_strong.seg_probs,
                                               out_weak.seg_probs,
                                               config.tau, scale)
            segc_l = terms[:n_labeled].mean()
            if n_u:
                segc_u = terms[n_labeled:].mean()
        if config.use_qdc:
            terms = query_consistency_per_sample(out_strong.qd_logits,
                                                 out_weak.qd_logits,
                                                 config.tau, num_voxels, scale)
            qdc_l = terms[:n_labeled].mean()
            if n_u:
                qdc_u = terms[n_labeled:].mean()

    parts_l = LossParts(n=n_labeled, l_ce=l_ce, l_dice=l_dice,
                        l_segc=segc_l, l_qdc=qdc_l)
    parts_u = LossParts(n=n_u, l_segc=segc_u, l_qdc=qdc_u) if n_u else None
    core, bundle = total_loss(parts_l, parts_u, lam)
    _check_finite(bundle)

    state.optimizer.zero_grad(set_to_none=True)
    core.backward()
    state.optimizer.step()
    state.step += 1
    return bundle


# ---------------------------------------------------------------------------
# inference and evaluation


def _window_starts(size: int, crop: int, stride: int) -> list[int]:
    starts = list(range(0, size - crop + 1, stride))
    if starts[-1] != size - crop:
        starts.append(size - crop)
    return starts


def predict_volume(model: SegModel, volume: Volume, crop_shape,
                   overlap: float = 0.5) -> LabelMask:
    """Full-volume inference: sliding windows with uniform overlap averaging.

    Volumes smaller than the crop are reflect-padded for inference and the
    prediction is cut back to the original extent.
    """
    crop = tuple(int(c) for c in crop_shape)
    vox = volume.voxels
    orig = vox.shape
    pad = [(0, max(0, c - s)) for s, c in zip(orig, crop)]
    if any(p[1] for p in pad):
        vox = np.pad(vox, pad, mode="reflect")
    shape = vox.shape
    k = model.config.num_classes
    probs = np.zeros((k,) + shape, dtype=np.float64)
    counts = np.zeros(shape, dtype=np.float64)
    strides = [max(1, int(round(c * (1.0 - overlap)))) for c in crop]
    model.eval()
    with torch.no_grad():
        for z in _window_starts(shape[0], crop[0], strides[0]):
            for y in _window_starts(shape[1], crop[1], strides[1]):
                for x in _window_starts(shape[2], crop[2], strides[2]):
                    sl = (slice(z, z + crop[0]), slice(y, y + crop[1]),
                          slice(x, x + crop[2]))
                    window = standardize(Volume(vox[sl], spacing=volume.spacing))
                    inp = torch.from_numpy(window.voxels)[None, None]
                    out = model(inp)
                    probs[(slice(None),) + sl] += out.seg_volume()[0].numpy()
                    counts[sl] += 1.0
    model.train()
    probs /= counts
    trim = tuple(slice(0, s) for s in orig)
    pred = probs[(slice(None),) + trim].argmax(axis=0).astype(np.uint8)
    return LabelMask(pred, num_classes=k)


def evaluate(model: SegModel, val_items, config: TrainConfig,
             pred_dir=None) -> MetricsReport:
    """Score every validation volume; optionally export predicted masks."""
    if not val_items:
        raise ConfigError("validation set is empty")
    report = MetricsReport()
    for vid, vol, mask in val_items:
        pred = predict_volume(model, vol, config.crop_shape, config.eval_overlap)
        report.extend(score_volume(vid, pred, mask, config.model.num_classes,
                                   vol.spacing))
        if pred_dir is not None:
            from .data import save_volume
            save_volume(Path(pred_dir) / f"{vid}_pred", pred)
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    torch.save({
        "format_version": 1,
        "step": state.step,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "model_state" not in blob:
        raise FormatError(f"not a recognized checkpoint: {path}")
    stored = blob.get("config_hash")
    recomputed = TrainConfig.from_dict(blob["config"]).config_hash()
    if stored != recomputed:
        raise FormatError(
            f"checkpoint {path} config hash mismatch: stored {stored}, "
            f"recomputed {recomputed}"
        )
    return blob


# ---------------------------------------------------------------------------
# the full run


_LOSS_HEADER = ["step", "l_ce", "l_dice", "l_segc", "l_qdc", "lambda", "l_total"]


def fit(config: TrainConfig, resume=None) -> dict:
    """Run one training experiment and write all artifacts to out_dir.

    Artifacts: config.json, loss.csv (one row per step), checkpoint.pt,
    metrics.csv/metrics.json (when a validation pool exists), eval_history.csv
    (periodic evaluation aggregates) and manifest.json. Returns the manifest.
    """
    torch.set_num_threads(1)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    torch.manual_seed(config.seed)
    model = build_model(config.model)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)
    state = TrainState(model=model, optimizer=optimizer, step=0)

    if resume is not None:
        blob = load_checkpoint(resume)
        if blob["config_hash"] != config.config_hash():
            raise ConfigError(
                "checkpoint was produced by a different config "
                f"(hash {blob['config_hash'][:12]}… vs {config.config_hash()[:12]}…)"
            )
        model.load_state_dict(blob["model_state"])
        optimizer.load_state_dict(blob["optimizer_state"])
        state.step = int(blob["step"])
        torch.set_rng_state(blob["torch_rng"])

    labeled, unlabeled, val = build_pools(config)

    loss_path = out / "loss.csv"
    fresh_log = resume is None or not loss_path.exists()
    history_path = out / "eval_history.csv"
    artifacts = ["config.json", "loss.csv", "checkpoint.pt", "manifest.json"]
    aggregate = None
    with loss_path.open("w" if fresh_log else "a", newline="") as f:
        writer = csv.writer(f)
        if fresh_log:
            writer.writerow(_LOSS_HEADER)
            f.flush()
        for step in range(state.step, config.steps):
            lam = lambda_schedule(step, config.steps, config.lambda_max,
                                  config.ramp_frac)
            pairs, n_l = make_batch(labeled, unlabeled, config,
                                    seed=[config.seed, step])
            bundle = train_step(state, pairs, n_l, lam, config)
            row = bundle.as_dict()
            writer.writerow([step] + [f"{row[k]:.12g}" for k in _LOSS_HEADER[1:]])
            f.flush()
            if (config.eval_interval > 0 and val
                    and (step + 1) % config.eval_interval == 0
                    and (step + 1) < config.steps):
                agg = evaluate(model, val, config).aggregate()
                _append_history(history_path, step + 1, agg)

    save_checkpoint(out / "checkpoint.pt", state, config)

    if val and config.steps > 0:
        report = evaluate(model, val, config)
        report.write_csv(out / "metrics.csv")
        report.write_json(out / "metrics.json")
        aggregate = report.aggregate()
        _append_history(history_path, config.steps, aggregate)
        artifacts += ["metrics.csv", "metrics.json", "eval_history.csv"]
        _plot_losses(loss_path, out / "loss_curves.png")
        artifacts.append("loss_curves.png")
    elif config.steps > 0:
        _plot_losses(loss_path, out / "loss_curves.png")
        artifacts.append("loss_curves.png")

    manifest = {
        "config_hash": config.config_hash(),
        "steps_completed": config.steps,
        "num_labeled": len(labeled),
        "num_unlabeled": len(unlabeled),
        "num_validation": len(val),
        "artifacts": artifacts,
        "aggregate": aggregate,
    }
    (out / "manifest.json").write_text(
        json.dumps(jsonable(manifest), indent=2) + "\n")
    return manifest


def _append_history(path: Path, step: int, agg: dict) -> None:
    fresh = not path.exists()
    with path.open("a", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(["step", "dice", "jaccard", "hd95", "asd"])
        writer.writerow([step] + [f"{agg[k]:.12g}" for k in
                                  ("dice", "jaccard", "hd95", "asd")])


def _plot_losses(loss_csv: Path, out_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, series = [], {k: [] for k in _LOSS_HEADER[1:]}
    with loss_csv.open(newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            for k in series:
                series[k].append(float(row[k]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for k in ("l_ce", "l_dice", "l_segc", "l_qdc", "l_total"):
        ax.plot(steps, series[k], label=k, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablation grid

# toggle grid: supervised only, query-level only, segmentation-level only, both
ABLATION_ROWS = [
    {"use_segc": False, "use_qdc": False},
    {"use_segc": False, "use_qdc": True},
    {"use_segc": True, "use_qdc": False},
    {"use_segc": True, "use_qdc": True},
]


def run_ablation(config: TrainConfig) -> Path:
    """Train the four consistency-toggle variants and merge their validation
    aggregates into one comparison CSV. Returns the CSV path."""
    base_out = Path(config.out_dir)
    base_out.mkdir(parents=True, exist_ok=True)
    rows = []
    for toggles in ABLATION_ROWS:
        tag = f"segc{int(toggles['use_segc'])}_qdc{int(toggles['use_qdc'])}"
        sub = replace(config, out_dir=str(base_out / tag), **toggles)
        manifest = fit(sub)
        agg = manifest["aggregate"]
        if agg is None:
            raise ConfigError("ablation requires a validation pool (val_count > 0)")
        rows.append({**toggles, **{k: agg[k] for k in ("dice", "jaccard", "hd95", "asd")}})
    out_csv = base_out / "ablation.csv"
    with out_csv.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["use_segc", "use_qdc", "dice", "jaccard", "hd95", "asd"])
        for r in rows:
            writer.writerow([int(r["use_segc"]), int(r["use_qdc"])]
                            + [f"{r[k]:.12g}" for k in ("dice", "jaccard", "hd95", "asd")])
    return out_csv
