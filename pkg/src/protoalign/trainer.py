"""Three-stage adaptation schedule, experiment settings, checkpoints and sweeps.

Stage 1 fits the segmenter on the labelled domain with the hybrid loss.
Stage 2 adds the conditional adversarial loss, stage 3 the prototype
alignment loss. Batch-norm statistics are frozen after stage 1. Every
random draw is keyed by the config seed, the stage and the step.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from protoalign import ccpa, cdd, metrics, synthdata
from protoalign.errors import CheckpointMismatchError, ConfigError, LabelLeakageError, TrainingDivergenceError
from protoalign.segmenter import Segmenter, SegmenterArch, align_prediction, seg_loss
from protoalign.tensor import AdamState, ParameterStore, adam_step, no_grad, ntsr

log = logging.getLogger(__name__)

SETTINGS = ("SRC-ONLY", "NO-DA", "TGT-SUPERVISED", "DA")
DIRECTIONS = ("src2tgt", "tgt2src")
CHECKPOINT_FORMAT = "protoalign-checkpoint"


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str = "DA"
    direction: str = "src2tgt"
    eta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    margin: float = 1.0
    d_o: int = 16
    grl_scale: float = 1.0
    lr: tuple = (1e-3, 3e-4, 1e-4)
    steps: tuple = (2000, 1000, 2000)
    batch_size: int = 16
    dropout: float = 0.1
    seed: int = 0
    channels: int = 8
    dilations: tuple = (1, 1, 2, 4)
    stride: int = 2
    attention_downsample: int = 4
    disc_width: int = 32
    disc_blocks: int = 2
    eval_batch: int = 20

    def __post_init__(self):
        for name in ("lr", "steps", "dilations"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.setting not in SETTINGS:
            raise ConfigError("setting", f"{self.setting!r} not in {SETTINGS}")
        if self.direction not in DIRECTIONS:
            raise ConfigError("direction", f"{self.direction!r} not in {DIRECTIONS}")
        for name in ("eta", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"{v!r} outside [0, 1]")
        if self.margin < 0:
            raise ConfigError("margin", "must be nonnegative")
        if self.grl_scale < 0:
            raise ConfigError("grl_scale", "must be nonnegative")
        if len(self.lr) != 3 or any(v <= 0 for v in self.lr):
            raise ConfigError("lr", "need three positive learning rates")
        if len(self.steps) != 3 or any(int(v) != v or v < 0 for v in self.steps):
            raise ConfigError("steps", "need three nonnegative step counts")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size", "must be even so source and target halves are equal")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if self.attention_downsample < 1:
            raise ConfigError("attention_downsample", "must be positive")
        if self.d_o < 1:
            raise ConfigError("d_o", "must be positive")

    @property
    def half_batch(self) -> int:
        return self.batch_size // 2

    def arch(self, n_classes: int) -> SegmenterArch:
        return SegmenterArch(n_classes=n_classes, channels=self.channels, dilations=self.dilations,
                             stride=self.stride, dropout=self.dropout)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("lr", "steps", "dilations"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def reverse_direction(config: ExperimentConfig) -> ExperimentConfig:
    """Swap which dataset plays the labelled source role."""
    flipped = "tgt2src" if config.direction == "src2tgt" else "src2tgt"
    return config.replace(direction=flipped)


def domain_roles(config: ExperimentConfig) -> tuple[str, str]:
    """(labelled domain directory, unlabelled domain directory)."""
    return ("source", "target") if config.direction == "src2tgt" else ("target", "source")


def _stream(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# -- model bundle ---------------------------------------------------------------

class Model:
    """Segmenter, discriminator, alignment parameters and the frozen randomized map."""

    def __init__(self, config: ExperimentConfig, n_classes: int):
        self.config = config
        arch = config.arch(n_classes)
        self.segmenter = Segmenter(arch, _stream(config.seed, 0))
        self.rmap_seed = int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0])
        self.rmap = cdd.RandomizedMap.sample(arch.feature_dim, n_classes, config.d_o, self.rmap_seed)
        self.disc = cdd.Discriminator(config.d_o, config.disc_width, config.disc_blocks, _stream(config.seed, 1))
        self.align = ccpa.init_params(arch.feature_dim, n_classes)

    @property
    def n_classes(self) -> int:
        return self.segmenter.arch.n_classes

    def stage_params(self, stage: int) -> ParameterStore:
        if stage == 1:
            return self.segmenter.params
        if stage == 2:
            return self.segmenter.params.merged(self.disc.params)
        return self.segmenter.params.merged(self.disc.params, self.align)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"seg.{k}": v for k, v in self.segmenter.snapshot().items()}
        out.update({k: v for k, v in self.disc.params.snapshot().items()})
        out.update({k: v for k, v in self.align.snapshot().items()})
        out["rmap.r_f"] = np.array(self.rmap.r_f)
        out["rmap.r_m"] = np.array(self.rmap.r_m)
        return out

    def load_tensors(self, arrays: dict[str, np.ndarray], with_heads: bool = True) -> None:
        self.segmenter.restore({k[4:]: v for k, v in arrays.items() if k.startswith("seg.")})
        if not with_heads:
            return
        self.disc.params.restore({k: v for k, v in arrays.items() if k.startswith("disc.")})
        self.align.restore({k: v for k, v in arrays.items() if k.startswith("ccpa.")})
        self.rmap = cdd.RandomizedMap(np.array(arrays["rmap.r_f"]), np.array(arrays["rmap.r_m"]), self.rmap_seed)

    def predict(self, images: np.ndarray, chunk: int = 20) -> np.ndarray:
        """Class probabilities with frozen statistics and no dropout."""
        out = []
        with no_grad():
            for i in range(0, images.shape[0], chunk):
                _, m = self.segmenter.forward(images[i:i + chunk])
                out.append(m.data)
        return np.concatenate(out)


def _tensor_file(name: str) -> str:
    return name.replace(":", "__") + ".ntsr"


def save_checkpoint(model: Model, path, stage: int) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in model.tensors().items():
        fname = _tensor_file(name)
        ntsr.save(path / fname, np.asarray(arr, dtype=np.float64))
        files[name] = fname
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "stage": stage,
        "n_classes": model.n_classes,
        "arch": model.segmenter.arch.to_dict(),
        "rmap_seed": model.rmap_seed,
        "d_o": model.rmap.out_dim,
        "config": model.config.to_dict(),
        "tensors": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, expect_arch: SegmenterArch | None = None) -> Model:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path} is not a protoalign checkpoint")
    config = ExperimentConfig.from_dict(manifest["config"])
    model = Model(config, manifest["n_classes"])
    if expect_arch is not None and expect_arch != model.segmenter.arch:
        raise CheckpointMismatchError(f"checkpoint arch {manifest['arch']} != requested {expect_arch.to_dict()}")
    arrays = {name: ntsr.load(path / fname) for name, fname in manifest["tensors"].items()}
    try:
        model.load_tensors(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatchError(f"{path}: {exc}") from None
    return model


# -- records --------------------------------------------------------------------

LOSS_FIELDS = ("stage", "step", "l_seg", "l_cdd", "l_ccpa", "l_total")


@dataclass
class RunRecord:
    config: dict
    losses: list = field(default_factory=list)
    metrics: metrics.ClassMetrics | None = None
    eval_domain: str = ""
    wall_time: float = 0.0
    checkpoints: list = field(default_factory=list)
    label_reads: dict = field(default_factory=dict)
    train_size: int = 0

    def mean_dice(self) -> float:
        return self.metrics.mean_dice()

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOSS_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.losses:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        (out / "losses.csv").write_text(self.losses_csv())
        payload = {
            "setting": self.config["setting"],
            "direction": self.config["direction"],
            "eval_domain": self.eval_domain,
            "mean_dice": self.mean_dice(),
            "train_size": self.train_size,
            "classes": self.metrics.to_dict(),
            "class_names": list(self.metrics.class_names),
            "checkpoints": [str(p) for p in self.checkpoints],
        }
        (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return out


# -- training -------------------------------------------------------------------

class StageCache:
    """Memoises finished stages across runs that share every input of those stages.

    The key of stage ``k`` covers the data, the seed, the architecture and
    every hyperparameter read by stages ``1..k``, so a hit is bit-identical
    to recomputing. Stage 3 is never cached.
    """

    def __init__(self):
        self._store: dict[str, tuple] = {}

    @staticmethod
    def key(config: ExperimentConfig, data_root, stage: int, fit_dom: str, other_dom: str) -> str:
        d = config.to_dict()
        relevant = {k: d[k] for k in ("eta", "seed", "channels", "dilations", "stride", "dropout",
                                      "batch_size", "d_o", "disc_width", "disc_blocks")}
        relevant.update(lr=d["lr"][:stage], steps=d["steps"][:stage], fit=fit_dom, data=str(data_root))
        if stage >= 2:
            relevant.update(other=other_dom, lambda1=config.lambda1, grl_scale=config.grl_scale)
        return json.dumps(relevant, sort_keys=True)

    def get(self, key):
        return self._store.get(key)

    def put(self, key, tensors, losses):
        self._store[key] = ({k: v.copy() for k, v in tensors.items()}, [dict(r) for r in losses])

    def __len__(self) -> int:
        return len(self._store)


def _batch(rng, n_items, size):
    return np.sort(rng.choice(n_items, size=size, replace=n_items < size))


def run_stage(model: Model, stage: int, config: ExperimentConfig, labelled, unlabelled=None,
              seg_only: bool = False, on_step=None, skip_zero_terms: bool = True) -> list[dict]:
    """Optimise one stage in place and return its loss log.

    ``labelled`` / ``unlabelled`` are :class:`synthdata.SplitReader` objects
    (``unlabelled`` is only touched from stage 2 on and never for labels).
    ``seg_only`` drops the adaptation terms entirely, which is the reference
    path for the zero-weight trajectory check. With ``skip_zero_terms`` an
    adaptation term whose weight is zero is not evaluated (logged as 0);
    its gradient contribution would be exactly zero anyway.
    """
    steps = int(config.steps[stage - 1])
    params = model.stage_params(stage)
    params.zero_grad()
    opt = AdamState(lr=config.lr[stage - 1])
    half = config.half_batch
    seg = model.segmenter
    src_images, src_labels = labelled.images, labelled.labels
    tgt_images = None
    rng_src = _stream(config.seed, stage, 0)
    rng_tgt = _stream(config.seed, stage, 1)
    use_cdd = stage > 1 and not seg_only and not (skip_zero_terms and config.lambda1 == 0)
    use_ccpa = stage == 3 and not seg_only and not (skip_zero_terms and config.lambda2 == 0)
    if use_cdd or use_ccpa:
        tgt_images = unlabelled.images
    log_rows = []
    for step in range(steps):
        idx = _batch(rng_src, src_images.shape[0], half)
        x_s = src_images[idx]
        y_s = src_labels[idx].astype(np.float64)
        f_s, m_s = seg.forward(x_s, batch_stats=(stage == 1),
                               dropout_rng=_stream(config.seed, stage, step, 0, 7))
        l_seg = seg_loss(m_s, y_s, config.eta)
        total = l_seg
        l_cdd = l_ccpa = 0.0
        if use_cdd or use_ccpa:
            idx_t = _batch(rng_tgt, tgt_images.shape[0], half)
            f_t, m_t = seg.forward(tgt_images[idx_t], batch_stats=False,
                                   dropout_rng=_stream(config.seed, stage, step, 1, 7))
            ms_grid, mt_grid = align_prediction(m_s, f_s), align_prediction(m_t, f_t)
            if use_cdd:
                j_s = cdd.multilinear_map(f_s, ms_grid, model.rmap)
                j_t = cdd.multilinear_map(f_t, mt_grid, model.rmap)
                cdd_term = cdd.cdd_loss(j_s, j_t, model.disc, config.grl_scale)
                total = total + config.lambda1 * cdd_term
                l_cdd = float(cdd_term.data)
            if use_ccpa:
                ps = ccpa.domain_prototypes(f_s, ms_grid, m_s, model.align, config.attention_downsample)
                pt = ccpa.domain_prototypes(f_t, mt_grid, m_t, model.align, config.attention_downsample)
                align = ccpa.ccpa_loss(ps.protos, pt.protos, ps.beta, pt.beta, config.margin)
                total = total + config.lambda2 * align.total
                l_ccpa = float(align.total.data)
        total.backward()
        adam_step(params, opt)
        row = {"stage": stage, "step": step, "l_seg": float(l_seg.data), "l_cdd": l_cdd,
               "l_ccpa": l_ccpa, "l_total": float(total.data)}
        log_rows.append(row)
        if on_step is not None:
            on_step(row)
    return log_rows


def evaluate_model(model: Model, images: np.ndarray, labels: np.ndarray, chunk: int = 20) -> metrics.ClassMetrics:
    probs = model.predict(images, chunk)
    pred = metrics.argmax_labels(probs)
    gt = np.argmax(labels, axis=-1)
    return metrics.score_label_maps(pred, gt, synthdata.CLASS_NAMES[:model.n_classes])


def evaluate(checkpoint, data_root, domain: str, split: str = "test") -> metrics.ClassMetrics:
    """Score a checkpoint on one split (dropout off, frozen statistics)."""
    model = load_checkpoint(checkpoint)
    reader = synthdata.SplitReader(data_root, domain, split)
    return evaluate_model(model, reader.images, reader.labels, model.config.eval_batch)


def _n_classes(data_root, domain) -> int:
    manifest = json.loads((Path(data_root) / domain / "train" / "manifest.json").read_text())
    return len(manifest["class_frequencies"])


def train(config: ExperimentConfig, data_root, out_dir=None, cache: StageCache | None = None,
          keep_model: bool = False):
    """Run the stages implied by ``config.setting`` and score the result.

    Returns a :class:`RunRecord` (and the trained :class:`Model` when
    ``keep_model``). In DA mode the unlabelled domain's training labels are
    never opened; the reader raises if anything asks for them.
    """
    config.validate()
    t0 = time.perf_counter()
    data_root = Path(data_root)
    labelled_dom, unlabelled_dom = domain_roles(config)
    for dom in (labelled_dom, unlabelled_dom):
        if not (data_root / dom / "train" / "manifest.json").exists():
            raise FileNotFoundError(f"missing dataset split {data_root / dom / 'train'}")
    if config.setting == "TGT-SUPERVISED":
        fit_dom = unlabelled_dom
    else:
        fit_dom = labelled_dom
    eval_dom = labelled_dom if config.setting == "SRC-ONLY" else unlabelled_dom

    reads_before = synthdata.LABEL_READS[(unlabelled_dom, "train")]
    fit = synthdata.SplitReader(data_root, fit_dom, "train")
    other = synthdata.SplitReader(data_root, unlabelled_dom, "train", allow_labels=False)
    model = Model(config, _n_classes(data_root, fit_dom))
    record = RunRecord(config=config.to_dict(), eval_domain=eval_dom,
                       train_size=int(fit.images.shape[0]))
    out = Path(out_dir) if out_dir is not None else None

    stages = (1, 2, 3) if config.setting == "DA" else (1,)
    for stage in stages:
        try:
            if cache is not None and stage < 3:
                key = StageCache.key(config, data_root, stage, fit_dom, unlabelled_dom)
                hit = cache.get(key)
                if hit is None:
                    rows = run_stage(model, stage, config, fit, other)
                    cache.put(key, model.tensors(), rows)
                else:
                    model.load_tensors(hit[0])
                    rows = [dict(r) for r in hit[1]]
            else:
                rows = run_stage(model, stage, config, fit, other)
        except TrainingDivergenceError as exc:
            ckpt = save_checkpoint(model, out / "ckpt_last_good", stage) if out is not None else None
            raise TrainingDivergenceError(exc.primitive, ckpt) from exc
        record.losses.extend(rows)
        if out is not None:
            record.checkpoints.append(save_checkpoint(model, out / f"ckpt_stage{stage}", stage))

    if config.setting == "DA" and synthdata.LABEL_READS[(unlabelled_dom, "train")] != reads_before:
        raise LabelLeakageError(f"{unlabelled_dom}/train labels were read during adaptation")
    record.label_reads = {f"{unlabelled_dom}/train": synthdata.LABEL_READS[(unlabelled_dom, "train")] - reads_before}
    test = synthdata.SplitReader(data_root, eval_dom, "test")
    record.metrics = evaluate_model(model, test.images, test.labels, config.eval_batch)
    record.wall_time = time.perf_counter() - t0
    if out is not None:
        record.write(out)
    return (record, model) if keep_model else record


# -- sweeps ---------------------------------------------------------------------

GRID_KEYS = ("lambda1", "lambda2", "eta")


def expand_grid(grid) -> list[dict]:
    """A list of points is taken verbatim; a dict of lists is a Cartesian product."""
    if isinstance(grid, dict):
        bad = sorted(set(grid) - set(GRID_KEYS))
        if bad:
            raise ConfigError(bad[0], "grid axes are limited to lambda1, lambda2, eta")
        keys = [k for k in GRID_KEYS if k in grid]
        points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    else:
        points = [dict(p) for p in grid]
        for p in points:
            bad = sorted(set(p) - set(GRID_KEYS))
            if bad:
                raise ConfigError(bad[0], "grid axes are limited to lambda1, lambda2, eta")
    if not points:
        raise ConfigError("grid", "grid is empty")
    return points


def ablate(base: ExperimentConfig, grid, data_root, out_dir=None,
           cache: StageCache | None = None) -> tuple[list[RunRecord], str]:
    """One DA run per grid point; returns the records and a table CSV (one row per point)."""
    points = expand_grid(grid)
    cache = cache if cache is not None else StageCache()
    records = []
    for i, point in enumerate(points):
        cfg = base.replace(setting="DA", **point)
        run_dir = Path(out_dir) / f"point_{i:03d}" if out_dir is not None else None
        records.append(train(cfg, data_root, run_dir, cache))
    table = ablation_table(records)
    if out_dir is not None:
        Path(out_dir, "ablation.csv").write_text(table)
    return records, table


def ablation_table(records: list[RunRecord]) -> str:
    names = records[0].metrics.class_names
    header = ["lambda1", "lambda2", "eta"]
    for c in names:
        header += [f"{c}_dice_mean", f"{c}_dice_std", f"{c}_asd_mean", f"{c}_asd_std"]
    header.append("mean_dice")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in records:
        row = [r.config["lambda1"], r.config["lambda2"], r.config["eta"]]
        for c in names:
            row += [f"{r.metrics.dice[c].mean:.4f}", f"{r.metrics.dice[c].std:.4f}",
                    f"{r.metrics.asd[c].mean:.4f}", f"{r.metrics.asd[c].std:.4f}"]
        row.append(f"{r.mean_dice():.4f}")
        w.writerow(row)
    return buf.getvalue()
