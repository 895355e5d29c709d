"""Dataset manifests, splitting, amortized training and the per-pair baseline.

Manifest schema (one ``key = value`` per line, ``#`` comments)::

    atlas_volume = atlas.mvol
    atlas_mask = atlas_mask.mmsk
    atlas_mesh = atlas_mesh.obj
    seed = 0
    fractions = 0.7 0.2 0.1
    case = case000 cases/case000.mvol gt_mask=cases/case000_gt_mask.mmsk gt_mesh=cases/case000_gt_mesh.obj

Paths are relative to the manifest's directory and may not contain spaces.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_pairs
from .evaluation import dice, dice_atlas
from .loss import DEFAULT_WEIGHTS, LossBreakdown, LossWeights, total_loss
from .net.model import Adam, NetConfig, UNet3D, adam_step, load_checkpoint, save_checkpoint
from .volcore import (
    DisplacementField, Mask3D, SurfaceMesh, Volume3D, as_array, check_same_dims, dilate_sphere,
    read_mask, read_mesh, read_volume,
)
from .xform import splat_mask, warp_mesh

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A loss became non-finite; carries the offending case and breakdown."""

    def __init__(self, message, case_id=None, breakdown=None, trace=None):
        super().__init__(message)
        self.case_id = case_id
        self.breakdown = breakdown
        self.trace = trace


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    volume: Path
    gt_mask: Path | None = None
    gt_mesh: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    atlas_volume: Path
    atlas_mask: Path
    atlas_mesh: Path
    cases: tuple[CaseRecord, ...]
    seed: int = 0
    fractions: tuple[float, ...] = (0.7, 0.2, 0.1)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ConfigError(f"duplicate case ids: {dup}")
        if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, "
                              f"got {self.fractions}")

    def resolve(self, path) -> Path:
        return Path(self.root) / path

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def missing_files(self) -> list[Path]:
        paths = [self.atlas_volume, self.atlas_mask, self.atlas_mesh]
        for c in self.cases:
            paths += [p for p in (c.volume, c.gt_mask, c.gt_mesh) if p is not None]
        return [self.resolve(p) for p in paths if not self.resolve(p).is_file()]

    def to_text(self) -> str:
        lines = [f"atlas_volume = {self.atlas_volume.as_posix()}",
                 f"atlas_mask = {self.atlas_mask.as_posix()}",
                 f"atlas_mesh = {self.atlas_mesh.as_posix()}",
                 f"seed = {self.seed}",
                 "fractions = " + " ".join(repr(float(f)) for f in self.fractions)]
        for c in self.cases:
            parts = [c.case_id, c.volume.as_posix()]
            if c.gt_mask is not None:
                parts.append(f"gt_mask={c.gt_mask.as_posix()}")
            if c.gt_mesh is not None:
                parts.append(f"gt_mesh={c.gt_mesh.as_posix()}")
            lines.append("case = " + " ".join(parts))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, root=".", source: str = "<manifest>") -> "DatasetManifest":
        single: dict[str, str] = {}
        cases = []
        for key, value in parse_pairs(text, source):
            if key == "case":
                tokens = value.split()
                if len(tokens) < 2:
                    raise ConfigError(f"{source}: case line needs an id and a volume path")
                opts = {}
                for tok in tokens[2:]:
                    k, sep, v = tok.partition("=")
                    if not sep or k not in ("gt_mask", "gt_mesh"):
                        raise ConfigError(f"{source}: bad case option {tok!r}")
                    opts[k] = Path(v)
                cases.append(CaseRecord(tokens[0], Path(tokens[1]), **opts))
            elif key in ("atlas_volume", "atlas_mask", "atlas_mesh", "seed", "fractions"):
                if key in single:
                    raise ConfigError(f"{source}: {key} given twice")
                single[key] = value
            else:
                raise ConfigError(f"{source}: unknown manifest key {key!r}")
        missing = {"atlas_volume", "atlas_mask", "atlas_mesh"} - set(single)
        if missing:
            raise ConfigError(f"{source}: missing keys {sorted(missing)}")
        try:
            seed = int(single.get("seed", "0"))
            fractions = tuple(float(f) for f in
                              single.get("fractions", "0.7 0.2 0.1").replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        return cls(Path(single["atlas_volume"]), Path(single["atlas_mask"]),
                   Path(single["atlas_mesh"]), tuple(cases), seed, fractions, Path(root))

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        m = cls.from_text(path.read_text(), path.parent, str(path))
        if check_files:
            missing = m.missing_files()
            if missing:
                raise FileNotFoundError(f"manifest {path} references missing files: "
                                        + ", ".join(str(p) for p in missing))
        return m


@dataclass
class CaseData:
    case_id: str
    image: Volume3D
    gt_mask: Mask3D | None = None
    gt_mesh: SurfaceMesh | None = None


@dataclass
class Dataset:
    """Atlas triple plus cases, all in memory."""

    image: Volume3D
    mask: Mask3D
    mesh: SurfaceMesh
    cases: dict[str, CaseData]
    seed: int = 0
    fractions: tuple[float, ...] = (0.7, 0.2, 0.1)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.image.dims

    def case_ids(self) -> list[str]:
        return list(self.cases)


def load_dataset(manifest: DatasetManifest) -> Dataset:
    cases = {}
    for c in manifest.cases:
        cases[c.case_id] = CaseData(
            c.case_id, read_volume(manifest.resolve(c.volume)),
            read_mask(manifest.resolve(c.gt_mask)) if c.gt_mask is not None else None,
            read_mesh(manifest.resolve(c.gt_mesh), frame="patient")
            if c.gt_mesh is not None else None)
    ds = Dataset(read_volume(manifest.resolve(manifest.atlas_volume)),
                 read_mask(manifest.resolve(manifest.atlas_mask)),
                 read_mesh(manifest.resolve(manifest.atlas_mesh)), cases, manifest.seed,
                 manifest.fractions)
    check_same_dims(ds.image, ds.mask, *(c.image for c in cases.values()))
    return ds


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, fractions=(0.7, 0.2, 0.1)) -> tuple[int, ...]:
    """Round every partition but the last half-up; the last takes the remainder.

    Rounding uses the decimal value of each fraction, so ``0.7 * 655`` is
    458.5 and rounds to 459 rather than falling just short in binary.
    """
    if len(fractions) < 1:
        raise ValueError("need at least one fraction")
    sizes = []
    for f in fractions[:-1]:
        exact = Fraction(str(f)) * n
        sizes.append(int(math.floor(exact + Fraction(1, 2))))
    rest = n - sum(sizes)
    if rest < 0:
        raise ValueError(f"fractions {fractions} overshoot {n} cases")
    sizes.append(rest)
    return tuple(sizes)


def split_dataset(case_ids, seed: int = 0, fractions=(0.7, 0.2, 0.1)):
    """Seeded shuffle then consecutive slices; returns one list per fraction.

    ``case_ids`` may be a manifest, a dataset or a plain sequence of IDs.
    Every partition with a positive fraction must end up non-empty.
    """
    if isinstance(case_ids, DatasetManifest):
        ids = [c.case_id for c in case_ids.cases]
    elif isinstance(case_ids, Dataset):
        ids = case_ids.case_ids()
    else:
        ids = list(case_ids)
    n = len(ids)
    if n < max(3, len(fractions)):
        raise ValueError(f"need at least {max(3, len(fractions))} cases to split, got {n}")
    sizes = split_sizes(n, fractions)
    for f, s in zip(fractions, sizes):
        if f > 0 and s == 0:
            raise ValueError(f"{n} cases leave an empty partition for fractions {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    out, start = [], 0
    for s in sizes:
        out.append(shuffled[start:start + s])
        start += s
    return tuple(out)


def precompute_band(beta, radius: float = 3.0) -> Mask3D:
    """Band ``mu``: ``beta`` dilated by a ball of ``radius`` voxels."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not isinstance(beta, Mask3D):
        beta = Mask3D(np.asarray(beta, dtype=bool))
    return dilate_sphere(beta, radius)


# ---------------------------------------------------------------------------
# per-pair direct optimization


@dataclass
class DirectResult:
    field: DisplacementField
    trace: list[float]
    final: LossBreakdown | None = None


def optimize_direct(p, atlas, beta, mu, weights: LossWeights = DEFAULT_WEIGHTS,
                    steps: int = 200, lr: float = 0.05, reduction: str = "mean",
                    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> DirectResult:
    """Adam on the displacement field itself, starting from zero.

    ``trace[k]`` is the total loss at iterate ``k``; it has ``steps + 1``
    entries, the last one belonging to the returned field.
    """
    check_same_dims(p, atlas, beta, mu)
    if steps < 0:
        raise ValueError("steps must be >= 0")
    spacing = getattr(atlas, "spacing", (1.0, 1.0, 1.0))
    u = np.zeros(as_array(atlas).shape + (3,))
    params = {"u": u}
    opt = Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    trace = []
    br = None
    for k in range(steps + 1):
        br = total_loss(atlas, p, u, beta, mu, weights, reduction)
        trace.append(br.total)
        if not np.isfinite(br.total) or not np.all(np.isfinite(br.grad)):
            raise DivergenceError(f"non-finite loss at step {k}", breakdown=br, trace=trace)
        if k < steps:
            opt.step({"u": br.grad})
    return DirectResult(DisplacementField(u, spacing), trace, br)


# ---------------------------------------------------------------------------
# amortized training


@dataclass(frozen=True)
class TrainConfig:
    lambda_cc: float = 0.1
    lambda_gd: float = 0.85
    lambda_ls: float = 0.05
    epochs: int = 30
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reduction: str = "mean"
    levelset: bool = True
    band_radius: float = 3.0
    seed: int = 0
    checkpoint_every: int = 1
    supersample: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.band_radius > 0:
            raise ValueError("band_radius must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        self.weights  # validates the weights

    @property
    def weights(self) -> LossWeights:
        """Effective weights; the level-set term gets 0 when the flag is off."""
        return LossWeights(self.lambda_cc, self.lambda_gd,
                           self.lambda_ls if self.levelset else 0.0)


CASE_LOG_FIELDS = ["epoch", "step", "case_id", "cc", "cc_term", "gd", "ls", "total",
                   "w_cc", "w_gd", "w_ls"]
EPOCH_LOG_FIELDS = ["epoch", "train_loss_mean", "val_loss_mean", "val_dice_atlas",
                    "val_dice_patient", "best"]


@dataclass
class TrainResult:
    net: UNet3D
    best_net: UNet3D
    split: tuple
    case_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def validate(net: UNet3D, data: Dataset, case_ids, mu, weights: LossWeights,
             reduction: str = "mean", supersample: int = 3) -> dict:
    """Mean loss and Dice of an inference-mode forward over ``case_ids``."""
    losses, d_atlas, d_patient = [], [], []
    for cid in case_ids:
        case = data.cases[cid]
        u = net.forward_volume(case.image, mode="infer")
        losses.append(total_loss(data.image, case.image, u, data.mask, mu, weights,
                                 reduction).total)
        if case.gt_mask is not None:
            d_atlas.append(dice_atlas(case.gt_mask, u, data.mask))
            d_patient.append(dice(splat_mask(data.mask, u, supersample), case.gt_mask))
    nan = float("nan")
    return {"val_loss_mean": float(np.mean(losses)) if losses else nan,
            "val_dice_atlas": float(np.mean(d_atlas)) if d_atlas else nan,
            "val_dice_patient": float(np.mean(d_patient)) if d_patient else nan}


def _score(row) -> float:
    if not math.isnan(row["val_dice_patient"]):
        return row["val_dice_patient"]
    return -row["val_loss_mean"]


def train_amortized(data, net_config: NetConfig, train_config: TrainConfig, out_dir=None,
                    split=None, resume=None) -> TrainResult:
    """Self-supervised training, one case per step, reshuffled every epoch.

    ``data`` is a :class:`DatasetManifest` or an in-memory :class:`Dataset`.
    ``split`` overrides the seeded split with explicit ``(train, val, test)``
    ID lists. Epoch 0 in the epoch log is the untrained network. With
    ``out_dir`` the logs and ``last.ckpt`` / ``best.ckpt`` are written there;
    ``resume`` continues from a ``last.ckpt`` written by an earlier run.
    """
    if isinstance(data, DatasetManifest):
        data = load_dataset(data)
    cfg = train_config
    if split is None:
        split = split_dataset(data, data.seed, data.fractions)
    train_ids, val_ids = list(split[0]), list(split[1])
    if not train_ids:
        raise ValueError("no training cases")
    if net_config.input_dims is None:
        net_config = replace(net_config, input_dims=data.dims)
    weights = cfg.weights
    mu = precompute_band(data.mask, cfg.band_radius)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    case_log: list[dict] = []
    epoch_log: list[dict] = []
    if resume is not None:
        net, opt, extra = load_checkpoint(resume, expected=net_config)
        if opt is None:
            raise ValueError("resume checkpoint carries no optimizer state")
        start = int(extra["epoch"]) + 1
        best_epoch = int(extra["best_epoch"])
        best_score = float(extra["best_score"])
        best_path = Path(resume).with_name("best.ckpt")
        best_net = load_checkpoint(best_path)[0] if best_path.is_file() else copy.deepcopy(net)
        if out is not None and (out / "train_log.csv").is_file():
            case_log = [r for r in _typed_rows(_read_csv(out / "train_log.csv"))
                        if r["epoch"] < start]
            epoch_log = [r for r in _typed_rows(_read_csv(out / "val_log.csv"))
                         if r["epoch"] < start]
    else:
        net = UNet3D(net_config)
        opt = Adam(net.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        row = {"epoch": 0, "train_loss_mean": float("nan"), "best": 1}
        row.update(validate(net, data, val_ids, mu, weights, cfg.reduction, cfg.supersample))
        epoch_log.append(row)
        best_epoch, best_score = 0, _score(row)
        best_net = copy.deepcopy(net)
        start = 1
        if out is not None:
            save_checkpoint(out / "best.ckpt", net, opt, _extra(0, 0, best_score, cfg))

    for epoch in range(start, cfg.epochs + 1):
        # per-epoch generator so a resumed run sees the same order
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        totals = []
        for cid in order:
            case = data.cases[cid]
            net.zero_grad()
            u = net.forward_volume(case.image, mode="train")
            br = total_loss(data.image, case.image, u, data.mask, mu, weights, cfg.reduction)
            row = {"epoch": epoch, "step": opt.t + 1, "case_id": cid, **br.as_row(),
                   "w_cc": weights.cc, "w_gd": weights.gd, "w_ls": weights.ls}
            case_log.append(row)
            if not np.isfinite(br.total) or not np.all(np.isfinite(br.grad)):
                logger.error("non-finite loss on %s at epoch %d: %s", cid, epoch, br.as_row())
                raise DivergenceError(f"non-finite loss on case {cid} at epoch {epoch}: "
                                      f"{br.as_row()}", case_id=cid, breakdown=br)
            net.backward_field(br.grad)
            adam_step(net, opt)
            totals.append(br.total)

        row = {"epoch": epoch, "train_loss_mean": float(np.mean(totals)), "best": 0}
        row.update(validate(net, data, val_ids, mu, weights, cfg.reduction, cfg.supersample))
        score = _score(row)
        if score > best_score:
            best_epoch, best_score = epoch, score
            best_net = copy.deepcopy(net)
            row["best"] = 1
        epoch_log.append(row)
        logger.info("epoch %d train %.6g val loss %.6g dice %.4f", epoch, row["train_loss_mean"],
                    row["val_loss_mean"], row["val_dice_patient"])
        if out is not None:
            extra = _extra(epoch, best_epoch, best_score, cfg)
            if row["best"]:
                save_checkpoint(out / "best.ckpt", best_net, opt, extra)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                save_checkpoint(out / "last.ckpt", net, opt, extra)
                _write_csv(out / "train_log.csv", CASE_LOG_FIELDS, case_log)
                _write_csv(out / "val_log.csv", EPOCH_LOG_FIELDS, epoch_log)

    return TrainResult(net, best_net, tuple(list(s) for s in split), case_log, epoch_log,
                       best_epoch)


def _extra(epoch, best_epoch, best_score, cfg: TrainConfig) -> dict:
    return {"epoch": epoch, "best_epoch": best_epoch, "best_score": best_score,
            "seed": cfg.seed}


def _typed_rows(rows):
    out = []
    for r in rows:
        t = {}
        for k, v in r.items():
            if k == "case_id":
                t[k] = v
            elif k in ("epoch", "step", "best"):
                t[k] = int(v)
            else:
                t[k] = float(v)
        out.append(t)
    return out


# ---------------------------------------------------------------------------
# inference


def register_case(checkpoint, p) -> DisplacementField:
    """Inference-mode field for ``p`` from a checkpoint path or a network."""
    net = checkpoint if isinstance(checkpoint, UNet3D) else load_checkpoint(checkpoint)[0]
    return net.forward_volume(p, mode="infer")


def segment_case(u, alpha: SurfaceMesh, beta, supersample: int = 3, patient_dims=None):
    """Push the atlas mesh and mask into patient space: ``(phi(alpha), mask)``."""
    check_same_dims(u, beta)
    return warp_mesh(alpha, u), splat_mask(beta, u, supersample, patient_dims)
