"""Synthetic paired datasets, AdamW training and evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import Reconstructor
from .deconv import build_inverse_filter, deconvolve
from .metrics import QualityReport, psnr, ssim
from .optics import (ApertureMask, ImageGrid, NoiseSpec, PinholeGeometry, apply_noise,
                     coded_capture, psf_from_mask)
from .rasters import load_raster, save_raster

__all__ = [
    "preprocess", "builtin_corpus", "sample_references", "load_image_dir", "select_images",
    "PairRecord", "PairedDataset", "synth_capture_dataset", "save_dataset", "load_dataset",
    "TrainConfig", "OptimizerState", "adamw_step", "lr_schedule", "TrainingDiverged",
    "TrainResult", "train", "predict", "evaluate", "MeanImageBaseline", "RidgeBaseline",
    "fit_ridge_eps",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm")


# ---------------------------------------------------------------- references

def preprocess(image, target_size) -> ImageGrid:
    """Centre-crop to the largest square, then bilinear-resize to ``target_size``."""
    values = image.values if isinstance(image, ImageGrid) else np.asarray(image, dtype=np.float64)
    if values.ndim not in (2, 3) or min(values.shape[:2]) < 1:
        raise ValueError(f"need a non-empty 2D image, got shape {values.shape}")
    n = int(target_size)
    H, W = values.shape[:2]
    s = min(H, W)
    y0, x0 = (H - s) // 2, (W - s) // 2
    sq = values[y0:y0 + s, x0:x0 + s]
    if s != n:
        m = T.bilinear_matrix(s, n)
        sq = np.einsum("ij,jk...->ik...", m, sq)
        sq = np.einsum("ij,kj...->ki...", m, sq)
    return ImageGrid(np.ascontiguousarray(sq))


def _to_gray(img):
    from skimage.color import rgb2gray, rgba2rgb
    from skimage.util import img_as_float

    img = img_as_float(img)
    if img.ndim == 3 and img.shape[2] == 4:
        img = rgba2rgb(img)
    if img.ndim == 3:
        img = rgb2gray(img)
    return np.asarray(img, dtype=np.float64)


BUILTIN_NAMES = (
    "camera", "astronaut", "coffee", "chelsea", "rocket", "moon", "page", "text", "coins",
    "brick", "grass", "gravel", "cell", "clock", "hubble_deep_field", "retina",
    "immunohistochemistry", "colorwheel",
)


def builtin_corpus(names=BUILTIN_NAMES):
    """Grayscale images bundled with scikit-image, as ``{name: array in [0, 1]}``."""
    from skimage import data

    return {n: _to_gray(getattr(data, n)()) for n in names}


def sample_references(n, size, seed=0, corpus=None, min_crop=None):
    """``n`` square grayscale references from random crops of ``corpus``.

    Each crop has a random side between ``min_crop`` (default ``2*size``) and
    the smaller image dimension, then goes through :func:`preprocess`.
    Returns a list of ``(id, ImageGrid)``.
    """
    corpus = builtin_corpus() if corpus is None else corpus
    names = sorted(corpus)
    rng = np.random.default_rng(seed)
    lo = 2 * size if min_crop is None else min_crop
    out = []
    for i in range(n):
        name = names[rng.integers(len(names))]
        img = corpus[name]
        H, W = img.shape[:2]
        top = min(H, W)
        side = int(rng.integers(min(lo, top), top + 1))
        y = int(rng.integers(0, H - side + 1))
        x = int(rng.integers(0, W - side + 1))
        ref = preprocess(img[y:y + side, x:x + side], size)
        out.append((f"{name}_{i:05d}", ImageGrid(np.clip(ref.values, 0.0, 1.0))))
    return out


def load_image_dir(path, size, gray=True):
    """Every image file under ``path`` (sorted), preprocessed to ``size``."""
    from PIL import Image

    files = sorted(p for p in Path(path).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images under {path}")
    out = []
    for p in files:
        with Image.open(p) as im:
            arr = np.array(im)
        arr = _to_gray(arr) if gray else arr.astype(np.float64) / np.iinfo(arr.dtype).max
        out.append((str(p.relative_to(path).with_suffix("")).replace("/", "_"), preprocess(arr, size)))
    return out


def select_images(root, n_categories, per_category, seed=0):
    """Pick ``per_category`` files from each of ``n_categories`` random
    sub-directories of ``root`` (category folders)."""
    root = Path(root)
    cats = sorted(d for d in root.iterdir() if d.is_dir())
    if len(cats) < n_categories:
        raise ValueError(f"{root} has {len(cats)} categories, {n_categories} requested")
    rng = np.random.default_rng(seed)
    picked = []
    for ci in sorted(rng.choice(len(cats), n_categories, replace=False)):
        files = sorted(p for p in cats[ci].iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < per_category:
            raise ValueError(f"category {cats[ci].name} has only {len(files)} images")
        picked += [files[j] for j in sorted(rng.choice(len(files), per_category, replace=False))]
    return picked


# ---------------------------------------------------------------- datasets

def _hash(values):
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class PairRecord:
    id: str
    capture: ImageGrid
    reference: ImageGrid
    split: str
    hash: str


@dataclass
class PairedDataset:
    records: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def arrays(self, split, dtype=np.float32):
        """``(captures, references)`` stacked as ``(N, H, W, C)``."""
        recs = self.split(split)
        if not recs:
            return None, None

        def stack(vals):
            a = np.stack(vals).astype(dtype)
            return a[..., None] if a.ndim == 3 else a

        return stack([r.capture.values for r in recs]), stack([r.reference.values for r in recs])

    def check_hygiene(self):
        train = {r.hash for r in self.split("train")}
        leaked = [r.id for r in self.split("eval") if r.hash in train]
        if leaked:
            raise ValueError(f"eval records also in train: {leaked[:3]}")


def synth_capture_dataset(references, mask: ApertureMask | None, geom: PinholeGeometry,
                          noise: NoiseSpec | None = None, seed=0, n_eval=0, *, psf=None,
                          boundary="periodic") -> PairedDataset:
    """Simulate a capture for every ``(id, ImageGrid)`` reference.

    Captures are divided by the PSF total so they share the reference
    intensity range; noise is added after that, with a per-record generator
    derived from ``seed``. ``n_eval`` records chosen by a seeded permutation
    form the eval split.
    """
    references = list(references)
    if not references:
        raise ValueError("no references")
    shape = references[0][1].values.shape[:2]
    pitch = references[0][1].pixel_pitch
    if psf is None:
        psf = psf_from_mask(mask, geom, shape, pitch)
    total = float(psf.values.sum())
    if n_eval > len(references):
        raise ValueError(f"n_eval={n_eval} exceeds {len(references)} references")
    rng = np.random.default_rng(seed)
    eval_idx = set(rng.permutation(len(references))[:n_eval].tolist())
    records = []
    for i, (rid, ref) in enumerate(references):
        if ref.values.shape[:2] != shape:
            raise ValueError(f"reference {rid} has shape {ref.values.shape}, expected {shape}")
        g = coded_capture(ref, mask, geom, None, psf=psf, boundary=boundary).values / total
        g = apply_noise(g, noise, np.random.default_rng([seed, i]))
        records.append(PairRecord(rid, ImageGrid(g, pitch), ref,
                                  "eval" if i in eval_idx else "train", _hash(ref.values)))
    prov = {
        "seed": seed, "n_eval": n_eval, "boundary": boundary, "psf_total": total,
        "geometry": geom.to_dict(), "noise": None if noise is None else asdict(noise),
        "mask": None if mask is None else {"grid_pitch": mask.grid_pitch, "thickness": mask.thickness,
                                           **mask.meta},
    }
    ds = PairedDataset(records, prov)
    ds.check_hygiene()
    return ds


def save_dataset(ds: PairedDataset, root):
    """Write ``refs/``, ``captures/`` (16-bit PNG + sidecars) and ``manifest.json``."""
    root = Path(root)
    (root / "refs").mkdir(parents=True, exist_ok=True)
    (root / "captures").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in ds.records:
        ref_p = Path("refs") / f"{r.id}.png"
        cap_p = Path("captures") / f"{r.id}.png"
        save_raster(root / ref_p, r.reference.values, {"id": r.id, "role": "reference"}, 0.0, 1.0)
        save_raster(root / cap_p, r.capture.values, {"id": r.id, "role": "capture"})
        entries.append({"id": r.id, "split": r.split, "hash": r.hash,
                        "reference": str(ref_p), "capture": str(cap_p)})
    manifest = {"pixel_pitch": ds.records[0].reference.pixel_pitch if ds.records else 1.0,
                "provenance": ds.provenance, "records": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root) -> PairedDataset:
    root = Path(root)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise FileNotFoundError(f"{man_path} not found")
    manifest = json.loads(man_path.read_text())
    pitch = manifest.get("pixel_pitch", 1.0)
    records = []
    for e in manifest["records"]:
        ref, _ = load_raster(root / e["reference"])
        cap, _ = load_raster(root / e["capture"])
        records.append(PairRecord(e["id"], ImageGrid(cap, pitch), ImageGrid(ref, pitch),
                                  e["split"], e["hash"]))
    return PairedDataset(records, manifest.get("provenance", {}))


# ---------------------------------------------------------------- optimisation

@dataclass
class TrainConfig:
    learning_rate: float = 6e-5
    weight_decay: float = 0.1
    batch_size: int = 4
    epochs: int = 50
    warmup_epochs: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    eval_every: int = 1

    def validate(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate: must be non-negative")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay: must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs: must satisfy 0 <= warmup_epochs < epochs")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown TrainConfig field")
        return cls(**d)


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    @classmethod
    def zeros(cls, params, config: TrainConfig | None = None):
        c = config or TrainConfig()
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, c.beta1, c.beta2, c.delta)


def lr_schedule(step, config: TrainConfig, steps_per_epoch=1):
    """Linear warmup to ``learning_rate`` over ``warmup_epochs`` epochs, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = config.warmup_epochs * steps_per_epoch
    if warm == 0 or step >= warm:
        return config.learning_rate
    return config.learning_rate * (step + 1) / warm


def adamw_step(params, grads, state: OptimizerState, config: TrainConfig, lr=None):
    """One AdamW update, in place: ``p -= lr * (m_hat / (sqrt(v_hat) + delta) + wd * p)``."""
    lr = config.learning_rate if lr is None else lr
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.delta) + config.weight_decay * p.data
        p.data = (p.data - lr * upd).astype(p.dtype)
    return params, state


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    history: list
    batch_log: list


def _as_model_fn(model):
    if isinstance(model, Reconstructor):
        return lambda x: model(x, training=False).data
    return model


def predict(model, captures, batch_size=16):
    """Run ``model`` (a Reconstructor or any array callable) over ``captures``."""
    fn = _as_model_fn(model)
    outs = [np.asarray(fn(captures[i:i + batch_size])) for i in range(0, len(captures), batch_size)]
    return np.concatenate(outs, axis=0)


def train(model: Reconstructor, dataset: PairedDataset, config: TrainConfig, out_dir=None,
          progress=None) -> TrainResult:
    """Minimise the mean squared error between ``model(capture)`` and the reference.

    Every epoch draws a seeded permutation of the train split. With
    ``out_dir`` a ``history.csv``, per-epoch checkpoints and a batch log are
    written there.
    """
    config.validate()
    X, Y = dataset.arrays("train", model.dtype)
    if X is None:
        raise ValueError("dataset has no train records")
    if Y.shape[1:] != tuple(model.spec.out_size) + (model.spec.out_channels,):
        raise ValueError(f"reference shape {Y.shape[1:]} does not match model output "
                         f"{tuple(model.spec.out_size) + (model.spec.out_channels,)}")
    Xe, Ye = dataset.arrays("eval", model.dtype)
    train_recs = dataset.split("train")
    params = model.parameters()
    state = OptimizerState.zeros(params, config)
    rng = np.random.default_rng(config.seed)
    n = len(X)
    spe = math.ceil(n / config.batch_size)
    history, batch_log = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "model_spec.json").write_text(model.spec.to_json())
    step = 0
    lr = lr_schedule(0, config, spe)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b in range(spe):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = lr_schedule(step, config, spe)
            try:
                with T.Tape() as tape:
                    loss = T.mse_loss(model(T.Tensor(X[idx]), training=True), T.Tensor(Y[idx]))
                grads = tape.backward(loss, params)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch} batch {b} (lr={lr:.3g}): {exc}") from exc
            val = float(loss.data)
            if not (math.isfinite(val) and val >= 0):
                raise TrainingDiverged(f"loss {val} at epoch {epoch} batch {b} (lr={lr:.3g})")
            adamw_step(params, [grads[p] for p in params], state, config, lr)
            losses.append(val)
            batch_log.append({"epoch": epoch, "batch": b, "ids": [train_recs[i].id for i in idx],
                              "hashes": [train_recs[i].hash for i in idx]})
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr}
        if Xe is not None and config.eval_every and epoch % config.eval_every == 0:
            pred = np.clip(predict(model, Xe), 0.0, 1.0)
            row["eval_psnr"] = float(np.mean([psnr(p, y) for p, y in zip(pred, Ye)]))
            row["eval_ssim"] = float(np.mean([ssim(p, y) for p, y in zip(pred, Ye)]))
        history.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            T.save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}", model.state_dict())
            _write_history(out / "history.csv", history)
    if out is not None:
        with open(out / "batches.jsonl", "w") as fh:
            for rec in batch_log:
                fh.write(json.dumps(rec) + "\n")
    return TrainResult(history, batch_log)


def _write_history(path, history):
    cols = ["epoch", "train_loss", "lr", "eval_psnr", "eval_ssim"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in history:
            w.writerow([r["epoch"]] + [("" if r.get(c) is None else f"{r[c]:.8g}") for c in cols[1:]])


# ---------------------------------------------------------------- evaluation

def evaluate(model, dataset: PairedDataset, split="eval", name="", param_size_mb=0.0,
             clip=True) -> QualityReport:
    """Per-image PSNR/SSIM of ``model(capture)`` against the references."""
    recs = dataset.split(split)
    if not recs:
        raise ValueError(f"dataset has no {split!r} records")
    X, Y = dataset.arrays(split, np.float64 if not isinstance(model, Reconstructor) else model.dtype)
    pred = predict(model, X)
    if clip:
        pred = np.clip(pred, 0.0, 1.0)
    H, W = Y.shape[1:3]
    rep = QualityReport(model=name, in_out=f"({X.shape[1]},{X.shape[2]})-({H},{W})",
                        param_size_mb=param_size_mb, train_size=len(dataset.split("train")))
    for r, p, y in zip(recs, pred, Y):
        rep.add(r.id, psnr(p, y), ssim(p, y))
    return rep


class MeanImageBaseline:
    """Predicts the mean training reference for every input."""

    def __init__(self, dataset: PairedDataset):
        _, Y = dataset.arrays("train", np.float64)
        self.mean = Y.mean(axis=0)

    def __call__(self, x):
        return np.broadcast_to(self.mean, (len(x),) + self.mean.shape).copy()


class RidgeBaseline:
    """Ridge deconvolution of each capture with a (total-normalised) PSF."""

    def __init__(self, psf, eps_rel):
        values = psf.values if isinstance(psf, ImageGrid) else np.asarray(psf)
        self.filter = build_inverse_filter(values / values.sum(), eps_rel)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([deconvolve(img, self.filter) for img in x])


def fit_ridge_eps(dataset: PairedDataset, psf, grid=None, split="train", limit=64):
    """Pick the ``eps_rel`` from ``grid`` with the lowest clipped MSE on ``split``."""
    grid = np.logspace(-4, 0, 17) if grid is None else grid
    X, Y = dataset.arrays(split, np.float64)
    X, Y = X[:limit], Y[:limit]
    best = None
    for eps in grid:
        pred = np.clip(RidgeBaseline(psf, float(eps))(X), 0.0, 1.0)
        mse = float(np.mean((pred - Y) ** 2))
        if best is None or mse < best[1]:
            best = (float(eps), mse)
    return best[0]
