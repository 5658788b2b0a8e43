"""Per-sequence error statistics, report files and diagnostic plots.

Errors are ``ground truth - predicted``; sigma is the population standard
deviation. Statistics for a sequence pool both cameras.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from .data_ingest import DatasetManifest, load_image  # noqa: E402
from .geometry import CANONICAL_CAMERA, CameraModel, ground_normal  # noqa: E402
from .model import DistanceCNN, DistanceLSTM, ModelCheckpoint  # noqa: E402
from .sampling import PairIndex, consecutive_pairs, windows_from_pairs  # noqa: E402
from .training import ImageStore, pair_tensor  # noqa: E402

REPORT_VERSION = 1
CSV_COLUMNS = ["sequence", "camera", "frame_i", "frame_j", "gt_m", "pred_m", "error_m"]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalStats:
    mu: float
    sigma: float
    n: int
    sequence_id: str | None = None
    camera_id: str | None = None


@dataclass(frozen=True)
class PairPrediction:
    sequence_id: str
    camera_id: str
    frame_i: int
    frame_j: int
    gt: float
    pred: float | None
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def covered(self) -> bool:
        return self.pred is not None

    @property
    def error(self) -> float | None:
        return None if self.pred is None else self.gt - self.pred


def error_stats(gts, preds, sequence_id: str | None = None, camera_id: str | None = None) -> EvalStats:
    g = np.asarray(gts, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    if g.size == 0 or g.shape != p.shape:
        raise EvaluationError("error_stats needs equal, non-empty inputs")
    d = g - p
    mu = float(np.mean(d))
    sigma = float(np.sqrt(np.mean((d - mu) ** 2)))
    return EvalStats(mu, sigma, int(d.size), sequence_id, camera_id)


def smoothness(series: Iterable[Sequence[float]]) -> float:
    """Population variance of consecutive prediction differences pooled over series."""
    diffs = [np.diff(np.asarray(s, dtype=np.float64)) for s in series]
    diffs = [d for d in diffs if d.size]
    if not diffs:
        return float("nan")
    return float(np.var(np.concatenate(diffs)))


# -- prediction ------------------------------------------------------------------


def _embed_pairs(cnn: DistanceCNN, store: ImageStore, pairs: list[PairIndex], batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    dists, embs = [], []
    cnn.eval()
    with torch.no_grad():
        for s in range(0, len(pairs), batch_size):
            x = torch.from_numpy(np.stack([pair_tensor(store, p) for p in pairs[s : s + batch_size]]))
            d, e = cnn(x)
            dists.append(d.numpy())
            embs.append(e.numpy())
    if not dists:
        return np.zeros(0, np.float32), np.zeros((0, cnn.cfg.embedding_width), np.float32)
    return np.concatenate(dists), np.concatenate(embs)


def predict_pairs(checkpoint: ModelCheckpoint, manifest: DatasetManifest, target_camera: CameraModel | None = None, batch_size: int = 32) -> list[PairPrediction]:
    """Predict every consecutive pair of every (sequence, camera) trajectory.

    LSTM models reuse one CNN embedding per pair across overlapping windows;
    pairs without a full window around them are returned with ``pred=None``.
    """
    model = checkpoint.to_model()
    cnn = model.cnn if isinstance(model, DistanceLSTM) else model
    h, w, _ = checkpoint.cnn_config.input_shape
    if target_camera is None:
        target_camera = CANONICAL_CAMERA if (h, w) == (120, 280) else None
    if target_camera is None or (target_camera.height, target_camera.width) != (h, w):
        raise EvaluationError(f"target camera does not match model input {w}x{h}")
    store = ImageStore(manifest, target_camera)
    out: list[PairPrediction] = []
    for traj in manifest.trajectories():
        pairs = consecutive_pairs(traj)
        if not pairs:
            continue
        centers = traj.centers()
        dists, embs = _embed_pairs(cnn, store, pairs, batch_size)
        if isinstance(model, DistanceLSTM):
            cfg = model.lstm_cfg
            preds: list[float | None] = [None] * len(pairs)
            n_win = len(pairs) - cfg.window_length + 1
            if n_win > 0:
                stacked = np.stack([embs[k : k + cfg.window_length] for k in range(n_win)])
                with torch.no_grad():
                    vals = []
                    for s in range(0, n_win, batch_size):
                        vals.append(model.forward_embeddings(torch.from_numpy(stacked[s : s + batch_size])).numpy())
                    vals = np.concatenate(vals)
                for k, v in enumerate(vals):
                    preds[k + cfg.target_position] = float(v)
        else:
            preds = [float(v) for v in dists]
        for k, (p, pr) in enumerate(zip(pairs, preds)):
            mid = tuple(float(c) for c in (centers[k] + centers[k + 1]) / 2)
            out.append(PairPrediction(p.sequence_id, p.camera_id.value, p.i, p.j, p.distance_label, pr, mid))
    return out


# -- reports ---------------------------------------------------------------------


@dataclass
class EvalReport:
    per_sequence: list[EvalStats]
    pooled: EvalStats
    records: list[PairPrediction]
    total_pairs: int
    covered_pairs: int
    smoothness: float
    fingerprints: dict = field(default_factory=dict)

    @property
    def uncovered_pairs(self) -> int:
        return self.total_pairs - self.covered_pairs

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "sign_convention": "error = gt - pred",
            "sigma": "population",
            "per_sequence": [asdict(s) for s in self.per_sequence],
            "pooled": asdict(self.pooled),
            "total_pairs": self.total_pairs,
            "covered_pairs": self.covered_pairs,
            "uncovered_pairs": self.uncovered_pairs,
            "smoothness_var_diff": self.smoothness,
            "fingerprints": self.fingerprints,
        }

    def save(self, out_dir: str | Path, name: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / f"{name}.json"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        cpath = out / f"{name}_pairs.csv"
        with open(cpath, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_COLUMNS)
            for r in self.records:
                if r.covered:
                    wr.writerow([r.sequence_id, r.camera_id, r.frame_i, r.frame_j, repr(r.gt), repr(r.pred), repr(r.error)])
        return jpath, cpath


def build_report(predictions: list[PairPrediction], fingerprints: dict | None = None) -> EvalReport:
    covered = [p for p in predictions if p.covered]
    if not covered:
        raise EvaluationError("no covered pairs to evaluate")
    by_seq: dict[str, list[PairPrediction]] = {}
    for p in covered:
        by_seq.setdefault(p.sequence_id, []).append(p)
    per_seq = [error_stats([p.gt for p in ps], [p.pred for p in ps], seq) for seq, ps in sorted(by_seq.items())]
    pooled = error_stats([p.gt for p in covered], [p.pred for p in covered], "pooled")
    series: dict[tuple[str, str], list[float]] = {}
    for p in covered:
        series.setdefault((p.sequence_id, p.camera_id), []).append(p.pred)
    return EvalReport(per_seq, pooled, predictions, len(predictions), len(covered), smoothness(series.values()), dict(fingerprints or {}))


def evaluate(checkpoint: ModelCheckpoint, manifest: DatasetManifest, target_camera: CameraModel | None = None) -> EvalReport:
    preds = predict_pairs(checkpoint, manifest, target_camera)
    fps = {"config": checkpoint.config_fingerprint, "params": checkpoint.param_fingerprint(), "kind": checkpoint.kind}
    return build_report(preds, fps)


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def format_table(rows: Sequence[tuple[str, dict]], sequences: Sequence[str] | None = None) -> str:
    """Text table with one row per run and a (mu, sigma) column pair per sequence."""
    if sequences is None:
        seen: list[str] = []
        for _, rep in rows:
            for s in rep["per_sequence"]:
                if s["sequence_id"] not in seen:
                    seen.append(s["sequence_id"])
        sequences = sorted(seen)
    name_w = max([len("Method")] + [len(n) for n, _ in rows])
    head1 = f"{'#':>2} | {'':<{name_w}} | " + " | ".join(f"{'Seq ' + s:^17}" for s in sequences)
    head2 = f"{'':>2} | {'Method':<{name_w}} | " + " | ".join(f"{'mu':>8} {'sigma':>8}" for _ in sequences)
    lines = [head1, head2, "-" * len(head2)]
    for k, (name, rep) in enumerate(rows, start=1):
        stats = {s["sequence_id"]: s for s in rep["per_sequence"]}
        cells = []
        for s in sequences:
            st = stats.get(s)
            cells.append(f"{st['mu']:8.3f} {st['sigma']:8.3f}" if st else f"{'-':>8} {'-':>8}")
        lines.append(f"{k:>2} | {name:<{name_w}} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


# -- plots -------------------------------------------------------------------------


def _save(fig, path: str | Path | None) -> Path | None:
    if path is None:
        plt.close(fig)
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def histogram_bins(errors, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Bins centered on multiples of ``bin_width`` (one bin centered at 0),
    symmetric in extent. Returns (bin centers, counts)."""
    if not bin_width > 0:
        raise EvaluationError("bin width must be positive")
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise EvaluationError("histogram needs at least one error")
    k = np.floor(e / bin_width + 0.5).astype(np.int64)
    kmax = int(np.abs(k).max())
    counts = np.bincount(k + kmax, minlength=2 * kmax + 1)
    centers = np.arange(-kmax, kmax + 1) * bin_width
    return centers, counts


def histogram(errors, bin_width: float, path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    centers, counts = histogram_bins(errors, bin_width)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(centers, counts, width=bin_width * 0.95, color="tab:blue")
    ax.set_xlabel("error (gt - pred), m")
    ax.set_ylabel("pairs")
    fig.tight_layout()
    _save(fig, path)
    return centers, counts


def segment_colors(errors, cmap: str = "inferno", vmax: float | None = None) -> np.ndarray:
    a = np.abs(np.asarray(errors, dtype=np.float64))
    top = vmax if vmax is not None else (a.max() if a.size and a.max() > 0 else 1.0)
    return plt.get_cmap(cmap)(np.clip(a / top, 0, 1))


def ground_plane_xy(centers: np.ndarray, normal: np.ndarray | None = None) -> np.ndarray:
    """Project points on the plane perpendicular to ``normal`` (2-D coordinates)."""
    n = np.array([0.0, 0.0, 1.0]) if normal is None else np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = a - np.dot(a, n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return np.column_stack([centers @ e1, centers @ e2])


def trajectory_error_plot(trajectory, errors, path: str | Path | None = None) -> tuple[Path | None, np.ndarray]:
    """Top-down polyline of the camera centers colored by |error| per pair.

    Returns the written path and the RGBA color of every segment.
    """
    centers = trajectory.centers()
    err = np.asarray(errors, dtype=np.float64)
    if len(err) != len(centers) - 1:
        raise EvaluationError(f"{len(err)} errors for {len(centers)} frames; need one per consecutive pair")
    xy = ground_plane_xy(centers, ground_normal(trajectory))
    segs = np.stack([xy[:-1], xy[1:]], axis=1)
    vmax = float(np.abs(err).max()) if err.size and np.abs(err).max() > 0 else 1.0
    colors = segment_colors(err, vmax=vmax)
    fig, ax = plt.subplots(figsize=(6, 6))
    lc = LineCollection(segs, colors=colors, linewidths=2)
    ax.add_collection(lc)
    ax.autoscale()
    ax.set_aspect("equal")
    sm = plt.cm.ScalarMappable(cmap="inferno", norm=plt.Normalize(0, vmax))
    fig.colorbar(sm, ax=ax, label="|error|, m")
    fig.tight_layout()
    return _save(fig, path), colors


def worst_k(records: Sequence[PairPrediction], k: int, manifest: DatasetManifest | None = None, path: str | Path | None = None) -> list[tuple[tuple[str, str, int, int], float]]:
    """Top-k covered pairs by |error|, ties broken by (sequence, camera, frame)."""
    cov = [r for r in records if r.covered]
    if k > len(cov):
        raise EvaluationError(f"k={k} exceeds {len(cov)} evaluated pairs")
    ranked = sorted(cov, key=lambda r: (-abs(r.error), r.sequence_id, r.frame_i, r.camera_id))[:k]
    out = [((r.sequence_id, r.camera_id, r.frame_i, r.frame_j), r.error) for r in ranked]
    if path is not None and manifest is not None and ranked:
        lookup = manifest.lookup()
        fig, axes = plt.subplots(len(ranked), 2, figsize=(8, 1.8 * len(ranked)), squeeze=False)
        for row, r in zip(axes, ranked):
            for ax, f in zip(row, (r.frame_i, r.frame_j)):
                ax.imshow(load_image(lookup[(r.sequence_id, r.camera_id, f)].image_path))
                ax.set_axis_off()
            row[0].set_title(f"{r.sequence_id} {r.camera_id} {r.frame_i}->{r.frame_j}  err {r.error:+.3f} m", fontsize=8, loc="left")
        fig.tight_layout()
        _save(fig, path)
    return out


def per_frame_curve_plot(gt, pred, path: str | Path | None = None, frames=None) -> Path | None:
    g = np.asarray(gt, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if g.shape != p.shape:
        raise EvaluationError("gt and pred series differ in length")
    x = np.arange(len(g)) if frames is None else np.asarray(frames)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(x, p, color="tab:blue", lw=1, label="predicted")
    ax.plot(x, g, color="tab:red", lw=1, label="ground truth")
    ax.set_xlabel("frame index")
    ax.set_ylabel("distance, m")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
