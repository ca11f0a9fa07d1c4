"""Image-quality metrics and the K-reference segmented colourisation protocol."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml
from numpy.lib.stride_tricks import sliding_window_view

from .dataprep.frames import Frame, Sequence as FrameSequence
from .engine import ShapeError, Tensor, no_grad, ops

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
FFD_LOADING = 1e-6


def _pair(a, b) -> tuple:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mse(pred, target) -> float:
    a, b = _pair(pred, target)
    d = a - b
    return float(np.mean(d * d))


def psnr(pred, target, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; zero error reports ``cap``."""
    m = mse(pred, target)
    if m == 0.0:
        return cap
    return min(cap, float(-10.0 * np.log10(m)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering with a symmetric 1-D kernel."""
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(pred, target, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean structural similarity on channel-mean grayscale, over fully covered windows."""
    a, b = _pair(pred, target)
    a, b = to_gray(a), to_gray(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"SSIM needs images of at least {window}x{window}, got {a.shape}")
    g = gaussian_window(window, sigma)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½) with the cross term from eigenvalues of Σa^½ Σb Σa^½."""
    root_a = _sqrtm_psd(cov_a)
    mid = root_a @ cov_b @ root_a
    ev = np.linalg.eigvalsh((mid + mid.T) / 2)
    cross = float(np.sqrt(np.clip(ev, 0, None)).sum())
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * cross)


def frechet_feature_distance(feats_a, feats_b, loading: float = FFD_LOADING) -> float:
    """Fréchet distance between Gaussian fits of two n×d feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature sets must be n×d with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each feature set needs at least two samples")
    eye = loading * np.eye(a.shape[1])
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) + eye
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1]) + eye
    return frechet_distance(a.mean(0), cov_a, b.mean(0), cov_b)


# -- protocol --------------------------------------------------------------------------

def reference_indices(n_frames: int, K: int) -> List[int]:
    """K = 1 uses the first frame; otherwise K equally spaced frames including both ends."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if n_frames < K + 1:
        raise ValueError(f"a {n_frames}-frame sequence is too short for K={K}")
    if K == 1:
        return [0]
    return [int(i) for i in np.round(np.linspace(0, n_frames - 1, K))]


def _param_dtype(module) -> type:
    return module.parameters()[0].data.dtype.type


def _stack(frames: Sequence[Frame], attr: str, dtype) -> Tensor:
    return Tensor(np.stack([getattr(f, attr) for f in frames]).transpose(0, 3, 1, 2), dtype=dtype)


def colorize_targets(G, targets: Sequence[Frame], ref_a: Frame, ref_b: Frame) -> List[np.ndarray]:
    """Colour each target frame with the generator conditioned on two references."""
    if not targets:
        return []
    G.eval()
    dt = _param_dtype(G)
    n = len(targets)
    refs = [(_stack([r] * n, "line", dt), _stack([r] * n, "dist", dt), _stack([r] * n, "color", dt))
            for r in (ref_a, ref_b)]
    with no_grad():
        out = G(_stack(targets, "line", dt), _stack(targets, "dist", dt), refs).y_trans.data
    return [o.transpose(1, 2, 0).astype(np.float64) for o in out]


def refine_run(TG, lines: Sequence[np.ndarray], colors: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Temporal refinement of a chronological run of frames (H×W×1 lines, H×W×3 colours)."""
    TG.eval()
    dt = _param_dtype(TG)
    lv = Tensor(np.stack(lines).transpose(3, 0, 1, 2)[None], dtype=dt)
    cv = Tensor(np.stack(colors).transpose(3, 0, 1, 2)[None], dtype=dt)
    with no_grad():
        out = TG(lv, cv).data[0]
    return [out[:, t].transpose(1, 2, 0).astype(np.float64) for t in range(out.shape[1])]


def colorize_frames(G, TG, frames: Sequence[Frame], ref_idx: Sequence[int]) -> List[np.ndarray]:
    """Colour a whole run given reference positions; only the references' colours are read.

    Consecutive references bound a segment.  With a single reference it
    fills both reference slots and the segment runs to the last frame.
    Reference frames are returned unchanged.
    """
    n = len(frames)
    ref_idx = sorted(set(int(i) for i in ref_idx))
    if not ref_idx or ref_idx[0] < 0 or ref_idx[-1] >= n:
        raise ValueError(f"reference positions {ref_idx} out of range for {n} frames")
    out: List[Optional[np.ndarray]] = [None] * n
    for i in ref_idx:
        out[i] = np.asarray(frames[i].color, dtype=np.float64)
    bounds = list(zip(ref_idx[:-1], ref_idx[1:])) if len(ref_idx) > 1 else []
    runs = []
    if ref_idx[0] > 0:
        runs.append((ref_idx[0], None, 0, ref_idx[0]))  # leading frames: nearest reference only
    for a, b in bounds:
        runs.append((a, b, a, b))
    if ref_idx[-1] < n - 1:
        runs.append((ref_idx[-1], None, ref_idx[-1], n - 1))
    for a, b, lo, hi in runs:
        ref_a = frames[a]
        ref_b = frames[b] if b is not None else ref_a
        inner = [i for i in range(lo, hi + 1) if i not in ref_idx]
        if not inner:
            continue
        colored = colorize_targets(G, [frames[i] for i in inner], ref_a, ref_b)
        for i, c in zip(inner, colored):
            out[i] = c
        span = list(range(lo, hi + 1))
        if TG is not None and len(span) >= 3:
            refined = refine_run(TG, [frames[i].line for i in span], [out[i] for i in span])
            for i, c in zip(span, refined):
                if i not in ref_idx:
                    out[i] = c
    return out  # type: ignore[return-value]


def sev_features(G, frames: Sequence[Frame], colors: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Embedder latent vectors of (line, colour) pairs, one row per frame."""
    dt = _param_dtype(G)
    cols = [f.color for f in frames] if colors is None else list(colors)
    lines = np.stack([f.line for f in frames]).transpose(0, 3, 1, 2)
    col = np.stack(cols).transpose(0, 3, 1, 2)
    pair = Tensor(np.concatenate([lines, col], axis=1), dtype=dt)
    with no_grad():
        return G.embedder.latent(pair).data.astype(np.float64)


@dataclass
class EvalReport:
    sequence_id: str
    K: int
    frames: List[Dict] = field(default_factory=list)  # frame, mse, psnr, ssim
    ffd: float = float("nan")
    predictions: List[np.ndarray] = field(default_factory=list, repr=False)

    def _mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.frames])) if self.frames else float("nan")

    @property
    def mean_mse(self) -> float:
        return self._mean("mse")

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim")

    def summary(self) -> dict:
        return {"sequence": self.sequence_id, "K": self.K, "frames": len(self.frames),
                "mse": self.mean_mse, "psnr": self.mean_psnr, "ssim": self.mean_ssim, "ffd": self.ffd}


def evaluate_sequence(G, TG, seq: FrameSequence, K: int, keep_predictions: bool = False) -> EvalReport:
    """Colour ``seq`` from K of its own frames and score the remaining ones.

    ``TG`` may be None to skip temporal refinement.
    """
    ref_idx = reference_indices(len(seq), K)
    preds = colorize_frames(G, TG, seq.frames, ref_idx)
    report = EvalReport(seq.source_id, K)
    eval_idx = [i for i in range(len(seq)) if i not in ref_idx]
    for i in eval_idx:
        truth = seq.frames[i].color
        report.frames.append({"frame": i, "mse": mse(preds[i], truth), "psnr": psnr(preds[i], truth),
                              "ssim": ssim(preds[i], truth)})
    if len(eval_idx) >= 2:
        targets = [seq.frames[i] for i in eval_idx]
        report.ffd = frechet_feature_distance(sev_features(G, targets, [preds[i] for i in eval_idx]),
                                              sev_features(G, targets))
    if keep_predictions:
        report.predictions = preds
    return report


def evaluate_dataset(G, TG, sequences: Sequence[FrameSequence], K: int) -> List[EvalReport]:
    return [evaluate_sequence(G, TG, s, K) for s in sequences]


def mean_psnr(reports: Sequence[EvalReport]) -> float:
    return float(np.mean([r.mean_psnr for r in reports]))


def write_reports(reports: Sequence[EvalReport], out_dir: Path, stem: str = "eval") -> Dict[str, Path]:
    """Per-frame CSV, a YAML summary and a figure, side by side in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [dict(sequence=r.sequence_id, K=r.K, **f) for r in reports for f in r.frames]
    csv_path = out_dir / f"{stem}_frames.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sequence", "K", "frame", "mse", "psnr", "ssim"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    seq_path = out_dir / f"{stem}_sequences.csv"
    with open(seq_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sequence", "K", "frames", "mse", "psnr", "ssim", "ffd"])
        w.writeheader()
        for r in reports:
            w.writerow(r.summary())
    summary = {
        "sequences": len(reports),
        "K": sorted({r.K for r in reports}),
        "mean_mse": float(np.mean([r.mean_mse for r in reports])) if reports else None,
        "mean_psnr": mean_psnr(reports) if reports else None,
        "mean_ssim": float(np.mean([r.mean_ssim for r in reports])) if reports else None,
        "mean_ffd": float(np.nanmean([r.ffd for r in reports])) if any(np.isfinite(r.ffd) for r in reports) else None,
    }
    yaml_path = out_dir / f"{stem}_summary.yaml"
    yaml_path.write_text(yaml.safe_dump(summary, sort_keys=True))
    from .plotting import plot_eval_report
    fig_path = plot_eval_report(rows, out_dir / f"{stem}.png")
    return {"frames": csv_path, "sequences": seq_path, "summary": yaml_path, "figure": fig_path}
