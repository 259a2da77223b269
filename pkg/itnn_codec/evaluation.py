"""Rate-distortion evaluation, mode statistics and prediction reports."""

from __future__ import annotations

import csv
import logging
import math
import typing as t
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import repeat
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from itnn_codec.codec import NN_MODE, BlockRecord, encode_frame
from itnn_codec.errors import CurveError, UnsupportedBlockSizeError
from itnn_codec.frame_io import Corpus, LuminancePlane, mse, psnr_from_mse, save_pgm
from itnn_codec.intra_classic import build_reference_samples, predict_all_classic, prediction_mse, rank_errors
from itnn_codec.nn_predict import NetworkParams, install_worker_networks, predict_block, worker_networks

logger = logging.getLogger(__name__)

BD_RATE_METHOD = "cubic polynomial fit of log10(rate) over PSNR, integrated on the common PSNR interval"
MIN_CURVE_POINTS = 4
CURVE_FIELDS = ("qp", "bpp", "psnr", "nn_ratio")
REPORT_FIELDS = (
    "sample",
    "image_id",
    "x",
    "y",
    "size",
    "psnr_nn_i",
    "psnr_nn_j",
    "psnr_best_classic",
    "best_classic_mode",
    "change",
)

Size = tuple[int, int]


@dataclass(frozen=True)
class RatePoint:
    """One operating point: bits per pixel and PSNR in dB."""

    bpp: float
    psnr: float
    qp: int | None = None
    nn_ratio: float | None = None


@dataclass(frozen=True)
class RateCurve:
    """Operating points of one codec configuration, sorted by rate."""

    points: tuple[RatePoint, ...]

    def __post_init__(self) -> None:
        """Sort by rate and check the curve can be fitted."""
        points = tuple(sorted(self.points, key=lambda point: point.bpp))
        object.__setattr__(self, "points", points)
        if len(points) < MIN_CURVE_POINTS:
            msg = f"A rate curve needs at least {MIN_CURVE_POINTS} points, got {len(points)}"
            raise CurveError(msg)
        rates = [point.bpp for point in points]
        if len(set(rates)) != len(rates):
            msg = "Rate curve has duplicate rates"
            raise CurveError(msg)
        if any(rate <= 0 or not math.isfinite(rate) for rate in rates):
            msg = "Rates must be positive and finite"
            raise CurveError(msg)

    @property
    def rates(self) -> np.ndarray:
        """Bits per pixel, ascending."""
        return np.array([point.bpp for point in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        """PSNR of every point, in rate order."""
        return np.array([point.psnr for point in self.points])

    @classmethod
    def from_pairs(cls, pairs: t.Iterable[tuple[float, float]]) -> RateCurve:
        """Build a curve from ``(bpp, psnr)`` pairs."""
        return cls(tuple(RatePoint(bpp=bpp, psnr=psnr) for bpp, psnr in pairs))

    def scaled(self, factor: float) -> RateCurve:
        """The same curve with every rate multiplied by ``factor``."""
        return RateCurve(
            tuple(RatePoint(point.bpp * factor, point.psnr, point.qp, point.nn_ratio) for point in self.points)
        )


def write_curve_csv(curve: RateCurve, path: Path | str) -> Path:
    """Write a curve as ``qp,bpp,psnr,nn_ratio`` rows."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for point in curve.points:
            writer.writerow(
                {
                    "qp": "" if point.qp is None else point.qp,
                    "bpp": repr(point.bpp),
                    "psnr": repr(point.psnr),
                    "nn_ratio": "" if point.nn_ratio is None else repr(point.nn_ratio),
                }
            )
    return path


def read_curve_csv(path: Path | str) -> RateCurve:
    """Read a curve CSV; only ``bpp`` and ``psnr`` columns are required.

    Raises:
        CurveError: Missing columns or an invalid curve.
    """
    with Path(path).open(newline="") as handle:
        rows = list(csv.DictReader(handle))
    try:
        points = tuple(
            RatePoint(
                bpp=float(row["bpp"]),
                psnr=float(row["psnr"]),
                qp=int(row["qp"]) if row.get("qp") else None,
                nn_ratio=float(row["nn_ratio"]) if row.get("nn_ratio") else None,
            )
            for row in rows
        )
    except (KeyError, ValueError) as exc:
        msg = f"{path}: not a rate curve CSV ({exc})"
        raise CurveError(msg) from exc
    return RateCurve(points)


def bd_rate(anchor: RateCurve, test: RateCurve) -> float:
    """Average bitrate difference of ``test`` against ``anchor`` at equal PSNR, in percent.

    Raises:
        CurveError: Infinite or duplicate PSNR values, or no PSNR overlap.
    """
    fits = []
    for name, curve in (("anchor", anchor), ("test", test)):
        psnrs = curve.psnrs
        if not np.all(np.isfinite(psnrs)):
            msg = f"{name} curve has non-finite PSNR"
            raise CurveError(msg)
        if len(np.unique(psnrs)) != len(psnrs):
            msg = f"{name} curve has duplicate PSNR values"
            raise CurveError(msg)
        fits.append(np.polyfit(psnrs, np.log10(curve.rates), 3))

    low = max(anchor.psnrs.min(), test.psnrs.min())
    high = min(anchor.psnrs.max(), test.psnrs.max())
    if low >= high:
        msg = f"PSNR ranges do not overlap ({low:.3f} >= {high:.3f})"
        raise CurveError(msg)

    integrals = []
    for fit in fits:
        primitive = np.polyint(fit)
        integrals.append(np.polyval(primitive, high) - np.polyval(primitive, low))
    average = (integrals[1] - integrals[0]) / (high - low)
    return float((10.0**average - 1.0) * 100.0)


GroupKey = tuple[int, "int | None"]


def mode_frequencies(records: t.Sequence[BlockRecord]) -> dict[GroupKey, dict[int, float]]:
    """Percentage of selection of every mode, per ``(block width, QP)`` group.

    Raises:
        CurveError: No records.
    """
    if not records:
        msg = "No records to tally"
        raise CurveError(msg)
    counts: dict[GroupKey, np.ndarray] = {}
    for record in records:
        key = (record.w, record.qp)
        counts.setdefault(key, np.zeros(NN_MODE + 1, dtype=np.int64))[record.s] += 1
    return {
        key: {mode: 100.0 * float(tally[mode]) / float(tally.sum()) for mode in range(NN_MODE + 1)}
        for key, tally in sorted(counts.items(), key=lambda item: (item[0][0], -1 if item[0][1] is None else item[0][1]))
    }


def mode_frequency_delta(
    records_a: t.Sequence[BlockRecord],
    records_b: t.Sequence[BlockRecord],
) -> dict[GroupKey, dict[int, float]]:
    """Per group and mode, percentage under ``records_b`` minus percentage under ``records_a``.

    A group present on one side only counts as zero percent on the other.
    """
    freq_a = mode_frequencies(records_a)
    freq_b = mode_frequencies(records_b)
    zeros = dict.fromkeys(range(NN_MODE + 1), 0.0)
    delta = {}
    for key in sorted(set(freq_a) | set(freq_b), key=lambda k: (k[0], -1 if k[1] is None else k[1])):
        a = freq_a.get(key, zeros)
        b = freq_b.get(key, zeros)
        delta[key] = {mode: b[mode] - a[mode] for mode in range(NN_MODE + 1)}
    return delta


def frequency_rows(table: t.Mapping[GroupKey, t.Mapping[int, float]]) -> list[dict[str, t.Any]]:
    """Flatten a frequency or delta table into ``size,qp,mode,percent`` rows."""
    return [
        {"size": size, "qp": "" if qp is None else qp, "mode": mode, "percent": value}
        for (size, qp), per_mode in table.items()
        for mode, value in per_mode.items()
    ]


def _classify(before: float, after: float) -> str:
    if after > before:
        return "improved"
    if after < before:
        return "degraded"
    return "unchanged"


@dataclass(frozen=True)
class PredictionSample:
    """Panels of one report sample."""

    context: np.ndarray
    block: np.ndarray
    nn_i: np.ndarray
    nn_j: np.ndarray
    best_classic: np.ndarray


def _sample_panels(
    samples: np.ndarray,
    x: int,
    y: int,
    size: int,
    params_i: NetworkParams,
    params_j: NetworkParams,
) -> tuple[PredictionSample, int, float]:
    decoded = np.ones(samples.shape, dtype=bool)
    decoded[y : y + size, x : x + size] = False
    recon = samples.astype(np.int32)
    nn_i, _ = predict_block(params_i, recon, decoded, x, y)
    nn_j, _ = predict_block(params_j, recon, decoded, x, y)
    block = recon[y : y + size, x : x + size]
    refs = build_reference_samples(recon, decoded, x, y, size, size)
    predictions = predict_all_classic(refs, size)
    best_mode, best_error = rank_errors(prediction_mse(block, predictions))[0]
    context = recon[y - size : y + 2 * size, x - size : x + 2 * size].copy()
    # only the L-shape above and left is context
    context[size:, size:] = 255
    panels = PredictionSample(context, block, nn_i, nn_j, predictions[best_mode])
    return panels, best_mode, best_error


def prediction_report(  # noqa: PLR0913
    corpus: Corpus,
    params_i: t.Mapping[Size, NetworkParams],
    params_j: t.Mapping[Size, NetworkParams],
    samples: int,
    seed: int,
    size: Size = (8, 8),
    dump_dir: Path | str | None = None,
) -> list[dict[str, t.Any]]:
    """Compare two networks and the best classic mode on random blocks of the corpus.

    Blocks are drawn with a fully available context cut from the original
    images. Each row holds the PSNR of both NN predictions and of the best
    classic prediction, and tags the second network as improved, degraded or
    unchanged against the first.

    Raises:
        UnsupportedBlockSizeError: No network for ``size`` on either side, or
            no corpus image can host a block of that size with its context.
    """
    if size not in params_i or size not in params_j:
        msg = f"No network for {size[1]}x{size[0]} blocks"
        raise UnsupportedBlockSizeError(msg)
    side = size[0]
    eligible = [(image_id, plane) for image_id, plane in corpus if plane.width >= 3 * side and plane.height >= 3 * side]
    if not eligible:
        msg = f"No image large enough for {side}x{side} blocks with context"
        raise UnsupportedBlockSizeError(msg)
    rng = np.random.default_rng(seed)
    directory = Path(dump_dir) if dump_dir is not None else None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)

    rows = []
    for sample in range(samples):
        image_id, plane = eligible[int(rng.integers(len(eligible)))]
        x = int(rng.integers(side, plane.width - 2 * side + 1))
        y = int(rng.integers(side, plane.height - 2 * side + 1))
        panels, best_mode, best_error = _sample_panels(plane.samples, x, y, side, params_i[size], params_j[size])
        psnr_i = psnr_from_mse(mse(panels.block, panels.nn_i))
        psnr_j = psnr_from_mse(mse(panels.block, panels.nn_j))
        rows.append(
            {
                "sample": sample,
                "image_id": image_id,
                "x": x,
                "y": y,
                "size": side,
                "psnr_nn_i": psnr_i,
                "psnr_nn_j": psnr_j,
                "psnr_best_classic": psnr_from_mse(best_error),
                "best_classic_mode": best_mode,
                "change": _classify(psnr_i, psnr_j),
            }
        )
        if directory is not None:
            for name, panel in (
                ("context", panels.context),
                ("block", panels.block),
                ("nn_i", panels.nn_i),
                ("nn_j", panels.nn_j),
                ("classic", panels.best_classic),
            ):
                save_pgm(LuminancePlane(panel.astype(np.uint8)), directory / f"{sample:04d}_{name}.pgm")
    summary = {tag: sum(row["change"] == tag for row in rows) for tag in ("improved", "degraded", "unchanged")}
    logger.info(f"Prediction report over {samples} samples: {summary}")
    return rows


def write_report_csv(rows: t.Sequence[t.Mapping[str, t.Any]], path: Path | str) -> Path:
    """Write prediction report rows."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return path


@dataclass(frozen=True)
class FrameMeasurement:
    """Rate, distortion and NN usage of one encoded frame."""

    image_id: str
    qp: int
    bits: int
    pixels: int
    sse: float
    leaves: int
    nn_leaves: int


def _measure(  # noqa: PLR0913
    image_id: str,
    plane: LuminancePlane,
    qp: int,
    nn_enabled: bool,  # noqa: FBT001
    params_by_size: t.Mapping[Size, NetworkParams] | None,
) -> FrameMeasurement:
    result = encode_frame(plane, qp, nn_enabled, params_by_size)
    pixels = plane.width * plane.height
    sse = mse(plane.samples, result.recon.samples) * pixels
    nn_leaves = sum(record.s == NN_MODE for record in result.records)
    return FrameMeasurement(image_id, qp, result.bits, pixels, sse, len(result.records), nn_leaves)


def _measure_task(task: tuple[str, LuminancePlane, int], nn_enabled: bool) -> FrameMeasurement:  # noqa: FBT001
    image_id, plane, qp = task
    return _measure(image_id, plane, qp, nn_enabled, worker_networks())


def measure_corpus(
    corpus: Corpus,
    qps: t.Sequence[int],
    nn_enabled: bool,  # noqa: FBT001
    params_by_size: t.Mapping[Size, NetworkParams] | None = None,
    jobs: int = 1,
) -> list[FrameMeasurement]:
    """Encode every image at every QP."""
    tasks = [(image_id, plane, qp) for qp in qps for image_id, plane in corpus]
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=install_worker_networks, initargs=(params_by_size,)
        ) as executor:
            return list(executor.map(_measure_task, tasks, repeat(nn_enabled)))
    return [_measure(image_id, plane, qp, nn_enabled, params_by_size) for image_id, plane, qp in tasks]


def curve_from_measurements(measurements: t.Sequence[FrameMeasurement]) -> RateCurve:
    """Pool measurements per QP into operating points.

    Rates are total bits over total pixels and PSNR comes from the pooled
    squared error.
    """
    by_qp: dict[int, list[FrameMeasurement]] = {}
    for measurement in measurements:
        by_qp.setdefault(measurement.qp, []).append(measurement)
    points = []
    for qp, group in sorted(by_qp.items()):
        pixels = sum(m.pixels for m in group)
        leaves = sum(m.leaves for m in group)
        points.append(
            RatePoint(
                bpp=sum(m.bits for m in group) / pixels,
                psnr=psnr_from_mse(sum(m.sse for m in group) / pixels),
                qp=qp,
                nn_ratio=sum(m.nn_leaves for m in group) / leaves if leaves else 0.0,
            )
        )
    return RateCurve(tuple(points))


def corpus_rate_curve(
    corpus: Corpus,
    qps: t.Sequence[int],
    nn_enabled: bool,  # noqa: FBT001
    params_by_size: t.Mapping[Size, NetworkParams] | None = None,
    jobs: int = 1,
) -> RateCurve:
    """Rate curve of the codec over a corpus."""
    logger.info(f"Measuring {len(corpus)} images at QPs {list(qps)} (nn={'on' if nn_enabled else 'off'})")
    return curve_from_measurements(measure_corpus(corpus, qps, nn_enabled, params_by_size, jobs))


def plot_rate_curves(curves: t.Mapping[str, RateCurve], path: Path | str, title: str = "Rate-distortion") -> Path:
    """Draw labelled curves as an SVG (bits per pixel vs PSNR)."""
    path = Path(path)
    figure = Figure(figsize=(6, 4.5))
    axes = figure.add_subplot()
    for label, curve in curves.items():
        axes.plot(curve.rates, curve.psnrs, marker="o", label=label)
    axes.set_xlabel("bits per pixel")
    axes.set_ylabel("PSNR (dB)")
    axes.set_title(title)
    axes.grid(visible=True, alpha=0.3)
    axes.legend()
    figure.savefig(path, format="svg")
    return path
