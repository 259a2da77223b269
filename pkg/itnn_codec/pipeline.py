"""Training-set construction from codec partitions and the iterative training loop.

Iteration 0 encodes every corpus image with the classic codec and cuts
context/block pairs from the chosen leaves. Later iterations encode with the
previous networks in the loop and keep only the leaves that pass the
cleansing criterion, then retrain warm-started from the previous networks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import typing as t
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from itnn_codec.codec import (
    LEAF_SIZES,
    NN_MODE,
    BlockRecord,
    RateDistortionConfig,
    encode_frame,
    pad_to_ctb,
    write_records_csv,
)
from itnn_codec.errors import ConfigError, ItnnCodecError, PipelineError
from itnn_codec.frame_io import Corpus, LuminancePlane
from itnn_codec.nn_predict import (
    HIDDEN_WIDTH,
    ContextGeometry,
    NetworkParams,
    RawContext,
    context_coordinates,
    gate_allows_context,
    holes_mask,
    install_worker_networks,
    layer_dims,
    model_filename,
    preprocess,
    save_params,
    worker_networks,
)
from itnn_codec.nn_train import (
    PairProvenance,
    TrainingHistory,
    TrainingHyperparams,
    TrainingPair,
    TrainingSet,
    init_params,
    save_shard,
    train,
)

logger = logging.getLogger(__name__)

DEFAULT_QP_SET = (22, 27, 32, 37, 42)
DEFAULT_SIZES = ((4, 4), (8, 8), (16, 16), (32, 32))
MANIFEST_SCHEMA_VERSION = 1
RECORD_CSV_LEADING = ("image_id",)
RECORD_CSV_TRAILING = ("examined", "accepted")

Size = tuple[int, int]


@dataclass(frozen=True)
class PipelineConfig:
    """Settings of dataset construction and the iterative loop.

    Attributes:
        qp_set: QPs drawn per image.
        q: Maximum pairs one image adds to one training set.
        gamma: Cleansing threshold on ``d_nn / d_c``.
        iterations: Number of training iterations ``l``.
        p: Multiplier of every learning-rate stage's step count.
        sizes: Block sizes that get a network.
        seed: Root of every random draw.
        cleansing: Whether NN-in-the-loop iterations filter records.
        warm_start: Whether iterations after the first start from the
            previous networks.
        hidden_width: Neurons per hidden layer.
        lambda_scale: Scale of the rate-distortion lambda.
        jobs: Images encoded concurrently.
    """

    qp_set: tuple[int, ...] = DEFAULT_QP_SET
    q: int = 20
    gamma: float = 1.05
    iterations: int = 3
    p: int = 1
    sizes: tuple[Size, ...] = DEFAULT_SIZES
    seed: int = 0
    cleansing: bool = True
    warm_start: bool = True
    hidden_width: int = HIDDEN_WIDTH
    lambda_scale: float = 0.57
    jobs: int = 1

    def __post_init__(self) -> None:
        """Validate ranges."""
        problems = []
        if self.q < 1:
            problems.append(f"q must be >= 1, got {self.q}")
        if not self.gamma > 0:
            problems.append(f"gamma must be > 0, got {self.gamma}")
        if self.iterations < 1:
            problems.append(f"iterations must be >= 1, got {self.iterations}")
        if not self.qp_set:
            problems.append("qp_set is empty")
        if self.p < 1:
            problems.append(f"p must be >= 1, got {self.p}")
        if self.jobs < 1:
            problems.append(f"jobs must be >= 1, got {self.jobs}")
        problems.extend(
            f"size {h}x{w} cannot be a leaf" for h, w in self.sizes if h != w or h not in LEAF_SIZES
        )
        if problems:
            raise ConfigError("; ".join(problems))


def image_seed(seed: int, image_id: str) -> int:
    """64-bit seed of one image, independent of processing order."""
    digest = hashlib.sha256(f"{seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _size_seed(seed: int, *parts: object) -> int:
    digest = hashlib.sha256(":".join(map(str, (seed, *parts))).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def draw_qp(seed: int, image_id: str, qp_set: t.Sequence[int]) -> tuple[int, np.random.Generator]:
    """Uniform QP draw for one image, plus the generator used afterwards for its shuffle."""
    rng = np.random.default_rng(image_seed(seed, image_id))
    return int(qp_set[int(rng.integers(len(qp_set)))]), rng


def cleansing_decision(record: BlockRecord, gamma: float, s_nn: int = NN_MODE) -> bool:
    """Whether a record of an NN-in-the-loop encode joins the training set.

    Small blocks and blocks split into several transform blocks are kept only
    when the NN mode won. Other blocks are kept when the NN prediction is at
    most ``gamma`` times worse than the third-best classic mode.

    Raises:
        PipelineError: ``d_nn`` or ``d_c`` is missing on the threshold branch.
    """
    if record.is_split_tbs or max(record.h, record.w) <= 4:  # noqa: PLR2004
        return record.s == s_nn
    if record.d_nn is None or record.d_c is None:
        msg = f"Record at ({record.x}, {record.y}) lacks d_nn or d_c"
        raise PipelineError(msg)
    return record.d_nn <= gamma * record.d_c


def extract_pair(original: np.ndarray, recon: np.ndarray, record: BlockRecord) -> TrainingPair:
    """Cut the pair of one record: context from the reconstruction, block from the original.

    Both planes are the padded frames the encoder worked on. The context
    availability follows the record's ``n0``/``n1``.
    """
    geometry = ContextGeometry(record.h, record.w)
    available = holes_mask(geometry, record.n0, record.n1)
    rows, cols = context_coordinates(record.x, record.y, record.w, record.h)
    height, width = recon.shape
    available &= (rows < height) & (cols < width)
    values = np.zeros(geometry.length, dtype=np.float64)
    values[available] = recon[rows[available], cols[available]]
    context = preprocess(RawContext(values=values, available=available))
    block = original[record.y : record.y + record.h, record.x : record.x + record.w].astype(np.float64)
    return TrainingPair(x_c=context.x_c, y_c=block.ravel() - context.mu)


@dataclass
class ImageHarvest:
    """Pairs and record rows collected from one image."""

    image_id: str
    qp: int
    pairs: dict[Size, list[tuple[TrainingPair, PairProvenance]]]
    rows: list[dict[str, t.Any]]
    examined: dict[Size, int]
    accepted: dict[Size, int]


def harvest_image(  # noqa: PLR0913
    image_id: str,
    plane: LuminancePlane,
    cfg: PipelineConfig,
    params_by_size: t.Mapping[Size, NetworkParams] | None,
    iteration: int,
) -> ImageHarvest:
    """Encode one image and collect at most ``q`` pairs per block size.

    With networks given, the encode has the NN mode enabled and, unless
    cleansing is off, every examined record goes through
    :func:`cleansing_decision`. Only added pairs count towards ``q``; records
    met after a size's cap are not examined.
    """
    use_nn = params_by_size is not None
    qp, rng = draw_qp(cfg.seed, image_id, cfg.qp_set)
    result = encode_frame(
        plane,
        qp,
        use_nn,
        params_by_size,
        RateDistortionConfig(qp=qp, lambda_scale=cfg.lambda_scale),
    )
    original = pad_to_ctb(plane.samples)
    records = result.records
    rows = [{"image_id": image_id, **record.to_row(), "examined": 0, "accepted": 0} for record in records]
    pairs: dict[Size, list[tuple[TrainingPair, PairProvenance]]] = {size: [] for size in cfg.sizes}
    examined = dict.fromkeys(cfg.sizes, 0)
    accepted = dict.fromkeys(cfg.sizes, 0)

    for index in rng.permutation(len(records)):
        record = records[index]
        size = (record.h, record.w)
        if size not in pairs or accepted[size] >= cfg.q:
            continue
        if not gate_allows_context(record.x, record.y, record.h, record.w):
            continue
        # the target block must hold original samples, not padding
        if record.x + record.w > plane.width or record.y + record.h > plane.height:
            continue
        examined[size] += 1
        rows[index]["examined"] = 1
        if use_nn and cfg.cleansing and not cleansing_decision(record, cfg.gamma):
            continue
        accepted[size] += 1
        rows[index]["accepted"] = 1
        pairs[size].append(
            (
                extract_pair(original, result.padded_recon, record),
                PairProvenance(image_id=image_id, x=record.x, y=record.y, qp=qp, iteration=iteration),
            )
        )
    logger.debug(f"{image_id}: QP {qp}, {len(records)} leaves, accepted {sum(accepted.values())}")
    return ImageHarvest(image_id, qp, pairs, rows, examined, accepted)


def _harvest_task(args: tuple[str, LuminancePlane, PipelineConfig, int]) -> ImageHarvest:
    image_id, plane, cfg, iteration = args
    return harvest_image(image_id, plane, cfg, worker_networks(), iteration)


@dataclass
class PartitionResult:
    """Training sets of one dataset construction, with its bookkeeping."""

    sets: dict[Size, TrainingSet]
    harvests: list[ImageHarvest]
    cleansed: bool
    seconds: float = 0.0

    @property
    def rows(self) -> list[dict[str, t.Any]]:
        """Record rows of every image, in image then coding order."""
        return [row for harvest in self.harvests for row in harvest.rows]

    def examined(self, size: Size) -> int:
        """Records of a size looked at before the caps."""
        return sum(harvest.examined.get(size, 0) for harvest in self.harvests)

    def accepted(self, size: Size) -> int:
        """Records of a size turned into pairs."""
        return sum(harvest.accepted.get(size, 0) for harvest in self.harvests)

    def acceptance_ratio(self, size: Size) -> float:
        """Accepted over examined records, 0 when nothing was examined."""
        examined = self.examined(size)
        return self.accepted(size) / examined if examined else 0.0

    def qp_histogram(self) -> dict[int, int]:
        """Number of images encoded at each QP."""
        histogram: dict[int, int] = {}
        for harvest in self.harvests:
            histogram[harvest.qp] = histogram.get(harvest.qp, 0) + 1
        return dict(sorted(histogram.items()))


def _collect(
    corpus: Corpus,
    cfg: PipelineConfig,
    params_by_size: t.Mapping[Size, NetworkParams] | None,
    iteration: int,
) -> PartitionResult:
    if not len(corpus):
        msg = "Corpus is empty"
        raise PipelineError(msg, iteration)
    started = time.perf_counter()
    if cfg.jobs > 1:
        tasks = [(image_id, plane, cfg, iteration) for image_id, plane in corpus]
        with ProcessPoolExecutor(
            max_workers=cfg.jobs, initializer=install_worker_networks, initargs=(params_by_size,)
        ) as executor:
            harvests = list(executor.map(_harvest_task, tasks))
    else:
        harvests = [harvest_image(image_id, plane, cfg, params_by_size, iteration) for image_id, plane in corpus]

    sets = {}
    for h, w in cfg.sizes:
        parts = []
        for harvest in harvests:
            collected = harvest.pairs[(h, w)]
            parts.append(
                TrainingSet.from_pairs(h, w, [pair for pair, _ in collected], [prov for _, prov in collected])
            )
        sets[(h, w)] = TrainingSet.concatenate(h, w, parts)
    result = PartitionResult(
        sets=sets,
        harvests=harvests,
        cleansed=params_by_size is not None and cfg.cleansing,
        seconds=time.perf_counter() - started,
    )
    summary = ", ".join(f"{h}x{w}: {len(sets[(h, w)])}" for h, w in cfg.sizes)
    logger.info(f"Collected pairs from {len(corpus)} images in {result.seconds:.1f}s ({summary})")
    return result


def get_partition(corpus: Corpus, cfg: PipelineConfig, iteration: int = 0) -> PartitionResult:
    """Training sets from classic-codec partitions of the corpus."""
    return _collect(corpus, cfg, None, iteration)


def get_partition_nn(
    corpus: Corpus,
    params_by_size: t.Mapping[Size, NetworkParams],
    cfg: PipelineConfig,
    iteration: int = 1,
) -> PartitionResult:
    """Training sets from NN-in-the-loop partitions, cleansed unless disabled.

    Raises:
        PipelineError: A configured size has no network.
    """
    missing = [size for size in cfg.sizes if size not in params_by_size]
    if missing:
        msg = f"No network for sizes {missing}"
        raise PipelineError(msg, iteration)
    return _collect(corpus, cfg, {size: params_by_size[size] for size in cfg.sizes}, iteration)


def replay_cleansing(rows: t.Iterable[t.Mapping[str, t.Any]], gamma: float) -> set[tuple[str, int, int]]:
    """Re-apply the cleansing criterion to examined rows of a record CSV.

    Returns:
        ``(image_id, x, y)`` of every row the criterion accepts.
    """
    accepted = set()
    for row in rows:
        if int(row["examined"]) != 1:
            continue
        record = BlockRecord.from_row({key: str(value) for key, value in row.items()})
        if cleansing_decision(record, gamma):
            accepted.add((str(row["image_id"]), record.x, record.y))
    return accepted


def training_set_jaccard(a: TrainingSet, b: TrainingSet) -> float:
    """Jaccard similarity of two sets' ``(image_id, x, y)`` provenance keys."""
    keys_a = {entry.key for entry in a.provenance}
    keys_b = {entry.key for entry in b.provenance}
    union = keys_a | keys_b
    if not union:
        return 1.0
    return len(keys_a & keys_b) / len(union)


def file_sha256(path: Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _size_key(size: Size) -> str:
    return f"{size[0]}x{size[1]}"


def _write_json(path: Path, payload: t.Mapping[str, t.Any]) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class IterationOutcome:
    """What one iteration produced."""

    iteration: int
    stage: str
    partition: PartitionResult
    params: dict[Size, NetworkParams]
    parents: dict[Size, str | None]
    histories: dict[Size, TrainingHistory]
    trained: dict[Size, bool]
    manifest: dict[str, t.Any] = field(default_factory=dict)


@dataclass
class TrainRun:
    """Result of :func:`iterative_train`."""

    params: dict[Size, NetworkParams]
    iterations: list[IterationOutcome]

    @property
    def stages(self) -> list[str]:
        """Dataset construction stage of every iteration."""
        return [outcome.stage for outcome in self.iterations]


class IterativeTrainer:
    """Runs the get-partition / train loop and writes its artifacts."""

    def __init__(
        self,
        cfg: PipelineConfig,
        hp: TrainingHyperparams,
        output_dir: Path | str | None = None,
        effective_config: t.Mapping[str, t.Any] | None = None,
    ) -> None:
        """Initialize the trainer.

        Args:
            cfg: Pipeline settings.
            hp: Optimisation settings; ``p`` is overridden by ``cfg.p``.
            output_dir: Where shards, models and manifests go; nothing is
                written when absent.
            effective_config: Configuration echoed into every manifest.
        """
        self.cfg = cfg
        self.hp = replace(hp, p=cfg.p)
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.effective_config = dict(effective_config) if effective_config is not None else _default_config(cfg, hp)

    def initial_params(self, size: Size) -> NetworkParams:
        """Seeded random initialisation of one size's network."""
        h, w = size
        return init_params(_size_seed(self.cfg.seed, "init", h, w), layer_dims(h, w, self.cfg.hidden_width), h, w)

    def run(self, corpus: Corpus) -> TrainRun:
        """Run every iteration.

        Raises:
            PipelineError: A stage failed; carries the iteration index.
        """
        params: dict[Size, NetworkParams] = {}
        outcomes = []
        for iteration in range(self.cfg.iterations):
            logger.info(f"=== Starting iteration {iteration} of {self.cfg.iterations} ===")
            try:
                outcome = self._iteration(corpus, iteration, params)
            except PipelineError as exc:
                if exc.iteration is not None:
                    raise
                raise PipelineError(str(exc), iteration) from exc
            except ItnnCodecError as exc:
                raise PipelineError(str(exc), iteration) from exc
            params = outcome.params
            outcomes.append(outcome)
            logger.info(f"=== Finished iteration {iteration} ===")
        run = TrainRun(params=params, iterations=outcomes)
        if self.output_dir is not None:
            self._write_run(run)
        return run

    def _iteration(self, corpus: Corpus, iteration: int, previous: dict[Size, NetworkParams]) -> IterationOutcome:
        if iteration == 0:
            stage = "get_partition"
            partition = get_partition(corpus, self.cfg, iteration)
        else:
            stage = "get_partition_nn"
            partition = get_partition_nn(corpus, previous, self.cfg, iteration)

        trained_params: dict[Size, NetworkParams] = {}
        parents: dict[Size, str | None] = {}
        histories: dict[Size, TrainingHistory] = {}
        trained: dict[Size, bool] = {}
        started = time.perf_counter()
        for size in self.cfg.sizes:
            if iteration > 0 and self.cfg.warm_start:
                init = previous[size]
                parents[size] = init.digest()
            else:
                init = self.initial_params(size)
                parents[size] = None
            history = TrainingHistory()
            training_set = partition.sets[size]
            if len(training_set):
                hp = replace(self.hp, seed=_size_seed(self.cfg.seed, "train", iteration, *size))
                trained_params[size] = train(training_set, init, hp, history)
                trained[size] = True
            else:
                logger.warning(f"No {_size_key(size)} pairs in iteration {iteration}; keeping its starting network")
                trained_params[size] = init
                trained[size] = False
            histories[size] = history
        training_seconds = time.perf_counter() - started

        outcome = IterationOutcome(
            iteration=iteration,
            stage=stage,
            partition=partition,
            params=trained_params,
            parents=parents,
            histories=histories,
            trained=trained,
        )
        if self.output_dir is not None:
            self._write_iteration(outcome, training_seconds)
        return outcome

    def iteration_dir(self, iteration: int) -> Path:
        """Directory of one iteration's artifacts."""
        if self.output_dir is None:
            msg = "No output directory configured"
            raise PipelineError(msg, iteration)
        return self.output_dir / f"iter_{iteration}"

    def _write_iteration(self, outcome: IterationOutcome, training_seconds: float) -> None:
        directory = self.iteration_dir(outcome.iteration)
        directory.mkdir(parents=True, exist_ok=True)
        partition = outcome.partition
        write_records_csv(directory / "records.csv", partition.rows, RECORD_CSV_LEADING, RECORD_CSV_TRAILING)

        sizes = {}
        for size in self.cfg.sizes:
            key = _size_key(size)
            training_set = partition.sets[size]
            shard = save_shard(training_set, directory / f"shard_{key}.bin")
            _write_json(
                directory / f"shard_{key}.json",
                {"schema_version": MANIFEST_SCHEMA_VERSION, "pairs": [asdict(entry) for entry in training_set.provenance]},
            )
            model = save_params(outcome.params[size], directory / model_filename(*size))
            history = outcome.histories[size]
            sizes[key] = {
                "pairs": len(training_set),
                "examined": partition.examined(size),
                "accepted": partition.accepted(size),
                "acceptance_ratio": partition.acceptance_ratio(size),
                "shard_sha256": file_sha256(shard),
                "model_sha256": file_sha256(model),
                "parent_model_sha256": outcome.parents[size],
                "trained": outcome.trained[size],
                "steps": history.steps,
                "loss_curve": history.curve(),
            }
        outcome.manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "iteration": outcome.iteration,
            "stage": outcome.stage,
            "cleansing": partition.cleansed,
            "warm_start": self.cfg.warm_start and outcome.iteration > 0,
            "images": len(partition.harvests),
            "qp_histogram": {str(qp): count for qp, count in partition.qp_histogram().items()},
            "sizes": sizes,
            "effective_config": self.effective_config,
        }
        _write_json(directory / "manifest.json", outcome.manifest)
        # timings are kept apart so manifests stay reproducible
        _write_json(
            directory / "timings.json",
            {
                "partition_seconds": partition.seconds,
                "training_seconds": training_seconds,
                "per_size_seconds": {_size_key(size): outcome.histories[size].seconds for size in self.cfg.sizes},
            },
        )
        logger.info(f"Wrote iteration {outcome.iteration} artifacts to {directory}")

    def _write_run(self, run: TrainRun) -> None:
        models_dir = self.output_dir / "models"
        models_dir.mkdir(parents=True, exist_ok=True)
        final = {}
        for size, params in sorted(run.params.items()):
            final[_size_key(size)] = file_sha256(save_params(params, models_dir / model_filename(*size)))
        _write_json(
            self.output_dir / "run_manifest.json",
            {
                "schema_version": MANIFEST_SCHEMA_VERSION,
                "iterations": len(run.iterations),
                "stages": run.stages,
                "cleansing_stages": sum(outcome.partition.cleansed for outcome in run.iterations),
                "final_models": final,
                "effective_config": self.effective_config,
            },
        )


def _default_config(cfg: PipelineConfig, hp: TrainingHyperparams) -> dict[str, t.Any]:
    return {"pipeline": asdict(cfg), "training": asdict(replace(hp, p=cfg.p))}


def iterative_train(  # noqa: PLR0913
    corpus: Corpus,
    cfg: PipelineConfig,
    hp: TrainingHyperparams | None = None,
    output_dir: Path | str | None = None,
    effective_config: t.Mapping[str, t.Any] | None = None,
) -> TrainRun:
    """Run ``cfg.iterations`` rounds of dataset construction and training."""
    trainer = IterativeTrainer(cfg, hp or TrainingHyperparams(), output_dir, effective_config)
    return trainer.run(corpus)
