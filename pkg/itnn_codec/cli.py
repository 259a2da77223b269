"""``itnn-codec`` command line."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import sys
import typing as t
from pathlib import Path

import click

from itnn_codec import codec, evaluation, pipeline
from itnn_codec.config import RunConfig
from itnn_codec.errors import ConfigError, ItnnCodecError
from itnn_codec.frame_io import Corpus, ingest_directory, load_pgm, save_pgm
from itnn_codec.nn_predict import load_models

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _int_list(_ctx: click.Context, _param: click.Parameter, value: str | None) -> list[int] | None:
    if value is None:
        return None
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError as exc:
        msg = f"expected comma separated integers, got {value!r}"
        raise click.BadParameter(msg) from exc


def _stages(_ctx: click.Context, _param: click.Parameter, value: str | None) -> list[dict[str, float]] | None:
    if value is None:
        return None
    try:
        stages = []
        for item in value.split(","):
            steps, multiplier = item.split(":")
            stages.append({"steps": int(steps), "lr_multiplier": float(multiplier)})
    except ValueError as exc:
        msg = f"expected steps:multiplier pairs, got {value!r}"
        raise click.BadParameter(msg) from exc
    return stages


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _config(ctx: click.Context, overrides: t.Mapping[str, t.Any]) -> RunConfig:
    return RunConfig.load(ctx.obj.get("config_path"), overrides)


def _models(path: Path | None, *, required: bool) -> dict[tuple[int, int], t.Any] | None:
    if path is None:
        if required:
            msg = "--models is required with the NN mode enabled"
            raise ConfigError(msg)
        return None
    if not path.is_dir():
        msg = f"models directory {path} does not exist"
        raise ConfigError(msg)
    return load_models(path)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="JSON run configuration; flags override its values.",
)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
@click.pass_context
def cli(ctx: click.Context, config_path: Path | None, log_level: str) -> None:
    """Intra codec with a neural-network prediction mode and its training pipeline.

    Every subcommand is reproducible from its configuration and --seed: all
    random draws (QPs, shuffles, initialisations, report samples) derive
    from the seed.
    """
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


@cli.command()
@click.option("--in", "src", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def ingest(src: Path, out: Path) -> None:
    """Convert PGM and RGB images of a directory into 8-bit luminance PGMs."""
    written = ingest_directory(src, out)
    click.echo(json.dumps({"ingested": len(written), "output_dir": str(out)}))


@cli.command()
@click.option("--in", "input_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--qp", type=click.IntRange(0, 51), help="Quantization parameter (config: rate_distortion.qp).")
@click.option("--nn", type=click.Choice(["on", "off"]), default="off", show_default=True)
@click.option("--models", type=click.Path(path_type=Path), help="Directory of model_<h>x<w>.bin files.")
@click.option("--dump-records", type=click.Path(dir_okay=False, path_type=Path), help="Write block records as CSV.")
@click.pass_context
def encode(  # noqa: PLR0913
    ctx: click.Context,
    input_path: Path,
    out: Path,
    qp: int | None,
    nn: str,
    models: Path | None,
    dump_records: Path | None,
) -> None:
    """Encode a PGM frame."""
    run = _config(ctx, {"rate_distortion": {"qp": qp}, "models_dir": str(models) if models else None})
    nn_enabled = nn == "on"
    params = _models(run.models_dir, required=nn_enabled) if nn_enabled else None
    plane = load_pgm(input_path)
    result = codec.encode_frame(plane, run.rate_distortion.qp, nn_enabled, params, run.rate_distortion)
    out.write_bytes(result.bitstream)
    if dump_records is not None:
        codec.write_records_csv(dump_records, (record.to_row() for record in result.records))
    click.echo(
        json.dumps(
            {
                "bytes": len(result.bitstream),
                "bpp": result.bits_per_pixel(),
                "leaves": len(result.records),
                "nn_ratio": result.nn_ratio(),
                "recon_sha256": _sha256(result.recon.to_bytes()),
            }
        )
    )


@cli.command()
@click.option("--in", "input_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--models", type=click.Path(path_type=Path), help="Directory of model_<h>x<w>.bin files.")
def decode(input_path: Path, out: Path, models: Path | None) -> None:
    """Decode a bitstream into a PGM frame."""
    params = _models(models, required=False)
    plane = codec.decode_frame(input_path.read_bytes(), params)
    save_pgm(plane, out)
    click.echo(json.dumps({"width": plane.width, "height": plane.height, "recon_sha256": _sha256(plane.to_bytes())}))


@cli.command("train-iter")
@click.option("--corpus", type=click.Path(path_type=Path), help="Directory of training PGMs.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
@click.option("--iters", type=int, help="Number of iterations l.")
@click.option("--gamma", type=float, help="Cleansing threshold.")
@click.option("--q", type=int, help="Maximum pairs per image and block size.")
@click.option("--p", type=int, help="Learning-rate stage multiplier.")
@click.option("--seed", type=int, help="Root random seed.")
@click.option("--jobs", type=int, help="Images encoded concurrently.")
@click.option("--qp-set", callback=_int_list, help="Comma separated QPs, e.g. 22,27,32,37,42.")
@click.option("--sizes", callback=_int_list, help="Comma separated square block sides, e.g. 4,8,16,32.")
@click.option("--hidden-width", type=int, help="Neurons per hidden layer.")
@click.option("--batch-size", type=int, help="Pairs per optimizer step.")
@click.option("--stages", callback=_stages, help="Learning-rate stages as steps:multiplier, e.g. 2000:1,1000:0.1.")
@click.option("--no-cleansing", is_flag=True, help="Keep every NN-in-the-loop record.")
@click.option("--cold-start", is_flag=True, help="Train every iteration from a fresh initialisation.")
@click.pass_context
def train_iter(  # noqa: PLR0913
    ctx: click.Context,
    corpus: Path | None,
    out: Path | None,
    iters: int | None,
    gamma: float | None,
    q: int | None,
    p: int | None,
    seed: int | None,
    jobs: int | None,
    qp_set: list[int] | None,
    sizes: list[int] | None,
    hidden_width: int | None,
    batch_size: int | None,
    stages: list[dict[str, float]] | None,
    no_cleansing: bool,  # noqa: FBT001
    cold_start: bool,  # noqa: FBT001
) -> None:
    """Build training sets from codec partitions and train the networks iteratively."""
    run = _config(
        ctx,
        {
            "corpus_dir": str(corpus) if corpus else None,
            "output_dir": str(out) if out else None,
            "seed": seed,
            "jobs": jobs,
            "pipeline": {
                "iterations": iters,
                "gamma": gamma,
                "q": q,
                "p": p,
                "qp_set": qp_set,
                "sizes": sizes,
                "hidden_width": hidden_width,
                "cleansing": False if no_cleansing else None,
                "warm_start": False if cold_start else None,
            },
            "training": {"batch_size": batch_size, "stages": stages},
        },
    )
    run.validate_paths("corpus_dir")
    if run.output_dir is None:
        msg = "--out is required"
        raise ConfigError(msg)
    result = pipeline.iterative_train(
        Corpus.from_directory(run.corpus_dir),
        run.pipeline,
        run.training,
        run.output_dir,
        run.effective,
    )
    click.echo(json.dumps({"stages": result.stages, "output_dir": str(run.output_dir)}))


def _echo_bd_rate(anchor: evaluation.RateCurve, test: evaluation.RateCurve) -> float:
    value = evaluation.bd_rate(anchor, test)
    click.echo(f"# BD-rate method: {evaluation.BD_RATE_METHOD}")
    click.echo(f"BD-rate: {value:.2f}%")
    return value


@cli.command("eval")
@click.option("--anchor", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Anchor curve CSV.")
@click.option("--test", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Test curve CSV.")
@click.option("--corpus", type=click.Path(path_type=Path), help="Held-out PGMs to encode with NN off and on.")
@click.option("--models", type=click.Path(path_type=Path), help="Networks of the NN-on encodes.")
@click.option("--qp-set", callback=_int_list, help="QPs of the curves (config: pipeline.qp_set).")
@click.option("--jobs", type=int, help="Frames encoded concurrently.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Directory for curve CSVs and the plot.")
@click.option("--plot", type=click.Path(dir_okay=False, path_type=Path), help="SVG rate-distortion plot.")
@click.pass_context
def eval_command(  # noqa: PLR0913
    ctx: click.Context,
    anchor: Path | None,
    test: Path | None,
    corpus: Path | None,
    models: Path | None,
    qp_set: list[int] | None,
    jobs: int | None,
    out: Path | None,
    plot: Path | None,
) -> None:
    """BD-rate between two curve CSVs, or between NN-off and NN-on encodes of a corpus."""
    if anchor is not None and test is not None:
        anchor_curve = evaluation.read_curve_csv(anchor)
        test_curve = evaluation.read_curve_csv(test)
        _echo_bd_rate(anchor_curve, test_curve)
        if plot is not None:
            evaluation.plot_rate_curves({"anchor": anchor_curve, "test": test_curve}, plot)
        return
    if anchor is not None or test is not None:
        msg = "--anchor and --test go together"
        raise ConfigError(msg)

    run = _config(
        ctx,
        {
            "corpus_dir": str(corpus) if corpus else None,
            "models_dir": str(models) if models else None,
            "output_dir": str(out) if out else None,
            "jobs": jobs,
            "pipeline": {"qp_set": qp_set},
        },
    )
    run.validate_paths("corpus_dir", "models_dir")
    images = Corpus.from_directory(run.corpus_dir)
    params = load_models(run.models_dir)
    qps = run.pipeline.qp_set
    anchor_curve = evaluation.corpus_rate_curve(images, qps, False, None, run.pipeline.jobs)  # noqa: FBT003
    test_curve = evaluation.corpus_rate_curve(images, qps, True, params, run.pipeline.jobs)  # noqa: FBT003
    _echo_bd_rate(anchor_curve, test_curve)
    for point in test_curve.points:
        click.echo(f"QP {point.qp}: NN mode selected for {100 * (point.nn_ratio or 0.0):.2f}% of blocks")
    if run.output_dir is not None:
        run.output_dir.mkdir(parents=True, exist_ok=True)
        evaluation.write_curve_csv(anchor_curve, run.output_dir / "anchor.csv")
        evaluation.write_curve_csv(test_curve, run.output_dir / "test.csv")
        evaluation.plot_rate_curves(
            {"NN off": anchor_curve, "NN on": test_curve}, plot or run.output_dir / "rd.svg"
        )
    elif plot is not None:
        evaluation.plot_rate_curves({"NN off": anchor_curve, "NN on": test_curve}, plot)


def _load_records(path: Path) -> list[codec.BlockRecord]:
    try:
        return [codec.BlockRecord.from_row(row) for row in codec.read_records_csv(path)]
    except (KeyError, ValueError) as exc:
        msg = f"{path}: not a block record CSV ({exc})"
        raise ConfigError(msg) from exc


@cli.command()
@click.option("--records", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--against", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Second record CSV.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="CSV output instead of stdout.")
def stats(records: Path, against: Path | None, out: Path | None) -> None:
    """Mode selection percentages per block size and QP, or their change against a second record CSV."""
    first = _load_records(records)
    if against is None:
        table = evaluation.mode_frequencies(first)
    else:
        table = evaluation.mode_frequency_delta(first, _load_records(against))
    rows = evaluation.frequency_rows(table)
    handle = out.open("w", newline="") if out is not None else sys.stdout
    try:
        writer = csv.DictWriter(handle, fieldnames=("size", "qp", "mode", "percent"))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not None:
            handle.close()


@cli.command()
@click.option("--corpus", type=click.Path(path_type=Path), help="Directory of PGMs to sample.")
@click.option("--models-i", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--models-j", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--samples", type=int, default=100, show_default=True)
@click.option("--seed", type=int, help="Sampling seed (config: seed).")
@click.option("--size", type=int, default=8, show_default=True, help="Square block side.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--dump-dir", type=click.Path(file_okay=False, path_type=Path), help="Write PGM panels per sample.")
@click.pass_context
def report(  # noqa: PLR0913
    ctx: click.Context,
    corpus: Path | None,
    models_i: Path,
    models_j: Path,
    samples: int,
    seed: int | None,
    size: int,
    out: Path,
    dump_dir: Path | None,
) -> None:
    """Compare two sets of networks and the best classic mode on random blocks."""
    run = _config(ctx, {"corpus_dir": str(corpus) if corpus else None, "seed": seed})
    run.validate_paths("corpus_dir")
    rows = evaluation.prediction_report(
        Corpus.from_directory(run.corpus_dir),
        load_models(models_i),
        load_models(models_j),
        samples,
        run.pipeline.seed,
        (size, size),
        dump_dir,
    )
    evaluation.write_report_csv(rows, out)
    counts = {tag: sum(row["change"] == tag for row in rows) for tag in ("improved", "degraded", "unchanged")}
    click.echo(json.dumps({"rows": len(rows), **counts}))


def dispatch(argv: t.Sequence[str] | None = None) -> int:
    """Run the command line and map failures to exit codes."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="itnn-codec", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except ItnnCodecError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")  # noqa: TRY400
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return result if isinstance(result, int) else 0


def main() -> None:
    """Console script entry point."""
    sys.exit(dispatch())
