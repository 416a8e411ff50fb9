from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, NoReturn

import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from nide._analysis import compare_decompositions, decompose, embed, knn_regress, pca_project
from nide._datasets import gen
from nide._exceptions import (
    DimensionError,
    GenerationError,
    InvalidConfigError,
    NIDEException,
    TrainingDivergedError,
    UndefinedMetricError,
)
from nide._gradients import compare_gradients, kernel_scale_sweep, smoke_suite
from nide._io import (
    MANIFEST,
    load_checkpoint,
    load_dataset,
    load_masks,
    load_truth,
    read_config,
    save_checkpoint,
    save_config,
    save_csv,
    save_decomposition,
    save_embedding,
    save_history,
    save_masks,
    save_metrics,
    save_report,
    save_rows,
)
from nide._models import RunConfig
from nide._training import compare_models, evaluate, extrapolate, make_node_baseline, predict_from_ic, train
from nide._utils import format_float, realpath
from nide._version import __version__

if TYPE_CHECKING:
    from collections.abc import Sequence

    from nide._models import Dataset, Metrics
    from nide._training import Mask
    from nide._types import FloatArray

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_DATA_ERROR = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 64

SECTIONS = ("solver", "model", "train", "mask", "generate", "gradcheck")

# flag destination -> dotted location in the configuration
OVERRIDES = {
    "grid_size": "solver.grid_size",
    "max_iter": "solver.max_iter",
    "tolerance": "solver.tolerance",
    "stepper": "solver.stepper",
    "quadrature": "solver.quadrature.kind",
    "nodes": "solver.quadrature.node_count",
    "samples": "solver.quadrature.sample_count",
    "latent_dim": "model.latent_dim",
    "dynamics_hidden": "model.dynamics_hidden",
    "kernel_hidden": "model.kernel_hidden",
    "integrand_hidden": "model.integrand_hidden",
    "interval": "model.interval.kind",
    "init_scale": "model.init_scale",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr_max": "train.schedule.lr_max",
    "lr_min": "train.schedule.lr_min",
    "period": "train.schedule.period",
    "grad": "train.grad_mode.kind",
    "downsample": "train.downsample_to",
    "mask": "mask.kind",
    "mask_fraction": "mask.max_fraction",
    "system": "generate.name",
    "curves": "generate.n_curves",
    "points": "generate.points_per_curve",
    "window": "generate.window",
    "ic_low": "generate.ic_low",
    "ic_high": "generate.ic_high",
    "scale": "generate.scale",
    "gen_quadrature": "generate.quadrature.kind",
    "check_tolerance": "gradcheck.tolerance",
    "min_cosine": "gradcheck.min_cosine",
    "fd_step": "gradcheck.fd_step",
    "kernel_scales": "gradcheck.kernel_scales",
}

# command-specific flags kept verbatim in `RunConfig.options`
OPTIONS = ("dataset", "checkpoint", "model_kind", "masks", "horizon", "y0", "span", "samples_out", "k", "seeds")

console = Console()


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit status 64."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _assign(tree: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = tree.get(key)
        if not isinstance(node, dict):
            node = {}
            tree[key] = node
        tree = node
    tree[leaf] = value


def _raw_config(args: argparse.Namespace) -> dict[str, Any]:
    """Configuration file contents with the command line laid over them."""
    raw: dict[str, Any] = read_config(args.config) if args.config is not None else {}
    for section in SECTIONS:
        if not isinstance(raw.get(section), dict):
            raw[section] = {}
    if not isinstance(raw.get("options"), dict):
        raw["options"] = {}
    raw["command"] = args.command
    for dest, location in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            _assign(raw, location, value)
    if isinstance(raw["model"].get("interval"), dict) and getattr(args, "interval", None) is not None:
        raw["model"]["interval"] = {"kind": args.interval}
    for name in OPTIONS:
        value = getattr(args, name, None)
        if value is not None:
            raw["options"][name] = str(value)
    if args.out is not None:
        raw["out"] = str(args.out)
    if args.seed is not None:
        raw["seed"] = args.seed
    seed = raw.get("seed", 0)
    for section in ("train", "mask", "generate"):
        if section == "generate" and not raw[section]:
            continue
        if args.seed is not None:
            raw[section]["seed"] = seed
        else:
            raw[section].setdefault("seed", seed)
    return raw


def _validated(raw: dict[str, Any]) -> RunConfig:
    fields = {key: value for key, value in raw.items() if not (key in ("model", "generate") and not value)}
    try:
        return RunConfig.model_validate(fields)
    except ValidationError as error:
        raise InvalidConfigError(f"invalid configuration: {error}") from error


def _required(parser: argparse.ArgumentParser, raw: dict[str, Any], name: str) -> str:
    value = raw["options"].get(name)
    if not value:
        parser.error(f"{raw['command']} needs --{name.replace('_', '-')}")
    return str(value)


def _prepare(config: RunConfig) -> Path:
    """Create the output directory and record the resolved configuration in it."""
    out = realpath(config.out if config.out is not None else Path("runs") / config.command)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("configuration written to %s", save_config(config, out))
    return out


def _show(table: Table, path: Path) -> None:
    """Print a table and keep a plain-text copy."""
    console.print(table)
    with path.open("w", encoding="utf-8") as handle:
        Console(file=handle, width=120, color_system=None).print(table)


def _text(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6e}"


def _floats(text: str) -> list[float]:
    return [float(part) for part in text.replace(" ", "").split(",") if part]


def _table(title: str, *columns: str) -> Table:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    for column in columns:
        table.add_column(column, justify="right")
    return table


def _tail_masks(dataset: Dataset, hidden: Sequence[int | None]) -> tuple[Mask | None, ...]:
    """Hide the given number of trailing points of every trajectory."""
    if len(hidden) != len(dataset):
        raise DimensionError(f"{len(hidden)} masks for {len(dataset)} trajectories")
    masks: list[Mask | None] = []
    for index, (trajectory, count) in enumerate(zip(dataset.trajectories, hidden)):
        if count is None:
            masks.append(None)
            continue
        if not 0 <= count < trajectory.length:
            raise DimensionError(f"curve {index}: cannot hide {count} of {trajectory.length} points")
        masks.append(tuple([False] * (trajectory.length - count) + [True] * count))
    return tuple(masks)


def _masks_from_file(path: str, dataset: Dataset) -> tuple[Mask | None, ...]:
    # training masks refer to downsampled curves; keep the hidden count per curve
    return _tail_masks(dataset, [None if mask is None else sum(mask) for mask in load_masks(path)])


def _metrics_table(metrics: Metrics, title: str) -> Table:
    table = _table(title, "point", "count", "MSE", "R²")
    for label, count, mse, r2 in zip(metrics.labels, metrics.counts, metrics.mse, metrics.r2):
        table.add_row(label, str(count), _text(mse), _text(r2))
    table.add_row("all", str(sum(metrics.counts)), _text(metrics.mse_total), _text(metrics.r2_total), style="bold")
    return table


def cmd_generate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    if not raw["generate"].get("name"):
        parser.error("generate needs --system")
    config = _validated(raw)
    assert config.generate is not None
    out = _prepare(config)
    try:
        result = gen(config.generate, out, jobs=args.jobs)
    except GenerationError as error:
        logger.error("generation failed (seed %d, curve %d): %s", error.seed, error.curve, error)
        return EXIT_DATA_ERROR
    table = _table(
        f"{result.generator.ident} (seed {config.generate.seed})", "curve", "samples", "residual", "self-intersections"
    )
    crossings: Sequence[int | None] = result.self_intersections or [None] * len(result.residuals)
    for index, (trajectory, gap, count) in enumerate(zip(result.dataset.trajectories, result.residuals, crossings)):
        table.add_row(str(index), str(trajectory.length), f"{gap:.3e}", "-" if count is None else str(count))
    _show(table, out / "generate.txt")
    console.print(str(result.manifest))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    dataset = load_dataset(_required(parser, raw, "dataset"))
    raw["model"].setdefault("state_dim", dataset.state_dim)
    config = _validated(raw)
    assert config.model is not None
    template = config.model
    if config.options.get("model_kind", "nide") == "node":
        template = make_node_baseline(template)
    out = _prepare(config)
    try:
        result = train(dataset, template, config.train, config.mask, config.solver, jobs=args.jobs)
    except TrainingDivergedError as error:
        path = save_checkpoint(error.checkpoint, out / "error.checkpoint")  # type: ignore[arg-type]
        logger.error("%s; last good checkpoint: %s", error, path.parent)
        console.print(str(path.parent))
        return EXIT_DIVERGED
    manifest = save_checkpoint(result.checkpoint, out / "checkpoint")
    save_history(result.history, out / "history.csv")
    save_masks(result.masks, out / "masks.csv")
    table = _table("training", "model", "parameters", "epochs", "final MSE")
    table.add_row(
        config.options.get("model_kind", "nide"),
        str(template.parameter_count),
        str(result.checkpoint.epoch),
        _text(result.checkpoint.final_mse),
    )
    _show(table, out / "train.txt")
    console.print(str(manifest.parent))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    checkpoint = load_checkpoint(_required(parser, raw, "checkpoint"))
    dataset = load_dataset(_required(parser, raw, "dataset"))
    config = _validated(raw)
    out = _prepare(config)
    masks = _masks_from_file(config.options["masks"], dataset) if config.options.get("masks") else None
    metrics = evaluate(checkpoint, dataset, masks, jobs=args.jobs)
    save_metrics(metrics, out)
    _show(_metrics_table(metrics, "evaluation"), out / "metrics.txt")
    return EXIT_OK


def cmd_extrapolate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    checkpoint = load_checkpoint(_required(parser, raw, "checkpoint"))
    dataset = load_dataset(_required(parser, raw, "dataset"))
    config = _validated(raw)
    if config.options.get("masks"):
        masks = _masks_from_file(config.options["masks"], dataset)
    elif config.options.get("horizon"):
        masks = _tail_masks(dataset, [int(config.options["horizon"])] * len(dataset))
    else:
        parser.error("extrapolate needs --horizon or --masks")
    out = _prepare(config)
    for index, (trajectory, mask) in enumerate(zip(dataset.trajectories, masks)):
        hidden = 0 if mask is None else sum(mask)
        prediction = extrapolate(checkpoint, trajectory.head(trajectory.length - hidden), hidden)
        if not prediction.converged:
            logger.warning("curve %d: extrapolation solve did not converge", index)
        save_csv(prediction.trajectory, out / f"extrapolation_{index}.csv")
    metrics = evaluate(checkpoint, dataset, masks, jobs=args.jobs)
    save_metrics(metrics, out, stem="extrapolation")
    _show(_metrics_table(metrics, "MSE per extrapolated point"), out / "extrapolation.txt")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    checkpoint = load_checkpoint(_required(parser, raw, "checkpoint"))
    y0 = _floats(_required(parser, raw, "y0"))
    config = _validated(raw)
    start = checkpoint.normalization.offset
    window = (start, start + checkpoint.normalization.span)
    if config.options.get("span"):
        low, high = _floats(config.options["span"])
        window = (low, high)
    out = _prepare(config)
    prediction = predict_from_ic(checkpoint, y0, window, points=int(config.options.get("samples_out", "20")))
    if not prediction.converged:
        logger.warning("prediction solve did not converge after %d iterations", prediction.iterations_used)
    console.print(str(save_csv(prediction.trajectory, out / "prediction.csv")))
    return EXIT_OK


def cmd_decompose(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    checkpoint = load_checkpoint(_required(parser, raw, "checkpoint"))
    source = _required(parser, raw, "dataset")
    dataset = load_dataset(source)
    config = _validated(raw)
    out = _prepare(config)
    learned = []
    for index, trajectory in enumerate(dataset.trajectories):
        parts = decompose(checkpoint, trajectory)
        if not parts.converged:
            logger.warning("curve %d: decomposition solve did not converge", index)
        save_decomposition(parts, out / f"decomposition_{index}.csv")
        learned.append(parts)
    truth = load_truth(source) if (realpath(source) / MANIFEST).is_file() else ()
    if not truth:
        logger.info("no ground truth next to %s; wrote %d decompositions", source, len(learned))
        return EXIT_OK
    scores = compare_decompositions(learned, truth)
    save_report(scores, out / "decomposition_scores.xml", "scores")
    table = _table("decomposition R² against ground truth", "component", "rates", "paths")
    table.add_row("whole", _text(scores.rate_total), _text(scores.path_total))
    table.add_row("markovian", _text(scores.rate_markovian), _text(scores.path_markovian))
    table.add_row("non-markovian", _text(scores.rate_nonmarkovian), _text(scores.path_nonmarkovian))
    _show(table, out / "decomposition_scores.txt")
    return EXIT_OK


def _knn_score(points: FloatArray, targets: FloatArray, k: int) -> float | None:
    try:
        return knn_regress(points, targets, k)
    except UndefinedMetricError as error:
        logger.warning("%s", error)
        return None


def cmd_embed(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    checkpoint = load_checkpoint(_required(parser, raw, "checkpoint"))
    dataset = load_dataset(_required(parser, raw, "dataset"))
    config = _validated(raw)
    out = _prepare(config)
    solved = not args.observed
    embeddings = []
    for index, trajectory in enumerate(dataset.trajectories):
        embedding = embed(checkpoint, trajectory, solved=solved)
        save_embedding(embedding, out / f"embedding_{index}.csv")
        embeddings.append(embedding)

    k = int(config.options.get("k", "3"))
    times = np.concatenate([item.times for item in embeddings])
    latent = np.concatenate([item.points for item in embeddings])
    states = np.concatenate([trajectory.states for trajectory in dataset.trajectories])
    dims = min(latent.shape[1], states.shape[1])
    rows: list[tuple[str, int, float | None]] = [("integrand", latent.shape[1], _knn_score(latent, times, k))]
    try:
        projection = pca_project(states, dims)
        rows.append(("pca", dims, _knn_score(projection.points, times, k)))
    except DimensionError as error:
        logger.warning("no PCA baseline: %s", error)
    save_rows(out / "embedding_scores.csv", ["embedding", "dims", "knn_r2"], rows)
    table = _table(f"k-NN time regression (k={k})", "embedding", "dims", "R²")
    for name, width, score in rows:
        table.add_row(name, str(width), _text(score))
    _show(table, out / "embedding_scores.txt")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    config = _validated(_raw_config(args))
    check = config.gradcheck
    out = _prepare(config)
    table = _table(
        "gradient comparison", "system", "mode", "reference", "loss", "|grad|", "cosine", "rel. error", "check"
    )
    rows = []
    failures: list[tuple[float, str]] = []
    cases = smoke_suite(check)
    for case in cases:
        for row in compare_gradients(case.system, case.y0, case.spec, case.solver, fd_step=check.fd_step):
            checked = (row.mode, row.reference) == ("unrolled", "finite_difference") or (
                case.kernel_free and (row.mode, row.reference) == ("adjoint", "unrolled")
            )
            passed = row.relative_error <= check.tolerance
            status = ("pass" if passed else "FAIL") if checked else "-"
            if checked and not passed:
                failures.append(
                    (
                        row.relative_error / check.tolerance,
                        f"{case.name} {row.mode}/{row.reference}: {row.relative_error:.3e}",
                    )
                )
            rows.append(
                (case.name, row.mode, row.reference, row.loss, row.norm, row.cosine, row.relative_error, status)
            )
            table.add_row(
                case.name,
                row.mode,
                row.reference,
                f"{row.loss:.6e}",
                f"{row.norm:.6e}",
                f"{row.cosine:.8f}",
                f"{row.relative_error:.3e}",
                status,
            )
    save_rows(
        out / "gradcheck.csv",
        ["system", "mode", "reference", "loss", "norm", "cosine", "relative_error", "check"],
        rows,
    )
    _show(table, out / "gradcheck.txt")

    swept = next(case for case in cases if not case.kernel_free)
    sweep = kernel_scale_sweep(swept.system, swept.y0, swept.spec, swept.solver, check.kernel_scales)
    sweep_table = _table(
        f"adjoint vs unrolled by kernel scale ({swept.name})", "scale", "max |K|", "cosine", "rel. error"
    )
    for item in sweep:
        sweep_table.add_row(
            format_float(item.scale), f"{item.kernel_magnitude:.3e}", f"{item.cosine:.8f}", f"{item.relative_error:.3e}"
        )
        if item.scale <= 0.01 and item.cosine < check.min_cosine:
            failures.append(
                ((1.0 - item.cosine) / (1.0 - check.min_cosine), f"kernel scale {item.scale}: cosine {item.cosine:.6f}")
            )
    save_rows(
        out / "kernel_scale.csv",
        ["scale", "kernel_magnitude", "cosine", "relative_error"],
        ((item.scale, item.kernel_magnitude, item.cosine, item.relative_error) for item in sweep),
    )
    _show(sweep_table, out / "kernel_scale.txt")

    if failures:
        worst = max(failures)
        logger.error("%d check(s) failed; worst: %s", len(failures), worst[1])
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    raw = _raw_config(args)
    dataset = load_dataset(_required(parser, raw, "dataset"))
    raw["model"].setdefault("state_dim", dataset.state_dim)
    config = _validated(raw)
    assert config.model is not None
    seeds = tuple(int(value) for value in _floats(config.options.get("seeds", "0,1,2,3,4")))
    out = _prepare(config)
    summaries = compare_models(
        dataset, config.model, config.train, seeds, mask_policy=config.mask, solver=config.solver, jobs=args.jobs
    )
    save_rows(
        out / "compare.csv",
        ["model", "parameters", "seed", "final_mse"],
        (
            (summary.name, summary.parameter_count, seed, value)
            for summary in summaries
            for seed, value in zip(summary.seeds, summary.final_mse)
        ),
    )
    table = _table(f"final training MSE over {len(seeds)} seeds", "model", "parameters", "mean", "std")
    for summary in summaries:
        table.add_row(summary.name, str(summary.parameter_count), _text(summary.mean), _text(summary.std))
    _show(table, out / "compare.txt")
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, argparse.ArgumentParser], int]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "extrapolate": cmd_extrapolate,
    "predict": cmd_predict,
    "decompose": cmd_decompose,
    "embed": cmd_embed,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def build_parser() -> _Parser:
    """The `nide` argument parser."""
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="configuration file, e.g. the config.xml of an earlier run")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", type=Path, help="output directory (default: runs/<command>)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads; results do not depend on it")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    solver = _Parser(add_help=False)
    group = solver.add_argument_group("solver")
    group.add_argument("--grid-size", type=int)
    group.add_argument("--max-iter", type=int)
    group.add_argument("--tolerance", type=float)
    group.add_argument("--stepper", choices=("rk4", "euler"))
    group.add_argument("--quadrature", choices=("gauss_legendre", "monte_carlo"))
    group.add_argument("--nodes", type=int, help="Gauss-Legendre nodes per interval")
    group.add_argument("--samples", type=int, help="Monte-Carlo samples per interval")

    checkpoint = _Parser(add_help=False)
    checkpoint.add_argument("--checkpoint", type=Path, help="checkpoint directory")

    dataset = _Parser(add_help=False)
    dataset.add_argument("dataset", nargs="?", type=Path, help="dataset directory")

    model = _Parser(add_help=False)
    group = model.add_argument_group("model")
    group.add_argument("--latent-dim", type=int)
    group.add_argument("--dynamics-hidden", help="hidden widths of f, e.g. '40' or 'none'")
    group.add_argument("--kernel-hidden", help="hidden widths of K, e.g. '32,32' or 'none'")
    group.add_argument("--integrand-hidden", help="hidden widths of F, e.g. '32,32' or 'none'")
    group.add_argument("--interval", choices=("volterra", "fredholm"))
    group.add_argument("--init-scale", type=float)

    training = _Parser(add_help=False)
    group = training.add_argument_group("training")
    group.add_argument("--epochs", type=int)
    group.add_argument("--batch-size", type=int)
    group.add_argument("--lr-max", type=float)
    group.add_argument("--lr-min", type=float)
    group.add_argument("--period", type=int)
    group.add_argument("--grad", choices=("unrolled", "adjoint", "finite_difference"))
    group.add_argument("--downsample", help="points kept per trajectory, or 'none'")
    group.add_argument("--mask", choices=("none", "tail_fraction"))
    group.add_argument("--mask-fraction", type=float)

    parser = _Parser(prog="nide", description="Learn integro-differential equation dynamics from trajectories.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    generate = commands.add_parser("generate", parents=[common], help="generate a synthetic dataset")
    generate.add_argument("--system", choices=("ide_spiral_2d", "ide_curves_4d", "ode_spiral_2d", "decomp_curves_2d"))
    generate.add_argument("--curves", type=int)
    generate.add_argument("--points", type=int, help="samples per curve (default 20)")
    generate.add_argument("--window", help="time window 'start,stop'")
    generate.add_argument("--ic-low", type=float)
    generate.add_argument("--ic-high", type=float)
    generate.add_argument("--scale", type=float, help="kernel scale")
    generate.add_argument("--gen-quadrature", choices=("gauss_legendre", "monte_carlo"))

    train_cmd = commands.add_parser(
        "train", parents=[common, dataset, solver, model, training], help="fit a model to a dataset"
    )
    train_cmd.add_argument("--model", dest="model_kind", choices=("nide", "node"))

    eval_cmd = commands.add_parser(
        "eval", parents=[common, dataset, checkpoint], help="score a checkpoint on a dataset"
    )
    eval_cmd.add_argument("--masks", type=Path, help="masks.csv of a training run; only hidden points are scored")

    extrapolate_cmd = commands.add_parser(
        "extrapolate", parents=[common, dataset, checkpoint], help="score predictions past the observed prefix"
    )
    extrapolate_cmd.add_argument("--horizon", type=int, help="trailing points to predict")
    extrapolate_cmd.add_argument("--masks", type=Path, help="masks.csv of a training run")

    predict_cmd = commands.add_parser(
        "predict", parents=[common, checkpoint], help="solve from a new initial condition"
    )
    predict_cmd.add_argument("--y0", help="initial state 'y0,y1,...'")
    predict_cmd.add_argument("--span", help="time window 'start,stop' (default: the training window)")
    predict_cmd.add_argument("--samples-out", type=int, help="output samples (default 20)")

    commands.add_parser(
        "decompose", parents=[common, dataset, checkpoint], help="split learned dynamics into local and memory parts"
    )

    embed_cmd = commands.add_parser("embed", parents=[common, dataset, checkpoint], help="latent embedding through F")
    embed_cmd.add_argument("--observed", action="store_true", help="embed observed instead of solved states")
    embed_cmd.add_argument("--k", type=int, help="neighbours for the k-NN score (default 3)")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="compare gradient modes on smoke systems")
    gradcheck.add_argument("--check-tolerance", type=float)
    gradcheck.add_argument("--min-cosine", type=float)
    gradcheck.add_argument("--fd-step", type=float)
    gradcheck.add_argument("--kernel-scales", help="comma-separated kernel scales")

    compare = commands.add_parser(
        "compare", parents=[common, dataset, solver, model, training], help="NIDE against a parameter-matched NODE"
    )
    compare.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point of the `nide` command."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args, parser)
    except InvalidConfigError as error:
        logger.error("%s", error)
        return EXIT_USAGE
    except NIDEException as error:
        logger.error("%s", error)
        return EXIT_DATA_ERROR
