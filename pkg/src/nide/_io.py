"""
Files the package reads and writes.

* Trajectory CSV: header `t,y0,...,y{n-1}`, one row per sample, `%.17g` values.
* Structured documents (dataset and checkpoint manifests, run configuration,
  metric reports) are XML handled by xmltodict. Scalars are text, floats are
  written with `repr` and `None` is an element with `null="true"`. Sequences are
  `list="true"` elements with one `<item>` per entry; an empty mapping is marked
  `map="true"`.
* Checkpoint parameters: one little-endian float64 blob per network.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import TYPE_CHECKING, Any
from xml.parsers.expat import ExpatError

import numpy as np
from natsort import natsorted
from pydantic import ValidationError
from xmltodict import parse as xmltodict_parse
from xmltodict import unparse as xmltodict_unparse

from nide._analysis import Decomposition, Embedding
from nide._exceptions import CheckpointError, InvalidConfigError, InvalidTrajectoryError
from nide._models import Checkpoint, Dataset, Metrics, ParamVector, RunConfig, Segment, Trajectory
from nide._utils import config_hash, format_float, realpath

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from pydantic import BaseModel

    from nide._datasets import GeneratedDataset
    from nide._models import IntervalSpec
    from nide._training import EpochRecord
    from nide._types import FloatArray, StrPath

FORMAT = "1"
MANIFEST = "manifest.xml"
CONFIG = "config.xml"


def _number(value: float) -> str:
    return format(float(value), ".17g")


def _write_rows(path: StrPath, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    outfile = realpath(path)
    outfile.parent.mkdir(parents=True, exist_ok=True)
    with outfile.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return outfile


def _read_rows(path: StrPath) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header fields and `(line number, fields)` of every non-empty row."""
    try:
        text = realpath(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as error:
        raise InvalidTrajectoryError(f"cannot read {path}: {error}") from error
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    records: list[tuple[int, list[str]]] = []
    try:
        for fields in reader:
            if "".join(fields).strip():
                records.append((reader.line_num, fields))
    except csv.Error as error:
        raise InvalidTrajectoryError(f"malformed CSV: {error}", row=reader.line_num) from error
    if not records:
        raise InvalidTrajectoryError("empty file", row=1)
    (_, header), *rows = records
    return [field.strip() for field in header], rows


def save_csv(trajectory: Trajectory, path: StrPath) -> Path:
    """
    Write a trajectory as CSV.

    Returns
    -------
    Path
        Absolute path of the written file.
    """
    header = ["t", *(f"y{index}" for index in range(trajectory.state_dim))]
    rows = (
        [_number(time), *(_number(value) for value in state)]
        for time, state in zip(trajectory.times, trajectory.states)
    )
    return _write_rows(path, header, rows)


def load_csv(path: StrPath) -> Trajectory:
    """
    Read a trajectory written by [`save_csv`][nide.save_csv] (or by hand).

    Raises
    ------
    InvalidTrajectoryError
        On a malformed header, a malformed or non-finite value, or non-increasing
        times; the message names the file row.
    """
    header, rows = _read_rows(path)
    dim = len(header) - 1
    if dim < 1 or header != ["t", *(f"y{index}" for index in range(dim))]:
        raise InvalidTrajectoryError(f"expected header 't,y0,...,y{{n-1}}', got {','.join(header)!r}", row=1)
    values = []
    previous = -math.inf
    for number, fields in rows:
        if len(fields) != dim + 1:
            raise InvalidTrajectoryError(f"expected {dim + 1} columns, got {len(fields)}", row=number)
        try:
            row = [float(field) for field in fields]
        except ValueError as error:
            raise InvalidTrajectoryError(str(error), row=number) from error
        if not all(math.isfinite(value) for value in row):
            raise InvalidTrajectoryError("non-finite value", row=number)
        if row[0] <= previous:
            raise InvalidTrajectoryError(f"time {fields[0]} does not increase", row=number)
        previous = row[0]
        values.append(row)
    if len(values) < 2:
        raise InvalidTrajectoryError(f"a trajectory needs at least two samples, {path} has {len(values)}")
    table = np.array(values, dtype=np.float64)
    return Trajectory(times=table[:, 0], states=table[:, 1:])


def _encode(value: Any) -> Any:
    if value is None:
        return {"@null": "true"}
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, dict):
        if not value:
            return {"@map": "true"}
        return {key: _encode(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return {"@list": "true", "item": [_encode(item) for item in value]}
    return str(value)


def _decode(node: Any) -> Any:
    if node is None:
        return ""
    if isinstance(node, str):
        return node
    if node.get("@null") == "true":
        return None
    if node.get("@map") == "true":
        return {}
    if node.get("@list") == "true":
        items = node.get("item")
        # a single entry parses to a scalar or a mapping, not a list
        if items is None:
            return []
        if not isinstance(items, list):
            items = [items]
        return [_decode(item) for item in items]
    return {key.lstrip("@"): _decode(item) for key, item in node.items()}


def _as_list(node: Any) -> list[Any]:
    if node is None:
        return []
    return node if isinstance(node, list) else [node]


def _write_document(path: Path, root: str, body: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(xmltodict_unparse({root: body}, pretty=True, indent="    "), encoding="utf-8")
    return path


def _read_document(path: Path, root: str, error: type[Exception]) -> dict[str, Any]:
    try:
        document = xmltodict_parse(path.read_text(encoding="utf-8"))
    except (OSError, ExpatError) as failure:
        raise error(f"cannot read {path}: {failure}") from failure
    if root not in document:
        raise error(f"{path} is not a <{root}> document")
    body = document[root]
    return {} if body is None else dict(body)


def model_to_xml(model: BaseModel) -> dict[str, Any]:
    """A model as an xmltodict body."""
    encoded: dict[str, Any] = _encode(model.model_dump(mode="json"))
    return encoded


def save_config(config: RunConfig, directory: StrPath) -> Path:
    """Write `config.xml` into `directory`."""
    return _write_document(realpath(directory) / CONFIG, "config", model_to_xml(config))


def read_config(path: StrPath) -> dict[str, Any]:
    """
    Sections of a configuration file as plain values.

    Settings may be given as attributes or as child elements:
    `<config><solver grid_size="101"/><train><epochs>5</epochs></train></config>`.
    """
    body = _read_document(realpath(path), "config", InvalidConfigError)
    return {key.lstrip("@"): _decode(value) for key, value in body.items()}


def load_config(path: StrPath) -> RunConfig:
    """
    Read a configuration written by [`save_config`][nide.save_config].

    Raises
    ------
    InvalidConfigError
        If the file is unreadable or a setting is invalid.
    """
    try:
        return RunConfig.model_validate(read_config(path))
    except ValidationError as error:
        raise InvalidConfigError(str(error)) from error


def save_checkpoint(checkpoint: Checkpoint, directory: StrPath) -> Path:
    """
    Write a checkpoint directory: `manifest.xml` plus one `{net}.bin` per network.

    Returns
    -------
    Path
        Path of the manifest.
    """
    outdir = realpath(directory)
    outdir.mkdir(parents=True, exist_ok=True)
    if not checkpoint.config_hash:
        checkpoint = checkpoint.model_copy(update={"config_hash": config_hash(checkpoint.model, checkpoint.solver)})
    body: dict[str, Any] = {"@format": FORMAT}
    body.update(_encode(checkpoint.model_dump(mode="json", exclude={"params"})))
    nets: dict[str, list[Segment]] = {}
    for segment in checkpoint.params.segments:
        nets.setdefault(segment.name.split(".", 1)[0], []).append(segment)
    body["net"] = []
    for name, segments in nets.items():
        start, stop = segments[0].offset, segments[-1].stop
        blob = np.ascontiguousarray(checkpoint.params.values[start:stop], dtype="<f8")
        (outdir / f"{name}.bin").write_bytes(blob.tobytes())
        body["net"].append(
            {
                "@name": name,
                "@file": f"{name}.bin",
                "segment": [
                    {"@name": item.name, "@offset": str(item.offset), "@shape": ",".join(map(str, item.shape))}
                    for item in segments
                ],
            }
        )
    return _write_document(outdir / MANIFEST, "checkpoint", body)


def load_checkpoint(path: StrPath, *, expected_hash: str | None = None) -> Checkpoint:
    """
    Read a checkpoint directory (or its manifest).

    Parameters
    ----------
    path : str or os.PathLike
        Checkpoint directory or its `manifest.xml`.
    expected_hash : str, optional
        Configuration hash the caller requires.

    Raises
    ------
    CheckpointError
        If files are missing or malformed, a blob does not match its segments,
        or the configuration hash disagrees with the stored configuration or with
        `expected_hash`.
    """
    manifest = realpath(path)
    if manifest.is_dir():
        manifest = manifest / MANIFEST
    body = _read_document(manifest, "checkpoint", CheckpointError)
    if body.get("@format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {body.get('@format')!r}")
    fields = {key: _decode(value) for key, value in body.items() if key not in ("@format", "net")}

    segments: list[Segment] = []
    blobs: list[FloatArray] = []
    offset = 0
    for net in _as_list(body.get("net")):
        try:
            blob = np.frombuffer((manifest.parent / net["@file"]).read_bytes(), dtype="<f8")
            shapes = [
                (item["@name"], tuple(int(part) for part in item["@shape"].split(",") if part))
                for item in _as_list(net.get("segment"))
            ]
        except (OSError, KeyError, ValueError) as error:
            raise CheckpointError(f"malformed network entry in {manifest}: {error}") from error
        start = offset
        for name, shape in shapes:
            segment = Segment(name=name, offset=offset, shape=shape)
            segments.append(segment)
            offset = segment.stop
        if blob.shape[0] != offset - start:
            raise CheckpointError(f"{net['@file']} holds {blob.shape[0]} values, segments need {offset - start}")
        blobs.append(blob.astype(np.float64))

    try:
        params = ParamVector(segments=tuple(segments), values=np.concatenate(blobs) if blobs else np.zeros(0))
        checkpoint = Checkpoint.model_validate({**fields, "params": params})
    except ValidationError as error:
        raise CheckpointError(f"invalid checkpoint {manifest}: {error}") from error
    digest = config_hash(checkpoint.model, checkpoint.solver)
    if digest != checkpoint.config_hash:
        raise CheckpointError(f"configuration hash mismatch: stored {checkpoint.config_hash}, computed {digest}")
    if expected_hash is not None and expected_hash != digest:
        raise CheckpointError(f"checkpoint has configuration hash {digest}, expected {expected_hash}")
    return checkpoint


def write_dataset(
    dataset: Dataset,
    directory: StrPath,
    *,
    interval: IntervalSpec | None = None,
    latent_dim: int | None = None,
    residuals: Sequence[float] = (),
    truth: Sequence[Decomposition] = (),
    self_intersections: Sequence[int] = (),
) -> Path:
    """
    Write `curve_{k}.csv` for every trajectory, optional `truth_{k}.csv` and a `manifest.xml`.

    Returns
    -------
    Path
        Path of the manifest.
    """
    outdir = realpath(directory)
    start, stop = dataset.window
    curves = []
    for index, trajectory in enumerate(dataset.trajectories):
        entry = {"@file": save_csv(trajectory, outdir / f"curve_{index}.csv").name}
        if index < len(residuals):
            entry["@residual"] = format_float(residuals[index])
        if index < len(self_intersections):
            entry["@self_intersections"] = str(self_intersections[index])
        if index < len(truth):
            entry["@truth"] = save_decomposition(truth[index], outdir / f"truth_{index}.csv").name
        curves.append(entry)
    body: dict[str, Any] = {
        "@format": FORMAT,
        "state_dim": str(dataset.state_dim),
        "window": {"@start": format_float(start), "@stop": format_float(stop)},
    }
    if latent_dim is not None:
        body["latent_dim"] = str(latent_dim)
    if interval is not None:
        body["interval"] = model_to_xml(interval)
    body["provenance"] = dict(dataset.provenance)
    body["curves"] = {"curve": curves}
    return _write_document(outdir / MANIFEST, "dataset", body)


def write_generated(result: GeneratedDataset, directory: StrPath) -> Path:
    """Write a generated dataset with its residuals and ground truth."""
    return write_dataset(
        result.dataset,
        directory,
        interval=result.generator.system.interval,
        latent_dim=result.generator.system.latent_dim,
        residuals=result.residuals,
        truth=result.truth,
        self_intersections=result.self_intersections,
    )


def _dataset_entries(directory: Path) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    body = _read_document(directory / MANIFEST, "dataset", InvalidConfigError)
    if body.get("@format") != FORMAT:
        raise InvalidConfigError(f"unsupported dataset format {body.get('@format')!r}")
    return body, _as_list((body.get("curves") or {}).get("curve"))


def load_dataset(directory: StrPath) -> Dataset:
    """
    Read a dataset directory.

    With a `manifest.xml` the listed files are read and its provenance kept;
    otherwise every `curve_*.csv` is read in natural order.

    Raises
    ------
    InvalidTrajectoryError
        If a file is malformed, dimensions differ, or there is nothing to read.
    """
    source = realpath(directory)
    provenance = {"source": str(source)}
    if (source / MANIFEST).is_file():
        body, entries = _dataset_entries(source)
        files = [source / entry["@file"] for entry in entries]
        provenance.update({key: str(value) for key, value in (body.get("provenance") or {}).items()})
    else:
        files = natsorted(source.glob("curve_*.csv"), key=lambda item: item.name)
    if not files:
        raise InvalidTrajectoryError(f"no trajectories in {source}")
    trajectories = tuple(load_csv(file) for file in files)
    try:
        return Dataset(trajectories=trajectories, provenance=provenance)
    except ValidationError as error:
        raise InvalidTrajectoryError(f"{source}: {error}") from error


def load_truth(directory: StrPath) -> tuple[Decomposition, ...]:
    """Ground-truth decompositions listed in a dataset manifest; empty when there are none."""
    _, entries = _dataset_entries(realpath(directory))
    return tuple(load_decomposition(realpath(directory) / entry["@truth"]) for entry in entries if "@truth" in entry)


def save_decomposition(decomposition: Decomposition, path: StrPath) -> Path:
    """
    Write a decomposition as CSV.

    Columns: `t`, the rates `markov_i`, `nonmarkov_i`, `total_i`, then the
    displacements `markov_path_i`, `nonmarkov_path_i`, `total_path_i` (running
    integrals from 0 at the first time).
    """
    n = decomposition.state_dim
    blocks = [
        ("markov", decomposition.markovian_rate),
        ("nonmarkov", decomposition.nonmarkovian_rate),
        ("total", decomposition.total_rate),
        ("markov_path", decomposition.markovian_path),
        ("nonmarkov_path", decomposition.nonmarkovian_path),
        ("total_path", decomposition.total_path),
    ]
    header = ["t", *(f"{name}_{index}" for name, _ in blocks for index in range(n))]
    table = np.column_stack([decomposition.times, *(values for _, values in blocks)])
    return _write_rows(path, header, ([_number(value) for value in row] for row in table))


def load_decomposition(path: StrPath) -> Decomposition:
    header, rows = _read_rows(path)
    try:
        table = np.array([[float(field) for field in fields] for _, fields in rows], dtype=np.float64)
        columns = {name: index for index, name in enumerate(header)}

        def block(name: str) -> FloatArray:
            picked = [columns[key] for key in natsorted(key for key in columns if key.rsplit("_", 1)[0] == name)]
            return table[:, picked]

        return Decomposition(
            times=table[:, columns["t"]],
            markovian_rate=block("markov"),
            nonmarkovian_rate=block("nonmarkov"),
            markovian_path=block("markov_path"),
            nonmarkovian_path=block("nonmarkov_path"),
        )
    except (KeyError, ValueError) as error:
        raise InvalidTrajectoryError(f"malformed decomposition file {path}: {error}") from error


def save_embedding(embedding: Embedding, path: StrPath) -> Path:
    """Write an embedding as CSV with header `t,z0,...,z{m-1}`."""
    header = ["t", *(f"z{index}" for index in range(embedding.points.shape[1]))]
    table = np.column_stack([embedding.times, embedding.points])
    return _write_rows(path, header, ([_number(value) for value in row] for row in table))


def save_history(history: Sequence[EpochRecord], path: StrPath) -> Path:
    """Write the training history as CSV with columns `epoch,lr,train_mse`."""
    rows = ([str(record.epoch), _number(record.lr), _number(record.train_mse)] for record in history)
    return _write_rows(path, ["epoch", "lr", "train_mse"], rows)


def save_metrics(metrics: Metrics, directory: StrPath, stem: str = "metrics") -> tuple[Path, Path]:
    """
    Write metrics as `{stem}.csv` (one row per label, then `all`) and `{stem}.xml`.

    Undefined R² values are written as `undefined` in the CSV.
    """
    outdir = realpath(directory)

    def r2_text(value: float | None) -> str:
        return "undefined" if value is None else _number(value)

    rows = [
        [label, str(count), _number(mse), r2_text(r2)]
        for label, count, mse, r2 in zip(metrics.labels, metrics.counts, metrics.mse, metrics.r2)
    ]
    rows.append(["all", str(sum(metrics.counts)), _number(metrics.mse_total), r2_text(metrics.r2_total)])
    table = _write_rows(outdir / f"{stem}.csv", ["label", "count", "mse", "r2"], rows)
    return table, save_report(metrics, outdir / f"{stem}.xml", "metrics")


def load_metrics(path: StrPath) -> Metrics:
    """Read a metrics report written by [`save_metrics`][nide.save_metrics]."""
    body = _read_document(realpath(path), "metrics", InvalidConfigError)
    fields = {key: _decode(value) for key, value in body.items() if key != "@format"}
    try:
        return Metrics.model_validate(fields)
    except ValidationError as error:
        raise InvalidConfigError(str(error)) from error


def save_masks(masks: Sequence[tuple[bool, ...] | None], path: StrPath) -> Path:
    """
    Write training masks as CSV with columns `curve,length,hidden`.

    `hidden` is the number of trailing points hidden, `none` for an unmasked curve.
    """
    rows = (
        [str(index), "" if mask is None else str(len(mask)), "none" if mask is None else str(sum(mask))]
        for index, mask in enumerate(masks)
    )
    return _write_rows(path, ["curve", "length", "hidden"], rows)


def load_masks(path: StrPath) -> tuple[tuple[bool, ...] | None, ...]:
    """Read masks written by [`save_masks`][nide.save_masks]."""
    header, rows = _read_rows(path)
    if header != ["curve", "length", "hidden"]:
        raise InvalidTrajectoryError(f"expected header 'curve,length,hidden', got {','.join(header)!r}", row=1)
    masks: list[tuple[bool, ...] | None] = []
    for number, fields in rows:
        try:
            if fields[2].strip() == "none":
                masks.append(None)
                continue
            length, hidden = int(fields[1]), int(fields[2])
        except (IndexError, ValueError) as error:
            raise InvalidTrajectoryError(str(error), row=number) from error
        if not 0 <= hidden < length:
            raise InvalidTrajectoryError(f"cannot hide {hidden} of {length} points", row=number)
        masks.append(tuple([False] * (length - hidden) + [True] * hidden))
    return tuple(masks)


def save_report(report: BaseModel, path: StrPath, root: str = "report") -> Path:
    """Write any result model as an XML report."""
    return _write_document(realpath(path), root, {"@format": FORMAT, **model_to_xml(report)})


def save_rows(path: StrPath, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    """Write a plot-ready CSV; floats with 17 significant digits, `None` as `undefined`."""

    def text(value: object) -> str:
        if value is None:
            return "undefined"
        if isinstance(value, float):
            return _number(value)
        return str(value)

    return _write_rows(path, header, ([text(value) for value in row] for row in rows))
