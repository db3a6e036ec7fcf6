"""Experiment configuration files.

Grammar: INI-style sections holding flat ``key = value`` pairs, parsed with
:mod:`configparser`.  Lines starting with ``#`` or ``;`` are comments.  Lists
are comma separated.  Recognized sections::

    [experiment]  name, regime (bp | act | pas | combined), seed
    [data]        format (delimited | idx), path, label_column, delimiter,
                  header_lines, ignore_columns, train_fraction, normalize,
                  train_images, train_labels, test_images, test_labels
    [model]       topology, hidden, output
    [train]       any TrainConfig field except hw and seed
    [hardware]    multiplier, storage, weight_bits, activation_bits,
                  weight_frac_bits, activation_frac_bits   (pas-phase model)
    [sweep]       multipliers, storage, aggressive_voltage,
                  conservative_voltage, runs
    [modes]       K1 = 3 ...  (effective width per multiplier mode)
    [costs]       multiply.<mode>, storage.<label>, max_degradation,
                  min_accuracy

Multiplier tokens: ``exact``, a mode label, or ``k=<width>``.  Storage
tokens: ``reliable``, ``agg``, ``con``, a voltage label such as ``400mV``,
or ``p=<flip probability>``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import ColumnSchema, Dataset, SplitSpec, load_delimited, load_idx, normalize, split
from .evaluate import CostTable
from .fixedpoint import DEFAULT_MODE_K, NTV_FLIP_RATES, ApproxMulConfig, HardwareModel, NtvConfig
from .trainer import REGIMES, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# Aggressive / conservative storage voltages per task.
DATASET_VOLTAGES = {
    "breast_cancer": ("400mV", "660mV"),
    "image_seg": ("660mV", "850mV"),
    "ionosphere": ("660mV", "850mV"),
    "satimage": ("660mV", "850mV"),
    "mnist": ("660mV", "850mV"),
}
DEFAULT_VOLTAGES = ("660mV", "850mV")

# Relative energy per operation; illustrative placeholders, not measurements.
DEFAULT_MULTIPLY_COST = {"exact": 1.0, "K1": 0.30, "K2": 0.40, "K3": 0.52, "K4": 0.65}
DEFAULT_STORAGE_COST = {"reliable": 1.0, "850mV": 0.70, "660mV": 0.45, "400mV": 0.25}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"hw", "seed"}


@dataclass
class DataSpec:
    format: str = "delimited"
    path: str = ""
    schema: ColumnSchema = field(default_factory=ColumnSchema)
    train_fraction: float = 0.8
    normalize: str | None = "minmax"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ExperimentConfig:
    name: str
    regime: str
    seed: int
    data: DataSpec
    topology: list[int]
    hidden: str
    output: str
    train: TrainConfig
    hw: HardwareModel | None
    sweep: list[HardwareModel]
    runs: int
    mode_k: dict[str, int]
    costs: CostTable
    max_degradation: float
    min_accuracy: float
    base_dir: Path
    canonical: str  # normalized text the hash is computed from

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        parser = _parser()
        parser.read_string(self.canonical)
        if not parser.has_section("experiment"):
            parser.add_section("experiment")
        parser["experiment"]["seed"] = str(seed)
        return _build(parser, self.base_dir)

    def resolve(self, path: str) -> Path:
        p = Path(path).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    # -- data --------------------------------------------------------------

    def load_splits(self) -> tuple[Dataset, Dataset]:
        """Train and test sets; IDX data keeps its shipped train/test files."""
        d = self.data
        if d.format == "idx":
            train = load_idx(self.resolve(d.train_images), self.resolve(d.train_labels), self.name)
            test = load_idx(self.resolve(d.test_images), self.resolve(d.test_labels), self.name)
            if d.normalize:
                train = normalize(train, d.normalize)
                test = normalize(test, d.normalize, stats=train.stats)
        else:
            full = load_delimited(self.resolve(d.path), d.schema, self.name)
            train, test = split(full, SplitSpec(d.train_fraction, self.seed, d.normalize))
        self.check_topology(train)
        return train, test

    def check_topology(self, data: Dataset) -> None:
        first, last = self.topology[0], self.topology[-1]
        outputs_ok = last == data.class_count or (last == 1 and data.class_count == 2)
        if first != data.dims or not outputs_ok:
            raise ConfigError(
                f"model.topology {','.join(map(str, self.topology))} does not fit data "
                f"with {data.dims} features and {data.class_count} classes"
            )


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    p.optionxform = str  # keep key case (mode labels)
    return p


def _get(section, key, conv, default, where):
    if section is None or key not in section:
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except ValueError as err:
        raise ConfigError(f"{where}.{key}: cannot parse {raw!r} ({err})") from None


def _opt_float(raw: str) -> float | None:
    return None if raw.lower() in ("", "auto", "none") else float(raw)


def _opt_int(raw: str) -> int | None:
    return None if raw.lower() in ("", "auto", "none") else int(raw)


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _int_list(raw: str) -> list[int]:
    return [int(t) for t in raw.split(",") if t.strip()]


def _str_list(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


def parse_multiplier(token: str, mode_k: dict[str, int]) -> ApproxMulConfig | None:
    token = token.strip()
    if token == "exact":
        return None
    if token.startswith("k="):
        return ApproxMulConfig(int(token[2:]))
    if token in mode_k:
        return ApproxMulConfig.from_mode(token, mode_k)
    raise ValueError(f"unknown multiplier {token!r}")


def parse_storage(token: str, voltages: tuple[str, str]) -> NtvConfig | None:
    token = token.strip()
    if token == "reliable":
        return None
    if token == "agg":
        token = voltages[0]
    elif token == "con":
        token = voltages[1]
    if token.startswith("p="):
        return NtvConfig(float(token[2:]))
    if token in NTV_FLIP_RATES:
        return NtvConfig.from_voltage(token)
    raise ValueError(f"unknown storage {token!r}")


def _canonical(parser: configparser.ConfigParser) -> str:
    lines = []
    for name in sorted(parser.sections()):
        lines.append(f"[{name}]")
        for key in sorted(parser[name]):
            lines.append(f"{key} = {parser[name][key].strip()}")
    return "\n".join(lines) + "\n"


def _build(parser: configparser.ConfigParser, base_dir: Path) -> ExperimentConfig:
    known = {"experiment", "data", "model", "train", "hardware", "sweep", "modes", "costs"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    sec = {name: (parser[name] if parser.has_section(name) else None) for name in known}

    exp = sec["experiment"]
    name = _get(exp, "name", str, "experiment", "experiment")
    regime = _get(exp, "regime", str, "bp", "experiment")
    if regime not in REGIMES:
        raise ConfigError(f"experiment.regime: {regime!r} is not one of {', '.join(sorted(REGIMES))}")
    seed = _get(exp, "seed", int, 0, "experiment")

    d = sec["data"]
    fmt = _get(d, "format", str, "delimited", "data")
    if fmt not in ("delimited", "idx"):
        raise ConfigError(f"data.format: {fmt!r} is not delimited or idx")
    norm = _get(d, "normalize", str, "minmax" if fmt == "delimited" else "none", "data")
    if norm not in ("minmax", "zscore", "none"):
        raise ConfigError(f"data.normalize: {norm!r} is not minmax, zscore or none")
    schema = ColumnSchema(
        label_column=_get(d, "label_column", int, -1, "data"),
        delimiter=_get(d, "delimiter", lambda s: "\t" if s == "\\t" else s, ",", "data"),
        header_lines=_get(d, "header_lines", int, 0, "data"),
        ignore_columns=tuple(_get(d, "ignore_columns", _int_list, [], "data")),
    )
    data = DataSpec(
        format=fmt,
        path=_get(d, "path", str, "", "data"),
        schema=schema,
        train_fraction=_get(d, "train_fraction", float, 0.8, "data"),
        normalize=None if norm == "none" else norm,
        train_images=_get(d, "train_images", str, "", "data"),
        train_labels=_get(d, "train_labels", str, "", "data"),
        test_images=_get(d, "test_images", str, "", "data"),
        test_labels=_get(d, "test_labels", str, "", "data"),
    )
    if fmt == "delimited" and not data.path:
        raise ConfigError("data.path is required for delimited data")
    if fmt == "idx" and not all((data.train_images, data.train_labels, data.test_images, data.test_labels)):
        raise ConfigError("data.train_images, train_labels, test_images and test_labels are required for idx data")
    if not 0.0 < data.train_fraction < 1.0:
        raise ConfigError("data.train_fraction must be in (0, 1)")

    m = sec["model"]
    topology = _get(m, "topology", _int_list, None, "model")
    if not topology or len(topology) < 2 or min(topology) < 1:
        raise ConfigError("model.topology must list at least two positive layer widths")
    hidden = _get(m, "hidden", str, "relu", "model")
    output = _get(m, "output", str, "sigmoid", "model")

    mode_k = dict(DEFAULT_MODE_K)
    if sec["modes"] is not None:
        for key in sec["modes"]:
            mode_k[key] = _get(sec["modes"], key, int, None, "modes")

    voltages = DATASET_VOLTAGES.get(name, DEFAULT_VOLTAGES)
    s = sec["sweep"]
    voltages = (
        _get(s, "aggressive_voltage", str, voltages[0], "sweep"),
        _get(s, "conservative_voltage", str, voltages[1], "sweep"),
    )

    h = sec["hardware"]
    bits = dict(
        weight_bits=_get(h, "weight_bits", int, 16, "hardware"),
        activation_bits=_get(h, "activation_bits", int, 16, "hardware"),
        weight_frac_bits=_get(h, "weight_frac_bits", _opt_int, None, "hardware"),
        activation_frac_bits=_get(h, "activation_frac_bits", _opt_int, None, "hardware"),
    )
    try:
        hw = None
        if h is not None and ("multiplier" in h or "storage" in h):
            hw = HardwareModel(
                parse_multiplier(h.get("multiplier", "exact"), mode_k),
                parse_storage(h.get("storage", "reliable"), voltages),
                **bits,
            )
        mults = _get(s, "multipliers", _str_list, ["exact", *mode_k], "sweep")
        stores = _get(s, "storage", _str_list, ["reliable", "agg", "con"], "sweep")
        sweep = []
        for st in stores:
            for mu in mults:
                model = HardwareModel(parse_multiplier(mu, mode_k), parse_storage(st, voltages), **bits)
                if model not in sweep:
                    sweep.append(model)
    except ValueError as err:
        raise ConfigError(f"hardware/sweep: {err}") from None
    if not sweep:
        raise ConfigError("sweep must contain at least one hardware model")
    runs = _get(s, "runs", int, 50, "sweep")
    if runs < 1:
        raise ConfigError("sweep.runs must be >= 1")

    t = sec["train"]
    kwargs = {}
    if t is not None:
        for key in t:
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"train.{key}: unknown option")
        convs = {"delta_gamma": _opt_float, "eta_pas": _opt_float, "shuffle": _bool}
        ints = {"epochs_act", "epochs_pas", "batch_size", "converge_window", "monitor_samples"}
        for key in t:
            conv = convs.get(key, int if key in ints else float)
            kwargs[key] = _get(t, key, conv, None, "train")
    if regime in ("pas", "combined") and hw is None:
        raise ConfigError(f"hardware.multiplier or hardware.storage is required for regime {regime}")
    try:
        train = TrainConfig(seed=seed, hw=hw, **kwargs)
    except ValueError as err:
        raise ConfigError(f"train: {err}") from None

    c = sec["costs"]
    multiply = dict(DEFAULT_MULTIPLY_COST)
    storage = dict(DEFAULT_STORAGE_COST)
    max_deg, min_acc = 0.02, 0.0
    if c is not None:
        for key in c:
            if key.startswith("multiply."):
                multiply[key[len("multiply."):]] = _get(c, key, float, None, "costs")
            elif key.startswith("storage."):
                storage[key[len("storage."):]] = _get(c, key, float, None, "costs")
            elif key == "max_degradation":
                max_deg = _get(c, key, float, None, "costs")
            elif key == "min_accuracy":
                min_acc = _get(c, key, float, None, "costs")
            else:
                raise ConfigError(f"costs.{key}: unknown option")
    for label in mode_k:
        multiply.setdefault(label, multiply["exact"])
    try:
        costs = CostTable(multiply, storage)
    except ValueError as err:
        raise ConfigError(f"costs: {err}") from None

    return ExperimentConfig(
        name=name,
        regime=regime,
        seed=seed,
        data=data,
        topology=topology,
        hidden=hidden,
        output=output,
        train=train,
        hw=hw,
        sweep=sweep,
        runs=runs,
        mode_k=mode_k,
        costs=costs,
        max_degradation=max_deg,
        min_accuracy=min_acc,
        base_dir=base_dir,
        canonical=_canonical(parser),
    )


def parse_config(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"config syntax: {err}") from None
    return _build(parser, Path(base_dir))


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
