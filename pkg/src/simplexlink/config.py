"""Scenario configuration for SimplexLink."""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .channel import ChannelError, FiberSpec, ImpairmentConfig
from .constellation import DPBPSK, FORMATS, SIMPLEX3D
from .metrics import DOMAINS
from .rxdsp import EqualizerConfig, ReceiverConfig, RxDspError
from .txchain import DEFAULT_WAVELENGTH_M

logger = logging.getLogger(__name__)

# Optical bandpass per symbol rate used in the lab setup
BPF_BANDWIDTH_16G = 35e9
BPF_BANDWIDTH_25G = 65e9


class ConfigError(Exception):
    """Raised for malformed or inconsistent scenario files."""

    def __init__(self, message: str, field_path: str | None = None, line: int | None = None):
        location = ""
        if field_path:
            location += f"{field_path}: "
        if line is not None:
            location = f"line {line}: " + location
        super().__init__(location + message)
        self.message = message
        self.field_path = field_path
        self.line = line


class ScenarioKind(str, Enum):
    """Experiment type."""

    BACK_TO_BACK = "back_to_back"
    LAUNCH_POWER_SWEEP = "launch_power_sweep"
    SPAN_LOSS_SWEEP = "span_loss_sweep"


def default_bpf_bandwidth(symbol_rate: float) -> float:
    """35 GHz filter up to 16 GBaud class rates, 65 GHz above."""
    return BPF_BANDWIDTH_16G if symbol_rate <= 20e9 else BPF_BANDWIDTH_25G


@dataclass
class LinkConfig:
    """Transmitter and link budget settings."""

    frame_order: int = 11
    frame_repeats: int = 4
    samples_per_symbol: int = 4
    dac_bandwidth_hz: float | None = 13e9
    center_wavelength_m: float = DEFAULT_WAVELENGTH_M
    reference_launch_dbm: float = 17.0
    reference_osnr_db: float = 13.9
    baseline_osnr_db: dict[str, float] = field(
        default_factory=lambda: {DPBPSK: 13.9, SIMPLEX3D: 12.9}
    )
    launch_power_dbm: dict[str, float] = field(
        default_factory=lambda: {SIMPLEX3D: 16.0, DPBPSK: 17.0}
    )

    def __post_init__(self) -> None:
        if not 2 <= self.frame_order <= 24:
            raise ValueError(f"frame_order must be in [2, 24], got {self.frame_order}")
        if self.frame_repeats < 1:
            raise ValueError(f"frame_repeats must be >= 1, got {self.frame_repeats}")
        if self.samples_per_symbol < 2:
            raise ValueError(f"samples_per_symbol must be >= 2, got {self.samples_per_symbol}")
        if self.dac_bandwidth_hz is not None and not self.dac_bandwidth_hz > 0:
            raise ValueError(f"dac_bandwidth_hz must be > 0 or null, got {self.dac_bandwidth_hz}")
        for name in ("baseline_osnr_db", "launch_power_dbm"):
            table = getattr(self, name)
            unknown = set(table) - set(FORMATS)
            if unknown:
                raise ValueError(f"{name} has unknown formats {sorted(unknown)}")
            setattr(self, name, {k: float(v) for k, v in table.items()})

    @property
    def frame_symbols(self) -> int:
        return 1 << self.frame_order


@dataclass
class OutputConfig:
    """Result output settings."""

    directory: str = "results"
    dump_constellations: bool = False
    regression_domain: str = "log10"
    target_ber: float = 1e-3

    def __post_init__(self) -> None:
        if self.regression_domain not in DOMAINS:
            raise ValueError(f"regression_domain must be one of {DOMAINS}")
        if not 0.0 < self.target_ber < 0.5:
            raise ValueError(f"target_ber must be in (0, 0.5), got {self.target_ber}")

    @property
    def path(self) -> Path:
        return Path(self.directory).expanduser()


@dataclass
class Scenario:
    """One experiment: what to sweep, over which link, with which receiver."""

    name: str
    kind: ScenarioKind
    sweep_values: list[float]
    formats: list[str] = field(default_factory=lambda: list(FORMATS))
    symbol_rate: float = 16e9
    frames_per_point: int = 8
    base_seed: int = 1
    link: LinkConfig = field(default_factory=LinkConfig)
    impairments: ImpairmentConfig = field(default_factory=ImpairmentConfig)
    fiber: FiberSpec | None = None
    dsp: ReceiverConfig = field(default_factory=ReceiverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self) -> None:
        try:
            self.kind = ScenarioKind(self.kind)
        except ValueError as e:
            raise ConfigError(f"must be one of {[k.value for k in ScenarioKind]}", "kind") from e
        self.symbol_rate = float(self.symbol_rate)
        if not self.name or "/" in self.name:
            raise ConfigError(f"invalid scenario name '{self.name}'", "name")
        values = [float(v) for v in self.sweep_values]
        if not values:
            raise ConfigError("must be nonempty", "sweep_values")
        steps = [b - a for a, b in zip(values, values[1:])]
        if steps and not (all(s > 0 for s in steps) or all(s < 0 for s in steps)):
            raise ConfigError("must be strictly monotone", "sweep_values")
        self.sweep_values = values
        if not self.formats or any(f not in FORMATS for f in self.formats):
            raise ConfigError(f"must be a nonempty subset of {list(FORMATS)}", "formats")
        if self.symbol_rate <= 0:
            raise ConfigError("must be > 0", "symbol_rate")
        if self.frames_per_point < 1:
            raise ConfigError("must be >= 1", "frames_per_point")
        if self.kind is ScenarioKind.BACK_TO_BACK and self.fiber is not None:
            raise ConfigError("back_to_back scenarios take no fiber", "fiber")
        if self.kind is ScenarioKind.LAUNCH_POWER_SWEEP and self.fiber is None:
            raise ConfigError("launch_power_sweep needs a fiber section", "fiber")
        if self.kind is ScenarioKind.SPAN_LOSS_SWEEP:
            for table in ("baseline_osnr_db", "launch_power_dbm"):
                missing = [f for f in self.formats if f not in getattr(self.link, table)]
                if missing:
                    raise ConfigError(f"missing entries for {missing}", f"link.{table}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        """Build a scenario from parsed YAML, raising ConfigError with the field path."""
        if not isinstance(data, dict):
            raise ConfigError("scenario file must contain a mapping")
        data = dict(data)
        top = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown(data, top, "")
        for required in ("name", "kind", "sweep_values"):
            if required not in data:
                raise ConfigError("is required", required)

        symbol_rate = data.get("symbol_rate", 16e9)
        impairments = dict(_section(data, "impairments"))
        impairments.setdefault("bpf_bandwidth_hz", default_bpf_bandwidth(float(symbol_rate)))

        dsp = dict(_section(data, "dsp"))
        equalizer = _build(EqualizerConfig, _section(dsp, "equalizer", "dsp"), "dsp.equalizer")
        dsp["equalizer"] = equalizer

        fiber = data.get("fiber")
        kwargs = {
            key: value
            for key, value in data.items()
            if key not in ("link", "impairments", "fiber", "dsp", "output")
        }
        kwargs["link"] = _build(LinkConfig, _section(data, "link"), "link")
        kwargs["impairments"] = _build(ImpairmentConfig, impairments, "impairments")
        kwargs["fiber"] = None if fiber is None else _build(FiberSpec, fiber, "fiber")
        kwargs["dsp"] = _build(ReceiverConfig, dsp, "dsp")
        kwargs["output"] = _build(OutputConfig, _section(data, "output"), "output")
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict[str, Any]:
        """Plain-data form that :meth:`from_dict` reads back unchanged."""
        return _plain(dataclasses.asdict(self))


def _section(data: dict[str, Any], key: str, parent: str = "") -> dict[str, Any]:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError("must be a mapping", f"{parent}.{key}" if parent else key)
    return value


def _reject_unknown(data: dict[str, Any], known: set[str], path: str) -> None:
    for key in data:
        if key not in known:
            raise ConfigError("unknown field", f"{path}.{key}" if path else str(key))


def _build(cls: type, data: dict[str, Any], path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError("must be a mapping", path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _reject_unknown(data, set(fields), path)
    data = dict(data)
    for name, value in data.items():
        # YAML 1.1 reads exponents without a dot (16e9) as strings
        if isinstance(value, str) and "float" in str(fields[name].type):
            try:
                data[name] = float(value)
            except ValueError as e:
                raise ConfigError(f"expected a number, got '{value}'", f"{path}.{name}") from e
    try:
        return cls(**data)
    except (TypeError, ValueError, ChannelError, RxDspError) as e:
        field_path = path
        message = str(e)
        for name in data:
            if name in message:
                field_path = f"{path}.{name}"
                break
        raise ConfigError(message, field_path) from e


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _key_lines(node: yaml.Node | None, prefix: str = "") -> dict[str, int]:
    """Map dotted key paths to their 1-based line in the source file."""
    lines: dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            lines[path] = key.start_mark.line + 1
            lines.update(_key_lines(value, path))
    return lines


def _line_for(field_path: str, key_lines: dict[str, int]) -> int | None:
    # nearest enclosing key when the field itself is absent
    path = field_path
    while path:
        if path in key_lines:
            return key_lines[path]
        path = path.rpartition(".")[0]
    return None


def load_scenario(path: Path) -> Scenario:
    """Load a scenario YAML file.

    Raises:
        ConfigError: If the file is missing, unparsable or invalid.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
        data = yaml.safe_load(text)
        key_lines = _key_lines(yaml.compose(text, Loader=yaml.SafeLoader))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML syntax error: {getattr(e, 'problem', e)}", line=line) from e

    try:
        scenario = Scenario.from_dict(data)
    except ConfigError as e:
        if e.line is not None or not e.field_path:
            raise
        raise ConfigError(e.message, e.field_path, _line_for(e.field_path, key_lines)) from e
    logger.info(f"Loaded scenario '{scenario.name}' ({scenario.kind.value}) from {path}")
    return scenario


def save_scenario(scenario: Scenario, path: Path) -> None:
    """Write a scenario as YAML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(scenario.to_dict(), f, default_flow_style=False, sort_keys=False)
