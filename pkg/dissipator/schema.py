from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from services.engine import GROWTH_BOUNDS, METHODS
from services.errors import SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("simulate", "sweep", "spectrum", "rage", "nash", "quench", "flow")
OPERATOR_TYPES = ("free-jacobi", "wvn", "wvn-projected", "random-jacobi", "constant-flow", "advection")
FLOW_KINDS = ("shear", "cellular", "time-changed", "still")
INITIAL_TYPES = ("basis", "mode", "zero-mode", "nearest-eigenvector", "delta", "random")
SELECTORS = ("full", "band", "rough")

_MISSING = object()


# ---------------------------------------------------------------------------
# Примитивы чтения полей
# ---------------------------------------------------------------------------


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _section(data: Dict[str, Any], key: str, path: str, required: bool = False) -> Optional[Dict[str, Any]]:
    value = data.get(key)
    if value is None:
        if required:
            raise SchemaError(_join(path, key), "section is required")
        return None
    if not isinstance(value, dict):
        raise SchemaError(_join(path, key), "must be an object")
    return value


def _get(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING) -> Any:
    if key in data and data[key] is not None:
        return data[key]
    if default is _MISSING:
        raise SchemaError(_join(path, key), "field is required")
    return default


def _float(
    data: Dict[str, Any],
    key: str,
    path: str,
    default: Any = _MISSING,
    positive: bool = False,
    nonnegative: bool = False,
) -> Optional[float]:
    raw = _get(data, key, path, default)
    if raw is None:
        return None
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise SchemaError(_join(path, key), f"must be a number, got {raw!r}")
    value = float(raw)
    if positive and not value > 0:
        raise SchemaError(_join(path, key), f"must be positive, got {value}")
    if nonnegative and value < 0:
        raise SchemaError(_join(path, key), f"must be >= 0, got {value}")
    return value


def _int(data: Dict[str, Any], key: str, path: str, default: Any = _MISSING, minimum: Optional[int] = None) -> Optional[int]:
    raw = _get(data, key, path, default)
    if raw is None:
        return None
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise SchemaError(_join(path, key), f"must be an integer, got {raw!r}")
    if minimum is not None and raw < minimum:
        raise SchemaError(_join(path, key), f"must be >= {minimum}, got {raw}")
    return int(raw)


def _choice(data: Dict[str, Any], key: str, path: str, options: Sequence[str], default: Any = _MISSING) -> str:
    raw = _get(data, key, path, default)
    if raw not in options:
        raise SchemaError(_join(path, key), f"must be one of {list(options)}, got {raw!r}")
    return str(raw)


def _floats(
    data: Dict[str, Any], key: str, path: str, default: Any = _MISSING, length: Optional[int] = None
) -> Optional[Tuple[float, ...]]:
    raw = _get(data, key, path, default)
    if raw is None:
        return None
    if not isinstance(raw, (list, tuple)) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise SchemaError(_join(path, key), "must be a list of numbers")
    if length is not None and len(raw) != length:
        raise SchemaError(_join(path, key), f"must have exactly {length} entries")
    return tuple(float(v) for v in raw)


def _increasing(values: Tuple[float, ...], path: str, strict: bool = True) -> None:
    if not values:
        raise SchemaError(path, "must not be empty")
    for a, b in zip(values, values[1:]):
        if b < a or (strict and b == a):
            raise SchemaError(path, "must be strictly increasing")


# ---------------------------------------------------------------------------
# Разделы конфига
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowSpec:
    kind: str
    K: int
    grid: Optional[int] = None
    alpha: Optional[float] = None
    liouville_terms: int = 5
    m_fraction: float = 0.5
    density_grid: int = 128

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str) -> "FlowSpec":
        kind = _choice(data, "kind", path, FLOW_KINDS)
        m_fraction = _float(data, "m_fraction", path, 0.5, positive=True)
        if m_fraction >= 1:
            raise SchemaError(_join(path, "m_fraction"), "must be < 1")
        return cls(
            kind=kind,
            K=_int(data, "K", path, 8, minimum=1),
            grid=_int(data, "grid", path, None, minimum=8),
            alpha=_float(data, "alpha", path, None),
            liouville_terms=_int(data, "liouville_terms", path, 5, minimum=1),
            m_fraction=m_fraction,
            density_grid=_int(data, "density_grid", path, 128, minimum=16),
        )


@dataclass(frozen=True)
class OperatorSpec:
    type: str
    N: Optional[int] = None
    K: Optional[int] = None
    alpha: Optional[Tuple[float, float]] = None
    band: Tuple[float, float] = (-2.0, 2.0)
    flow: Optional[FlowSpec] = None
    seed: Optional[int] = None

    @property
    def on_torus(self) -> bool:
        return self.type in ("constant-flow", "advection")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str) -> "OperatorSpec":
        kind = _choice(data, "type", path, OPERATOR_TYPES)
        band = _floats(data, "band", path, (-2.0, 2.0), length=2)
        if band[0] >= band[1]:
            raise SchemaError(_join(path, "band"), "lower edge must be below upper edge")
        if kind in ("constant-flow", "advection"):
            K = _int(data, "K", path, minimum=1)
            N = None
        else:
            N = _int(data, "N", path, minimum=2)
            K = None
        alpha = _floats(data, "alpha", path, None, length=2) if kind == "constant-flow" else None
        if kind == "constant-flow" and alpha is None:
            raise SchemaError(_join(path, "alpha"), "constant flow needs a 2-vector alpha")
        flow_data = _section(data, "flow", path, required=kind == "advection")
        flow = FlowSpec.from_dict(flow_data, _join(path, "flow")) if flow_data is not None else None
        return cls(kind, N, K, alpha, band, flow, _int(data, "seed", path, None))


@dataclass(frozen=True)
class LadderSpec:
    power: float = 1.0

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], path: str) -> "LadderSpec":
        if data is None:
            return cls()
        return cls(power=_float(data, "power", path, 1.0, positive=True))


@dataclass(frozen=True)
class InitialSpec:
    type: str = "basis"
    j: int = 1
    k: Tuple[int, int] = (1, 0)
    center: Tuple[float, float] = (0.0, 0.0)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], path: str) -> "InitialSpec":
        if data is None:
            return cls()
        kind = _choice(data, "type", path, INITIAL_TYPES, "basis")
        k = _floats(data, "k", path, (1, 0), length=2)
        if any(v != int(v) for v in k):
            raise SchemaError(_join(path, "k"), "lattice label must be integer")
        return cls(
            type=kind,
            j=_int(data, "j", path, 1, minimum=1),
            k=(int(k[0]), int(k[1])),
            center=_floats(data, "center", path, (0.0, 0.0), length=2),
        )


@dataclass(frozen=True)
class EvolutionSpec:
    t_end: float = 1.0
    dt: float = 1e-3
    amplitude: Optional[float] = None
    epsilon: Optional[float] = None
    method: str = "eigsplit"
    sample_stride: int = 1
    growth_bound: str = "unity"
    adaptive: bool = False

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], path: str) -> "EvolutionSpec":
        data = data or {}
        amplitude = _float(data, "amplitude", path, None, nonnegative=True)
        epsilon = _float(data, "epsilon", path, None, nonnegative=True)
        if amplitude is not None and epsilon is not None:
            raise SchemaError(_join(path, "epsilon"), "give either amplitude or epsilon, not both")
        if amplitude is None and epsilon is None:
            amplitude = 0.0
        adaptive = _get(data, "adaptive", path, False)
        if not isinstance(adaptive, bool):
            raise SchemaError(_join(path, "adaptive"), "must be a boolean")
        return cls(
            t_end=_float(data, "t_end", path, 1.0, nonnegative=True),
            dt=_float(data, "dt", path, 1e-3, positive=True),
            amplitude=amplitude,
            epsilon=epsilon,
            method=_choice(data, "method", path, METHODS, "eigsplit"),
            sample_stride=_int(data, "sample_stride", path, 1, minimum=1),
            growth_bound=_choice(data, "growth_bound", path, GROWTH_BOUNDS, "unity"),
            adaptive=adaptive,
        )


@dataclass(frozen=True)
class DiagnosticsSpec:
    delta: float = 0.5
    t_max: Optional[float] = None
    amplitudes: Tuple[float, ...] = ()
    n_low: int = 8
    averaging_times: Tuple[float, ...] = (1.0, 100.0)
    selector: str = "full"
    kappa: float = 4.0
    n_bar: Optional[float] = None
    gap_epsilon: Optional[float] = None
    gap_tau: float = 1.0
    certificate_amplitudes: Tuple[float, ...] = ()
    nash_window: Tuple[float, float] = (1e-4, 1e-2)
    nash_samples: int = 13

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], path: str) -> "DiagnosticsSpec":
        data = data or {}
        delta = _float(data, "delta", path, 0.5, positive=True)
        if delta >= 1:
            raise SchemaError(_join(path, "delta"), f"must lie in (0, 1), got {delta}")
        amplitudes = _floats(data, "amplitudes", path, ())
        if amplitudes:
            _increasing(amplitudes, _join(path, "amplitudes"))
            if amplitudes[0] < 0:
                raise SchemaError(_join(path, "amplitudes"), "must be >= 0")
        times = _floats(data, "averaging_times", path, (1.0, 100.0))
        if any(t <= 0 for t in times):
            raise SchemaError(_join(path, "averaging_times"), "must be positive")
        window = _floats(data, "nash_window", path, (1e-4, 1e-2), length=2)
        if not 0 < window[0] < window[1]:
            raise SchemaError(_join(path, "nash_window"), "must satisfy 0 < t_a < t_b")
        return cls(
            delta=delta,
            t_max=_float(data, "t_max", path, None, positive=True),
            amplitudes=amplitudes,
            n_low=_int(data, "n_low", path, 8, minimum=1),
            averaging_times=times,
            selector=_choice(data, "selector", path, SELECTORS, "full"),
            kappa=_float(data, "kappa", path, 4.0, positive=True),
            n_bar=_float(data, "n_bar", path, None, positive=True),
            gap_epsilon=_float(data, "gap_epsilon", path, None, nonnegative=True),
            gap_tau=_float(data, "gap_tau", path, 1.0, positive=True),
            certificate_amplitudes=_floats(data, "certificate_amplitudes", path, ()),
            nash_window=window,
            nash_samples=_int(data, "nash_samples", path, 13, minimum=2),
        )


@dataclass(frozen=True)
class QuenchSpec:
    theta0: float = 0.5
    scale: float = 1.0
    amplitude: float = 0.0
    K: int = 8
    grid: Optional[int] = None
    t_end: float = 1.0
    dt: float = 1e-3
    method: Optional[str] = None
    bump_center: Tuple[float, float] = (0.5, 0.5)
    bump_width: float = 0.1
    bump_amplitude: float = 0.9
    background: float = 0.05
    bump_axis: Optional[str] = None
    comparison: bool = True
    search: bool = False
    A_max: float = 1000.0

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], path: str) -> "QuenchSpec":
        data = data or {}
        theta0 = _float(data, "theta0", path, 0.5, positive=True)
        if theta0 >= 1:
            raise SchemaError(_join(path, "theta0"), f"must lie in (0, 1), got {theta0}")
        axis = _get(data, "bump_axis", path, None)
        if axis not in (None, "y"):
            raise SchemaError(_join(path, "bump_axis"), "must be null or 'y'")
        background = _float(data, "background", path, 0.05, nonnegative=True)
        bump_amplitude = _float(data, "bump_amplitude", path, 0.9, nonnegative=True)
        if background + bump_amplitude > 1:
            raise SchemaError(_join(path, "bump_amplitude"), "background + bump_amplitude must be <= 1")
        flags = {}
        for key, default in (("comparison", True), ("search", False)):
            value = _get(data, key, path, default)
            if not isinstance(value, bool):
                raise SchemaError(_join(path, key), "must be a boolean")
            flags[key] = value
        method = _get(data, "method", path, None)
        if method is not None:
            method = _choice(data, "method", path, METHODS)
        return cls(
            theta0=theta0,
            scale=_float(data, "scale", path, 1.0, nonnegative=True),
            amplitude=_float(data, "amplitude", path, 0.0, nonnegative=True),
            K=_int(data, "K", path, 8, minimum=1),
            grid=_int(data, "grid", path, None, minimum=8),
            t_end=_float(data, "t_end", path, 1.0, positive=True),
            dt=_float(data, "dt", path, 1e-3, positive=True),
            method=method,
            bump_center=_floats(data, "bump_center", path, (0.5, 0.5), length=2),
            bump_width=_float(data, "bump_width", path, 0.1, positive=True),
            bump_amplitude=bump_amplitude,
            background=background,
            bump_axis=axis,
            comparison=flags["comparison"],
            search=flags["search"],
            A_max=_float(data, "A_max", path, 1000.0, nonnegative=True),
        )


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    name: str
    seed: int
    operator: Optional[OperatorSpec]
    ladder: LadderSpec
    initial: InitialSpec
    evolution: EvolutionSpec
    diagnostics: DiagnosticsSpec
    quench: Optional[QuenchSpec]
    flow: Optional[FlowSpec]
    raw: Dict[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], kind_override: Optional[str] = None) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise SchemaError("$", "experiment config must be a JSON object")
        version = _get(data, "schema_version", "")
        if version != SCHEMA_VERSION:
            raise SchemaError("schema_version", f"unsupported version {version!r}, expected {SCHEMA_VERSION}")
        kind = kind_override or _choice(data, "kind", "", KINDS)
        if kind not in KINDS:
            raise SchemaError("kind", f"must be one of {list(KINDS)}, got {kind!r}")
        if kind_override and data.get("kind") not in (None, kind_override):
            raise SchemaError("kind", f"config declares {data.get('kind')!r}, command is {kind_override!r}")

        seed = _int(data, "seed", "", 0, minimum=0)
        if seed >= 2**64:
            raise SchemaError("seed", "must fit in 64 bits")

        needs_operator = kind in ("simulate", "sweep", "spectrum", "rage", "nash")
        op_data = _section(data, "operator", "", required=needs_operator)
        operator = OperatorSpec.from_dict(op_data, "operator") if op_data is not None else None
        if kind == "nash" and operator is not None and not operator.on_torus:
            raise SchemaError("operator.type", "nash runs need a torus operator")

        quench_data = _section(data, "quench", "", required=kind == "quench")
        flow_data = _section(data, "flow", "", required=kind == "flow")
        diagnostics = DiagnosticsSpec.from_dict(_section(data, "diagnostics", ""), "diagnostics")
        if kind == "sweep" and not diagnostics.amplitudes:
            raise SchemaError("diagnostics.amplitudes", "sweep needs a nonempty amplitude grid")

        spec = cls(
            kind=kind,
            name=str(_get(data, "name", "", kind)),
            seed=seed,
            operator=operator,
            ladder=LadderSpec.from_dict(_section(data, "ladder", ""), "ladder"),
            initial=InitialSpec.from_dict(_section(data, "initial", ""), "initial"),
            evolution=EvolutionSpec.from_dict(_section(data, "evolution", ""), "evolution"),
            diagnostics=diagnostics,
            quench=QuenchSpec.from_dict(quench_data, "quench") if quench_data is not None else None,
            flow=FlowSpec.from_dict(flow_data, "flow") if flow_data is not None else None,
            raw=dict(data, kind=kind),
        )
        return spec


def load_spec(path: Path, kind_override: Optional[str] = None) -> ExperimentSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise SchemaError("$", f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON at line {e.lineno}: {e.msg}") from e
