"""Flat ``key = value`` run configuration with ``#`` comments."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .evaluate import MetricSettings
from .grid import GridSpec
from .metrics import RegionSpec
from .pde import AblationConfig, FULL, PLUS_ADVECTION, PLUS_DIFFUSION, PdeParams, SOURCE_ONLY, STATIC
from .shadow import SelectionZone
from .sources import SourceParams


class ConfigError(ValueError):
    pass


ARMS = {a.name: a for a in (SOURCE_ONLY, PLUS_DIFFUSION, PLUS_ADVECTION, FULL, STATIC)}

# key -> (default, help); grouped for --help output
_SECTIONS: list[tuple[str, dict]] = [
    ("grid", {
        "nx": (150, "longitudinal cell count"),
        "ny": (70, "lateral cell count"),
        "dx": (1.0, "cell size along x (m)"),
        "dy": (1.0, "cell size along y (m)"),
        "origin_x": (0.0, "world x of cell (0, 0) centre (m)"),
        "origin_y": (0.0, "world y of cell (0, 0) centre (m)"),
        "frame_rate": (20.0, "recording frame rate (Hz)"),
    }),
    ("sources", {f.name: (f.default, "") for f in dataclasses.fields(SourceParams)}),
    ("topology", {"sigma_m": (5.0, "merge-density taper outside polygons (m)")}),
    ("pde", {f.name: (f.default, "") for f in dataclasses.fields(PdeParams)}),
    ("shadow", {
        "zone_length": (90.0, "forward extent of the occluder selection zone (m)"),
        "zone_half_width": (18.0, "lateral half-width of the selection zone (m)"),
        "t_pad": (2.0, "occlusion-window padding (s)"),
        "sigma_s": (1.5, "shadow smoothing std (m)"),
        "theta_s": (0.5, "shadow threshold for the occluded region"),
        "hide_occluded": (True, "drop fully occluded agents before building sources"),
    }),
    ("metrics", {
        "region_length": (30.0, "ego-forward region length (m)"),
        "region_width": (12.0, "ego-forward region width (m)"),
        "theta": (0.15, "risk threshold in normalised field units"),
        "t_r": (1.5, "reaction time normalising TAI (s)"),
        "horizon": (10.0, "TAI look-back horizon (s)"),
        "delta_t": (2.0, "RPR post-event window (s)"),
        "orl_cap": (5.0, "ORL cap (s)"),
        "ttc_event": (2.0, "hazard-event TTC trigger (s)"),
    }),
    ("policy", {
        "k_b": (4.0, "braking gain per unit look-ahead risk (m/s^2)"),
        "theta_brake": (0.15, "braking threshold"),
        "a_min": (-6.0, "deceleration floor (m/s^2)"),
        "lookahead_length": (30.0, "policy look-ahead length (m)"),
        "lookahead_width": (3.5, "policy look-ahead width (m)"),
    }),
    ("run", {
        "mode": ("full", "field mode: " + ", ".join(ARMS)),
        "arms": ("source_only,plus_diffusion,plus_advection,full", "ablation arms"),
        "modes": ("full,static", "field modes compared by the synthetic command"),
        "ego": ("", "ego id(s), comma separated; empty means every car-like agent"),
        "dump_binary": (False, "write field dumps in binary form"),
        "n_scenarios": (20, "synthetic corpus size"),
        "seed": (0, "synthetic corpus seed"),
        "duration": (12.0, "synthetic scenario duration (s)"),
    }),
    ("paths", {
        "tracks": ("", "tracks CSV"),
        "meta": ("", "tracks meta CSV"),
        "schema": ("normalized", "column schema: normalized, exid, round, ind, highd"),
        "lanes": ("", "lane polyline CSV"),
        "topology": ("", "merge polygon CSV"),
        "scenario": ("", "scripted scenario CSV (used when no tracks are given)"),
        "location_tag": ("", "free-form location label"),
        "out_dir": ("out", "output directory"),
    }),
]

DEFAULTS: dict = {k: v for _, sec in _SECTIONS for k, (v, _) in sec.items()}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


@dataclasses.dataclass
class RunConfig:
    values: dict = dataclasses.field(default_factory=lambda: dict(DEFAULTS))
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw) if isinstance(raw, str) else raw

    def path(self, key: str) -> Path | None:
        v = self.values[key]
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    # typed views
    def grid(self) -> GridSpec:
        v = self.values
        return GridSpec(v["nx"], v["ny"], v["dx"], v["dy"], (v["origin_x"], v["origin_y"]),
                        v["frame_rate"])

    def source_params(self) -> SourceParams:
        return SourceParams(**{f.name: self.values[f.name] for f in dataclasses.fields(SourceParams)})

    def pde_params(self) -> PdeParams:
        return PdeParams(**{f.name: self.values[f.name] for f in dataclasses.fields(PdeParams)})

    def zone(self) -> SelectionZone:
        return SelectionZone(self.values["zone_length"], self.values["zone_half_width"])

    def settings(self) -> MetricSettings:
        v = self.values
        return MetricSettings(RegionSpec(v["region_length"], v["region_width"]), v["theta"], v["t_r"],
                              v["horizon"], v["delta_t"], v["orl_cap"], v["ttc_event"])

    def arm(self) -> AblationConfig:
        return arm_by_name(self.values["mode"])

    def arms(self, key: str = "arms") -> list[AblationConfig]:
        return [arm_by_name(a.strip()) for a in self.values[key].split(",") if a.strip()]

    def egos(self) -> list[int] | None:
        raw = str(self.values["ego"]).strip()
        if not raw:
            return None
        try:
            return sorted(int(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"bad ego list {raw!r}") from None


def arm_by_name(name: str) -> AblationConfig:
    if name not in ARMS:
        raise ConfigError(f"unknown field mode {name!r}; choose from {', '.join(ARMS)}")
    return ARMS[name]


def parse_config(text: str, base_dir: Path = Path(".")) -> RunConfig:
    cfg = RunConfig(base_dir=base_dir)
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, raw)
        except ConfigError as e:
            raise ConfigError(f"line {n}: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, path.parent)


def format_config(cfg: RunConfig | None = None) -> str:
    values = (cfg or RunConfig()).values
    out = []
    for name, sec in _SECTIONS:
        out.append(f"# -- {name}")
        for key, (_, help_) in sec.items():
            v = values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            line = f"{key} = {v}"
            out.append(f"{line:<36}# {help_}" if help_ else line)
    return "\n".join(out) + "\n"


def defaults_help() -> str:
    lines = ["config keys (defaults):"]
    for name, sec in _SECTIONS:
        lines.append(f"  [{name}]")
        for key, (default, help_) in sec.items():
            lines.append(f"    {key} = {default!r}" + (f"  {help_}" if help_ else ""))
    return "\n".join(lines)
