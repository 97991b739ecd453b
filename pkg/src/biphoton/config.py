"""JSON configuration: schema validation, defaults and physical checks."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError, DomainError
from .framesim import CalibrationMap, SimulationConfig
from .params import (
    BBO_EXTRAORDINARY,
    BBO_ORDINARY,
    DEFAULT_PUMP_SPECTRAL_WIDTH,
    CrystalPumpParams,
    GridSpec,
    SellmeierCoefficients,
)


def load_schema() -> dict:
    return json.loads(resources.files("biphoton").joinpath("data/config.schema.json").read_text())


def _defaults(schema: dict, root: dict) -> dict:
    out = {}
    for key, sub in schema.get("properties", {}).items():
        if "$ref" in sub:
            continue
        if sub.get("type") == "object":
            out[key] = _defaults(sub, root)
        elif "default" in sub:
            out[key] = sub["default"]
    return out


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    return ".".join(parts)


def parse_override(item: str) -> tuple[list[str], object]:
    """``"pump.waist_um=80"`` -> (["pump", "waist_um"], 80)."""
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ConfigError(item, "empty override key")
    return keys, value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        keys, value = parse_override(item)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(keys), "cannot override inside a non-object value")
        node[keys[-1]] = value
    return doc


@dataclass
class Config:
    params: CrystalPumpParams
    grid: GridSpec
    simulation: SimulationConfig
    calibration: CalibrationMap
    analysis: dict
    document: dict = field(default_factory=dict)


def _sellmeier(d, default):
    if d is None:
        return default
    band = tuple(d.get("band_nm", default.band_nm))
    if not band[0] < band[1]:
        raise ConfigError("band_nm", "band must be strictly ordered")
    return SellmeierCoefficients(d["a"], d["b"], d["c"], d["d"], band)


def build_config(doc: dict) -> Config:
    """Validate ``doc`` and turn it into typed objects; raises :class:`ConfigError`."""
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a JSON object")
    schema = load_schema()
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(_path(e), e.message)
    full = _merge(_defaults(schema, schema), doc)

    c, p = full["crystal"], full["pump"]
    try:
        so = _sellmeier(c.get("sellmeier_o"), BBO_ORDINARY)
        se = _sellmeier(c.get("sellmeier_e"), BBO_EXTRAORDINARY)
    except ConfigError as exc:
        raise ConfigError("crystal." + exc.path, str(exc).split(": ", 1)[1]) from None
    width = p["spectral_width"]
    try:
        params = CrystalPumpParams(
            crystal_length_mm=c["length_mm"],
            axis_angle_rad=math.radians(c["axis_angle_deg"]),
            pump_wavelength_nm=p["wavelength_nm"],
            pump_waist_um=p["waist_um"],
            pump_spectral_width=DEFAULT_PUMP_SPECTRAL_WIDTH if width is None else width,
            sellmeier_o=so,
            sellmeier_e=se,
        )
    except (ValueError, DomainError) as exc:
        raise ConfigError("crystal/pump", str(exc)) from None

    g = full["grid"]
    sig, idl = g.get("signal_center"), g.get("idler_center")
    try:
        if sig is None or idl is None:
            from .spdc import ring_wavevector

            k_ring = ring_wavevector(params)
            lam = params.degenerate_wavelength_nm
            sig = sig if sig is not None else (k_ring, lam)
            idl = idl if idl is not None else (-k_ring, lam)
        grid = GridSpec(g["n_k"], g["n_lambda"], g["k_step"], g["lambda_step"], tuple(sig), tuple(idl))
    except (ValueError, DomainError) as exc:
        raise ConfigError("grid", str(exc)) from None

    s = full["simulation"]
    try:
        if s["pair_prob"] is None:
            if s["efficiency"] <= 0:
                raise ValueError("pair_prob must be given explicitly when efficiency is 0")
            chi = s["mean_photons"] / (2.0 * s["temporal_modes"] * s["efficiency"])
            if chi > 1:
                raise ValueError(f"mean_photons implies pair_prob {chi:.4g} > 1")
        else:
            chi = s["pair_prob"]
        sim = SimulationConfig(
            temporal_modes=s["temporal_modes"],
            pair_prob=chi,
            efficiency=s["efficiency"],
            dark_count_rate=s["dark_count_rate"],
            seed=s["seed"],
            n_frames=s["n_frames"],
            grid=grid,
        )
    except ValueError as exc:
        raise ConfigError("simulation", str(exc)) from None

    cal_doc = full["calibration"]
    cal = CalibrationMap(
        grid=grid,
        origins=CalibrationMap.default_origins(grid, cal_doc["k_per_px"], cal_doc["axis_column"], cal_doc["first_row"]),
        k_per_px=cal_doc["k_per_px"],
        lambda_per_px=cal_doc["lambda_per_px"],
        grating_lines_per_mm=cal_doc["grating_lines_per_mm"],
        pump_wavelength_nm=params.pump_wavelength_nm,
    )

    analysis = dict(full["analysis"])
    if analysis["subregions"] > min(grid.n_k, grid.n_lambda):
        raise ConfigError("analysis.subregions", "more sub-regions than bins along an axis")
    return Config(params, grid, sim, cal, analysis, full)


def load_config(path=None, overrides=None) -> Config:
    """Read a JSON file (or use ``{}`` when ``path`` is None) and validate it."""
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("", f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON in {path}: {exc}") from None
    return build_config(apply_overrides(doc, overrides))
