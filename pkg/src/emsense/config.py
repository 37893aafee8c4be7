"""Scenario files (YAML) and phantom grids."""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .materials import load_material_db, material_index
from .scene import (SPEED_OF_LIGHT, BSConfig, GridRegion, Scene, SubcarrierGrid, TargetMap, UEConfig,
                    facing_angle, random_ue_positions)

BUILTIN_SCENARIOS = ("desk", "full_scale", "tiny")
BUILTIN_PHANTOMS = ("thu", "seu", "thu64", "tiny")


def _data_text(name: str) -> str:
    return resources.files("emsense.data").joinpath(name).read_text()


def load_scenario(spec) -> dict:
    """Scenario dict from a built-in name, a YAML path, or an existing dict (deep-copied)."""
    if isinstance(spec, dict):
        return copy.deepcopy(spec)
    if str(spec) in BUILTIN_SCENARIOS:
        return yaml.safe_load(_data_text(f"{spec}.yaml"))
    return yaml.safe_load(Path(spec).read_text())


def parse_phantom(text: str, db) -> np.ndarray:
    """Label grid from a phantom text: ``# A=name ...`` legend lines plus one character per pixel."""
    legend = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok and len(tok.split("=")[0]) == 1:
                    sym, name = tok.split("=")
                    legend[sym] = material_index(db, name) + 1
            continue
        if line.strip():
            rows.append(line.strip())
    if len({len(r) for r in rows}) != 1:
        raise ValueError("phantom rows have different lengths")
    legend["."] = 0
    try:
        return np.array([[legend[ch] for ch in r] for r in rows], dtype=int)
    except KeyError as exc:
        raise ValueError(f"phantom symbol {exc} missing from the legend") from None


def load_phantom(spec, db) -> np.ndarray:
    text = _data_text(f"{spec}.txt") if str(spec) in BUILTIN_PHANTOMS else Path(spec).read_text()
    return parse_phantom(text, db)


def build_scene(cfg: dict, K: int | None = None) -> tuple[Scene, TargetMap]:
    """Scene and ground-truth target from a scenario dict.

    UE power ``total_power`` is split evenly over the subcarriers.  Array
    spacings default to half the center wavelength, and every array faces the
    region center.
    """
    r = cfg["region"]
    region = GridRegion(tuple(r.get("center", (0.0, 0.0))), float(r["half_extent"]), int(r["n_side"]))
    sc = cfg["subcarriers"]
    K = int(K if K is not None else sc["K"])
    subcarriers = SubcarrierGrid(float(sc["f_c"]), float(sc["delta_f"]), K)
    half_lambda = SPEED_OF_LIGHT / subcarriers.f_c / 2

    u = cfg["ues"]
    if u.get("positions"):
        ue_pos = np.asarray(u["positions"], dtype=float)
    else:
        rng = np.random.default_rng(int(u.get("placement_seed", 0)))
        ue_pos = random_ue_positions(rng, int(u["count"]), region, float(u["ring_radius"]),
                                     float(u.get("margin", 0.0)))
    ue_spacing = float(u.get("spacing") or half_lambda)
    power = float(u.get("total_power", 1.0)) / K
    pmin = float(u.get("min_region_power", 0.0)) / K
    ues = tuple(UEConfig(tuple(p), int(u["n_t"]), ue_spacing, power, pmin,
                         facing_angle(p, region.center)) for p in ue_pos)

    b = cfg["bss"]
    bs_spacing = float(b.get("spacing") or half_lambda)
    bss = tuple(BSConfig(tuple(p), int(b["n_r"]), bs_spacing, facing_angle(p, region.center))
                for p in np.asarray(b["positions"], dtype=float))

    scene = Scene(region, subcarriers, ues, bss, int(cfg["n_pilots"]), {"name": cfg.get("name", "")})
    db = load_material_db(cfg.get("materials"))
    labels = load_phantom(cfg.get("phantom", "thu"), db)
    if labels.shape != (region.n_side, region.n_side):
        raise ValueError(f"phantom is {labels.shape}, grid is {region.n_side}x{region.n_side}")
    return scene, TargetMap(labels, db)
