"""Run configuration, seeded random substreams and the array archive format.

An archive is a directory holding ``manifest.txt`` and one raw little-endian
float64 file per named array.  The manifest lists, in creation order, every
array with its shape and SHA-256 digest; both are checked on load.
"""
from __future__ import annotations

import copy
import hashlib
import os
import shutil
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


class ArchiveError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "prior": {"gamma": 0.03, "delta": 3.33, "a11": 1.0, "a12": 0.0, "a22": 1.0,
              "nx": 16, "ny": 16, "mass_scaling": True},
    "model": {"mode": "nonlinear", "d_y": 25, "obs_layout": "lattice", "sigma2": 1.94e-3,
              "linear_operator": "gaussian"},
    # reuse_basis_samples: the Hessian-estimation draws double as training data
    "subspace": {"d_r": 16, "n_basis_samples": 256, "reuse_basis_samples": True},
    "surrogate": {"objective": "H1", "n_train": 256, "n_test": 512, "arch": [64, 64, 64],
                  "epochs": 500, "batch_size": 32, "schedule": [[375, 1.0e-3], [125, 3.0e-4]],
                  "seed": None},
    "transport": {"layers": 8, "widths": [64, 64],
                  "stages": [[2000, 128, 5.0e-3], [1000, 512, 5.0e-3], [500, 2048, 5.0e-4]],
                  "seed": None},
    "baselines": {
        "pcn": {"n": 20000, "beta": 0.2, "burn_in": 5000, "thin": 5, "adapt": True, "chains": 2},
        "laplace": {"d_LA": None, "n_samples": 20000},
        "lazymap": {"stages": [[200, 64, 5.0e-3]]},
    },
    "diagnostics": {"n_eval": 50000, "k_skew": 10, "weight_exponent": 1.0, "fill": "prior_complement"},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _positive(cfg, *keys, allow_zero=False):
    for key in keys:
        section, name = key.split(".")
        v = cfg[section][name]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0 or (v == 0 and not allow_zero):
            raise ConfigError(f"{key} must be a positive number, got {v!r}")


def validate(cfg: dict) -> dict:
    _positive(cfg, "prior.delta", "model.sigma2", "model.d_y", "subspace.d_r",
              "subspace.n_basis_samples", "surrogate.n_train", "surrogate.n_test",
              "surrogate.batch_size", "transport.layers", "diagnostics.n_eval")
    _positive(cfg, "prior.gamma", "surrogate.epochs", allow_zero=True)
    p = cfg["prior"]
    for k in ("nx", "ny"):
        if not isinstance(p[k], int) or not 2 <= p[k] <= 64:
            raise ConfigError(f"prior.{k} must be an integer in [2, 64]")
    A = np.array([[p["a11"], p["a12"]], [p["a12"], p["a22"]]], dtype=float)
    if np.linalg.eigvalsh(A).min() <= 0:
        raise ConfigError("prior anisotropy (a11, a12, a22) must be positive definite")
    if cfg["model"]["mode"] not in ("nonlinear", "linear_test"):
        raise ConfigError("model.mode must be 'nonlinear' or 'linear_test'")
    if cfg["model"]["linear_operator"] not in ("gaussian", "selector"):
        raise ConfigError("model.linear_operator must be 'gaussian' or 'selector'")
    if cfg["diagnostics"]["fill"] not in ("prior_complement", "zero"):
        raise ConfigError("diagnostics.fill must be 'prior_complement' or 'zero'")
    for key in ("surrogate.arch", "transport.widths"):
        section, name = key.split(".")
        widths = cfg[section][name]
        if not isinstance(widths, list) or not widths or any(not isinstance(w, int) or w < 1 for w in widths):
            raise ConfigError(f"{key} must be a non-empty list of positive integers")
    if cfg["surrogate"]["objective"] not in ("L2", "H1"):
        raise ConfigError("surrogate.objective must be 'L2' or 'H1'")
    if cfg["subspace"]["d_r"] > (p["nx"] + 1) * (p["ny"] + 1):
        raise ConfigError("subspace.d_r exceeds the number of grid nodes")
    layout = cfg["model"]["obs_layout"]
    if layout != "lattice":
        pts = np.asarray(layout, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) != cfg["model"]["d_y"]:
            raise ConfigError("model.obs_layout must be 'lattice' or a list of d_y points [x, y]")
    elif cfg["model"]["mode"] == "nonlinear" and round(np.sqrt(cfg["model"]["d_y"])) ** 2 != cfg["model"]["d_y"]:
        raise ConfigError("the lattice observation layout needs a square d_y")
    pcn = cfg["baselines"]["pcn"]
    if not 0 < pcn["beta"] < 1:
        raise ConfigError("baselines.pcn.beta must lie in (0, 1)")
    for stages in (cfg["transport"]["stages"], cfg["baselines"]["lazymap"]["stages"]):
        for stage in stages:
            if len(stage) != 3 or min(stage) <= 0:
                raise ConfigError("transport stages are [iterations, batch, rate] with positive entries")
    for span in cfg["surrogate"]["schedule"]:
        if len(span) != 2 or span[0] < 0 or span[1] <= 0:
            raise ConfigError("surrogate.schedule entries are [epochs, rate]")
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Read a YAML config, merge over the defaults and validate; unknown keys are rejected."""
    user = {}
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULTS, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    text = yaml.safe_dump(cfg, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


STREAMS = ("prior-sampling", "noise", "init", "minibatch", "transport-batch", "basis", "test",
           "pcn", "diagnostics", "linear-operator", "lift")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for the named substream of ``seed``."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *extra]))


@dataclass
class Archive:
    kind: str
    arrays: dict
    meta: dict

    def __getitem__(self, name):
        return self.arrays[name]


def write_archive(path, kind: str, arrays: dict, seed: int = 0, cfg_hash: str = "", **meta) -> Path:
    """Write arrays (in insertion order) and their manifest into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"kind={kind}", "dtype=f64le", f"seed={int(seed)}", f"config_hash={cfg_hash}"]
    lines += [f"meta.{k}={v}" for k, v in meta.items()]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        payload = a.tobytes()
        (path / f"{name}.f64").write_bytes(payload)
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"array={name} shape={shape} sha256={hashlib.sha256(payload).hexdigest()}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_archive(path, kind: str | None = None) -> Archive:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise ArchiveError(f"{path} has no manifest")
    meta, arrays = {}, {}
    for line in manifest.read_text().splitlines():
        if line.startswith("array="):
            fields = dict(part.split("=", 1) for part in line.split())
            name = fields["array"]
            shape = tuple(int(s) for s in fields["shape"].split(",") if s)
            payload = (path / f"{name}.f64").read_bytes()
            if len(payload) != 8 * int(np.prod(shape, dtype=int)):
                raise ArchiveError(f"{name}: payload length does not match shape {shape}")
            if hashlib.sha256(payload).hexdigest() != fields["sha256"]:
                raise ArchiveError(f"{name}: checksum mismatch")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        elif line:
            key, value = line.split("=", 1)
            meta[key] = value
    if meta.get("dtype") != "f64le":
        raise ArchiveError("unsupported dtype")
    if kind is not None and meta.get("kind") != kind:
        raise ArchiveError(f"expected a {kind!r} archive, found {meta.get('kind')!r}")
    return Archive(meta["kind"], arrays, meta)


def replace_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)
