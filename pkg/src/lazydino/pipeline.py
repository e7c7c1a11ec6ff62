"""Command implementations: offline surrogate construction, online lazy-map
training, baselines, diagnostics and amortization.

Every command writes into a staging directory next to ``out`` and moves the
results into place only after all of its stages succeed, so a failed run
leaves no partial outputs behind.  All randomness is drawn from named
substreams of the single global seed (see :func:`lazydino.io.stream`).
"""
from __future__ import annotations

import contextlib
import csv
import logging
import shutil
import time
from pathlib import Path

import numpy as np
from scipy import linalg

from . import baselines as bl
from . import diagnostics as dg
from . import forward as fwd
from . import surrogate as sg
from . import transport as tr
from .io import ConfigError, ArchiveError, config_hash, read_archive, stream, write_archive
from .prior import Mesh, PriorError, anisotropy, build_prior
from .subspace import (DataWhitener, basis_from_decoder, embed_dataset, eigenvalue_stability,
                       estimate_gn_hessian, solve_gevp)

logger = logging.getLogger(__name__)

SURROGATE_LOSS_COLUMNS = ["epoch", "loss"]
SURROGATE_ERROR_COLUMNS = ["objective", "n_train", "E_g", "E_grad_g"]
TRACE_COLUMNS = ["iteration", "stage", "loss"]
AMORTIZE_COLUMNS = ["y_index", "E_rKL", "E_fKL", "ESS_N_percent", "N", "offline_samples",
                    "offline_samples_per_y", "online_pto_evals"]

NUMERICAL_ERRORS = (fwd.PdeError, bl.BaselineError, sg.TrainingDiverged, tr.TransportDiverged,
                    linalg.LinAlgError, FloatingPointError)


class StageError(RuntimeError):
    """A pipeline stage failed; ``numerical`` separates solver failures from bad inputs."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.numerical = isinstance(cause, NUMERICAL_ERRORS) or (
            isinstance(cause, RuntimeError) and not isinstance(cause, ArchiveError))


@contextlib.contextmanager
def stage(name: str):
    logger.info("stage %s", name)
    t0 = time.perf_counter()
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    logger.info("stage %s done in %.2f s", name, time.perf_counter() - t0)


@contextlib.contextmanager
def staging(out):
    """Yield a scratch directory whose contents replace entries of ``out`` on success."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / ".partial"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    for item in sorted(tmp.iterdir()):
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        item.rename(target)
    tmp.rmdir()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    """CSV with a fixed column order; floats use their shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row[c] for c in columns]
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- problem setup

def build_problem(cfg: dict):
    """Prior and forward-model configuration described by ``cfg``."""
    p, mcfg = cfg["prior"], cfg["model"]
    mesh = Mesh(p["nx"], p["ny"])
    gamma, delta = p["gamma"], p["delta"]
    if p["mass_scaling"]:
        # identity mass matrix: scale by the cell size so the field variance is O(1)
        gamma, delta = gamma * mesh.h, delta * mesh.h
    prior = build_prior(mesh, gamma, delta, anisotropy(p["a11"], p["a12"], p["a22"]))
    d_y = mcfg["d_y"]
    layout = mcfg["obs_layout"]
    if layout == "lattice":
        per_axis = int(round(np.sqrt(d_y)))
        obs = fwd.default_obs_points(mesh, per_axis) if per_axis ** 2 == d_y else np.arange(d_y)
    else:
        obs = mesh.nearest_node(np.asarray(layout, dtype=float))
    B = None
    if mcfg["mode"] == "linear_test":
        if mcfg["linear_operator"] == "gaussian":
            rng = stream(cfg["seed"], "linear-operator")
            B = rng.standard_normal((d_y, mesh.node_count)) / np.sqrt(mesh.node_count)
        else:
            B = np.zeros((d_y, mesh.node_count))
            B[np.arange(d_y), obs] = 1.0
    pde = fwd.PdeConfig(mesh, obs, mcfg["sigma2"], mcfg["mode"], B)
    return prior, pde


def _seed(cfg, section):
    s = cfg[section].get("seed")
    return cfg["seed"] if s is None else s


def _meta_common(cfg):
    return dict(seed=cfg["seed"], cfg_hash=config_hash(cfg))


def save_basis(path, basis, cfg, **meta):
    return write_archive(path, "basis", {"eigenvalues": basis.eigenvalues, "decoder": basis.decoder,
                                         "tail_sum": np.array([basis.tail_sum])},
                         **_meta_common(cfg), d_r=basis.d_r, **meta)


def load_basis(path, prior, tol: float = 1e-8):
    """Basis from an archive; the encoder is re-derived and ``E D = I`` re-checked."""
    a = read_archive(path, "basis")
    D = a["decoder"]
    if D.shape[0] != prior.dim:
        raise ArchiveError(f"basis has {D.shape[0]} nodes, prior has {prior.dim}")
    basis = basis_from_decoder(prior, D, a["eigenvalues"], float(a["tail_sum"][0]))
    err = np.abs(basis.encoder @ D - np.eye(basis.d_r)).max()
    if err > tol:
        raise ArchiveError(f"basis archive fails E D = I (max deviation {err:.2e})")
    return basis


def save_surrogate(path, net, cfg, **meta):
    return write_archive(path, "surrogate", {"sizes": np.array(net.sizes, dtype=float), "params": net.params},
                         **_meta_common(cfg), **meta)


def load_surrogate(path):
    a = read_archive(path, "surrogate")
    return sg.MlpSurrogate(a["sizes"].astype(int), a["params"]), a.meta


def save_transport(path, model, cfg, **meta):
    return write_archive(path, "transport", {"perms": model.perms, "params": model.params},
                         **_meta_common(cfg), dim=model.dim, layers=model.n_layers,
                         widths=",".join(map(str, model.hidden)), **meta)


def load_transport(path):
    a = read_archive(path, "transport")
    widths = tuple(int(w) for w in a.meta["meta.widths"].split(","))
    return tr.IafMap(int(a.meta["meta.dim"]), int(a.meta["meta.layers"]), widths,
                     a["perms"].astype(int), a["params"])


def load_observation(path, index: int = 0) -> np.ndarray:
    a = read_archive(path, "observation")
    Y = np.atleast_2d(a["y"])
    if not 0 <= index < len(Y):
        raise ConfigError(f"observation index {index} out of range (archive holds {len(Y)})")
    return Y[index]


def load_samples(path):
    return read_archive(path, "samples")


def _save_samples(path, cfg, ms, phi_T=None, map_estimate=None, **meta):
    arrays = {"samples": ms}
    if phi_T is not None:
        arrays["phi_T"] = phi_T
    if map_estimate is not None:
        arrays["map_estimate"] = map_estimate
    return write_archive(path, "samples", arrays, **_meta_common(cfg), **meta)


def _stages(spec):
    return tr.StageSchedule([tuple(s) for s in spec])


# --------------------------------------------------------------------------- commands

def cmd_prior_sample(cfg: dict, out, n: int = 1, observe: bool = False) -> Path:
    """Draw prior fields; with ``observe`` also write synthetic noisy observations of them."""
    if n < 1:
        raise ConfigError("number of prior samples must be positive")
    with stage("setup"):
        prior, pde = build_problem(cfg)
    with staging(out) as tmp:
        with stage("prior-sampling"):
            ms = prior.sample(stream(cfg["seed"], "prior-sampling"), n)
            write_archive(tmp / "prior_samples", "samples", {"samples": ms}, **_meta_common(cfg))
        if observe:
            with stage("observation"):
                rng = stream(cfg["seed"], "noise")
                Y = np.array([fwd.synthesize_observation(pde, m, rng) for m in ms])
                write_archive(tmp / "observation", "observation", {"y": Y, "m_true": ms}, **_meta_common(cfg))
    return Path(out)


def cmd_offline(cfg: dict, out) -> dict:
    """Sample generation, subspace estimation, embedding and surrogate training.

    Writes ``basis/``, ``dataset/``, ``testset/``, ``surrogate/``,
    ``surrogate_loss.csv`` and ``surrogate_errors.csv`` into ``out``.
    """
    seed = cfg["seed"]
    sub, scfg = cfg["subspace"], cfg["surrogate"]
    with stage("setup"):
        prior, pde = build_problem(cfg)
    with staging(out) as tmp:
        with stage("sample generation"):
            H, ms_b, G_b, H_half = estimate_gn_hessian(prior, pde, sub["n_basis_samples"],
                                                       stream(seed, "basis"), return_samples=True,
                                                       return_half=True)
            n_train = scfg["n_train"]
            offline_samples = sub["n_basis_samples"]
            if sub["reuse_basis_samples"]:
                ms, G = ms_b[:n_train], G_b[:n_train]
                extra = n_train - len(ms)
            else:
                ms, G = ms_b[:0], G_b[:0]
                extra = n_train
            if extra > 0:
                m2, G2, _ = fwd.generate_samples(pde, prior, stream(seed, "prior-sampling"), extra)
                ms, G = np.concatenate([ms, m2]), np.concatenate([G, G2])
                offline_samples += extra
            mt, Gt, _ = fwd.generate_samples(pde, prior, stream(seed, "test"), scfg["n_test"])
        with stage("eigensolve"):
            basis = solve_gevp(prior, H, sub["d_r"])
            stability = eigenvalue_stability(prior, H, H_half)
            logger.info("top eigenvalue changes by %.2e between half and full sample estimates", stability)
            save_basis(tmp / "basis", basis, cfg, top_eigenvalue_stability=f"{stability!r}")
        with stage("embedding"):
            J = np.array([fwd.latent_jacobian(pde, m, None, basis.decoder) for m in ms])
            Jt = np.array([fwd.latent_jacobian(pde, m, None, basis.decoder) for m in mt])
            wh = DataWhitener(pde.sigma, pde.d_y)
            train = embed_dataset(basis, wh, ms, G, J)
            test = embed_dataset(basis, wh, mt, Gt, Jt)
            for name, ds in (("dataset", train), ("testset", test)):
                write_archive(tmp / name, "dataset", {"inputs": ds.inputs, "outputs": ds.outputs,
                                                      "jacobians": ds.jacobians}, **_meta_common(cfg))
        with stage("surrogate training"):
            tc = sg.TrainConfig(objective=scfg["objective"], epochs=scfg["epochs"],
                                batch_size=scfg["batch_size"], schedule=scfg["schedule"],
                                seed=_seed(cfg, "surrogate"), hidden=tuple(scfg["arch"]))
            net, report = sg.train(train, tc, test)
            save_surrogate(tmp / "surrogate", net, cfg, objective=tc.objective, n_train=n_train,
                           offline_samples=offline_samples, sigma=repr(pde.sigma))
            write_csv(tmp / "surrogate_loss.csv", SURROGATE_LOSS_COLUMNS, enumerate(report.train_loss))
            write_csv(tmp / "surrogate_errors.csv", SURROGATE_ERROR_COLUMNS,
                      [[tc.objective, n_train, report.E_g, report.E_grad_g]])
    return dict(basis=basis, surrogate=net, report=report, offline_samples=offline_samples)


def _check_dims(surrogate, basis):
    if surrogate.d_in != basis.d_r:
        raise ConfigError(f"d_r mismatch: surrogate archive has d_r={surrogate.d_in}, "
                          f"basis archive has d_r={basis.d_r}")


def _emit_transport(tmp, cfg, model, trace, basis, prior, pde, y, n_samples, label):
    save_transport(tmp / "transport", model, cfg, driver=label)
    write_csv(tmp / "transport_trace.csv", TRACE_COLUMNS, trace.rows())
    if n_samples:
        rng = stream(cfg["seed"], "lift")
        ms, Z, X, ld = tr.push_samples(model, basis, prior, n_samples, rng, cfg["diagnostics"]["fill"],
                                       return_latent=True)
        phi_T = 0.5 * np.sum(Z * Z, axis=1) - 0.5 * np.sum(X * X, axis=1) + ld
        x_star, _, _ = tr.pushforward_mode(model, stream(cfg["seed"], "diagnostics"))
        _save_samples(tmp / "samples", cfg, ms, phi_T, basis.decode(x_star), method=label)


def cmd_online(cfg: dict, offline, y_path, out, index: int = 0, n_samples: int = 0):
    """Train a lazy map against the surrogate posterior for one observation."""
    offline = Path(offline)
    with stage("setup"):
        prior, pde = build_problem(cfg)
        net, _ = load_surrogate(offline / "surrogate")
        basis = load_basis(offline / "basis", prior)
        _check_dims(net, basis)
        y = load_observation(y_path, index)
        if len(y) != net.d_out:
            raise ConfigError(f"observation has d_y={len(y)}, surrogate outputs {net.d_out}")
    tcfg = cfg["transport"]
    with staging(out) as tmp:
        with stage("transport training"):
            seed = _seed(cfg, "transport")
            model = tr.IafMap.initialize(basis.d_r, tcfg["layers"], tcfg["widths"], stream(seed, "init", 1))
            objective = tr.surrogate_objective(net, y / pde.sigma)
            model, trace = tr.train_lazy_map(model, objective, _stages(tcfg["stages"]),
                                             stream(seed, "transport-batch"))
        with stage("sampling"):
            _emit_transport(tmp, cfg, model, trace, basis, prior, pde, y, n_samples, "surrogate")
    return model, trace


def _basis_for(cfg, prior, pde, offline):
    if offline is not None:
        return load_basis(Path(offline) / "basis", prior)
    H = estimate_gn_hessian(prior, pde, cfg["subspace"]["n_basis_samples"], stream(cfg["seed"], "basis"))
    return solve_gevp(prior, H, cfg["subspace"]["d_r"])


def cmd_lazymap(cfg: dict, y_path, out, offline=None, index: int = 0, n_samples: int = 0):
    """Lazy map trained on the true forward model (zero complement fill in the objective)."""
    with stage("setup"):
        prior, pde = build_problem(cfg)
        y = load_observation(y_path, index)
    tcfg = cfg["transport"]
    with staging(out) as tmp:
        with stage("subspace"):
            basis = _basis_for(cfg, prior, pde, offline)
        with stage("transport training"):
            seed = _seed(cfg, "transport")
            model = tr.IafMap.initialize(basis.d_r, tcfg["layers"], tcfg["widths"], stream(seed, "init", 1))
            objective = tr.model_objective(pde, basis, y)
            model, trace = tr.train_lazy_map(model, objective, _stages(cfg["baselines"]["lazymap"]["stages"]),
                                             stream(seed, "transport-batch"))
        with stage("sampling"):
            _emit_transport(tmp, cfg, model, trace, basis, prior, pde, y, n_samples, "model")
    return model, trace


def cmd_laplace(cfg: dict, y_path, out, index: int = 0, n_samples: int | None = None):
    """MAP point, low-rank Laplace approximation and samples with their density ratios."""
    with stage("setup"):
        prior, pde = build_problem(cfg)
        y = load_observation(y_path, index)
    lcfg = cfg["baselines"]["laplace"]
    n = lcfg["n_samples"] if n_samples is None else n_samples
    with staging(out) as tmp:
        with stage("map"):
            m_map = bl.find_map(pde, prior, y)
        with stage("laplace"):
            la = bl.build_laplace(pde, prior, y, lcfg["d_LA"], m_map)
            write_archive(tmp / "laplace", "laplace", {"map_point": la.map_point, "eigvals": la.eigvals,
                                                       "decoder": la.decoder}, **_meta_common(cfg), rank=la.rank)
        if n:
            with stage("sampling"):
                ms = la.sample(stream(cfg["seed"], "prior-sampling", 1), n)
                phi_T = -bl.laplace_log_ratio(la, prior, ms)
                _save_samples(tmp / "samples", cfg, ms, phi_T, la.map_point, method="laplace")
    return la


RHAT_COORDS = 5


def cmd_mcmc(cfg: dict, y_path, out, index: int = 0, m0=None, offline=None):
    """pCN reference chains; writes pooled samples and a convergence summary.

    With an ``offline`` directory the split-R-hat check runs on the leading
    latent coordinates of its basis, otherwise on every node.
    """
    with stage("setup"):
        prior, pde = build_problem(cfg)
        y = load_observation(y_path, index)
        basis = load_basis(Path(offline) / "basis", prior) if offline is not None else None
    p = cfg["baselines"]["pcn"]
    with staging(out) as tmp:
        with stage("mcmc"):
            chains = []
            for c in range(p["chains"]):
                rng = stream(cfg["seed"], "pcn", c)
                chains.append(bl.pcn_sample(pde, prior, y, p["n"], p["beta"], p["burn_in"], p["thin"], rng,
                                            m0=m0, adapt=p["adapt"]))
            pooled = np.concatenate([ch.samples for ch in chains])
            stacked = np.array([ch.samples for ch in chains])
            if basis is not None:
                stacked = basis.encode(stacked)[..., :RHAT_COORDS]
            rhat = dg.split_rhat(stacked) if len(chains) > 1 else np.full(stacked.shape[-1], np.nan)
            _save_samples(tmp / "samples", cfg, pooled, method="pcn")
            write_csv(tmp / "mcmc_summary.csv", ["chain", "acceptance_rate", "beta", "failed_proposals"],
                      [[c, ch.acceptance_rate, ch.beta, ch.failed_proposals] for c, ch in enumerate(chains)])
            write_csv(tmp / "mcmc_rhat.csv", ["coordinates", "max_split_rhat"],
                      [["latent" if basis is not None else "nodal", float(np.nanmax(rhat))]])
    return chains


def cmd_diagnose(cfg: dict, y_path, methods: dict, reference, out, offline=None, map_reference=None,
                 index: int = 0, bip: str = "bip", n_train="") -> list:
    """One report row per method archive against a reference sample archive.

    ``methods`` maps a method label to its ``samples`` archive.  Density
    diagnostics are computed for archives that carry ``phi_T`` from their
    first ``n_eval`` samples.  ``map_reference`` is a ``laplace`` archive whose
    MAP point anchors the MAP error.
    """
    dcfg = cfg["diagnostics"]
    with stage("setup"):
        prior, pde = build_problem(cfg)
        y = load_observation(y_path, index)
        ref = load_samples(reference)["samples"]
        basis = load_basis(Path(offline) / "basis", prior) if offline is not None else None
        m_map = read_archive(map_reference, "laplace")["map_point"] if map_reference is not None else None
    rows = []
    with staging(out) as tmp:
        for label, path in methods.items():
            with stage(f"diagnose {label}"):
                a = load_samples(path)
                ms = a["samples"]
                moments = dg.moment_errors(ms, ref, basis, dcfg["k_skew"])
                density = None
                if "phi_T" in a.arrays:
                    k = min(dcfg["n_eval"], len(ms))
                    phi = dg.potentials(pde, y, ms[:k])
                    e_map = float("nan")
                    if m_map is not None and "map_estimate" in a.arrays:
                        e_map = 100 * float(np.linalg.norm(a["map_estimate"] - m_map) / np.linalg.norm(m_map))
                    density = dg.density_report(phi, a["phi_T"][:k], e_map, dcfg["weight_exponent"])
                rows.append(dg.report_row(label, n_train, bip, moments, density))
        write_csv(tmp / "report.csv", dg.REPORT_COLUMNS, rows)
    return rows


def cmd_amortize(cfg: dict, offline, y_path, out, n_eval: int | None = None) -> list:
    """One surrogate-driven lazy map per observation row, with a shared offline cost.

    The offline sample count is charged once and divided evenly across the
    observations in the report.
    """
    offline = Path(offline)
    with stage("setup"):
        prior, pde = build_problem(cfg)
        net, meta = load_surrogate(offline / "surrogate")
        basis = load_basis(offline / "basis", prior)
        _check_dims(net, basis)
        Y = np.atleast_2d(read_archive(y_path, "observation")["y"])
    tcfg, dcfg = cfg["transport"], cfg["diagnostics"]
    n_eval = dcfg["n_eval"] if n_eval is None else n_eval
    offline_samples = int(meta.get("meta.offline_samples", 0))
    rows = []
    with staging(out) as tmp:
        for k, y in enumerate(Y):
            with stage(f"transport y{k}"):
                seed = _seed(cfg, "transport")
                model = tr.IafMap.initialize(basis.d_r, tcfg["layers"], tcfg["widths"], stream(seed, "init", 1))
                model, trace = tr.train_lazy_map(model, tr.surrogate_objective(net, y / pde.sigma),
                                                 _stages(tcfg["stages"]), stream(seed, "transport-batch", k))
                save_transport(tmp / f"transport_{k}", model, cfg, driver="surrogate", y_index=k)
                write_csv(tmp / f"transport_trace_{k}.csv", TRACE_COLUMNS, trace.rows())
            with stage(f"diagnose y{k}"):
                rep, _ = dg.transport_density_report(model, basis, prior, pde, y, n_eval,
                                                     stream(cfg["seed"], "diagnostics", k),
                                                     fill=dcfg["fill"], exponent=dcfg["weight_exponent"])
                rows.append(dict(y_index=k, E_rKL=rep.E_rKL, E_fKL=rep.E_fKL, ESS_N_percent=rep.ESS_N_percent,
                                 N=rep.N, offline_samples=offline_samples,
                                 offline_samples_per_y=offline_samples / len(Y), online_pto_evals=n_eval))
        write_csv(tmp / "amortized_report.csv", AMORTIZE_COLUMNS, rows)
    return rows
