"""Stage-to-disk pipeline: synth, preprocess, learn and evaluate.

Every stage reads and writes plain text so runs can be diffed and resumed.
"""

import configparser
import dataclasses
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import recognition as rec
from .data import (ManifestEntry, ScanGrid, SynthParams, grid_to_cloud, load_manifest,
                   load_scan, save_scan, synth_face, write_manifest, _atomic_write)
from .dictionary import AtomIndex, DictionarySpec
from .errors import ConfigurationError, FaceError, ScanParseError
from .extraction import ExtractionConfig, ExtractionReport, extract_face
from .registration import (IcpConfig, RegistrationConfig, apply_crop, register_all,
                           resample_depth)
from .sparse import SparseSupport, encode_many, pca_encode, pca_fit, ssmp_select
from .spherical import (SphereGrid, SphericalSignal, cloud_to_signal, conform_to,
                        projection_center)

log = logging.getLogger(__name__)

METHODS = ("euc", "mse", "pca", "pca+lda", "ssmp", "ssmp+lda")


@dataclass(frozen=True)
class SphereConfig:
    n_theta: int = 64
    n_phi: int = 64
    k: int = 4
    cutoff_steps: float = 3.0

    @property
    def grid(self):
        return SphereGrid(self.n_theta, self.n_phi)


@dataclass(frozen=True)
class DictionaryConfig:
    preset: str = "desk"
    n_pos: int = 0          # 0 keeps the preset value
    n_rot: int = 0
    scale_min: float = 0.0
    scale_max: float = 0.0
    scales_per_octave: int = 0

    def spec(self, grid):
        base = DictionarySpec.preset(self.preset, grid)
        over = {f: getattr(self, f) for f in
                ("n_pos", "n_rot", "scale_min", "scale_max", "scales_per_octave")
                if getattr(self, f)}
        return dataclasses.replace(base, **over) if over else base


@dataclass(frozen=True)
class SsmpConfig:
    n_atoms: int = 50
    criterion: str = "l2"
    encode_mode: str = "mp"
    one_per_subject: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    extraction: ExtractionConfig = ExtractionConfig()
    icp: IcpConfig = IcpConfig()
    registration: RegistrationConfig = RegistrationConfig()
    sphere: SphereConfig = SphereConfig()
    dictionary: DictionaryConfig = DictionaryConfig()
    ssmp: SsmpConfig = SsmpConfig()
    pca_dim: int = 100
    methods: tuple = ("pca", "ssmp", "ssmp+lda")
    eval: rec.EvalConfig = rec.EvalConfig()
    synth: SynthParams = SynthParams()
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {METHODS}")
        if any(m.startswith("ssmp") for m in self.methods) and self.ssmp.n_atoms < 1:
            raise ConfigurationError("ssmp methods need n_atoms >= 1")
        if self.pca_dim < 1 and any(m.startswith("pca") for m in self.methods):
            raise ConfigurationError("pca methods need pca_dim >= 1")

    @property
    def registration_cfg(self):
        return dataclasses.replace(self.registration, icp=self.icp)

    def dictionary_spec(self):
        return self.dictionary.spec(self.sphere.grid)


# --------------------------------------------------------------------------
# config files

def _coerce(text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(t) for t in items)
        return tuple(items)
    return text


def _apply_section(obj, section, name):
    known = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in section.items():
        if key not in known:
            raise ConfigurationError(f"[{name}] unknown key {key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            raise ConfigurationError(f"[{name}] {key!r} is a section, not a value")
        try:
            updates[key] = _coerce(value, current)
        except ValueError as exc:
            raise ConfigurationError(f"[{name}] {key}: {exc}") from None
    return dataclasses.replace(obj, **updates) if updates else obj


def load_config(path=None, base=None):
    """Read an INI-style config; ``[pipeline]`` holds top-level keys."""
    cfg = base or PipelineConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    updates = {}
    for name in parser.sections():
        section = dict(parser[name])
        if name == "pipeline":
            cfg_top = _apply_section(cfg, section, name)
            updates.update({k: getattr(cfg_top, k) for k in section})
            continue
        if not hasattr(cfg, name) or not dataclasses.is_dataclass(getattr(cfg, name)):
            raise ConfigurationError(f"unknown config section [{name}]")
        updates[name] = _apply_section(updates.get(name, getattr(cfg, name)), section, name)
    return dataclasses.replace(cfg, **updates)


# --------------------------------------------------------------------------
# text persistence

def _fmt(v):
    return repr(float(v))


def save_matrix(mat, path):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    lines = [f"{mat.shape[0]} {mat.shape[1]}"] + [" ".join(_fmt(v) for v in row) for row in mat]
    _atomic_write(path, "\n".join(lines) + "\n")


def load_matrix(path):
    lines = Path(path).read_text().split("\n")
    rows, cols = (int(t) for t in lines[0].split())
    data = np.array([[float(t) for t in ln.split()] for ln in lines[1:1 + rows]]).reshape(rows, cols)
    return data


def save_signal(signal, path):
    g = signal.grid
    lines = [f"{g.n_theta} {g.n_phi}"]
    lines += [" ".join(_fmt(v) for v in row) for row in signal.values]
    lines.append("")
    lines += [" ".join("1" if v else "0" for v in row) for row in signal.coverage]
    _atomic_write(path, "\n".join(lines) + "\n")


def load_signal(path):
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        nt, nphi = int(lines[0][0]), int(lines[0][1])
        vals = np.array([[float(t) for t in ln] for ln in lines[1:1 + nt]])
        cov = np.array([[t == "1" for t in ln] for ln in lines[1 + nt:1 + 2 * nt]])
        return SphericalSignal(SphereGrid(nt, nphi), vals.reshape(nt, nphi), cov.reshape(nt, nphi))
    except (IndexError, ValueError) as exc:
        raise ScanParseError(f"malformed spherical signal: {exc}", path=path) from None


def save_support(support, path):
    lines = [" ".join(_fmt(v) for v in atom) for atom in support.atoms]
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def load_support(path, grid):
    atoms = [AtomIndex(*(float(t) for t in ln.split()))
             for ln in Path(path).read_text().splitlines() if ln.strip()]
    return SparseSupport(tuple(atoms), grid)


# --------------------------------------------------------------------------
# synth

def cmd_synth(n_subjects, scans_per_subject, out_dir, params=SynthParams(), seed=0):
    """Write a synthetic dataset and its manifest; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for s in range(n_subjects):
        subject_seed = seed * 100_003 + s
        for j in range(scans_per_subject):
            scan = synth_face(subject_seed, j, params)
            rel = f"scans/subj{s:03d}_{j:02d}.grid"
            save_scan(scan, out / rel)
            entries.append(ManifestEntry(rel, f"subj{s:03d}", f"subj{s:03d}_{j:02d}"))
    write_manifest(entries, out / "manifest.csv")
    return out / "manifest.csv"


# --------------------------------------------------------------------------
# preprocess

def _extract_one(args):
    path, entry, ext_cfg = args
    try:
        scan = load_scan(path, "grid-text", entry.subject_id, entry.scan_id)
        face, report = extract_face(scan, ext_cfg)
        return grid_to_cloud(face), report, None
    except (OSError, FaceError, ValueError) as exc:
        return None, None, f"{type(exc).__name__}: {exc}"


def _signal_one(args):
    points, grid, center, k, cutoff = args
    return cloud_to_signal(points, grid, center, k, cutoff)


def _pmap(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


@dataclass
class PreprocessResult:
    n_ok: int
    errors: dict = field(default_factory=dict)  # scan_id -> message

    @property
    def exit_code(self):
        return 0 if not self.errors else 1


def cmd_preprocess(manifest, out_dir, cfg=PipelineConfig(), extraction_report=None):
    """Extract, register and project every scan of ``manifest`` into ``out_dir``."""
    ds = load_manifest(manifest)
    out = Path(out_dir)
    jobs = [(ds.resolve(e), e, cfg.extraction) for e in ds.entries]
    results = _pmap(_extract_one, jobs, cfg.jobs)
    errors, clouds, reports = {}, [], []
    for e, (cloud, report, err) in zip(ds.entries, results):
        if err:
            errors[e.scan_id] = err
            log.warning("scan %s skipped: %s", e.scan_id, err)
        else:
            clouds.append(cloud)
            reports.append(report)
    if extraction_report and reports:
        rows = [reports[0].csv_header] + [r.csv_row() for r in reports]
        _atomic_write(extraction_report, "\n".join(rows) + "\n")
    if len(clouds) < 2:
        errors["<dataset>"] = "fewer than two usable scans; nothing to register"
        _write_log(out, clouds, errors, [])
        return PreprocessResult(0, errors)

    reg = register_all(clouds, cfg.registration_cfg)
    afm = reg.afm
    save_scan(afm.grid, out / "afm.grid")
    center = projection_center(afm.cloud().points)
    grid = cfg.sphere.grid
    sig_jobs = [(f.points, grid, center, cfg.sphere.k, cfg.sphere.cutoff_steps) for f in reg.faces]
    signals = _pmap(_signal_one, sig_jobs, cfg.jobs)
    afm_face = apply_crop(afm.cloud(), reg.ellipse, afm.spec)
    save_signal(cloud_to_signal(afm_face.points, grid, center, cfg.sphere.k, cfg.sphere.cutoff_steps),
                out / "afm.sph")

    index = ["scan_id,subject_id,signal,depth"]
    for face, sig in zip(reg.faces, signals):
        depth = resample_depth(face, afm.spec)
        save_signal(sig, out / "signals" / f"{face.scan_id}.sph")
        save_scan(depth, out / "depth" / f"{face.scan_id}.grid")
        index.append(f"{face.scan_id},{face.subject_id},signals/{face.scan_id}.sph,"
                     f"depth/{face.scan_id}.grid")
    _atomic_write(out / "index.csv", "\n".join(index) + "\n")
    _write_log(out, reg.faces, errors, reg.fine_rms)
    return PreprocessResult(len(reg.faces), errors)


def _write_log(out, faces, errors, rms):
    lines = [f"ok {f.scan_id} points={len(f)} fine_rms={r:.6f}" for f, r in zip(faces, rms)]
    lines += [f"error {k} {v}" for k, v in sorted(errors.items())]
    _atomic_write(Path(out) / "preprocess.log", "\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# features

@dataclass
class Features:
    scan_ids: list
    labels: list
    signals: list
    depth: np.ndarray  # n x (rows * cols); holes filled from the AFM

    def __len__(self):
        return len(self.labels)


def load_features(signals_dir):
    root = Path(signals_dir)
    afm = load_scan(root / "afm.grid", "grid-text")
    afm_sig = load_signal(root / "afm.sph") if (root / "afm.sph").exists() else None
    lines = (root / "index.csv").read_text().splitlines()[1:]
    ids, labels, sigs, depth = [], [], [], []
    for ln in lines:
        if not ln.strip():
            continue
        sid, subj, spath, dpath = ln.split(",")
        ids.append(sid)
        labels.append(subj)
        sig = load_signal(root / spath)
        # same rule for signals: AFM footprint, holes filled from the AFM
        sigs.append(sig if afm_sig is None else conform_to(sig, afm_sig))
        d = load_scan(root / dpath, "grid-text")
        # compare faces only inside the AFM support; holes take the AFM depth
        depth.append(np.where(afm.valid, np.where(d.valid, d.z, afm.z), 0.0).ravel())
    return Features(ids, labels, sigs, np.array(depth))


def _signal_matrix(signals):
    return np.stack([s.values.ravel() for s in signals])


# --------------------------------------------------------------------------
# learn

@dataclass
class LearnedModel:
    support: SparseSupport = None
    coefficients: np.ndarray = None
    energies: list = None
    pca: object = None
    lda: object = None
    train_ids: list = None


def learn_ssmp(signals, labels, cfg, spec=None):
    """SSMP support from one signal per subject (or all, per config)."""
    spec = spec or cfg.dictionary_spec()
    if cfg.ssmp.one_per_subject:
        seen, picked = set(), []
        for i, l in enumerate(labels):
            if l not in seen:
                seen.add(l)
                picked.append(i)
    else:
        picked = list(range(len(signals)))
    res = ssmp_select([signals[i] for i in picked], spec, cfg.ssmp.n_atoms, cfg.ssmp.criterion)
    return res, picked


def cmd_learn(signals_dir, out_dir, cfg=PipelineConfig(), method="ssmp"):
    feats = load_features(signals_dir)
    out = Path(out_dir)
    model = LearnedModel(train_ids=list(feats.scan_ids))
    base = method.split("+")[0]
    if base == "ssmp":
        res, picked = learn_ssmp(feats.signals, feats.labels, cfg)
        model.support, model.energies = res.support, list(res.residual_energies)
        model.coefficients = encode_many(feats.signals, res.support, cfg.ssmp.encode_mode)
        save_support(res.support, out / "support.txt")
        save_matrix(model.coefficients, out / "coefficients.txt")
        trace = [res.initial_energy] + list(res.residual_energies)
        _atomic_write(out / "energies.txt",
                      "\n".join(_fmt(e) for e in trace) + "\n")
        feature_rows = model.coefficients.T
    elif base == "pca":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model.pca = pca_fit(feats.depth, cfg.pca_dim)
        for w in caught:
            log.warning("%s", w.message)
        save_matrix(model.pca.mean[None, :], out / "pca_mean.txt")
        save_matrix(model.pca.basis, out / "pca_basis.txt")
        feature_rows = pca_encode(feats.depth, model.pca)
    else:
        raise ConfigurationError(f"cmd_learn cannot learn method {method!r}")
    if method.endswith("+lda"):
        model.lda = rec.lda_fit(feature_rows, feats.labels)
        save_matrix(model.lda.W, out / "lda_W.txt")
    _atomic_write(out / "train_ids.txt", "\n".join(feats.scan_ids) + "\n")
    return model


# --------------------------------------------------------------------------
# evaluate

@dataclass
class MethodReport:
    method: str
    rank1: list = field(default_factory=list)
    cmc: list = field(default_factory=list)
    auc: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    clients: list = field(default_factory=list)

    def cmc_mean(self):
        return np.mean(np.stack(self.cmc), axis=0) if self.cmc else np.array([])

    def roc(self):
        return rec.roc_curve(np.concatenate(self.scores), np.concatenate(self.clients))


@dataclass
class EvalReport:
    config_name: str
    methods: dict


class _Split:
    """Per-repeat feature computation shared between methods."""

    def __init__(self, feats, train, test, cfg, spec, fixed_support):
        self.f, self.train, self.test, self.cfg, self.spec = feats, train, test, cfg, spec
        self.fixed_support = fixed_support
        self._support = None
        self._coeffs = {}
        self.train_labels = [feats.labels[i] for i in train]

    def support(self):
        if self._support is None:
            if self.fixed_support is not None:
                self._support = self.fixed_support
            else:
                sigs = [self.f.signals[i] for i in self.train]
                res, _ = learn_ssmp(sigs, self.train_labels, self.cfg, self.spec)
                self._support = res.support
        return self._support

    def coeffs(self, idx):
        key = tuple(idx)
        if key not in self._coeffs:
            sigs = [self.f.signals[i] for i in idx]
            self._coeffs[key] = encode_many(sigs, self.support(), self.cfg.ssmp.encode_mode).T
        return self._coeffs[key]

    def distances(self, method, virtual):
        f, tr, te = self.f, self.train, self.test
        labels = list(self.train_labels)
        if method == "euc":
            return rec.euclidean_distances(f.depth[te], f.depth[tr]), labels
        if method == "mse":
            sm = _signal_matrix(f.signals)
            return rec.mse_distances(sm[te], sm[tr]), labels
        if method.startswith("pca"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = pca_fit(f.depth[tr], self.cfg.pca_dim)
            g, p = pca_encode(f.depth[tr], model), pca_encode(f.depth[te], model)
        else:
            g, p = self.coeffs(tr), self.coeffs(te)
            if method == "ssmp+lda" and virtual:
                vsig, vlab = [], []
                for i in tr:
                    v = rec.make_virtual_faces(f.signals[i], self.cfg.eval.virtual_steps)
                    vsig += v
                    vlab += [f.labels[i]] * len(v)
                vc = encode_many(vsig, self.support(), self.cfg.ssmp.encode_mode).T
                g = np.vstack([g, vc])
                labels = labels + vlab
        if method.endswith("+lda"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                lda = rec.lda_fit(g, labels)
            g, p = lda.transform(g), lda.transform(p)
        return rec.l1_distances(p, g), labels


def evaluate(feats, cfg=PipelineConfig(), support=None, scenarios=("recognition", "verification")):
    """Repeated random-split evaluation of every configured method."""
    ev = cfg.eval
    spec = cfg.dictionary_spec() if any(m.startswith("ssmp") for m in cfg.methods) else None
    reports = {m: MethodReport(m) for m in cfg.methods}
    for rep in range(ev.n_repeats):
        rng = np.random.default_rng([ev.rng_seed, rep])
        train, test = rec.random_split(feats.labels, ev.train_per_subject, rng)
        if len(train) == 0 or len(test) == 0:
            warnings.warn("split has no training or no test scans; skipping repeat", stacklevel=2)
            continue
        split = _Split(feats, train, test, cfg, spec, support)
        truth = [feats.labels[i] for i in test]
        for m in cfg.methods:
            r = reports[m]
            cache = {}
            for scen in scenarios:
                virtual = ev.use_virtual(scen)
                if virtual not in cache:
                    cache[virtual] = split.distances(m, virtual)
                dist, glabels = cache[virtual]
                if scen == "recognition":
                    ranks = rec.label_ranks(dist, glabels, truth, ev.distinct_rank)
                    n_cls = len(set(glabels))
                    r.rank1.append(float(np.mean(ranks <= 1)))
                    r.cmc.append(rec.cmc_curve(ranks, min(ev.rank_max, n_cls) if ev.rank_max else n_cls))
                else:
                    s, c = rec.verification_scores(dist, glabels, truth)
                    fpr, tpr, _ = rec.roc_curve(s, c)
                    r.auc.append(rec.auc(fpr, tpr))
                    r.scores.append(s)
                    r.clients.append(c)
        log.info("repeat %d: %s", rep, {m: (reports[m].rank1[-1] if reports[m].rank1 else None)
                                        for m in cfg.methods})
    return EvalReport(f"T{ev.train_per_subject}", reports)


def write_reports(report, out_dir):
    out = Path(out_dir)
    summary = ["method,config,rank1_mean,rank1_std,auc,n_repeats"]
    cmc_rows = ["method,k,rate"]
    roc_rows = ["method,threshold,fpr,tpr"]
    for m, r in report.methods.items():
        r1m, r1s = rec.mean_std(r.rank1) if r.rank1 else (float("nan"), float("nan"))
        auc_m = float(np.mean(r.auc)) if r.auc else float("nan")
        summary.append(f"{m},{report.config_name},{r1m:.6f},{r1s:.6f},{auc_m:.6f},"
                       f"{max(len(r.rank1), len(r.auc))}")
        for k, v in enumerate(r.cmc_mean(), start=1):
            cmc_rows.append(f"{m},{k},{v:.6f}")
        if r.scores:
            fpr, tpr, thr = r.roc()
            roc_rows += [f"{m},{t!r},{a:.6f},{b:.6f}" for t, a, b in zip(thr, fpr, tpr)]
    _atomic_write(out / "summary.csv", "\n".join(summary) + "\n")
    _atomic_write(out / "cmc.csv", "\n".join(cmc_rows) + "\n")
    _atomic_write(out / "roc.csv", "\n".join(roc_rows) + "\n")


def cmd_evaluate(signals_dir, out_dir, cfg=PipelineConfig(), model_dir=None,
                 scenarios=("recognition", "verification")):
    feats = load_features(signals_dir)
    support = None
    if model_dir is not None and (Path(model_dir) / "support.txt").exists():
        support = load_support(Path(model_dir) / "support.txt", cfg.sphere.grid)
    report = evaluate(feats, cfg, support, scenarios)
    write_reports(report, out_dir)
    return report
