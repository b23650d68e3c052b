import dataclasses
import logging

import numpy as np
import pytest

from ssmpface import pipeline
from ssmpface import recognition as rec
from ssmpface.data import SynthParams, load_manifest, write_manifest
from ssmpface.errors import ConfigurationError
from ssmpface.pipeline import PipelineConfig, SsmpConfig
from ssmpface.sparse import encode_many

SMALL_CFG = PipelineConfig(ssmp=SsmpConfig(n_atoms=10), pca_dim=5,
                           eval=rec.EvalConfig(train_per_subject=2, n_repeats=2))


def test_preprocess_outputs(small_dataset):
    pp = small_dataset / "pp"
    for name in ("afm.grid", "afm.sph", "index.csv", "preprocess.log"):
        assert (pp / name).exists()
    assert len(list((pp / "signals").glob("*.sph"))) == 9
    assert len(list((pp / "depth").glob("*.grid"))) == 9
    feats = pipeline.load_features(pp)
    assert len(feats) == 9 and len(set(feats.labels)) == 3
    assert feats.depth.shape[0] == 9
    # signals share the AFM footprint
    cov = {s.coverage.tobytes() for s in feats.signals}
    assert len(cov) == 1


def test_preprocess_deterministic(small_dataset, tmp_path):
    res = pipeline.cmd_preprocess(small_dataset / "ds" / "manifest.csv", tmp_path)
    assert res.exit_code == 0
    for f in sorted((small_dataset / "pp").rglob("*")):
        if f.is_file():
            rel = f.relative_to(small_dataset / "pp")
            assert (tmp_path / rel).read_bytes() == f.read_bytes(), rel


def test_preprocess_missing_scan(small_dataset, tmp_path):
    ds = load_manifest(small_dataset / "ds" / "manifest.csv")
    entries = list(ds.entries)
    entries[0] = dataclasses.replace(entries[0], path=str(small_dataset / "ds" / "nope.grid"))
    entries = [dataclasses.replace(e, path=str(ds.resolve(e))) if i else e
               for i, e in enumerate(entries)]
    write_manifest(entries, tmp_path / "m.csv")
    res = pipeline.cmd_preprocess(tmp_path / "m.csv", tmp_path / "out")
    assert res.exit_code != 0
    assert entries[0].scan_id in res.errors
    assert res.n_ok == 8
    assert "error" in (tmp_path / "out" / "preprocess.log").read_text()


def test_extraction_report(small_dataset, tmp_path):
    pipeline.cmd_preprocess(small_dataset / "ds" / "manifest.csv", tmp_path / "o",
                            extraction_report=tmp_path / "ext.csv")
    lines = (tmp_path / "ext.csv").read_text().splitlines()
    assert len(lines) == 10


def test_learn_ssmp(small_dataset, tmp_path):
    model = pipeline.cmd_learn(small_dataset / "pp", tmp_path, SMALL_CFG)
    assert len(model.support) <= 10
    assert model.coefficients.shape == (len(model.support), 9)
    trace = [float(x) for x in (tmp_path / "energies.txt").read_text().split()]
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    again = pipeline.cmd_learn(small_dataset / "pp", tmp_path / "b", SMALL_CFG)
    assert (tmp_path / "support.txt").read_bytes() == (tmp_path / "b" / "support.txt").read_bytes()
    loaded = pipeline.load_support(tmp_path / "support.txt", SMALL_CFG.sphere.grid)
    assert loaded.atoms == again.support.atoms


def test_learn_pca_clamp_logged(small_dataset, tmp_path, caplog):
    cfg = dataclasses.replace(SMALL_CFG, pca_dim=100)
    with caplog.at_level(logging.WARNING):
        model = pipeline.cmd_learn(small_dataset / "pp", tmp_path, cfg, method="pca+lda")
    assert "clamped" in caplog.text
    assert model.pca.d <= 8
    assert model.lda.d == 2
    assert (tmp_path / "lda_W.txt").exists()


def test_evaluate_reports(small_dataset, tmp_path):
    cfg = dataclasses.replace(SMALL_CFG, methods=("euc", "mse", "pca", "ssmp", "ssmp+lda"))
    report = pipeline.cmd_evaluate(small_dataset / "pp", tmp_path, cfg)
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert rows[0].endswith("n_repeats")
    assert len(rows) == 6
    assert all(r.split(",")[-1] == "2" for r in rows[1:])
    for m in report.methods.values():
        cmc = m.cmc_mean()
        assert np.all(np.diff(cmc) >= 0) and cmc[-1] == pytest.approx(1.0)
    assert (tmp_path / "roc.csv").exists() and (tmp_path / "cmc.csv").exists()


def test_gallery_as_probe_is_perfect(small_dataset):
    feats = pipeline.load_features(small_dataset / "pp")
    res, _ = pipeline.learn_ssmp(feats.signals, feats.labels, SMALL_CFG)
    c = encode_many(feats.signals, res.support).T
    ranks = rec.label_ranks(rec.l1_distances(c, c), feats.labels, feats.labels)
    assert np.all(ranks == 1)


def test_matrix_and_signal_round_trip(tmp_path, rng):
    m = rng.normal(size=(3, 4))
    pipeline.save_matrix(m, tmp_path / "m.txt")
    assert np.array_equal(pipeline.load_matrix(tmp_path / "m.txt"), m)
    grid = SMALL_CFG.sphere.grid
    from ssmpface.spherical import SphericalSignal
    sig = SphericalSignal(grid, rng.normal(size=grid.shape), rng.random(grid.shape) > 0.5)
    pipeline.save_signal(sig, tmp_path / "s.sph")
    back = pipeline.load_signal(tmp_path / "s.sph")
    assert np.array_equal(back.values, sig.values)
    assert np.array_equal(back.coverage, sig.coverage)


def test_config_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[pipeline]\nseed = 7\nmethods = pca,ssmp\n[ssmp]\nn_atoms = 12\n"
                 "[icp]\nmax_iterations = 20\n[eval]\ntrain_per_subject = 1\n")
    cfg = pipeline.load_config(p)
    assert cfg.seed == 7 and cfg.methods == ("pca", "ssmp")
    assert cfg.ssmp.n_atoms == 12 and cfg.icp.max_iterations == 20
    assert cfg.registration_cfg.icp.max_iterations == 20
    assert cfg.eval.train_per_subject == 1


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[ssmp]\nbogus = 1\n",
                                  "[ssmp]\nn_atoms = many\n", "[pipeline]\nmethods = lbp\n"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigurationError):
        pipeline.load_config(p)


@pytest.mark.filterwarnings("ignore:split has no")
def test_single_scan_subjects_make_split_infeasible(tmp_path):
    manifest = pipeline.cmd_synth(3, 1, tmp_path / "ds", SynthParams(size=48), seed=1)
    pipeline.cmd_preprocess(manifest, tmp_path / "pp")
    feats = pipeline.load_features(tmp_path / "pp")
    cfg = dataclasses.replace(SMALL_CFG, eval=rec.EvalConfig(train_per_subject=1, n_repeats=1))
    with pytest.warns(UserWarning, match="infeasible"):
        report = pipeline.evaluate(feats, cfg)
    assert all(not m.rank1 for m in report.methods.values())
