import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from slim import bench
from slim.cli import main
from slim.simworld import load_world, parse_grid, format_grid


def make_world(tmp_path, mutate=None, grid_edit=None):
    cfg = json.loads(bench.DEFAULT_CONFIG.read_text())
    cfg["commonsense"] = str(bench.DATA_DIR / cfg["commonsense"])
    grid = bench.DATA_DIR / cfg["grid"]
    if grid_edit is not None:
        m = parse_grid(grid.read_text())
        grid_edit(m.occupied)
        grid = tmp_path / "grid.txt"
        grid.write_text(format_grid(m))
    cfg["grid"] = str(grid)
    if mutate:
        mutate(cfg)
    p = tmp_path / "world.json"
    p.write_text(json.dumps(cfg))
    return p


def place(cfg, cls, xy):
    for o in cfg["objects"]:
        if o["class"] == cls:
            o["candidates"] = [xy]


def cup_in_view(cfg):
    cfg["start"] = {"x": 7.5, "y": 7.0, "heading_deg": 90}
    cfg["detector"].update(p_tp=1.0, p_fn=0.0)
    place(cfg, "cup", [7.5, 8.4])


def sealed_cup(cfg):
    place(cfg, "cup", [9.05, 1.05])


def seal(occ):
    # 1 m walled box around (9.05, 1.05) in the bedroom
    occ[5:16, 85] = occ[5:16, 95] = True
    occ[5, 85:96] = occ[15, 85:96] = True


@pytest.fixture(scope="module")
def quick(tmp_path_factory):
    """A few short trials per method on the shipped world, with traces."""
    cfg = bench.TrialConfig(timeout=60.0)
    out = {}
    for name in bench.METHOD_ORDER:
        rows = []
        for seed in (1, 2):
            tr = bench.TrialTrace()
            rows.append((bench.run_trial(cfg, bench.METHODS[name], "cup", seed, trace=tr), tr))
        out[name] = rows
    return cfg, out


# -- method table -------------------------------------------------------------

def test_method_flags():
    m = bench.METHODS
    assert not m["UDS"].use_context
    assert all(x.use_context for k, x in m.items() if k != "UDS")
    assert m["IHS-Unknown"].utility_mode == "HS"
    assert all(x.utility_mode == "DS" for k, x in m.items() if k != "IHS-Unknown")
    assert all(x.prior_mode == "noisy-known" for k, x in m.items() if "Known" in k)
    assert m["IDS-Known-Static"].landmarks_static and not m["IDS-Known-Dynamic"].landmarks_static


def test_method_lookup():
    assert bench.get_method("ihs-unknown").name == "IHS-Unknown"
    with pytest.raises(KeyError):
        bench.get_method("random")
    with pytest.raises(ValueError):
        bench.MethodSpec("x", True, "none", True, "DS")


@pytest.mark.parametrize("kw", [{"trials": 0}, {"timeout": 0.0}])
def test_trial_config_validation(kw):
    with pytest.raises(ValueError):
        bench.TrialConfig(**kw)


def test_trial_config_file_and_flags(tmp_path):
    p = make_world(tmp_path, lambda c: c.update(trial={"trials": 3, "seed": 5, "timeout": 120}))
    cfg = bench.trial_config(p, trials=None, seed=9)
    assert (cfg.trials, cfg.seed, cfg.timeout) == (3, 9, 120)
    bad = make_world(tmp_path, lambda c: c.update(trial={"bogus": 1}))
    with pytest.raises(ValueError):
        bench.trial_config(bad)


def test_displaced_prior_offset(apartment):
    rng = np.random.default_rng(0)
    for o in apartment.objects[:6]:
        p = bench.displaced_prior(apartment, o.position, 1.0, rng)
        assert np.linalg.norm(p - o.position) == pytest.approx(1.0)
        assert apartment.map.is_free(p)


def test_object_set_is_landmarks_then_target(apartment):
    ids = bench.object_set(apartment, "laptop")
    assert [apartment.objects[i].role for i in ids] == ["landmark"] * 6 + ["target"]
    with pytest.raises(ValueError):
        bench.object_set(apartment, "sofa")
    with pytest.raises(KeyError):
        bench.object_set(apartment, "piano")


# -- trials -------------------------------------------------------------------

def test_target_visible_from_start(tmp_path):
    cfg = bench.TrialConfig(world=make_world(tmp_path, cup_in_view))
    for name in bench.METHOD_ORDER:
        r = bench.run_trial(cfg, bench.METHODS[name], "cup", 0)
        assert r.success and r.views == 1 and r.path_m == pytest.approx(0.0)


def test_unreachable_target_times_out(tmp_path):
    cfg = bench.TrialConfig(world=make_world(tmp_path, sealed_cup, seal), timeout=300.0)
    r = bench.run_trial(cfg, bench.METHODS["IDS-Unknown"], "cup", 0)
    assert not r.success
    assert r.time_s == 300.0


def test_trial_deterministic():
    cfg = bench.TrialConfig(timeout=60.0)
    a = bench.run_trial(cfg, bench.METHODS["IHS-Unknown"], "laptop", 3)
    b = bench.run_trial(cfg, bench.METHODS["IHS-Unknown"], "laptop", 3)
    assert a == b


def test_trial_invariants(quick):
    cfg, out = quick
    for name, rows in out.items():
        for r, tr in rows:
            assert r.views == 1 + len(tr.poses)
            assert r.views - 1 <= tr.selections
            assert abs(r.path_m - sum(tr.legs)) < 1e-6
            assert r.views >= 1 and r.time_s >= 0 and r.path_m >= 0
            if r.success:
                assert r.time_s <= cfg.timeout
            else:
                assert r.time_s == cfg.timeout or r.reason


def test_uds_never_evaluates_context(quick):
    for r, tr in quick[1]["UDS"]:
        assert tr.context_evals == 0
    for r, tr in quick[1]["IDS-Unknown"]:
        assert tr.context_evals > 0


def test_static_landmarks_never_updated(quick):
    for r, tr in quick[1]["IDS-Known-Static"]:
        assert tr.landmark_updates == 0
    for r, tr in quick[1]["IDS-Known-Dynamic"]:
        assert tr.landmark_updates > 0


# -- aggregation and CSV ------------------------------------------------------

def fake(method, target, seed, views=3, success=True):
    return bench.TrialResult(method, target, seed, views, 10.0 * views, 1.5 * views, success)


def test_summary_success_rate():
    rows = bench.summarize([fake("UDS", "cup", s) for s in range(6)])
    assert rows[0].success_rate == 1.0 and rows[0].n == 6


def test_single_trial_benchmark_means():
    cfg = bench.TrialConfig(trials=1, timeout=40.0, seed=2)
    results, summary = bench.run_benchmark(cfg, ["UDS"], ["cup"])
    (r,), (s,) = results, summary
    assert (s.views, s.time_s, s.path_m, s.success_rate) == (r.views, r.time_s, r.path_m, float(r.success))


def test_empty_csv_is_header_only(tmp_path):
    p = bench.emit_csv([], tmp_path / "r.csv")
    assert p.read_text() == "method,target,seed,views,time_s,path_m,success\n"


def test_csv_rows_and_round_trip(tmp_path):
    res = [fake("UDS", "cup", 0, 2), fake("UDS", "cup", 1, 5, False)]
    p = bench.emit_csv(res, tmp_path / "r.csv")
    rows = list(csv.reader(p.open()))
    assert len(rows) == 1 + 2 + 1
    assert rows[-1][2] == "MEAN"
    trials, summary = bench.read_csv(p)
    assert trials == bench.sort_results(res)
    assert summary == bench.summarize(res)


# -- SVG ----------------------------------------------------------------------

NS = "{http://www.w3.org/2000/svg}"


def test_svg_well_formed_without_trail(tmp_path, apartment):
    p = bench.emit_svg_snapshot(None, apartment, [], tmp_path / "s.svg")
    root = ET.parse(p).getroot()
    assert root.tag == NS + "svg"
    assert root.find(f"{NS}polyline") is None


def test_svg_particles_match_csv(tmp_path, quick):
    _, out = quick
    r, tr = out["IHS-Unknown"][0]
    state, world = tr.final_state, tr.world
    svg = bench.emit_svg_snapshot(state, world, tr.robot, tmp_path / "s.svg", poses=tr.poses, gmm=tr.final_gmm)
    data = bench.export_belief_csv(state, tmp_path / "b.csv")
    root = ET.parse(svg).getroot()
    tf = bench.SvgTransform(float(root.get("data-scale")), float(root.get("data-margin")),
                            float(root.get("data-height")))
    pts = [tf.inverse(float(c.get("cx")), float(c.get("cy")))
           for c in root.iter(NS + "circle") if c.get("class") == "particle"]
    ref = [(float(row["x"]), float(row["y"])) for row in csv.DictReader(data.open())]
    np.testing.assert_allclose(np.array(pts), np.array(ref), atol=1e-9)
    assert root.find(f"{NS}polyline") is not None
    assert len(list(root.iter(NS + "ellipse"))) == tr.final_gmm.k


# -- CLI ----------------------------------------------------------------------

def test_cli_relations(capsys):
    assert main(["relations", "--target", "cup"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:2] == ["object_i", "object_j"]
    assert len(out) == 1 + 21


def test_cli_errors(tmp_path, capsys):
    out = str(tmp_path / "r.csv")
    assert main(["run", "--method", "nope", "--target", "cup", "--out", out]) == 2
    assert main(["run", "--method", "UDS", "--target", "sofa", "--out", out]) == 2
    assert main(["relations", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["bench", "--out", out]) == 2


def test_cli_run_writes_csv(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", "--method", "UDS", "--target", "cup", "--trials", "2", "--seed", "1",
                 "--timeout", "30", "--out", str(out), "--svg-dir", str(tmp_path / "svg")]) == 0
    trials, summary = bench.read_csv(out)
    assert len(trials) == 2 and len(summary) == 1
    assert len(list((tmp_path / "svg").glob("*.svg"))) == 2
