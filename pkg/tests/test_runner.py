import numpy as np
import pytest

from trustdd import runner
from trustdd.__main__ import main
from trustdd.data import init_distilled, load_distilled, make_blobs, save_distilled
from trustdd.errors import ConfigError, DistillationAborted
from trustdd.ood import read_cells

TINY = """
# smallest setup that exercises every stage
experiment.runs=1
data.count=40
data.test_count=40
distill.iterations=2
distill.outlier_count=4
distill.lr_img=1e-4
outliers.count=20
network.width=4
eval.models_per_run=1
eval.steps=3
eval.ood_count=20
eval.scores=msp
"""


def tiny(tmp_path, *overrides):
    return runner.parse_config(TINY, (f"experiment.output={tmp_path}",) + overrides)


def test_defaults_and_overrides():
    cfg = runner.parse_config("distill.lambda = 0.25  # trailing comment\n")
    assert cfg["distill.lambda"] == 0.25 and cfg["experiment.runs"] == 3
    assert cfg["eval.scores"] == ("msp", "mls", "energy")
    assert cfg.distill_config(7).rng_seed == 7


def test_unknown_and_malformed_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        runner.parse_config("distill.lamda=0.5")
    with pytest.raises(ConfigError, match="key=value"):
        runner.parse_config("distill.lambda")
    with pytest.raises(ConfigError, match="bad value"):
        runner.parse_config("distill.iterations=many")
    with pytest.raises(ConfigError):
        runner.parse_config("outliers.mode=oe-fancy")
    with pytest.raises(ConfigError):
        runner.parse_config("eval.ood=blobs-star")


def test_none_mode_forces_zero_lambda():
    cfg = runner.parse_config("outliers.mode=none\ndistill.lambda=0.9\ndistill.outlier_count=50")
    d = cfg.distill_config(0)
    assert d.lam == 0.0 and d.outlier_count == 0


def test_checksum_ignores_output_location():
    a = runner.parse_config("experiment.output=/tmp/a")
    b = runner.parse_config("experiment.output=/tmp/b\nexperiment.workers=4")
    c = runner.parse_config("distill.lambda=0.4")
    assert a.checksum == b.checksum != c.checksum
    assert runner.parse_config(a.dump()).checksum == a.checksum


def test_fail_fast_paths(tmp_path):
    out = tmp_path / "out"
    for bad in (f"data.source={tmp_path / 'nope'}",
                f"outliers.mode=oe-directory\noutliers.directory={tmp_path / 'nope'}",
                "outliers.mode=oe-directory",
                f"eval.ood=idx:{tmp_path / 'nope'}",
                f"distill.expert_buffer={tmp_path / 'nope'}"):
        with pytest.raises(ConfigError):
            runner.parse_config(f"experiment.output={out}\n{bad}")
    assert not out.exists()


def test_worker_env_cap(monkeypatch):
    cfg = runner.parse_config("experiment.workers=4")
    monkeypatch.delenv("TRUSTDD_WORKERS", raising=False)
    assert runner.worker_count(cfg) == 4
    monkeypatch.setenv("TRUSTDD_WORKERS", "2")
    assert runner.worker_count(cfg) == 2
    monkeypatch.setenv("TRUSTDD_WORKERS", "lots")
    with pytest.raises(ConfigError):
        runner.worker_count(cfg)


def test_distill_three_runs(tmp_path):
    cfg = tiny(tmp_path, "experiment.runs=3")
    dirs = runner.cmd_distill(cfg)
    assert [d.name for d in dirs] == ["run0", "run1", "run2"]
    seeds = [load_distilled(d).rng_seed for d in dirs]
    assert seeds == [0, 1, 2]
    for d in dirs:
        assert (d / "telemetry.csv").read_text().splitlines()[0] == f"# config_sha256={cfg.checksum}"
        assert load_distilled(d).extra["config_sha256"] == cfg.checksum


def test_none_mode_manifest_lambda(tmp_path):
    cfg = tiny(tmp_path, "outliers.mode=none")
    (d,) = runner.cmd_distill(cfg)
    s = load_distilled(d)
    assert s.extra["lambda"] == 0.0 and len(s.s_out_images) == 0 and s.outlier_mode == "none"


def test_rerun_is_identical(tmp_path):
    a = runner.cmd_distill(tiny(tmp_path / "a"))[0]
    b = runner.cmd_distill(tiny(tmp_path / "b"))[0]
    assert (a / "manifest").read_bytes() == (b / "manifest").read_bytes()
    assert (a / "s_in.bin").read_bytes() == (b / "s_in.bin").read_bytes()
    first = lambda p: (p / "telemetry.csv").read_text().splitlines()[0]  # noqa: E731
    assert first(a) == first(b)


def test_distill_eval_deterministic(tmp_path):
    cells = []
    for sub in ("a", "b"):
        cfg = tiny(tmp_path / sub)
        runner.cmd_distill(cfg)
        runner.cmd_eval(cfg, {"poe": cfg.output / "distilled"})
        cells.append(read_cells(cfg.output / "report" / "cells.txt"))
    assert cells[0] == cells[1]


def test_eval_report_contract(tmp_path):
    cfg = tiny(tmp_path)
    runner.cmd_distill(cfg)
    runner.cmd_distill(cfg.with_values(outliers__mode="none"), tmp_path / "base")
    reports = runner.cmd_eval(cfg, [(None, tmp_path / "base"), (None, cfg.output / "distilled")])
    assert list(reports) == ["baseline", "poe"]
    table = (cfg.output / "report" / "table_msp.txt").read_text().splitlines()
    assert table[0] == f"# config_sha256={cfg.checksum}"
    assert "AUROC:baseline | AUROC:poe" in table[2]
    cells = read_cells(cfg.output / "report" / "cells.txt")
    for arm in ("baseline", "poe"):
        for m in ("fpr95", "auroc", "aupr_in", "aupr_out"):
            members = [cells[f"{arm}.blobs-{k}.msp.{m}"] for k in ("center", "pair", "bar", "ring")]
            assert abs(cells[f"{arm}.mean.msp.{m}"] - np.mean(members)) < 1e-9


def test_eval_shape_mismatch(tmp_path):
    cfg = tiny(tmp_path)
    s = init_distilled(make_blobs(2, 20, 6, seed=0), None, 2, 0, 0)
    save_distilled(s, tmp_path / "wrong")
    with pytest.raises(ConfigError, match="does not match"):
        runner.cmd_eval(cfg, {"x": tmp_path / "wrong"})


def test_s_out_size_zero_is_baseline(tmp_path):
    cfg = tiny(tmp_path, "ablate.values=0,4")
    reports, failures = runner.cmd_ablate(cfg, "s-out-size")
    assert not failures and list(reports) == ["s_out=0", "s_out=4"]
    base_cfg = cfg.with_values(outliers__mode="none")
    dirs = runner.cmd_distill(base_cfg, tmp_path / "base")
    base = runner.evaluate_sets(base_cfg, [load_distilled(d) for d in dirs])
    assert base.rows == reports["s_out=0"].rows
    for a, b in zip(dirs, sorted((tmp_path / "ablate-s-out-size" / "s_out=0").glob("run*"))):
        assert (a / "s_in.bin").read_bytes() == (b / "s_in.bin").read_bytes()
    assert (tmp_path / "ablate-s-out-size" / "summary.txt").exists()


def test_random_vs_distilled(tmp_path):
    cfg = tiny(tmp_path)
    reports, failures = runner.cmd_ablate(cfg, "random-vs-distilled")
    assert not failures and list(reports) == ["OE-D", "OE-R", "POE-D", "POE-R"]
    root = tmp_path / "ablate-random-vs-distilled"
    d, r = load_distilled(root / "POE-D" / "run0"), load_distilled(root / "POE-R" / "run0")
    assert d.s_in_images.tobytes() == r.s_in_images.tobytes()
    assert len(d.s_out_images) == len(r.s_out_images) == 4
    pool = runner.build_outliers(cfg, runner.load_train(cfg)).images
    for img in r.s_out_images:
        assert any(np.array_equal(img, x) for x in pool)


def test_ablation_axis_checks(tmp_path):
    with pytest.raises(ConfigError):
        runner._arms_for(tiny(tmp_path, "outliers.mode=oe-gaussian"), "corruption-type")
    with pytest.raises(ConfigError):
        runner._arms_for(tiny(tmp_path, "outliers.mode=none"), "s-out-size")
    with pytest.raises(ConfigError):
        runner._arms_for(tiny(tmp_path), "depth")
    names = [a for a, _, _ in runner._arms_for(tiny(tmp_path), "outlier-source")]
    assert names == ["none", "gaussian", "uniform"]
    names = [a for a, _, _ in runner._arms_for(tiny(tmp_path, f"outliers.directory={tmp_path}"),
                                               "outlier-source")]
    assert names[-1] == "directory"
    names = [a for a, _, _ in runner._arms_for(tiny(tmp_path), "corruption-type")]
    assert names == ["jigsaw", "invert", "mosaic", "speckle", "all"]


def test_abort_carries_run_index(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise DistillationAborted("non-finite distillation loss at iteration 3", 3, [])

    monkeypatch.setattr(runner, "run_trustdd", boom)
    cfg = tiny(tmp_path, "experiment.runs=2")
    with pytest.raises(DistillationAborted, match="run 0") as info:
        runner.cmd_distill(cfg)
    assert info.value.iteration == 3


def test_forge_round_trip(tmp_path):
    cfg = tiny(tmp_path)
    out = runner.cmd_forge(cfg)
    from trustdd.data import load_unlabeled

    o = load_unlabeled(out)
    assert len(o) == 20 and set(o.tags) <= {"jigsaw", "invert", "mosaic", "speckle"}
    with pytest.raises(ConfigError):
        runner.cmd_forge(tiny(tmp_path, "outliers.mode=none"))


def test_round_half_even():
    assert runner.to_bytes(0.5) == 128  # 127.5 -> 128
    assert runner.to_bytes([0.0, 1.0, -0.2, 1.3]).tolist() == [0, 255, 0, 255]
    xs = np.array([k / 510 for k in range(1, 510, 2)])
    expected = [round(float(x) * 255.0) for x in xs]
    assert runner.to_bytes(xs).tolist() == expected


def _grid_set(classes=10, ipc=10, per_tag=10):
    rng = np.random.default_rng(0)
    tags = ["speckle", "jigsaw", "mosaic", "invert"] * per_tag
    from trustdd.data import DistilledSet

    return DistilledSet(rng.random((classes * ipc, 1, 4, 4)).astype(np.float32),
                        np.repeat(np.arange(classes), ipc), rng.random((len(tags), 1, 4, 4)).astype(np.float32),
                        ipc, classes, outlier_mode="poe", corruption_assignment=tags)


def test_grid_layout():
    s = _grid_set()
    rows = runner.grid_layout(s)
    assert len(rows) == 14 and all(len(r) == 10 for r in rows)
    assert all(s.s_in_labels[i] == c for c, row in enumerate(rows[:10]) for _, i in row)
    tags = [s.corruption_assignment[row[0][1]] for row in rows[10:]]
    assert tags == ["jigsaw", "invert", "mosaic", "speckle"]


def test_export_grid_pixels(tmp_path):
    from PIL import Image

    s = _grid_set(classes=2, ipc=3, per_tag=2)
    save_distilled(s, tmp_path / "d", extra={"config_sha256": "abc"})
    path = runner.cmd_export_grid(tmp_path / "d", tmp_path / "g.pgm")
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n# config_sha256=abc\n")
    img = np.asarray(Image.open(path))
    assert img.shape == (6 * 5 - 1, 3 * 5 - 1)
    np.testing.assert_array_equal(img[0:4, 5:9], runner.to_bytes(s.s_in_images[1, 0]))
    # third tag row is mosaic
    mosaic = [j for j, t in enumerate(s.corruption_assignment) if t == "mosaic"]
    np.testing.assert_array_equal(img[20:24, 0:4], runner.to_bytes(s.s_out_images[mosaic[0], 0]))
    with pytest.raises(ConfigError):
        runner.cmd_export_grid(tmp_path / "d", tmp_path / "g.pgm" / "sub" / "x.pgm")


def test_cli(tmp_path, capsys):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(TINY + f"experiment.output={tmp_path / 'out'}\n")
    assert main(["distill", "-c", str(cfg_path)]) == 0
    assert main(["eval", "-c", str(cfg_path), f"poe={tmp_path / 'out' / 'distilled'}"]) == 0
    assert main(["report", str(tmp_path / "out" / "report")]) == 0
    assert main(["export-grid", str(tmp_path / "out" / "distilled" / "run0"), str(tmp_path / "g.pgm")]) == 0
    assert main(["forge", "-c", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "poe | msp" in out
    assert main(["distill", "-c", str(cfg_path), "-s", "distill.lamda=1"]) == 2
    assert main(["distill", "-c", str(tmp_path / "missing.cfg")]) == 2
