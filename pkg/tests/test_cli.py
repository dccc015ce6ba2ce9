import csv

import pytest
import yaml

from imdnet.cli import build_configs, build_parser, degrade_main, main
from imdnet.degradation import procedural_textures, write_png

TINY = ["--base-width", "8", "--enc-blocks", "1,1,1,1", "--mid-blocks", "1",
        "--dec-blocks", "1,1,1,1"]


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    for i, img in enumerate(procedural_textures(3, 32, seed=0)):
        write_png(d / f"c{i}.png", img)
    return d


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"iterations": 50, "batch": 4},
                                   "model": {"tau": 0.3}, "seed": 9}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--batch", "2",
                                      "--variant", "tab_only"])
    t, m = build_configs(args)
    assert (t.iterations, t.batch, t.seed, t.ablation_variant) == (50, 2, 9, "tab_only")
    assert m.tau == 0.3


def test_profile(tmp_path):
    args = build_parser().parse_args(["train", "--profile", "fullscale", "--iterations", "5"])
    t, _ = build_configs(args)
    assert (t.iterations, t.batch, t.patch) == (5, 32, 256)


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("learning_rate: 0.1\n")
    with pytest.raises(SystemExit):
        build_configs(build_parser().parse_args(["train", "--config", str(cfg)]))


def test_info_prints_count(capsys):
    assert main(["info"] + TINY) == 0
    assert "variant=full" in capsys.readouterr().out


def test_end_to_end(tmp_path, clean_dir, capsys):
    assert degrade_main(["synth", "--clean-dir", str(clean_dir), "--out-dir",
                         str(tmp_path / "suite"), "--combo", "H", "--seed", "1"]) == 0
    main(["synth", "--clean-dir", str(clean_dir), "--out-dir", str(tmp_path / "suite"),
          "--combo", "R+N", "--seed", "2"])
    run = tmp_path / "run"
    assert main(["train", "--iterations", "2", "--batch", "2", "--patch", "32",
                 "--clean-dir", str(clean_dir), "--out", str(run)] + TINY) == 0
    ckpt = run / "final.safetensors"
    assert ckpt.exists() and (run / "final.yaml").exists()
    res = tmp_path / "res.csv"
    main(["eval", "--ckpt", str(ckpt), "--suite", str(tmp_path / "suite"), "--out", str(res),
          "--heatmap-csv", str(tmp_path / "heat.csv")])
    with open(res) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["combo"] for r in rows] == ["R+N", "H", "Average"]
    main(["info", "--ckpt", str(ckpt)])
    assert "step 2" in capsys.readouterr().out
    main(["probe", "--ckpt", str(ckpt), "--procedural", "10", "--out", str(tmp_path / "e.npz")])
    assert "probe accuracy" in capsys.readouterr().out
    assert (tmp_path / "e.npz").exists()
