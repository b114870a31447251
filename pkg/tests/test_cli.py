import json

import pytest

from stickerguard import cli

SMALL = ["--data.n-per-class", "5"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_keywords(capsys):
    with pytest.raises(SystemExit):
        cli.main(["eval", "--help"])
    text = capsys.readouterr().out
    for word in ("non-blind", "semi-blind", "blind", "remap-w", "remap-b", "remap-t", "reconstruct",
                 "mv", "sf", "ranked", "random", "median", "jpeg", "overlapping"):
        assert word in text


def test_missing_upstream_step_is_reported(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", tmp_path)
    assert code != 0
    payload = json.loads(err)
    assert payload["error"] == "missing-artifact" and "gen-data" in payload["hint"]
    code, _, err = run(capsys, "attack", "--out", tmp_path)
    assert "train" in json.loads(err)["hint"]


def test_gen_data_is_reproducible(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "a", *SMALL)
    assert code == 0 and "per class" in out
    run(capsys, "gen-data", "--out", tmp_path / "b", *SMALL)
    run(capsys, "gen-data", "--out", tmp_path / "c", *SMALL, "--seed", 1)
    a = (tmp_path / "a/data/train/manifest.json").read_bytes()
    assert a == (tmp_path / "b/data/train/manifest.json").read_bytes()
    manifest = json.loads(a)
    assert manifest["counts"]["per_class"] == {str(c): 4 for c in range(8)}
    img_a = (tmp_path / "a/data/train/images/c0_0000.png").read_bytes()
    img_c = (tmp_path / "c/data/train/images/c0_0000.png").read_bytes()
    assert img_a != img_c
    assert json.loads((tmp_path / "c/data/train/manifest.json").read_text()).keys() == manifest.keys()


def test_config_file_and_flag_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data.n_per_class": 3, "seed": 4}))
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    run(capsys, "gen-data", "--config", cfg, "--data.n-per-class", 2)
    manifest = json.loads((tmp_path / "env/data/test/manifest.json").read_text())
    assert manifest["meta"]["seed"] == 4
    assert manifest["counts"]["total"] == 8


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--config", cfg)
    assert code != 0 and json.loads(err)["error"] == "bad-config"


def test_small_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--out", out, "--attack.sources", "0", "--attack.max-stickers", "3"]
    assert run(capsys, "gen-data", "--out", out, "--data.n-per-class", 40)[0] == 0
    assert run(capsys, "train", "--out", out)[0] == 0
    code, text, _ = run(capsys, "attack", *common)
    assert code == 0 and "T-ASR" in text
    code, _, err = run(capsys, "eval", *common, "--scenario", "semi-blind")
    assert code != 0 and "build-masks" in json.loads(err)["hint"]
    code, text, _ = run(capsys, "eval", *common, "--scenario", "non-blind", "--defense", "remap-t",
                        "--eval.unattacked-per-class", 2)
    assert code == 0 and "RemapT" in text
    report = json.loads((out / "reports/eval/remapt.json").read_text())[0]
    assert report["CD"] == 0.0
    for name in ("eval.csv", "eval.json", "eval.png"):
        assert (out / "reports/eval" / name).stat().st_size > 0
    code, text, _ = run(capsys, "defend", *common, "--image", out / "attacked/images/a0_t1.png", "--k", 3)
    assert code == 0
    decision = json.loads(text)
    assert decision["defended_images"] == 3 and decision["scenario"] == "NOL-Reconst-Par(3) + SF"
    code, _, err = run(capsys, "defend", *common, "--scenario", "non-blind",
                       "--image", out / "attacked/images/a0_t1.png")
    assert code != 0 and "--mask" in json.loads(err)["message"]
    code, text, _ = run(capsys, "grid", "--out", out, "--w", "8,16", "--ratio", "0.625", "--k", 2,
                        "--eval.unattacked-per-class", 1)
    assert code == 0
    rows = (out / "reports/grid/grid.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("w,ratio=0.625:DR")
    assert (out / "reports/grid/grid.png").is_file()
