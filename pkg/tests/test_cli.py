import csv
import json

import numpy as np
import pytest

from cemeit import io
from cemeit.cli import build_parser, main, resolve_config
from cemeit.errors import ConfigError
from cemeit.pipeline import default_params, load_params, make_config, save_params


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    code = main(["simulate", "--output", str(root), "--n-train", "0", "--n-val", "0",
                 "--n-test", "2", "--seed", "5"])
    assert code == 0
    return root


def test_simulate_outputs(dataset):
    m = json.loads((dataset / "manifest.json").read_text())
    assert m["counts"] == {"train": 0, "val": 0, "test": 2}
    assert (dataset / "run_simulate.log").is_file()
    assert (dataset / "mesh_coarse.json").is_file() and (dataset / "baseline_dense.f64").is_file()
    # a second run without --force refuses to overwrite
    assert main(["simulate", "--output", str(dataset), "--n-test", "1"]) == 2


@pytest.fixture(scope="module")
def reconstructions(dataset):
    out = dataset / "recon"
    for method in ("constant", "lin-rec", "dsm-index"):
        assert main(["reconstruct", "--dataset", str(dataset), "--method", method]) == 0
    return out


def test_reconstruct_layout(reconstructions):
    d = reconstructions / "lin-rec"
    for name in ("0000", "0001"):
        assert (d / "fields" / f"{name}.f64").is_file()
        img = io.read_pgm(d / "images" / f"{name}.pgm")
        assert img.shape == (128, 128)
    for f in ("params.json", "timing.json", "flags.json", "run_reconstruct.log"):
        assert (d / f).is_file()
    params = json.loads((d / "params.json").read_text())
    assert params["params"]["alpha"] == 2.0
    arr, meta = io.read_raw(reconstructions / "dsm-index" / "fields" / "0000.f64")
    assert meta["representation"] == "node" and arr.min() >= 0 and arr.max() <= 1


def test_reconstruct_refuses_overwrite(dataset, reconstructions):
    args = ["reconstruct", "--dataset", str(dataset), "--method", "constant"]
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_evaluate_and_report(dataset, reconstructions, tmp_path, capsys):
    for method in ("constant", "lin-rec", "dsm-index"):
        assert main(["evaluate", "--dataset", str(dataset), "--method", method]) == 0
    s = json.loads((reconstructions / "constant" / "summary.json").read_text())
    assert s["n"] == 2 and s["dynamic_range"]["mean"] == 0.0
    with open(reconstructions / "lin-rec" / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and {"rel_l1", "dice", "dice_conductive"} <= set(rows[0])
    capsys.readouterr()
    assert main(["report", str(reconstructions), "--output", str(tmp_path)]) == 0
    table = (tmp_path / "report.md").read_text()
    assert table.index("constant") < table.index("lin-rec") < table.index("dsm-index")
    assert (tmp_path / "report.csv").is_file()
    assert "lin-rec" in capsys.readouterr().out


def test_evaluate_partial_inputs(dataset, reconstructions, tmp_path):
    recon = tmp_path / "recon"
    src = reconstructions / "constant" / "fields"
    (recon / "constant" / "fields").mkdir(parents=True)
    for suffix in ("", ".json"):
        (recon / "constant" / "fields" / f"0000.f64{suffix}").write_bytes(
            (src / f"0000.f64{suffix}").read_bytes())
    args = ["evaluate", "--dataset", str(dataset), "--method", "constant", "--recon", str(recon)]
    assert main(args) == 1
    s = json.loads((recon / "constant" / "summary.json").read_text())
    assert s["n"] == 1 and s["missing"] == ["0001"]


def test_exit_codes(dataset, tmp_path):
    assert main(["reconstruct", "--dataset", str(tmp_path / "nope"), "--method", "gn-tv"]) == 1
    assert main(["reconstruct", "--dataset", str(dataset), "--method", "magic"]) == 2
    assert main(["reconstruct", "--dataset", str(dataset), "--method", "gn-tv",
                 "--param", "nonsense=1", "--output", str(tmp_path)]) == 2
    assert main(["reconstruct", "--dataset", str(dataset), "--method", "gn-tv",
                 "--frames", "nosplit", "--output", str(tmp_path)]) == 2
    assert main(["evaluate", "--dataset", str(dataset), "--method", "gn-tv",
                 "--recon", str(tmp_path / "empty")]) == 1
    assert main(["report", str(tmp_path / "nothing")]) == 1
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_config_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text('method = "gn-tv"\nthreads = 3\nlimit = 4\n[params]\nalpha = 0.5\n'
                        'max_iters = 7\n')
    parser = build_parser()
    args = parser.parse_args(["reconstruct", "--config", str(cfg_file), "--limit", "2",
                              "--param", "alpha=0.25"])
    cfg = resolve_config(args)
    assert cfg.method == "gn-tv" and cfg.threads == 3 and cfg.limit == 2
    assert cfg.params == {"alpha": 0.25, "max_iters": 7}
    monkeypatch.setenv("CEMEIT_THREADS", "5")
    cfg = resolve_config(parser.parse_args(["reconstruct", "--method", "dsm-index"]))
    assert cfg.threads == 5
    monkeypatch.setenv("CEMEIT_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["reconstruct"]))
    bad = tmp_path / "bad.json"
    bad.write_text('{"colour": 1}')
    monkeypatch.delenv("CEMEIT_THREADS")
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["reconstruct", "--config", str(bad)]))


def test_params_roundtrip(tmp_path):
    save_params(tmp_path / "p.json", "gn-tv", {"alpha": 1e-3})
    method, params = load_params(tmp_path / "p.json")
    assert method == "gn-tv" and make_config(method, params).alpha == 1e-3
    assert default_params("l1-sparsity")["alpha"] == 1e-4
    with pytest.raises(ConfigError):
        make_config("lin-rec", {"beta": 1})


def test_real_data_mode(dataset, tmp_path):
    real = tmp_path / "real"
    (real / "frames").mkdir(parents=True)
    (real / "masks").mkdir()
    frame = io.read_frame(dataset / "frames" / "0000.f64")
    io.write_frame_csv(real / "frames" / "tank1.csv", frame)
    mask = np.ones((64, 64), int)
    mask[20:30, 20:30] = 2
    io.write_pgm(real / "masks" / "tank1.pgm", mask * 127.5, 0, 255)
    assert main(["reconstruct", "--dataset", str(real), "--method", "constant"]) == 0
    assert main(["evaluate", "--dataset", str(real), "--method", "constant"]) == 0
    s = json.loads((real / "recon" / "constant" / "summary.json").read_text())
    assert set(s) >= {"n", "dice", "measurement_error"} and "rel_l1" not in s
    assert s["n"] == 1
