import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from wsdc.cli import (ABLATION_COLUMNS, CHANNEL_COLUMNS, CSV_HEADER, EPOCH_COLUMNS, SWEEP_COLUMNS, blob_hash,
                      channel_report_rows, main, parse_config, read_csv)
from wsdc.errors import ConfigError

TINY = dict(K=16, D=4, Q=2, epochs=2, batch_size=8, enc_hidden=[16], head_hidden=[16],
            gmm=dict(n_classes=4, dim=8, n_per_class=10, n_test_per_class=10))


def write_config(tmp_path, **over):
    doc = dict(TINY, **over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_parse_config_defaults_filled():
    exp = parse_config(dict(K=16, D=8, Q=4))
    d = exp.to_dict()
    assert d["alpha"] == 0.5 and d["snr_test_list"] == [4.0, 8.0, 12.0, 16.0, 20.0]
    assert d["gmm"]["n_classes"] == 10


@pytest.mark.parametrize("doc,needle", [
    (dict(D=8, Q=4), "K"),
    (dict(K=16, D=8, Q=4, learning_rate=0.1), "learning_rate"),
    (dict(K=16, D=8, Q=4, epochs="3"), "epochs"),
    (dict(K=16, D=8, Q=4, gmm=dict(classes=3)), "gmm.classes"),
    (dict(K=16, D=8, Q=4, alpha_list=[0.5, 2.0]), "alpha_list"),
])
def test_parse_config_errors_name_the_field(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(doc)


def test_train_missing_field_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(dict(D=4, Q=2)))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "K" in capsys.readouterr().err


def test_train_unreadable_config_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["train", "--config", str(path)]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2


def test_train_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 2
    assert list(rows[0]) == list(EPOCH_COLUMNS)
    assert (out / "metrics.csv").read_text().splitlines()[0] == CSV_HEADER
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["seed"] == 3
    assert man["config"]["lam"] == 1.0  # defaulted fields are echoed
    assert man["inputs"][0]["blob"] == blob_hash(open(cfg, "rb").read())
    assert (out / "model.wsdc").read_bytes()[:4] == b"WSDC"


def _strip_wall_time(path):
    rows = read_csv(path)
    for r in rows:
        r.pop("wall_time_s")
    return rows


def test_train_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b")])
    assert _strip_wall_time(tmp_path / "a" / "metrics.csv") == _strip_wall_time(tmp_path / "b" / "metrics.csv")
    assert (tmp_path / "a" / "model.wsdc").read_bytes() == (tmp_path / "b" / "model.wsdc").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    cfg = write_config(d)
    assert main(["train", "--config", cfg, "--out", str(d)]) == 0
    return d


def test_sweep_rows_sorted_with_inf_sentinel(trained, tmp_path):
    assert main(["sweep-snr", "--model", str(trained / "model.wsdc"), "--snr", "20,4,inf,12,8",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    snrs = [float(r["snr_db"]) for r in rows]
    assert snrs == [4.0, 8.0, 12.0, 20.0, math.inf]
    assert float(rows[-1]["index_error_rate"]) == 0.0


def test_sweep_corrupt_container_exits_3(trained, tmp_path):
    data = bytearray((trained / "model.wsdc").read_bytes())
    bad_magic = tmp_path / "magic.wsdc"
    bad_magic.write_bytes(b"XXXX" + bytes(data[4:]))
    assert main(["sweep-snr", "--model", str(bad_magic), "--out", str(tmp_path)]) == 3
    bad_version = tmp_path / "version.wsdc"
    data[4] = 99
    bad_version.write_bytes(bytes(data))
    assert main(["sweep-snr", "--model", str(bad_version), "--out", str(tmp_path)]) == 3
    flipped = bytearray((trained / "model.wsdc").read_bytes())
    flipped[len(flipped) // 2] ^= 0xFF
    (tmp_path / "flip.wsdc").write_bytes(bytes(flipped))
    assert main(["sweep-snr", "--model", str(tmp_path / "flip.wsdc"), "--out", str(tmp_path)]) == 3
    assert main(["sweep-snr", "--model", str(tmp_path / "absent.wsdc"), "--out", str(tmp_path)]) == 3


def test_ablation_table_shape(tmp_path):
    cfg = write_config(tmp_path, epochs=1)
    alphas = "0,0.2,0.4,0.6,0.8,1"
    assert main(["ablate-alpha", "--config", cfg, "--alpha", alphas, "--snr", "4,8,12,16,20",
                 "--out", str(tmp_path / "abl"), "--jobs", "2"]) == 0
    rows = read_csv(tmp_path / "abl" / "ablation.csv")
    assert len(rows) == 30
    assert list(rows[0]) == list(ABLATION_COLUMNS)
    assert sorted({r["alpha"] for r in rows}, key=float) == ["0.0", "0.2", "0.4", "0.6", "0.8", "1.0"]


def test_ablation_parallel_matches_serial(tmp_path):
    cfg = write_config(tmp_path, epochs=1)
    for jobs, name in ((1, "s"), (2, "p")):
        assert main(["ablate-alpha", "--config", cfg, "--alpha", "0,1", "--snr", "8",
                     "--out", str(tmp_path / name), "--jobs", str(jobs)]) == 0
    assert (tmp_path / "s" / "ablation.csv").read_bytes() == (tmp_path / "p" / "ablation.csv").read_bytes()


def test_channel_report_columns(tmp_path):
    snr_cap1 = 10 * math.log10(3.0)
    assert main(["channel-report", "--K", "4,16", "--snr", f"{snr_cap1},12", "--out", str(tmp_path),
                 "--symbols", "20000"]) == 0
    rows = read_csv(tmp_path / "channel_report.csv")
    assert list(rows[0]) == list(CHANNEL_COLUMNS)
    assert len(rows) == 4
    for r in rows:
        assert float(r["uniform_entropy_bits"]) == pytest.approx(math.log2(int(r["K"])), abs=1e-12)
    first = [r for r in rows if float(r["snr_db"]) == pytest.approx(snr_cap1)]
    for r in first:
        assert float(r["capacity_bits"]) == pytest.approx(1.0, abs=1e-12)


def test_channel_report_simulated_ser_matches_theory():
    n = 10**6
    for r in channel_report_rows([16], [12.0], seed=1, n_symbols=n):
        p = r["ser_theoretical"]
        assert abs(r["ser_simulated"] - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_grad_check_verb(tmp_path, capsys):
    cfg = write_config(tmp_path, K=4, D=2, lam=1.0)
    assert main(["grad-check", "--config", cfg, "--samples", "50"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["passed"] and res["max_rel_error"] < 1e-3


def test_numerical_failure_exits_4(tmp_path, monkeypatch, capsys):
    import wsdc.training as training

    info = dict(fw=SimpleNamespace(distortion=0.0), task_loss=math.nan, ws_value=math.nan)
    monkeypatch.setattr(training, "loss_and_grads", lambda *a, **k: (math.nan, {}, info))
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "n")]) == 4
    assert "non-finite" in capsys.readouterr().err
