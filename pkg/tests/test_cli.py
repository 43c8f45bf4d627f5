"""End-to-end command-line round trips, exit codes, and config handling."""

from dataclasses import replace

import numpy as np

from cap.bank import build_bank, load_bank, load_labeled_features, save_bank, save_labeled_features
from cap.cli import LAMBDA_SWEEP, main
from cap.heatmap import SpatialFeatureMap, save_spatial_maps
from cap.model import init_model, save_model


def _identity_model(dim, k):
    model = init_model(dim, "linear", attention_enabled=False, seed=0)
    return replace(model, metadata={"k": k})


def _write_csv(path, rows):
    path.write_text("\n".join(",".join(f"{v:.9g}" for v in row) for row in rows) + "\n")


def _make_dataset(tmp_path, seed=0, n=80, d=6):
    """Small bank plus a labeled test file with an easy anomaly split."""
    rng = np.random.default_rng(seed)
    train = rng.standard_normal((n, d)) + 4.0
    bank_path = tmp_path / "bank.cap"
    save_bank(build_bank(train), bank_path)
    normal = rng.standard_normal((15, d)) + 4.0
    anomalous = rng.standard_normal((15, d)) + 4.0
    anomalous[:, 0] += 6.0
    features = np.concatenate([normal, anomalous])
    labels = np.array([0] * 15 + [1] * 15, dtype=np.int64)
    test_path = tmp_path / "test.cap"
    save_labeled_features(features, labels, test_path)
    return str(bank_path), str(test_path)


def _read_config(out_dir):
    pairs = {}
    for line in (out_dir / "config.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        pairs[key] = value
    return pairs


def _read_summary(out_dir):
    values = {}
    for line in (out_dir / "summary.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        values[key] = value
    return values


def test_build_bank_from_csv(tmp_path, capsys):
    csv = tmp_path / "features.csv"
    _write_csv(csv, np.arange(12.0).reshape(4, 3) + 1.0)
    out = tmp_path / "out"
    assert main(["build-bank", str(csv), "--out", str(out)]) == 0
    bank = load_bank(out / "bank.cap")
    assert (bank.size, bank.dim) == (4, 3)
    echo = _read_config(out)
    assert echo["command"] == "build-bank"
    assert echo["input"] == str(csv)
    assert "bank.cap" in capsys.readouterr().out


def test_build_bank_from_suite_spec(tmp_path):
    out = tmp_path / "out"
    assert main(["build-bank", "synth-std-v1:3", "--out", str(out)]) == 0
    bank = load_bank(out / "bank.cap")
    assert (bank.size, bank.dim) == (2000, 64)
    assert bank.metadata["suite"] == "synth-std-v1"
    assert bank.metadata["seed"] == 3


def test_synth_writes_train_and_labeled_test(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "synth-std-v1", "--seed", "1", "--out", str(out)]) == 0
    train_bank = load_bank(out / "train.cap")
    assert (train_bank.size, train_bank.dim) == (2000, 64)
    test_bank, labels = load_labeled_features(out / "test.cap")
    assert test_bank.size == 1000
    assert labels is not None and set(labels.tolist()) == {0, 1}
    assert test_bank.metadata["seed"] == 1


def test_synth_rejects_unknown_suite(tmp_path, capsys):
    code = main(["synth", "synth-std-v2", "--out", str(tmp_path / "x")])
    assert code == 1
    assert capsys.readouterr().err.startswith("cap: usage:")


def test_train_score_eval_round_trip(tmp_path, capsys):
    bank_path, test_path = _make_dataset(tmp_path)
    train_out = tmp_path / "train_out"
    code = main([
        "train", "--bank", bank_path, "--test", test_path,
        "--out", str(train_out),
        "--k", "4", "--epochs", "2", "--batch", "20", "--seed", "1",
    ])
    assert code == 0
    for name in ("model.cap", "trace.csv", "training_curves.png",
                 "diagnostics.txt", "config.txt"):
        assert (train_out / name).stat().st_size > 0
    trace_lines = (train_out / "trace.csv").read_text().splitlines()
    assert trace_lines[0] == (
        "epoch,l_s,omega,total,head_frobenius,"
        "holdout_normal_mean,holdout_anomaly_mean"
    )
    assert len(trace_lines) == 3
    echo = _read_config(train_out)
    assert echo["command"] == "train"
    assert echo["k"] == "4" and echo["epochs"] == "2"
    diagnostics = (train_out / "diagnostics.txt").read_text()
    assert "head_frobenius=" in diagnostics
    capsys.readouterr()

    model_path = str(train_out / "model.cap")
    score_out = tmp_path / "score_out"
    code = main(["score", "--model", model_path, "--bank", bank_path,
                 "--test", test_path, "--out", str(score_out)])
    assert code == 0
    score_lines = (score_out / "scores.csv").read_text().splitlines()
    assert score_lines[0] == "id,score"
    assert len(score_lines) == 31
    # --k was omitted, so k came from the model file's training echo.
    assert _read_config(score_out)["k"] == "4"
    capsys.readouterr()

    eval_out = tmp_path / "eval_out"
    code = main(["eval", "--model", model_path, "--bank", bank_path,
                 "--test", test_path, "--out", str(eval_out)])
    assert code == 0
    summary = _read_summary(eval_out)
    assert "auroc" in summary and "baseline_auroc" in summary
    assert 0.0 <= float(summary["auroc"]) <= 1.0
    eval_lines = (eval_out / "scores.csv").read_text().splitlines()
    assert eval_lines[0] == "id,score,label"
    baseline_lines = (eval_out / "baseline_scores.csv").read_text().splitlines()
    assert baseline_lines[0] == "id,baseline_score,label"
    assert (eval_out / "score_hist.png").stat().st_size > 0
    assert "auroc=" in capsys.readouterr().out


def test_score_flag_overrides_recorded_k(tmp_path):
    bank_path, test_path = _make_dataset(tmp_path, seed=2)
    train_out = tmp_path / "t"
    main(["train", "--bank", bank_path, "--out", str(train_out),
          "--k", "4", "--epochs", "1"])
    out = tmp_path / "s"
    code = main(["score", "--model", str(train_out / "model.cap"),
                 "--bank", bank_path, "--test", test_path,
                 "--out", str(out), "--k", "2"])
    assert code == 0
    assert _read_config(out)["k"] == "2"


def test_score_requires_k_when_model_records_none(tmp_path, capsys):
    bank_path, test_path = _make_dataset(tmp_path, seed=3)
    bare = init_model(6, "linear", attention_enabled=False, seed=0)
    model_path = tmp_path / "bare.cap"
    save_model(bare, model_path)
    code = main(["score", "--model", str(model_path), "--bank", bank_path,
                 "--test", test_path, "--out", str(tmp_path / "o")])
    assert code == 1
    assert "records no k" in capsys.readouterr().err


def test_eval_identity_model_matches_baseline(tmp_path):
    bank_path, test_path = _make_dataset(tmp_path, seed=4)
    model_path = tmp_path / "identity.cap"
    save_model(_identity_model(6, 4), model_path)
    out = tmp_path / "o"
    assert main(["eval", "--model", str(model_path), "--bank", bank_path,
                 "--test", test_path, "--out", str(out)]) == 0
    summary = _read_summary(out)
    assert float(summary["auroc"]) == float(summary["baseline_auroc"])


def test_train_config_file_and_flag_precedence(tmp_path):
    bank_path, test_path = _make_dataset(tmp_path, seed=5)
    out = tmp_path / "out"
    config = tmp_path / "run.cfg"
    config.write_text(
        "# training setup\n"
        f"bank={bank_path}\n"
        f"test={test_path}\n"
        f"out={out}\n"
        "k=3\n"
        "lambda=0.5\n"
        "epochs=1\n"
        "head=l-relu\n"
        "attention=false\n"
    )
    assert main(["train", "--config", str(config)]) == 0
    echo = _read_config(out)
    assert echo["k"] == "3"
    assert echo["lambda"] == "0.5"
    assert echo["head"] == "l-relu"
    assert echo["attention"] == "false"

    flag_out = tmp_path / "flag_out"
    assert main(["train", "--config", str(config), "--out", str(flag_out),
                 "--k", "5", "--lambda", "2"]) == 0
    echo = _read_config(flag_out)
    assert echo["k"] == "5"
    assert float(echo["lambda"]) == 2.0
    assert echo["head"] == "l-relu"


def test_config_file_rejects_unknown_and_repeated_keys(tmp_path, capsys):
    bank_path, _ = _make_dataset(tmp_path, seed=6)
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus=1\n")
    assert main(["train", "--config", str(bad), "--bank", bank_path,
                 "--out", str(tmp_path / "o")]) == 1
    assert "bad.cfg:1: unknown key" in capsys.readouterr().err

    repeated = tmp_path / "rep.cfg"
    repeated.write_text("k=3\nk=4\n")
    assert main(["train", "--config", str(repeated), "--bank", bank_path,
                 "--out", str(tmp_path / "o2")]) == 1
    assert "rep.cfg:2: repeated key" in capsys.readouterr().err


def test_preset_expansion_with_flag_override(tmp_path):
    bank_path, _ = _make_dataset(tmp_path, seed=7)
    out = tmp_path / "out"
    assert main(["train", "--bank", bank_path, "--out", str(out),
                 "--preset", "mvtec", "--epochs", "1"]) == 0
    echo = _read_config(out)
    assert echo["k"] == "4"
    assert echo["lambda"] == "0.1"
    assert echo["lr"] == "0.0001"
    assert echo["batch"] == "16"
    assert echo["epochs"] == "1"


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["train", "--nope"]) == 1
    assert capsys.readouterr().err.startswith("cap: usage:")
    assert main(["train", "--out", str(tmp_path / "o")]) == 1
    assert "missing required input: --bank" in capsys.readouterr().err


def test_data_errors_exit_two(tmp_path, capsys):
    bank_path, test_path = _make_dataset(tmp_path, seed=8)
    code = main(["score", "--model", str(tmp_path / "missing.cap"),
                 "--bank", bank_path, "--test", test_path,
                 "--out", str(tmp_path / "o"), "--k", "2"])
    assert code == 2
    assert capsys.readouterr().err.startswith("cap: data:")

    truncated = tmp_path / "short.cap"
    truncated.write_bytes(open(bank_path, "rb").read()[:20])
    assert main(["train", "--bank", str(truncated),
                 "--out", str(tmp_path / "o2"), "--epochs", "1"]) == 2

    garbage = tmp_path / "notes.csv"
    garbage.write_text("this,is,not\nnumeric,data,at all\n")
    assert main(["build-bank", str(garbage), "--out", str(tmp_path / "o3")]) == 2


def test_ablate_requires_labeled_test(tmp_path, capsys):
    bank_path, _ = _make_dataset(tmp_path, seed=9)
    rng = np.random.default_rng(9)
    unlabeled = tmp_path / "unlabeled.cap"
    save_bank(build_bank(rng.standard_normal((10, 6)) + 4.0), unlabeled)
    code = main(["ablate", "--bank", bank_path, "--test", str(unlabeled),
                 "--out", str(tmp_path / "o"), "--sweep", "lambda",
                 "--epochs", "1"])
    assert code == 2
    assert "labeled" in capsys.readouterr().err


def test_numerical_errors_exit_three(tmp_path, capsys):
    from cap.model import param_items, with_params

    big = 3e38
    bank_path = tmp_path / "big_bank.cap"
    save_bank(build_bank(np.full((6, 4), big)), bank_path)
    model = init_model(4, "linear-relu-linear", attention_enabled=True, seed=0)
    params = {name: np.full_like(mat, big) for name, mat in param_items(model)}
    model = replace(with_params(model, params), metadata={"k": 3})
    model_path = tmp_path / "big.cap"
    save_model(model, model_path)
    csv = tmp_path / "big.csv"
    _write_csv(csv, np.full((2, 4), big))
    code = main(["score", "--model", str(model_path), "--bank", str(bank_path),
                 "--test", str(csv), "--out", str(tmp_path / "o")])
    assert code == 3
    assert capsys.readouterr().err.startswith("cap: numerical:")


def test_training_is_deterministic_across_runs(tmp_path):
    bank_path, test_path = _make_dataset(tmp_path, seed=10)
    args = ["--bank", bank_path, "--k", "4", "--epochs", "2", "--seed", "7"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", *args, "--out", str(out_a)]) == 0
    assert main(["train", *args, "--out", str(out_b)]) == 0
    assert (out_a / "model.cap").read_bytes() == (out_b / "model.cap").read_bytes()
    assert (out_a / "trace.csv").read_text() == (out_b / "trace.csv").read_text()

    score_a, score_b = tmp_path / "sa", tmp_path / "sb"
    for out in (score_a, score_b):
        assert main(["score", "--model", str(out_a / "model.cap"),
                     "--bank", bank_path, "--test", test_path,
                     "--out", str(out)]) == 0
    assert (score_a / "scores.csv").read_text() == (score_b / "scores.csv").read_text()


def test_ablate_lambda_sweep_signal(tmp_path, monkeypatch):
    monkeypatch.setenv("CAP_WORKERS", "3")
    synth_out = tmp_path / "data"
    assert main(["synth", "synth-std-v1", "--seed", "0", "--out", str(synth_out)]) == 0
    out = tmp_path / "sweep"
    code = main(["ablate", "--bank", str(synth_out / "train.cap"),
                 "--test", str(synth_out / "test.cap"), "--out", str(out),
                 "--sweep", "lambda", "--epochs", "3"])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,gap,auroc,baseline_auroc,head_frobenius"
    assert len(lines) == 7
    values = [float(line.split(",")[0]) for line in lines[1:]]
    assert values == list(LAMBDA_SWEEP)
    gaps = {float(line.split(",")[0]): float(line.split(",")[1]) for line in lines[1:]}
    # Without the constraint the representations collapse toward equal
    # scores; the gap only opens once lambda anchors the head.
    assert gaps[0.0] == min(gaps.values())
    assert max(gaps.values()) > 10.0 * abs(gaps[0.0])
    best = max(gaps, key=lambda value: gaps[value])
    assert best in (2.0, 10.0, 100.0)
    assert (out / "sweep.png").stat().st_size > 0
    for value in LAMBDA_SWEEP:
        point = out / f"lambda_{value:g}"
        assert (point / "model.cap").stat().st_size > 0
        assert (point / "config.txt").exists()


def test_ablate_k_sweep_shape(tmp_path, monkeypatch):
    monkeypatch.setenv("CAP_WORKERS", "1")
    rng = np.random.default_rng(11)
    bank_path = tmp_path / "bank.cap"
    save_bank(build_bank(rng.standard_normal((100, 6)) + 4.0), bank_path)
    features = rng.standard_normal((20, 6)) + 4.0
    features[10:] += 5.0
    test_path = tmp_path / "test.cap"
    save_labeled_features(features, np.array([0] * 10 + [1] * 10), test_path)
    out = tmp_path / "sweep"
    code = main(["ablate", "--bank", str(bank_path), "--test", str(test_path),
                 "--out", str(out), "--sweep", "k", "--epochs", "1",
                 "--batch", "20"])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("k,")
    assert [float(line.split(",")[0]) for line in lines[1:]] == [1, 4, 8, 16, 32, 64]


def test_bad_worker_count_exits_one(tmp_path, monkeypatch, capsys):
    bank_path, test_path = _make_dataset(tmp_path, seed=12)
    monkeypatch.setenv("CAP_WORKERS", "abc")
    code = main(["ablate", "--bank", bank_path, "--test", test_path,
                 "--out", str(tmp_path / "o"), "--sweep", "lambda",
                 "--epochs", "1"])
    assert code == 1
    assert "CAP_WORKERS" in capsys.readouterr().err


def test_heatmap_command(tmp_path):
    rng = np.random.default_rng(13)
    bank_path = tmp_path / "bank.cap"
    save_bank(build_bank(rng.standard_normal((30, 5)) + 4.0), bank_path)
    model_path = tmp_path / "model.cap"
    save_model(_identity_model(5, 3), model_path)
    maps_path = tmp_path / "maps.cap"
    save_spatial_maps(
        [SpatialFeatureMap(rng.standard_normal((3, 4, 5)) + 4.0, source_id="img-A"),
         SpatialFeatureMap(rng.standard_normal((3, 4, 5)) + 4.0, source_id="b/2")],
        maps_path,
    )
    out = tmp_path / "maps_out"
    assert main(["heatmap", "--model", str(model_path), "--bank", str(bank_path),
                 "--maps", str(maps_path), "--out", str(out)]) == 0
    first = out / "000_img-A.pgm"
    assert first.read_bytes().startswith(b"P5\n224 224\n255\n")
    assert (out / "000_img-A.csv").exists()
    assert (out / "000_img-A.png").stat().st_size > 0
    # Slash in the source id cannot leak into the file name.
    assert (out / "001_b_2.pgm").exists()
    assert _read_config(out)["k"] == "3"
