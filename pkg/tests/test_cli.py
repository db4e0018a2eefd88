import json
import subprocess
import sys

import pytest

from daimon.cli import main, read_csv

SMALL_SCENARIO = {
    "consensus": {"t_p": 2, "t_b": 5, "delta": 0.005, "reward_shape": 3.0, "d0": 1.0},
    "validators": 2,
    "improvers": [[0.4, 0.2]],
    "periods": 2,
    "del": {"m": 200, "n": 16, "num_classes": 10, "train": {"hidden": 64, "epochs": 40}},
    "adversaries": {"bad_signature": True, "non_improver": True, "duplicate_voter": True},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("del")
    assert run("del-train", "--seed", 3, "--m", 200, "--n", 16, "--epochs", 30, "--out-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain")
    cfg = out / "scenario.in.json"
    cfg.write_text(json.dumps(SMALL_SCENARIO))
    assert run("chain-run", "--seed", 4, "--config", cfg, "--out-dir", out) == 0
    return out


# --- exit codes and argument handling --------------------------------------------


def test_missing_seed_exits_2(tmp_path):
    assert run("attack-bruteforce", "--out-dir", tmp_path) == 2
    assert not any(tmp_path.iterdir())


def test_unknown_mode_exits_2(trained, tmp_path):
    assert run("attack-inverse", "--seed", 1, "--model", trained / "del_model.json", "--mode", "sideways",
               "--out-dir", tmp_path) == 2


def test_missing_config_exits_2(tmp_path):
    assert run("chain-run", "--seed", 1, "--config", tmp_path / "nope.json", "--out-dir", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_bad_config_json_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("chain-run", "--seed", 1, "--config", bad, "--out-dir", tmp_path / "o") == 2
    bad.write_text(json.dumps({"surprise": 1}))
    assert run("chain-run", "--seed", 1, "--config", bad, "--out-dir", tmp_path / "o") == 2
    bad.write_text(json.dumps({**SMALL_SCENARIO, "consensus": {"t_b": 2}}))
    assert run("chain-run", "--seed", 1, "--config", bad, "--out-dir", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_n_not_below_m_exits_2(tmp_path):
    assert run("del-train", "--seed", 1, "--m", 20, "--n", 20, "--out-dir", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_zero_samples_exits_2(trained, tmp_path):
    assert run("del-eval", "--seed", 1, "--model", trained / "del_model.json", "--samples", 0,
               "--out-dir", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_bruteforce_bad_ranges_exit_2(tmp_path):
    assert run("attack-bruteforce", "--seed", 1, "--epsilon", "1.5", "--out-dir", tmp_path / "o") == 2
    assert run("attack-bruteforce", "--seed", 1, "--n", "1", "--out-dir", tmp_path / "o") == 2
    assert run("attack-bruteforce", "--seed", 1, "--alpha", "0", "--out-dir", tmp_path / "o") == 2
    assert run("attack-bruteforce", "--seed", 1, "--n", "a,b", "--out-dir", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "daimon", "attack-bruteforce", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "--seed" in proc.stderr


# --- artifacts -------------------------------------------------------------------


def test_bruteforce_csv(tmp_path):
    assert run("attack-bruteforce", "--seed", 1, "--n", "32,256", "--epsilon", "0.1,1.0", "--out-dir", tmp_path) == 0
    header, rows, meta = read_csv(tmp_path / "bruteforce.csv")
    assert header == ["n", "epsilon", "p", "q_linearized", "q_exact"]
    assert len(rows) == 4
    assert meta.startswith("# seed=1,config_digest=") and len(meta.split("=")[-1]) == 64
    by = {(r[0], r[1]): r for r in rows}
    assert float(by["32", "1.0"][2]) == 1.0
    assert float(by["32", "0.1"][3]) == pytest.approx(0.5 / float(by["32", "0.1"][2]))


def test_bruteforce_reproducible(tmp_path):
    run("attack-bruteforce", "--seed", 9, "--out-dir", tmp_path / "a")
    run("attack-bruteforce", "--seed", 9, "--out-dir", tmp_path / "b")
    assert (tmp_path / "a" / "bruteforce.csv").read_bytes() == (tmp_path / "b" / "bruteforce.csv").read_bytes()


def test_del_train_outputs(trained):
    for name in ("del_model.json", "del_loss.csv", "target.json", "labels.json"):
        assert (trained / name).exists()
    header, rows, meta = read_csv(trained / "del_loss.csv")
    assert header == ["epoch", "train_loss", "test_loss"]
    assert len(rows) == 30
    assert "seed=3" in meta


def test_del_eval(trained, tmp_path, capsys):
    assert run("del-eval", "--seed", 1, "--model", trained / "del_model.json", "--samples", 50,
               "--out-dir", tmp_path) == 0
    assert "pearson r = " in capsys.readouterr().out
    header, rows, _ = read_csv(tmp_path / "del_eval.csv")
    assert header == ["error", "distance"] and len(rows) == 50


def test_attack_inverse(trained, tmp_path):
    assert run("attack-inverse", "--seed", 1, "--model", trained / "del_model.json", "--mode", "both",
               "--epochs", 2, "--out-dir", tmp_path) == 0
    for mode in ("nearby", "random"):
        header, rows, _ = read_csv(tmp_path / f"inverse_{mode}.csv")
        assert header == ["epoch", "error"] and len(rows) == 3


def test_poi_round_trip_and_tamper(trained, tmp_path, capsys):
    out = tmp_path
    assert run("poi", "keygen", "--seed", 1, "--name", "alice.json", "--out-dir", out) == 0
    assert run("poi", "keygen", "--seed", 2, "--name", "val.json", "--out-dir", out) == 0
    assert run("model-synth", "--seed", 1, "--labels", trained / "labels.json", "--error", 0.2,
               "--out-dir", out) == 0
    assert run("poi", "prove", "--seed", 1, "--model", out / "model.json", "--del-model", trained / "del_model.json",
               "--identity", out / "alice.json", "--out-dir", out) == 0
    verify_args = ["poi", "verify", "--seed", 1, "--model", out / "model.json", "--proof", out / "proof.json",
                   "--del-model", trained / "del_model.json", "--target", trained / "target.json",
                   "--identity", out / "val.json", "--out-dir", out]
    assert run(*verify_args) == 0
    assert json.loads((out / "verification.json").read_text())["inner"] == json.loads((out / "proof.json").read_text())
    capsys.readouterr()

    doc = json.loads((out / "model.json").read_text())
    doc["predicted_labels"][0] = doc["predicted_labels"][0] % 10 + 1
    (out / "model.json").write_text(json.dumps(doc))
    (out / "verification.json").unlink()
    assert run(*verify_args) == 1
    assert capsys.readouterr().out.startswith("DigestMismatch")
    assert not (out / "verification.json").exists()


def test_poi_verify_bad_thresholds(trained, tmp_path):
    common = ["poi", "verify", "--seed", 1, "--model", "m", "--proof", "p", "--del-model", trained / "del_model.json",
              "--target", trained / "target.json", "--identity", "i", "--out-dir", tmp_path / "o"]
    assert run(*common, "--delta", "-0.1") == 2
    assert run(*common, "--d-c", "1.5") == 2
    assert run(*common, "--d-c", "0") == 2
    assert not (tmp_path / "o").exists()


def test_chain_run_outputs(scenario):
    for name in ("chain.jsonl", "events.jsonl", "summary.csv", "balances.json", "scenario.json"):
        assert (scenario / name).exists()
    header, rows, meta = read_csv(scenario / "summary.csv")
    assert header == ["period", "winner", "distance", "true_error", "reward"]
    assert len(rows) == 2 and "seed=4" in meta
    balances = json.loads((scenario / "balances.json").read_text())
    for entry in balances.values():
        if entry["role"].startswith("adversary"):
            assert float(entry["balance"]) == 0.0


def test_chain_verify_and_dump(scenario, tmp_path, capsys):
    assert run("chain-verify", "--seed", 0, "--chain", scenario / "chain.jsonl",
               "--config", scenario / "scenario.json") == 0
    assert "chain valid" in capsys.readouterr().out
    assert run("chain-dump", "--seed", 0, "--chain", scenario / "chain.jsonl", "--out-dir", tmp_path) == 0
    header, rows, _ = read_csv(tmp_path / "blocks.csv")
    assert header[0] == "number" and rows[0][1] == "problem"


def test_chain_verify_names_corrupted_block(scenario, tmp_path, capsys):
    lines = (scenario / "chain.jsonl").read_text().splitlines()
    assert len(lines) >= 2
    doc = json.loads(lines[1])
    doc["distance"] = repr(float(doc["distance"]) / 2)
    lines[1] = json.dumps(doc)
    bad = tmp_path / "chain.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert run("chain-verify", "--seed", 0, "--chain", bad) == 1
    assert "first bad block is 1" in capsys.readouterr().out


def test_chain_verify_missing_file(tmp_path):
    assert run("chain-verify", "--seed", 0, "--chain", tmp_path / "none.jsonl") == 2


def test_chain_run_reproducible(scenario, tmp_path):
    cfg = scenario / "scenario.in.json"
    assert run("chain-run", "--seed", 4, "--config", cfg, "--out-dir", tmp_path) == 0
    for name in ("chain.jsonl", "events.jsonl", "summary.csv", "balances.json"):
        assert (tmp_path / name).read_bytes() == (scenario / name).read_bytes()
