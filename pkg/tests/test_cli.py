import json

import numpy as np
import pytest
import yaml

from lrpet import config as C
from lrpet.cli import main
from lrpet.compress import load_model, save_model
from lrpet.lrpet import train_lrpet
from lrpet.nn import Network, desk_cnn

# small synthetic problem so each CLI run takes a second or two
SMALL = [
    "data.per_class=40",
    "data.test_per_class=20",
    "data.image_shape=[1, 8, 8]",
    "data.noise=0.5",
    "data.classes=4",
    "data.validation=40",
    "model.widths=[4, 6]",
    "train.batch_size=32",
    "train.lr=0.05",
    "train.epochs=1",
]


def sets(*extra):
    out = []
    for item in (*SMALL, *extra):
        out += ["--set", item]
    return out


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochz: 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "train.epochz" in capsys.readouterr().err


def test_unknown_section_rejected():
    with pytest.raises(C.ConfigError, match="bogus"):
        C.from_dict({"bogus": {}})


def test_type_checked():
    with pytest.raises(C.ConfigError):
        C.from_dict({"train": {"epochs": "ten"}})


def test_overrides_and_seed():
    cfg = C.load(None, ["train.lr=0.3", "lrpet.ratio=0.7"], seed=9)
    assert cfg.train.lr == 0.3 and cfg.lrpet.ratio == 0.7
    assert cfg.train.seed == cfg.model.seed == cfg.search.seed == 9


def test_config_round_trip():
    cfg = C.load(None, ["search.budget=7"])
    assert C.from_dict(C.to_dict(cfg)) == cfg


def test_train_smoke(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *sets()]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 2
    assert rows[0].startswith("epoch,iteration,train_loss,test_acc,energy_L0,energy_L4")
    assert (out / "model.lrpt").is_file()
    written = yaml.safe_load((out / "config.yaml").read_text())
    assert written["data"]["per_class"] == 40
    _, meta = load_model(out / "model.lrpt", with_meta=True)
    assert set(meta["truncation_errors"]) == {"0", "4"}


def test_disabled_lrpet_equals_plain_sgd(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *sets("lrpet.enabled=false", "train.epochs=2")]) == 0
    cfg = C.load(None, SMALL + ["train.epochs=2"])
    data = C.build_dataset(cfg)
    ref, _ = train_lrpet(C.build_network(cfg, data.image_shape, data.num_classes), data, C.train_config(cfg))
    saved = load_model(out / "model.lrpt")
    for k in ref.params:
        assert saved.params[k].tobytes() == ref.params[k].tobytes()


def test_metrics_identical_across_reruns(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name), *sets("train.epochs=2")]) == 0

    def strip(path):
        # drop the wall-clock column
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

    assert strip(tmp_path / "a" / "metrics.csv") == strip(tmp_path / "b" / "metrics.csv")
    assert (tmp_path / "a" / "model.lrpt").read_bytes() == (tmp_path / "b" / "model.lrpt").read_bytes()


def test_compress_and_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *sets("train.epochs=2")]) == 0
    before = (out / "model.lrpt").read_bytes()
    assert main(["compress", "--model", str(out / "model.lrpt")]) == 0
    assert (out / "model.lrpt").read_bytes() == before  # input untouched
    report = json.loads((out / "report.json").read_text())
    assert report["params_after"] == load_model(out / "model_factorized.lrpt").num_params()
    assert "PR" in capsys.readouterr().out

    assert main(["eval", "--model", str(out / "model.lrpt"), *sets()]) == 0
    dense = json.loads((out / "eval.json").read_text())["accuracy"]
    assert main(["eval", "--model", str(out / "model_factorized.lrpt"), *sets()]) == 0
    factored = json.loads((out / "eval.json").read_text())["accuracy"]
    assert abs(dense - factored) <= 0.005


def test_saved_model_accuracy_matches_memory(tmp_path):
    cfg = C.load(None, SMALL)
    data = C.build_dataset(cfg)
    net, metrics = train_lrpet(C.build_network(cfg, data.image_shape, data.num_classes), data, C.train_config(cfg))
    save_model(net, tmp_path / "m.lrpt")
    back = load_model(tmp_path / "m.lrpt")
    assert back.accuracy(data.test.images, data.test.labels) == metrics.final_accuracy


def test_compress_plan_mismatch(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *sets()]) == 0
    plan = tmp_path / "plan.yaml"
    plan.write_text("lrpet:\n  ratios: {0: 0.5}\n")
    assert main(["compress", "--model", str(out / "model.lrpt"), "--plan", str(plan)]) == 2


def test_eval_untrained_is_chance(tmp_path):
    # one untrained net's errors are correlated across samples, so average a few inits
    accs = []
    for seed in range(5):
        save_model(Network(desk_cnn((1, 12, 12), 10), (1, 12, 12), seed=seed), tmp_path / "u.lrpt")
        args = ["--set", "data.per_class=10", "--set", "data.test_per_class=200"]
        assert main(["eval", "--model", str(tmp_path / "u.lrpt"), *args]) == 0
        res = json.loads((tmp_path / "eval.json").read_text())
        assert res["count"] == 2000
        accs.append(res["accuracy"])
    assert abs(np.mean(accs) - 0.10) <= 0.03


def test_eval_missing_model(tmp_path):
    assert main(["eval", "--model", str(tmp_path / "nope.lrpt")]) == 2


def test_search_smoke(tmp_path):
    out = tmp_path / "s"
    args = sets("search.budget=5", "search.proxy_epochs=1")
    assert main(["search", "--out", str(out), *args]) == 0
    plan = yaml.safe_load((out / "plan.yaml").read_text())
    assert set(plan["lrpet"]["ratios"]) == {"0", "4"}
    assert plan["lrpet"]["keep_dense"] == [9]
    assert main(["train", "--config", str(out / "plan.yaml"), "--out", str(out / "t"), *sets()]) == 0
    assert len((out / "search_trace.csv").read_text().splitlines()) == 6


def test_search_quadratic_mode(tmp_path, capsys):
    out = tmp_path / "q"
    args = ["--set", "search.objective=quadratic", "--set", "search.optimum=[0.3, 0.6, 0.8]"]
    assert main(["search", "--out", str(out), *args]) == 0
    best = yaml.safe_load((out / "plan.yaml").read_text())["search"]["best"]
    assert np.linalg.norm(np.array(best) - [0.3, 0.6, 0.8]) < 0.1


def test_lambda_sweep_direction(tmp_path):
    # larger lambda never selects a less compressed plan among the same trace
    out = tmp_path / "l"
    assert main(["search", "--out", str(out), *sets("search.budget=6", "search.proxy_epochs=1")]) == 0
    lines = (out / "search_trace.csv").read_text().splitlines()[1:]
    evals = [(float(r.split(",")[-4]), float(r.split(",")[-3])) for r in lines]  # (E, C)
    chosen = [min(evals, key=lambda ec: ec[0] + lam * ec[1])[1] for lam in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(b <= a for a, b in zip(chosen, chosen[1:]))


def test_verify_suites(capsys):
    assert main(["verify", "bn-rectify"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["verify", "nope"]) == 2


def test_overhead_mode(tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--out", str(out), "--overhead", "1", *sets()]) == 0
    res = json.loads((out / "overhead.json").read_text())
    assert res["ratio"] > 0
