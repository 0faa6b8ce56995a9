import json

import numpy as np
import pytest

from _oracles import robust_optimum_1d
from robustfl.data import MultiIndexTask
from robustfl.experiment import (METHODS, SALT_ENV, ExperimentSpec, ResultRecord, emit_plot_data,
                                 known_direction_net, read_results, rerun_from_manifest, run_cell,
                                 run_experiment, salted_seed, seed_salt)


def tiny_spec(**kw):
    base = dict(teacher="ReLU", d=8, N=6, batch=16, iters=20, probe_every=10, seeds=[0, 1],
                test_n=200, test_attack_steps=3, sd_iters=10, experiment_id="tiny")
    base.update(kw)
    return ExperimentSpec(**base)


def test_spec_validation_and_defaults():
    spec = ExperimentSpec()
    assert (spec.d, spec.N, spec.epsilon, spec.batch, spec.iters) == (100, 100, 1.0, 300, 2000)
    assert (spec.attack.steps, spec.attack.step_size, spec.attack.step_mode) == (5, 0.1, "signed")
    assert spec.test_attack().steps == 20 and spec.test_n == 10_000
    with pytest.raises(ValueError, match="unknown method"):
        ExperimentSpec(methods=["FullAD", "Bogus"])
    with pytest.raises(ValueError):
        ExperimentSpec(teacher="sigmoid")
    with pytest.raises(ValueError):
        ExperimentSpec(batch_overrides={"Nope": 3})


def test_attack_budget_follows_epsilon():
    assert tiny_spec(epsilon=0.3).attack.epsilon == 0.3


def test_test_attack_overrides():
    spec = tiny_spec(test_step_mode="normalized", test_step_size=0.25)
    att = spec.test_attack()
    assert (att.step_mode, att.step_size, att.steps) == ("normalized", 0.25, 3)
    assert spec.attack.step_mode == "signed"
    with pytest.raises(ValueError):
        tiny_spec(test_step_mode="bogus").test_attack()


def test_figure1_batch_override():
    he2 = ExperimentSpec.figure1("He2")
    for m in ("FullAD", "SDthenADall", "SDthenADsecond"):
        assert he2.batch_for(m) == 500
    assert he2.batch_for("KnownUFixed") == 300
    assert ExperimentSpec.figure1("tanh").batch_for("FullAD") == 300


def test_spec_round_trip():
    spec = ExperimentSpec.figure1("He2", seeds=[3])
    back = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back == spec


def test_result_record_rejects_negative_risk():
    with pytest.raises(ValueError):
        ResultRecord("e", "FullAD", 0, 1, 1, -0.1, 0.0)


def test_known_direction_net_shares_init():
    task = MultiIndexTask.single_index(7, "tanh", seed=0)
    net = known_direction_net(task, 5, seed=2)
    np.testing.assert_array_equal(net.W, np.tile(task.U[0], (5, 1)))


def test_seed_salt(monkeypatch):
    monkeypatch.delenv(SALT_ENV, raising=False)
    assert seed_salt() == 0
    monkeypatch.setenv(SALT_ENV, "17")
    assert seed_salt() == 17
    monkeypatch.setenv(SALT_ENV, "-1")
    with pytest.raises(ValueError):
        seed_salt()
    assert salted_seed(4, 0) == 4
    assert salted_seed(4, 1) != salted_seed(4, 2)


@pytest.mark.parametrize("method", METHODS)
def test_cell_records(method):
    spec = tiny_spec()
    recs = run_cell(spec, method, 0)
    assert [r.iter for r in recs] == [0, 10, 20]
    assert [r.samples for r in recs] == [0, 160, 320]
    assert all(r.robust_test_risk >= r.std_test_risk - 1e-12 for r in recs)


def test_frozen_methods_keep_first_layer_fixed():
    # KnownUFixed and KnownUTrainable start from the same net; only freezing differs
    spec = tiny_spec(methods=["KnownUFixed", "KnownUTrainable"])
    a = run_cell(spec, "KnownUFixed", 0)
    b = run_cell(spec, "KnownUTrainable", 0)
    assert a[0].robust_test_risk == b[0].robust_test_risk
    assert a[-1].robust_test_risk != b[-1].robust_test_risk


def test_run_is_deterministic_and_rerunnable(tmp_path):
    spec = tiny_spec(methods=["FullAD", "KnownUFixed"])
    p1 = run_experiment(spec, tmp_path / "a", threads=2, salt=0)
    p2 = run_experiment(spec, tmp_path / "b", threads=1, salt=0)
    assert p1["results"].read_bytes() == p2["results"].read_bytes()
    p3 = rerun_from_manifest(p1["manifest"], tmp_path / "c")
    assert p3["results"].read_bytes() == p1["results"].read_bytes()
    man = json.loads(p1["manifest"].read_text())
    assert man["seed_salt"] == 0 and "code_version" in man and "rng" in man
    rows = read_results(p1["results"])
    assert len(rows) == 2 * 2 * 3
    assert all(int(r["samples"]) == 16 * int(r["iter"]) for r in rows)


def test_salt_changes_results(tmp_path):
    spec = tiny_spec(methods=["FullAD"], seeds=[0])
    a = run_experiment(spec, tmp_path / "a", salt=0)["results"].read_bytes()
    b = run_experiment(spec, tmp_path / "b", salt=5)["results"].read_bytes()
    assert a != b


def test_plot_data_mean_and_sample_std(tmp_path):
    csv = tmp_path / "r.csv"
    lines = ["experiment_id,method,seed,iter,samples,robust_test_risk,std_test_risk"]
    lines += [f"e,FullAD,{s},5,50,{v},0.0" for s, v in enumerate((1.0, 2.0, 3.0))]
    lines += ["e,KnownUFixed,0,5,50,0.5,0.0", "e,FullAD,0,10,100,0.7,0.0"]
    csv.write_text("\n".join(lines) + "\n")
    agg = emit_plot_data(csv, tmp_path / "p.csv")
    first = agg[0]
    assert (first["iter"], first["method"]) == ("5", "FullAD")
    assert first["mean_risk"] == 2.0 and first["std_risk"] == 1.0 and first["n_seeds"] == 3
    assert agg[1]["std_risk"] == 0.0
    assert [(r["iter"], r["method"]) for r in agg][-1] == ("10", "FullAD")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "iter,method,mean_risk,std_risk,n_seeds"


def test_plot_data_empty(tmp_path):
    csv = tmp_path / "r.csv"
    csv.write_text("experiment_id,method,seed,iter,samples,robust_test_risk,std_test_risk\n")
    with pytest.raises(ValueError):
        emit_plot_data(csv)


def test_known_direction_fixed_lowers_he2_risk():
    spec = ExperimentSpec(teacher="He2", d=20, N=20, iters=300, probe_every=300, seeds=[0],
                          test_n=2000, methods=["KnownUFixed"])
    recs = run_cell(spec, "KnownUFixed", 0)
    assert recs[-1].robust_test_risk < recs[0].robust_test_risk
    assert recs[-1].std_test_risk < recs[0].std_test_risk


def test_he2_robust_optimum_is_close_to_trivial():
    # signed l2 steps in d = 100 reach about 0.8 eps along u, so 0.8 is a generous budget
    best, trivial = robust_optimum_1d(lambda t: (t * t - 1) / np.sqrt(2), 0.8)
    assert best >= 0.8 * trivial


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="the robust optimum for He2 at eps = 1 is within about "
                   "15% of the zero predictor, and the iteration-0 net is near zero")
def test_known_direction_fixed_halves_he2_risk():
    spec = ExperimentSpec.figure1("He2", probe_every=2000, seeds=[0], methods=["KnownUFixed"])
    recs = run_cell(spec, "KnownUFixed", 0)
    assert recs[-1].robust_test_risk <= 0.5 * recs[0].robust_test_risk
