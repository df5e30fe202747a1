import csv
import json

import numpy as np
import pytest

from vista.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from vista.config import load_config, parse_config
from vista.data import generate_dataset
from vista.delivery import ExportLog, SummaryCache, SummaryTokens, consume, publish, snapshot_bytes
from vista.errors import ConfigError
from vista.model import VistaModel

TINY = """
[model]
d = 8
k = 4
head_hidden = [8]
item_buckets = 256

[data]
train_fraction = 0.75

[data.synthetic]
n_users = 24
n_items = 300
min_len = 5
max_len = 15

[train]
epochs = 2
batch_users = 6
lr = 0.01

[output]
checkpoint = "{dir}/m.vstm"
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(dir=tmp_path))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- config --------------------------------------------------------------------

def test_config_defaults_and_sections(tiny):
    cfg = load_config(tiny, environ={})
    assert cfg.model.k == 4 and cfg.model.head_hidden == (8,)
    assert cfg.data.synthetic.n_users == 24
    assert cfg.train.epochs == 2


def test_config_env_override(tiny):
    cfg = load_config(tiny, environ={"VISTA_MODEL__K": "16", "VISTA_DATA__SYNTHETIC__NOISE": "0.5",
                                     "VISTA_MODEL__PHI1": "silu", "OTHER": "x"})
    assert cfg.model.k == 16 and cfg.data.synthetic.noise == 0.5 and cfg.model.phi1 == "silu"


@pytest.mark.parametrize("table, where", [
    ({"model": {"kk": 3}}, "model.kk"),
    ({"model": {"k": "three"}}, "model.k"),
    ({"data": {"synthetic": {"noise": True}}}, "data.synthetic.noise"),
    ({"model": {"phi1": "tanh"}}, "phi1"),
    ({"data": {"source": "csv"}}, "data.path"),
    ({"train": {"lr": 0}}, "lr"),
])
def test_config_errors_name_the_path(table, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        parse_config(table, environ={})


def test_config_unreadable(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nk=")
    with pytest.raises(ConfigError):
        load_config(bad)


# -- train ----------------------------------------------------------------------

def test_train_writes_checkpoint_and_curve(tiny, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", tiny, "--deterministic")
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["steps"] == 6 and report["train_users"] == 18
    model = VistaModel.load(tmp_path / "m.vstm")
    assert model.step == 6
    rows = list(csv.DictReader(open(tmp_path / "m.curve.csv")))
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert rows[2]["eval_auc"] and not rows[0]["eval_auc"]


def test_train_is_reproducible(tiny, tmp_path, capsys):
    run(capsys, "train", "--config", tiny, "--deterministic")
    first = (tmp_path / "m.curve.csv").read_bytes(), (tmp_path / "m.vstm").read_bytes()
    run(capsys, "train", "--config", tiny, "--deterministic")
    assert ((tmp_path / "m.curve.csv").read_bytes(), (tmp_path / "m.vstm").read_bytes()) == first


def test_zero_epochs_saves_initialisation(tiny, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("VISTA_TRAIN__EPOCHS", "0")
    code, _, _ = run(capsys, "train", "--config", tiny)
    assert code == EXIT_OK
    cfg = load_config(tiny, environ={})
    fresh = VistaModel.create(cfg.model, seed=cfg.train.seed)
    saved = VistaModel.load(tmp_path / "m.vstm")
    for name, value in fresh.params.items():
        np.testing.assert_array_equal(saved.params[name], value)
    assert (tmp_path / "m.curve.csv").read_text().strip().count("\n") == 0


def test_overfit_preset(tmp_path, capsys):
    path = tmp_path / "overfit.toml"
    path.write_text(f"""
[model]
d = 16
k = 4
head_hidden = [16]
item_buckets = 512
recon_weight = 0.1

[data]
train_fraction = 0.5

[data.synthetic]
n_users = 8
n_items = 200
min_len = 5
max_len = 10
n_candidates = 4

[train]
epochs = 150
batch_users = 4
lr = 0.01

[output]
checkpoint = "{tmp_path}/o.vstm"
""")
    assert run(capsys, "train", "--config", path, "--deterministic")[0] == EXIT_OK
    bce = [float(r["bce"]) for r in csv.DictReader(open(tmp_path / "o.curve.csv"))]
    assert bce[-1] < 0.1 * bce[0]


def test_train_periodic_export(tiny, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("VISTA_OUTPUT__EXPORT_LOG", f'"{tmp_path / "export.log"}"')
    monkeypatch.setenv("VISTA_OUTPUT__EXPORT_EVERY", "2")
    monkeypatch.setenv("VISTA_OUTPUT__EXPORT_USERS", "3")
    code, out, _ = run(capsys, "train", "--config", tiny)
    assert code == EXIT_OK and json.loads(out)["exported"] == 9
    log = ExportLog.open(tmp_path / "export.log")
    assert [r.payload.version for r in log.read()] == [2, 2, 2, 4, 4, 4, 6, 6, 6]


def test_train_config_error_exit_code(tiny, capsys, monkeypatch):
    monkeypatch.setenv("VISTA_MODEL__D", "0")
    code, _, err = run(capsys, "train", "--config", tiny)
    assert code == EXIT_CONFIG and "d: must be >= 1" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_error_exit_code(tiny, capsys, monkeypatch):
    monkeypatch.setenv("VISTA_TRAIN__LR", "1e300")
    monkeypatch.setenv("VISTA_MODEL__EMB_INIT", "1e200")
    code, _, err = run(capsys, "train", "--config", tiny)
    assert code == EXIT_NUMERIC and "non-finite" in err


# -- eval / export / infer -------------------------------------------------------------

def test_eval_bayes_predictor_matches_recorded_auc(tiny, capsys, monkeypatch):
    monkeypatch.setenv("VISTA_DATA__SYNTHETIC__N_USERS", "400")
    code, out, _ = run(capsys, "eval", "--data", tiny, "--predictor", "bayes")
    report = json.loads(out)
    assert code == EXIT_OK
    assert abs(report["auc"] - report["bayes_auc"]) <= 0.02
    assert set(report) >= {"auc", "ne", "count", "buckets"}


def test_eval_checkpoint_on_csv(tiny, tmp_path, capsys):
    run(capsys, "train", "--config", tiny)
    from vista.data import write_csv
    ds = generate_dataset(load_config(tiny, environ={}).data.synthetic)
    write_csv(ds.batches, tmp_path / "d.csv")
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "m.vstm", "--data", tmp_path / "d.csv")
    assert code == EXIT_OK and json.loads(out)["count"] == 24 * 8


def test_eval_empty_data_is_numeric_error(tiny, tmp_path, capsys):
    empty = tmp_path / "e.csv"
    empty.write_text("label,user_id,item_id,cate_id,item_history,cate_history\n")
    code, _, err = run(capsys, "eval", "--data", empty, "--predictor", "model", "--checkpoint", "x")
    assert code == EXIT_NUMERIC


def test_io_errors(tiny, tmp_path, capsys):
    assert run(capsys, "eval", "--checkpoint", tmp_path / "nope.vstm", "--data", tiny)[0] == EXIT_IO
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    run(capsys, "train", "--config", tiny)
    req = tmp_path / "r.json"
    req.write_text("[]")
    assert run(capsys, "infer", "--cache", bad, "--requests", req, "--checkpoint", tmp_path / "m.vstm")[0] == EXIT_IO


@pytest.fixture
def exported(tiny, tmp_path, capsys):
    run(capsys, "train", "--config", tiny)
    code, out, _ = run(capsys, "export-cache", "--checkpoint", tmp_path / "m.vstm", "--data", tiny,
                       "--out", tmp_path / "snap.bin")
    assert code == EXIT_OK
    return json.loads(out)


def test_export_matches_direct_publish(tiny, tmp_path, capsys, exported):
    model = VistaModel.load(tmp_path / "m.vstm")
    cfg = load_config(tiny, environ={})
    _, eval_b = generate_dataset(cfg.data.synthetic).split(cfg.data.train_fraction)
    log, cache = ExportLog(), SummaryCache()
    for b in eval_b:
        publish(log, SummaryTokens(b.user_id, model.step, model.summary_tokens(b)))
    consume(log, cache)
    assert (tmp_path / "snap.bin").read_bytes() == snapshot_bytes(cache)
    assert exported["state_hash"] == cache.state_hash()


def test_infer_matches_full_pipeline(tiny, tmp_path, capsys, exported):
    model = VistaModel.load(tmp_path / "m.vstm")
    cfg = load_config(tiny, environ={})
    _, eval_b = generate_dataset(cfg.data.synthetic).split(cfg.data.train_fraction)
    requests = [{"user_id": b.user_id, "cand_items": b.cand_items.tolist(), "cand_cats": b.cand_cats.tolist()}
                for b in eval_b]
    (tmp_path / "req.json").write_text(json.dumps(requests))
    code, out, _ = run(capsys, "infer", "--cache", tmp_path / "snap.bin", "--requests", tmp_path / "req.json",
                       "--checkpoint", tmp_path / "m.vstm")
    assert code == EXIT_OK
    results = json.loads(out)["results"]
    for b, r in zip(eval_b, results):
        assert r["lag"] == 0
        assert np.max(np.abs(np.array(r["predictions"]) - model.predict_batch(b))) < 0.01


def test_infer_cold_user_and_staleness(tmp_path, capsys, exported):
    reqs = {"current_version": exported["version"] + 3,
            "requests": [{"user_id": "u20", "cand_items": [5], "cand_cats": [1]},
                         {"user_id": "ghost", "cand_items": [5], "cand_cats": [1]}]}
    (tmp_path / "req.json").write_text(json.dumps(reqs))
    args = ["infer", "--cache", tmp_path / "snap.bin", "--requests", tmp_path / "req.json",
            "--checkpoint", tmp_path / "m.vstm"]
    code, out, _ = run(capsys, *args)
    lenient = json.loads(out)["results"]
    assert code == EXIT_OK and lenient[0]["lag"] == 3 and "UserNotFound" in lenient[1]["error"]
    code, out, _ = run(capsys, *args, "--strict-staleness", "2")
    strict = json.loads(out)["results"]
    assert code == EXIT_OK and "StalenessExceeded" in strict[0]["error"]
    assert "UserNotFound" in strict[1]["error"]


def test_infer_candidate_independence(tmp_path, capsys, exported):
    rng = np.random.default_rng(0)
    items, cats = rng.integers(0, 300, 100).tolist(), rng.integers(0, 16, 100).tolist()
    reqs = [{"user_id": "u20", "cand_items": items, "cand_cats": cats},
            {"user_id": "u20", "cand_items": items[42:43], "cand_cats": cats[42:43]}]
    (tmp_path / "req.json").write_text(json.dumps(reqs))
    _, out, _ = run(capsys, "infer", "--cache", tmp_path / "snap.bin", "--requests", tmp_path / "req.json",
                    "--checkpoint", tmp_path / "m.vstm")
    crowd, alone = json.loads(out)["results"]
    assert crowd["predictions"][42] == alone["predictions"][0]


def test_infer_rejects_malformed_requests(tmp_path, capsys, exported):
    (tmp_path / "req.json").write_text(json.dumps([{"user_id": "u20", "cand_items": [1, 2], "cand_cats": [1]}]))
    code, _, _ = run(capsys, "infer", "--cache", tmp_path / "snap.bin", "--requests", tmp_path / "req.json",
                     "--checkpoint", tmp_path / "m.vstm")
    assert code == EXIT_CONFIG


# -- gradcheck / bench / generate -------------------------------------------------------

def test_gradcheck_kernel_suite(capsys):
    code, out, _ = run(capsys, "gradcheck", "--suite", "kernel", "--seeds", "2")
    report = json.loads(out)
    assert code == EXIT_OK and report["passed"] and report["suites"]["kernel"]["worst"] < 1e-6


def test_gradcheck_identity_subset_is_tighter(capsys):
    code, out, _ = run(capsys, "gradcheck", "--suite", "kernel", "--seeds", "3", "--activations", "identity")
    assert code == EXIT_OK and json.loads(out)["suites"]["kernel"]["worst"] < 1e-8


def test_gradcheck_reports_corrupted_tensor(capsys):
    code, out, _ = run(capsys, "gradcheck", "--suite", "kernel", "--seeds", "1", "--corrupt", "kt")
    report = json.loads(out)
    assert code == EXIT_CHECK and not report["passed"]
    assert {f["tensor"] for f in report["failures"]} == {"kt"}


def test_bench_small_grid(tmp_path, capsys):
    code, out, err = run(capsys, "bench", "--grid", "64,128", "--reps", "2", "--d", "8", "--out", tmp_path / "b.csv")
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert {r["kernel"] for r in rows} == {"qla", "softmax", "cached", "full"}
    assert all(float(r["wall_time"]) > 0 and int(r["peak_alloc"]) > 0 for r in rows)
    assert "qla_slope" in json.loads(err.strip().splitlines()[-1])


def test_generate_writes_csv(tiny, tmp_path, capsys):
    code, out, _ = run(capsys, "generate", "--config", tiny, "--out", tmp_path / "g.csv")
    assert code == EXIT_OK and json.loads(out)["rows"] == 24 * 8
