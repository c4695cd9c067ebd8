import csv
import json
import struct

import numpy as np
import pytest

from grade import cli
from grade.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from grade.dyngraph import read_graph
from grade.inference import GradeModel, TrainConfig, project_future, train_state
from grade.metrics import nmi


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def easy(tmp_path_factory):
    root = tmp_path_factory.mktemp("easy")
    assert run("synth", "--preset", "sbm-easy", "--seed", 0, "--out", root / "syn") == 0
    assert run("ingest", "--input", root / "syn/edges.tsv", "--labels", root / "syn/labels.tsv",
               "--out", root / "g") == 0
    return root


def _small_synth(root, **flags):
    args = ["synth", "--preset", "sbm-easy", "--N", 40, "--T", 4, "--out", root / "syn"]
    for k, v in flags.items():
        args += [f"--{k.replace('_', '-')}", v]
    assert run(*args) == 0
    assert run("ingest", "--input", root / "syn/edges.tsv", "--labels", root / "syn/labels.tsv",
               "--out", root / "g") == 0
    return root / "g"


# ---------------------------------------------------------------- checkpoint

def _tiny_model():
    cfg = TrainConfig(K=2, gamma=0.2, sigma=0.3, L=3, H=2, seed=4)
    return GradeModel.init(5, cfg)


def test_checkpoint_round_trip(tmp_path):
    m = _tiny_model()
    state = train_state(m, 2)
    save_checkpoint(tmp_path / "m.ckpt", m, state, (2, 1, 1), {"note": "x"})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.split == (2, 1, 1) and ck.extra == {"note": "x"}
    assert ck.model.config == m.config
    for name, p in m.named_parameters().items():
        assert np.array_equal(ck.model.named_parameters()[name].value, p.value)
    assert ck.state.t == 2 and np.array_equal(ck.state.pi, state.pi)
    a = project_future(m, state, 2)[-1]
    b = project_future(ck.model, ck.state, 2)[-1]
    assert np.array_equal(a.pi, b.pi) and np.array_equal(a.theta, b.theta)


def test_checkpoint_layout_is_little_endian_float64(tmp_path):
    m = _tiny_model()
    save_checkpoint(tmp_path / "m.ckpt", m, train_state(m, 1), (1, 0, 0))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    entry = next(e for e in header["arrays"] if e["name"] == "phi0")
    assert entry["shape"] == [5, 3]
    data = np.frombuffer(raw[16 + n:], dtype="<f8", count=15, offset=entry["offset"])
    assert np.array_equal(data.reshape(5, 3), m.gen.phi0.value)


def test_checkpoint_version_mismatch_fails_loudly(tmp_path):
    m = _tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, train_state(m, 1), (1, 0, 0))
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    header["format_version"] = 99
    blob = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + raw[16 + n:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "junk")


# -------------------------------------------------------------------- ingest

def test_ingest_toy_file(tmp_path):
    (tmp_path / "toy.tsv").write_text("a\tb\t1\nb\tc\t1\na\tc\t2\n")
    assert run("ingest", "--input", tmp_path / "toy.tsv", "--out", tmp_path / "g") == 0
    stats = json.loads((tmp_path / "g/stats.json").read_text())
    assert stats["nodes"] == 3 and stats["links"] == 3
    assert 0.0 <= stats["node_activity"] <= 1.0
    assert (tmp_path / "g/vocab.tsv").read_text() == "a\t0\nb\t1\nc\t2\n"


def test_ingest_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.tsv").write_text("a\tb\t1\nbroken\n")
    assert run("ingest", "--input", tmp_path / "bad.tsv", "--out", tmp_path / "g") != 0
    assert "line 2" in capsys.readouterr().err


def test_stats_verb(easy, capsys):
    assert run("stats", "--graph", easy / "g") == 0
    stats = json.loads(capsys.readouterr().out)
    assert set(stats) == {"nodes", "links", "node_activity", "context_dynamics"}


# --------------------------------------------------------------------- synth

def test_synth_round_trips_and_edge_count(easy):
    g = read_graph(easy / "g/graph.tsv")
    # intra pairs 4*50*49*0.3 plus inter pairs 200*150*0.01 per step
    expected = 5 * (4 * 50 * 49 * 0.3 + 200 * 150 * 0.01)
    assert abs(g.n_links / expected - 1) < 0.10
    assert len(g.labels) == 200 * 5


def test_synth_seed_gives_identical_files(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--N", 30, "--seed", 3, "--out", tmp_path / name) == 0
    for f in ("edges.tsv", "labels.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_zero_drift_constant_labels(tmp_path):
    assert run("synth", "--N", 30, "--drift", 0, "--out", tmp_path) == 0
    by_vertex = {}
    for line in (tmp_path / "labels.tsv").read_text().splitlines():
        v, _, lab = line.split("\t")
        by_vertex.setdefault(v, set()).add(lab)
    assert all(len(labs) == 1 for labs in by_vertex.values())


def test_synth_bad_config_exit_code(tmp_path):
    assert run("synth", "--p-in", 0.01, "--p-out", 0.5, "--out", tmp_path) != 0


# --------------------------------------------------------------------- train

def _train(graph_dir, out, *extra):
    return run("train", "--graph", graph_dir, "--split", "2,1,1", "--K", 2, "--gamma", 0.1, "--sigma", 0.1,
               "--L", 8, "--out", out, *extra)


def test_train_zero_epochs_equals_init(tmp_path):
    g = _small_synth(tmp_path)
    assert _train(g, tmp_path / "run", "--epochs", 0, "--seed", 5) == 0
    ck = load_checkpoint(tmp_path / "run/checkpoint_final.ckpt")
    init = GradeModel.init(40, ck.model.config)
    for name, p in init.named_parameters().items():
        assert np.array_equal(ck.model.named_parameters()[name].value, p.value)
    assert (tmp_path / "run/loss.csv").read_text() == "iteration,step_t,loss\n"


def test_train_requires_hyperparameters(tmp_path, capsys):
    g = _small_synth(tmp_path)
    assert run("train", "--graph", g, "--split", "2,1,1", "--out", tmp_path / "run") != 0
    assert "gamma" in capsys.readouterr().err


def test_config_file_precedence(tmp_path):
    g = _small_synth(tmp_path)
    (tmp_path / "cfg.yaml").write_text("epochs: 3\nK: 2\ngamma: 0.1\nsigma: 0.1\nL: 8\nsplit: 2,1,1\n")
    assert run("train", "--graph", g, "--config", tmp_path / "cfg.yaml", "--out", tmp_path / "a") == 0
    assert run("train", "--graph", g, "--config", tmp_path / "cfg.yaml", "--epochs", 1,
               "--out", tmp_path / "b") == 0
    a = load_checkpoint(tmp_path / "a/checkpoint_final.ckpt")
    b = load_checkpoint(tmp_path / "b/checkpoint_final.ckpt")
    assert a.model.config.epochs == 3 and b.model.config.epochs == 1
    assert a.model.config.L == 8 and a.model.config.learning_rate == 0.005
    (tmp_path / "cfg.json").write_text(json.dumps({"epochs": 2, "K": 2, "gamma": 0.1, "sigma": 0.1, "L": 8}))
    assert run("train", "--graph", g, "--config", tmp_path / "cfg.json", "--split", "2,1,1",
               "--out", tmp_path / "c") == 0
    assert load_checkpoint(tmp_path / "c/checkpoint_final.ckpt").model.config.epochs == 2


def test_train_and_eval_are_byte_deterministic(tmp_path):
    g = _small_synth(tmp_path)
    for name in ("a", "b"):
        assert _train(g, tmp_path / name, "--epochs", 4, "--seed", 2) == 0
        assert run("eval", "--checkpoint", tmp_path / name / "checkpoint_best.ckpt", "--graph", g,
                   "--out", tmp_path / name) == 0
    for f in ("loss.csv", "metrics.json", "checkpoint_best.ckpt", "checkpoint_final.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    report = json.loads((tmp_path / "a/metrics.json").read_text())
    assert {"mar", "nmi", "modularity", "topk_spearman", "per_step"} <= set(report)
    assert 1.0 <= report["mar"] <= 40
    with open(tmp_path / "a/loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == list(range(len(rows)))
    assert {r["step_t"] for r in rows} == {"1", "2"}


# ---------------------------------------------------------------------- eval

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    g = _small_synth(root)
    assert _train(g, root / "run", "--epochs", 3) == 0
    return root


def test_eval_perfect_oracle_mar_one_on_single_target_sources(tmp_path):
    (tmp_path / "e.tsv").write_text("".join(f"{v}\t{(v + 1) % 6}\t{t}\n" for t in (1, 2, 3) for v in range(6)))
    assert run("ingest", "--input", tmp_path / "e.tsv", "--out", tmp_path / "g") == 0
    assert run("train", "--graph", tmp_path / "g", "--split", "1,1,1", "--K", 2, "--gamma", 0.1,
               "--sigma", 0.1, "--L", 4, "--epochs", 1, "--out", tmp_path / "run") == 0
    g = read_graph(tmp_path / "g/graph.tsv")
    target = dict(g.snapshot(3).edges.tolist())

    def oracle_factory(step):
        return lambda sources: np.eye(g.N)[[target[v] for v in sources]]

    cfg = {"checkpoint": tmp_path / "run/checkpoint_best.ckpt", "graph": tmp_path / "g", "split": None,
           "top_k": 250, "out": tmp_path / "ev"}
    report = cli.cmd_eval(cfg, scorer=oracle_factory)
    assert report["mar"] == 1.0
    # unlabeled dataset: nmi omitted, warning present
    assert "nmi" not in report and any("nmi" in w for w in report["warnings"])
    assert run("eval", "--checkpoint", cfg["checkpoint"], "--graph", tmp_path / "g", "--out", tmp_path / "ev2") == 0
    saved = json.loads((tmp_path / "ev2/metrics.json").read_text())
    assert "nmi" not in saved and "warnings" in saved


def test_eval_split_must_match_checkpoint(small_run):
    assert run("eval", "--checkpoint", small_run / "run/checkpoint_best.ckpt", "--graph", small_run / "g",
               "--split", "1,2,1", "--out", small_run / "x") != 0


# ------------------------------------------------------------ project / top

def test_project_writes_npz(small_run):
    assert run("project", "--checkpoint", small_run / "run/checkpoint_best.ckpt", "--steps", 3,
               "--out", small_run / "proj") == 0
    data = np.load(small_run / "proj/projection.npz")
    assert data["t"].tolist() == [3, 4, 5]
    assert data["pi"].shape == (3, 40, 2) and data["theta"].shape == (3, 2, 40)
    assert np.allclose(data["pi"].sum(axis=-1), 1.0, atol=1e-6)


def _read_top(path):
    with open(path) as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def test_top_nodes_contract(small_run):
    assert run("top-nodes", "--checkpoint", small_run / "run/checkpoint_best.ckpt", "--graph", small_run / "g",
               "--step", 4, "--k", 1, "--out", small_run / "top1") == 0
    rows = _read_top(small_run / "top1/top_nodes.tsv")
    assert [r["community"] for r in rows] == ["0", "1"]
    assert run("top-nodes", "--checkpoint", small_run / "run/checkpoint_best.ckpt", "--graph", small_run / "g",
               "--step", 2, "--k", 8, "--out", small_run / "top8") == 0
    rows = _read_top(small_run / "top8/top_nodes.tsv")
    for comm in ("0", "1"):
        probs = [float(r["probability"]) for r in rows if r["community"] == comm]
        assert len(probs) == 8 and all(a >= b for a, b in zip(probs, probs[1:]))


def test_top_nodes_step_out_of_range(small_run, capsys):
    assert run("top-nodes", "--checkpoint", small_run / "run/checkpoint_best.ckpt", "--step", 9,
               "--out", small_run / "bad") != 0
    assert "projectable range" in capsys.readouterr().err


def test_top_nodes_follow_planted_communities(tmp_path):
    g_dir = _small_synth(tmp_path, p_out=0.0, K=2, N=60, seed=3)
    assert run("train", "--graph", g_dir, "--split", "2,1,1", "--K", 2, "--gamma", 0.1, "--sigma", 0.1,
               "--L", 64, "--epochs", 150, "--eval-every", 10, "--out", tmp_path / "run") == 0
    assert run("top-nodes", "--checkpoint", tmp_path / "run/checkpoint_best.ckpt", "--graph", g_dir,
               "--step", 2, "--k", 1, "--out", tmp_path / "top") == 0
    g = read_graph(g_dir / "graph.tsv")
    vocab = dict(line.split("\t") for line in (g_dir / "vocab.tsv").read_text().splitlines())
    rows = _read_top(tmp_path / "top/top_nodes.tsv")
    top = [int(vocab[r["vertex"]]) for r in rows]
    planted = [g.labels[(v, 2)] for v in top]
    # each community's top node sits in a different planted community
    assert len(set(planted)) == 2
    ck = load_checkpoint(tmp_path / "run/checkpoint_best.ckpt")
    pi2 = train_state(ck.model, 2).pi.argmax(axis=1)
    truth = [g.labels[(v, 2)] for v in range(g.N)]
    assert nmi(pi2, truth) > 0.9
    for comm, v in enumerate(top):
        members = [u for u in range(g.N) if pi2[u] == comm]
        assert g.labels[(v, 2)] == np.bincount([truth[u] for u in members]).argmax()


# -------------------------------------------------------------- training run

def test_easy_instance_loss_drops_by_thirty_percent(easy):
    out = easy / "train200"
    assert run("train", "--graph", easy / "g", "--preset", "sbm-easy", "--epochs", 200, "--eval-every", 10,
               "--out", out) == 0
    with open(out / "loss.csv") as fh:
        loss = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
    smooth = np.convolve(loss, np.ones(50) / 50, mode="valid")
    assert (smooth[0] - smooth[-1]) / smooth[0] >= 0.30
