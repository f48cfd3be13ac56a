import numpy as np
import pytest

from gpq import cli
from gpq.bench import FlopsConfig, count_flops
from gpq.checkpoint import load_checkpoint
from gpq.fileio import read_csv
from gpq.pruning import PruneReport

TINY = ["--queries", "64", "--embed-dim", "8", "--value-dim", "8", "--hidden-dim", "16", "--heads", "2",
        "--grid", "4", "--layers", "1", "--train-scenes", "40", "--eval-scenes", "20", "--batch-size", "2"]


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert _run("train", *TINY, "--iterations", 20, "--out", out, "--seed", 3) == 0
    return out


class TestGenData:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert _run("gen-data", "--seed", 7, "--scenes", 1000, "--out", tmp_path / name) == 0
        a, b = (tmp_path / n / "scenes.csv" for n in ("a", "b"))
        assert a.read_bytes() == b.read_bytes()
        _, rows = read_csv(a)
        assert len({r[0] for r in rows}) <= 1000

    def test_seed_changes_data(self, tmp_path):
        _run("gen-data", "--seed", 1, "--scenes", 50, "--out", tmp_path / "a")
        _run("gen-data", "--seed", 2, "--scenes", 50, "--out", tmp_path / "b")
        assert (tmp_path / "a/scenes.csv").read_bytes() != (tmp_path / "b/scenes.csv").read_bytes()


class TestManifest:
    def test_contents(self, tmp_path):
        _run("gen-data", "--seed", 5, "--scenes", 30, "--out", tmp_path)
        text = (tmp_path / "manifest.txt").read_text()
        assert "seed=5\n" in text and "scenes=30\n" in text and "task=gen-data\n" in text
        assert "artifact.scenes.csv=" in text

    def test_rerun_from_manifest(self, trained, tmp_path):
        assert _run("train", "--config", trained / "manifest.txt", "--out", tmp_path) == 0
        for name in ("model.gpq", "train_log.csv"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


class TestConfigPrecedence:
    def _cfg(self, *argv):
        return cli.resolve(cli.build_parser().parse_args([str(a) for a in argv]))

    def test_default(self):
        cfg = self._cfg("train")
        assert cfg.queries == 64 and cfg.resolved_lr() == 4e-3

    def test_prune_default_lr_is_half(self, trained):
        cfg = self._cfg("prune", "--checkpoint", trained / "model.gpq", "--final-queries", 16)
        assert cfg.resolved_lr() == 2e-3

    def test_file_over_default_and_flag_over_file(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# comment\nqueries = 32\nseed=4  # trailing\none_shot=true\nnq=900,300\n")
        cfg = self._cfg("train", "--config", path)
        assert (cfg.queries, cfg.seed, cfg.one_shot, cfg.nq) == (32, 4, True, [900, 300])
        cfg = self._cfg("train", "--config", path, "--queries", 48)
        assert (cfg.queries, cfg.seed) == (48, 4)


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "c.txt"
        path.write_text("seed=1\nbogus=3\n")
        assert _run("train", "--config", path) == cli.EXIT_CONFIG
        assert "c.txt:2" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["train", "--queries", "0"],
        ["train", "--heads", "3"],
        ["train", "--criterion", "random"],
        ["train", "--lr", "-1"],
        ["train", "--queries", "abc"],
        ["bench", "--trials", "5"],
        ["prune", "--final-queries", "16"],
        ["eval", "--checkpoint", "/no/such/file.gpq"],
    ])
    def test_config_errors(self, argv, tmp_path):
        assert _run(*argv, "--out", tmp_path) == cli.EXIT_CONFIG

    def test_prune_needs_target(self, trained, tmp_path):
        assert _run("prune", "--checkpoint", trained / "model.gpq", "--out", tmp_path) == cli.EXIT_CONFIG

    def test_corrupt_checkpoint_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.gpq"
        bad.write_bytes(b"NOPE" + bytes(20))
        assert _run("eval", "--checkpoint", bad, "--out", tmp_path) == cli.EXIT_RUNTIME
        assert "error" in capsys.readouterr().err


class TestTasks:
    def test_prune_to_sixteen(self, trained, tmp_path):
        rc = _run("prune", "--checkpoint", trained / "model.gpq", "--final-queries", 16, "--interval", 10,
                  "--iterations", 480, "--train-scenes", 40, "--batch-size", 1, "--out", tmp_path)
        assert rc == 0
        events = PruneReport.read_events(tmp_path / "prune_report.csv")
        assert [e.iteration for e in events] == list(range(10, 490, 10))
        model = load_checkpoint(tmp_path / "model.gpq")
        assert model.bank.size == 16
        _, rows = read_csv(tmp_path / "reference_points.csv")
        assert sum(int(r[-1]) for r in rows) == 16
        rc = _run("analyze", "--checkpoint", tmp_path / "model.gpq", "--report", tmp_path / "prune_report.csv",
                  "--eval-scenes", 5, "--out", tmp_path / "analysis")
        assert rc == 0
        assert (tmp_path / "analysis/prune_trace.png").stat().st_size > 0

    def test_bench_flops_ratio(self, tmp_path, capsys):
        assert _run("bench", "--flops", "--nq", 900, "--nq", 300, "--out", tmp_path) == 0
        _, rows = read_csv(tmp_path / "flops_summary.csv")
        cfg = cli.RunConfig().model_config()
        expect = [count_flops(FlopsConfig(n, cfg.num_keys, cfg.embed_dim, cfg.value_dim, cfg.hidden_dim, cfg.heads,
                                          cfg.num_layers, cfg.num_classes, 4 * cfg.frequencies)).total
                  for n in (900, 300)]
        assert [int(r[1]) for r in rows] == expect
        assert float(rows[1][3]) == pytest.approx(100 * (1 - expect[1] / expect[0]), abs=0.005)
        assert (tmp_path / "flops.png").stat().st_size > 0
        assert "nq=300" in capsys.readouterr().out

    def test_bench_latency(self, tmp_path):
        argv = ["bench", "--latency", "--nq", 8, "--nq", 4, "--embed-dim", 8, "--value-dim", 8, "--hidden-dim", 16,
                "--heads", 2, "--grid", 4, "--latency-scenes", 1, "--out", tmp_path]
        assert _run(*argv) == 0
        _, rows = read_csv(tmp_path / "latency.csv")
        assert [int(r[0]) for r in rows] == [8, 4]
        assert (tmp_path / "latency.png").exists()

    def test_eval(self, trained, tmp_path, capsys):
        assert _run("eval", "--checkpoint", trained / "model.gpq", "--eval-scenes", 10, "--out", tmp_path) == 0
        assert capsys.readouterr().out.startswith("mAP=")
        assert (tmp_path / "eval.csv").exists()

    def test_analyze(self, trained, tmp_path):
        rc = _run("analyze", "--checkpoint", trained / "model.gpq", "--eval-scenes", 20, "--topk", 10,
                  "--compare", trained / "model.gpq", "--out", tmp_path)
        assert rc == 0
        _, rows = read_csv(tmp_path / "frequency.csv")
        counts = [int(r[1]) for r in rows]
        assert sum(counts) == 200 and counts == sorted(counts)
        for name in ("frequency.png", "reference_points.png"):
            assert (tmp_path / name).stat().st_size > 0

    def test_train_with_pruning(self, tmp_path):
        rc = _run("train", *TINY, "--iterations", 40, "--final-queries", 16, "--interval", 1, "--per-event-k", 6,
                  "--out", tmp_path)
        assert rc == 0
        assert load_checkpoint(tmp_path / "model.gpq").bank.size == 16
        events = PruneReport.read_events(tmp_path / "prune_report.csv")
        assert sum(len(e.removed) for e in events) == 48
        assert np.all(np.diff([e.iteration for e in events]) > 0)
