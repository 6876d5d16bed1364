import csv
import filecmp
import textwrap

import pytest

from gna import cli
from gna import data as D
from gna.config import parse_config
from gna.errors import ValidationError

TINY = textwrap.dedent("""\
    [model]
    feature_channels = 4
    [gna]
    gammas = 1, 2
    samples_per_focus = 4
    test_repeats = 2
    [data]
    height = 16
    width = 16
    frames = 3
    r_max = 2.0
    min_separation = 3
    people_min = 1
    people_max = 3
    count = {count}
    [train]
    epochs = 1
    lr = 0.01
    batch_size = 2
    data_dir = corpus
    [eval]
    data_dir = corpus
    checkpoint = run/model.ckpt
    bench_grids = 4, 8
    bench_repeats = 1
    bound_trials = 50
""")


@pytest.fixture
def conf(tmp_path):
    def make(count=1, extra=""):
        p = tmp_path / "run.cfg"
        p.write_text(TINY.format(count=count) + extra)
        return str(p)
    return make


def rows(path):
    with open(path) as fp:
        return list(csv.DictReader(line for line in fp if not line.startswith("#")))


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.model.gna.gammas == (3.0, 5.0, 10.0) and cfg.train.epochs == 30

    def test_unknown_section(self):
        with pytest.raises(ValidationError):
            parse_config("[extra]\na = 1\n")

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            parse_config("[train]\nlearning = 1\n")

    def test_bad_value(self):
        with pytest.raises(ValidationError):
            parse_config("[model]\nclip_length = 2\n")
        with pytest.raises(ValidationError):
            parse_config("[train]\nepochs = many\n")


class TestGenData:
    def test_single_video(self, conf, tmp_path):
        assert cli.main(["gen-data", "--config", conf(1), "--out", str(tmp_path / "corpus")]) == 0
        assert len(D.list_video_dirs(tmp_path / "corpus")) == 1
        man = rows(tmp_path / "corpus" / cli.MANIFEST)
        assert len(man) == 1 and man[0]["video"] == "video_0000"

    def test_byte_identical(self, conf, tmp_path):
        c = conf(3)
        for d in ("a", "b"):
            assert cli.main(["gen-data", "--config", c, "--seed", "5", "--out", str(tmp_path / d)]) == 0
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for sub in cmp.common_dirs:
            assert not filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub).diff_files

    def test_parallel_matches_serial(self, conf, tmp_path, monkeypatch):
        c = conf(3)
        cli.main(["gen-data", "--config", c, "--out", str(tmp_path / "a")])
        monkeypatch.setenv("GNA_THREADS", "2")
        cli.main(["gen-data", "--config", c, "--out", str(tmp_path / "b")])
        for sub in ("video_0000", "video_0002"):
            assert not filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub).diff_files

    def test_manifest_matches_rescan(self, conf, tmp_path):
        cli.main(["gen-data", "--config", conf(4), "--out", str(tmp_path / "c")])
        man = rows(tmp_path / "c" / cli.MANIFEST)
        rescan = [D.head_count(D.load_annotations(d / D.ANNOTATION_FILE)) for d in D.list_video_dirs(tmp_path / "c")]
        assert [int(r["heads"]) for r in man] == rescan
        assert sum(rescan) > 0

    def test_seed_in_headers(self, conf, tmp_path):
        cli.main(["gen-data", "--config", conf(1), "--seed", "77", "--out", str(tmp_path / "c")])
        assert "seed=77" in (tmp_path / "c" / cli.MANIFEST).read_text().splitlines()[0]
        assert "seed=77" in (tmp_path / "c" / "video_0000" / D.ANNOTATION_FILE).read_text().splitlines()[0]


class TestPipeline:
    def test_train_eval_plot(self, conf, tmp_path):
        c = conf(1)
        assert cli.main(["gen-data", "--config", c, "--out", str(tmp_path / "corpus")]) == 0
        assert cli.main(["train", "--config", c, "--out", str(tmp_path / "run")]) == 0
        log = rows(tmp_path / "run" / "train_log.csv")
        assert [r["epoch"] for r in log] == ["1"]
        assert cli.main(["eval", "--config", c, "--out", str(tmp_path / "run")]) == 0
        metrics = rows(tmp_path / "run" / "metrics.csv")
        assert {r["level"] for r in metrics} >= {"0.50", "0.95", "mean", "MAE", "MSE"}
        csvs = [str(tmp_path / "run" / n) for n in ("train_log.csv", "metrics.csv")]
        assert cli.main(["plot", *csvs, "--config", c, "--out", str(tmp_path / "plots")]) == 0
        svg = (tmp_path / "plots" / "train_log.svg").read_text()
        assert svg.startswith("<svg") and "seed=0" in svg

    def test_eval_without_checkpoint(self, conf, tmp_path):
        c = conf(1)
        cli.main(["gen-data", "--config", c, "--out", str(tmp_path / "corpus")])
        assert cli.main(["eval", "--config", c, "--out", str(tmp_path / "x")]) == 3


class TestOtherCommands:
    def test_verify_bound(self, conf, tmp_path):
        c = conf(1, "")
        assert cli.main(["verify-bound", "--config", c, "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["verify-bound", "--config", c, "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "bound.csv").read_bytes() == (tmp_path / "b" / "bound.csv").read_bytes()
        assert len(rows(tmp_path / "a" / "bound.csv")) == 50

    def test_verify_bound_default_trials(self, tmp_path):
        p = tmp_path / "empty.cfg"
        p.write_text("")
        assert cli.main(["verify-bound", "--config", str(p), "--out", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "bound.csv")) == 1000

    def test_bench_attn(self, conf, tmp_path):
        assert cli.main(["bench-attn", "--config", conf(), "--out", str(tmp_path)]) == 0
        r = rows(tmp_path / "bench_attn.csv")
        assert {x["kernel"] for x in r} == {"full", "gna", "gna_test", "local"}
        assert all(float(x["error_vs_full"]) == 0.0 for x in r if x["kernel"] == "full")
        assert cli.main(["plot", str(tmp_path / "bench_attn.csv"), "--config", conf(), "--out", str(tmp_path)]) == 0

    def test_plot_empty_csv(self, conf, tmp_path, capsys):
        (tmp_path / "empty.csv").write_text("")
        assert cli.main(["plot", str(tmp_path / "empty.csv"), "--config", conf(), "--out", str(tmp_path)]) == 2
        assert "empty" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_config_arg(self):
        assert cli.main(["train"]) == 1

    def test_unknown_command(self, conf):
        assert cli.main(["fly", "--config", conf()]) == 1

    def test_positional_on_wrong_command(self, conf, tmp_path):
        assert cli.main(["train", "x.csv", "--config", conf(), "--out", str(tmp_path)]) == 1

    def test_invalid_config(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[model]\nclip_length = 4\n")
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 3

    def test_missing_training_data(self, conf, tmp_path):
        assert cli.main(["train", "--config", conf(), "--out", str(tmp_path / "o")]) == 3
