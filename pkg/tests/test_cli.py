import json

import pytest

from fedlora.cli import _flag_parser, main, parse_config, resolve
from fedlora.config import CONFIG_KEYS, ConfigError, to_flat

SMALL = {"dataset": {"classes": 3, "per_class": 20, "eval_per_class": 10, "dim": 8},
         "training": {"learning_rate": 0.01}, "rounds": 2}


@pytest.fixture
def small_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config([], env={})
        assert (cfg.strategy, cfg.clients, cfg.rank, cfg.rounds, cfg.partition, cfg.seed) == \
            ("fedavg", 2, 4, 30, "iid", 42)
        assert cfg.noise is None and cfg.threads == 1

    def test_overrides_reach_echo(self):
        echo = to_flat(parse_config(["--strategy", "fra", "--rank", "8"], env={}))
        assert echo["strategy"] == "fra" and echo["rank"] == 8

    def test_table_preset_from_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"partition": "label-skew", "label_weights": "ternary-70-20-20"}))
        cfg = parse_config([], path, env={})
        assert [list(r) for r in cfg.label_weights] == [[0.7, 0.3], [0.2, 0.8], [0.2, 0.8]]

    def test_explicit_matrix_and_nested_sections(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"partition": "label-skew", "label_weights": [[0.9, 0.1], [0.1, 0.9]],
                                    "dataset": {"classes": 2}, "training.weight_decay": 0.0}))
        cfg = parse_config([], path, env={})
        assert cfg.label_weights == ((0.9, 0.1), (0.1, 0.9))
        assert cfg.dataset.classes == 2 and cfg.training.weight_decay == 0.0

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"learning_rate": 0.1}))
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config([], path, env={})

    @pytest.mark.parametrize("flags, key", [(["--rank", "0"], "rank"), (["--clients", "0"], "clients"),
                                            (["--rounds", "-1"], "rounds"), (["--noise-scale", "0"], "noise.scale"),
                                            (["--partition", "label-skew"], "label_weights")])
    def test_invalid_values_name_the_key(self, flags, key):
        with pytest.raises(ConfigError) as info:
            parse_config(flags, env={})
        assert info.value.key == key

    def test_noise_flags(self):
        cfg = parse_config(["--noise-scale", "0.5", "--noise-dist", "laplace", "--seed", "3"], env={})
        assert (cfg.noise.distribution, cfg.noise.scale, cfg.noise.seed) == ("laplace", 0.5, 3)

    def test_threads_env_fallback(self):
        assert parse_config([], env={"FEDLORA_THREADS": "3"}).threads == 3
        assert parse_config(["--threads", "2"], env={"FEDLORA_THREADS": "3"}).threads == 2

    def test_threads_env_must_be_integer(self):
        with pytest.raises(ConfigError, match="threads"):
            parse_config([], env={"FEDLORA_THREADS": "many"})


# Two distinct non-default values per flag-settable key.
FLAG_CASES = {
    "strategy": ("--strategy", "ffa", "fra"),
    "clients": ("--clients", 3, 4),
    "rank": ("--rank", 2, 8),
    "rounds": ("--rounds", 5, 7),
    "partition": ("--partition", "label-skew", "iid"),
    "noise.scale": ("--noise-scale", 0.25, 0.5),
    "noise.distribution": ("--noise-dist", "laplace", "gaussian"),
    "seed": ("--seed", 1, 2),
    "out": ("--out", "from_file", "from_flag"),
    "threads": ("--threads", 2, 3),
}


# Non-default values for keys that only a config file can set.
FILE_CASES = {
    "dataset.classes": 4, "dataset.per_class": 50, "dataset.eval_per_class": 20, "dataset.dim": 16,
    "dataset.separation": 3.0, "dataset.path": "train.csv", "dataset.eval_path": "eval.csv",
    "label_weights": [[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]], "noise.seed": 9, "scaling": 2.0, "trace": True,
    "training.batch_size": 4, "training.learning_rate": 0.01, "training.local_epochs": 2,
    "training.max_steps_per_epoch": 10, "training.weight_decay": 0.0,
}


def echo(flags=None, file_values=None):
    return to_flat(resolve(flags or {}, file_values or {}, env={}))


class TestPrecedence:
    @pytest.mark.parametrize("key", sorted(FLAG_CASES))
    def test_flag_beats_file_beats_default(self, key):
        flag, file_value, flag_value = FLAG_CASES[key]
        base = {}
        if key == "partition":
            base = {"label_weights": "binary-90-10", "dataset.classes": 2}
        elif key == "noise.distribution":
            base = {"noise.scale": 1.0}
        flags = vars(_flag_parser().parse_args([flag, str(flag_value)]))
        assert echo(file_values={**base, key: file_value})[key] == file_value != echo(file_values=base)[key]
        assert echo(flags, {**base, key: file_value})[key] == flag_value

    def test_every_key_is_covered(self):
        assert set(FLAG_CASES) | set(FILE_CASES) == set(CONFIG_KEYS)

    @pytest.mark.parametrize("key", sorted(FILE_CASES))
    def test_file_beats_default(self, key):
        base = {"noise.scale": 1.0} if key == "noise.seed" else {}
        assert echo(file_values={**base, key: FILE_CASES[key]})[key] == FILE_CASES[key] != echo(file_values=base)[key]

    def test_env_sits_between_file_and_flag(self):
        assert resolve({}, {"threads": 5}, env={"FEDLORA_THREADS": "3"}).threads == 3
        assert resolve({"threads": 2}, {"threads": 5}, env={"FEDLORA_THREADS": "3"}).threads == 2


class TestMain:
    def test_run_writes_files(self, small_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run", "--config", str(small_file), "--out", str(out)]) == 0
        assert (tmp_path / "run.csv").exists() and (tmp_path / "run.json").exists()
        assert capsys.readouterr().out.startswith("fedavg: best accuracy ")

    def test_rank_zero_exit_code(self, capsys):
        assert main(["run", "--rank", "0"]) == 2
        assert "rank" in capsys.readouterr().err

    def test_bad_config_file_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path)]) == 2
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2

    def test_runtime_failure_exit_code(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        # More clients than training samples cannot be partitioned.
        path.write_text(json.dumps({**SMALL, "clients": 100, "dataset": {**SMALL["dataset"], "per_class": 2}}))
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 3
        assert "error" in capsys.readouterr().err

    def test_io_failure_exit_code(self, small_file, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert main(["run", "--config", str(small_file), "--out", str(blocker / "sub" / "m")]) == 4
        assert "blocker" in capsys.readouterr().err

    def test_missing_dataset_file_is_io_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**SMALL, "dataset": {"path": str(tmp_path / "nope.csv"),
                                                         "eval_path": str(tmp_path / "nope.csv")}}))
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 4

    def test_identical_seeds_identical_summary(self, small_file, tmp_path, capsys):
        main(["run", "--config", str(small_file), "--out", str(tmp_path / "a")])
        first = capsys.readouterr().out
        main(["run", "--config", str(small_file), "--out", str(tmp_path / "b")])
        assert capsys.readouterr().out == first

    def test_compare_merges_strategies(self, small_file, tmp_path, capsys):
        assert main(["compare", "--config", str(small_file), "--out", str(tmp_path / "cmp")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split(":")[0] for line in lines] == ["fedavg", "ffa", "fra"]
        rows = (tmp_path / "cmp.csv").read_text().splitlines()
        assert len(rows) == 1 + 3 * 2 * 2

    def test_trace_files(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**SMALL, "trace": True}))
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "t")]) == 0
        assert sorted(p.name for p in tmp_path.glob("t_trace_*")) == ["t_trace_r001_l0.txt", "t_trace_r002_l0.txt"]
