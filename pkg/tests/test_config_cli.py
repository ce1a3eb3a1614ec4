"""
Test suite for configuration parsing, run artifacts, the attack pipeline
and the command-line runner.
"""

from datetime import datetime

import numpy as np
import pytest

from src.analysis import TheoremReport
from src.autodiff import Tensor
from src.config import OPTIONS, ExperimentConfig, describe_options, parse_config, parse_config_text
from src.errors import ValidationError
from src.experiments import LM_GRID, AttackPipeline, SweepCell, noise_cells, run_cells
from src.main import COMMANDS, run
from src.models import batch_gradient
from src.persistence import (
    create_run_dir,
    read_checkpoint,
    read_csv,
    read_key_values,
    read_tensor,
    write_checkpoint,
    write_csv,
    write_key_values,
)

TINY_CONFIG = """
# small enough for a unit test
dataset_size = 8
image_side = 4
model = mlp-2
num_classes = 2
T = 10
max_snapshots = 2
rv_M = 5
rv_N = 4
rv_models = linear-1, mlp-2
seeds = 0
noise_grid = 0.0001, 0.01
batch_grid = 1, 2
guidance_grid = 0.2, 1.0
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    """
    Fixture writing the tiny experiment file.
    """
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def tiny_config(tiny_config_file, tmp_path):
    """
    Fixture with the parsed tiny configuration.
    """
    return parse_config(tiny_config_file, out_dir=str(tmp_path / "runs"), jobs=1)


class TestConfigParsing:
    def test_values_comments_and_lists(self):
        """
        Test typed values, comments and comma-separated lists.
        """
        values = parse_config_text("T = 50\n\n# note\neta = 0.0  # deterministic\nseeds = 3, 1\n")
        assert values == {"T": 50, "eta": 0.0, "seeds": (3, 1)}, "Values should be typed"

    def test_unknown_keys_are_listed_together(self):
        """
        Test that every unknown key is reported with its line.
        """
        with pytest.raises(ValidationError) as info:
            parse_config_text("foo = 1\nT = 20\nbar = 2\n")
        message = str(info.value)
        assert "foo (line 1)" in message and "bar (line 3)" in message, "Both unknown keys listed"

    @pytest.mark.parametrize(
        "text, line",
        [
            ("T = 5\n", 1),
            ("eta = 0.5\nm_r = 2\n", 2),
            ("T = 20\nT = 30\n", 2),
            ("model = resnet\n", 1),
            ("\njust text\n", 2),
        ],
    )
    def test_errors_carry_line_numbers(self, text, line):
        """
        Test range errors, duplicates and malformed lines.
        """
        with pytest.raises(ValidationError) as info:
            parse_config_text(text)
        assert info.value.line == line, f"Error should point at line {line}"

    def test_defaults_and_overrides(self, tiny_config_file):
        """
        Test that omitted keys take defaults and flags win over the file.
        """
        config = parse_config(tiny_config_file, seeds=(4, 5), jobs=1)
        assert config.T == 10, "File value should be used"
        assert config.eta == OPTIONS["eta"].default, "Omitted key should take its default"
        assert config.seeds == (4, 5), "Override should win over the file"
        with pytest.raises(ValidationError):
            parse_config(tiny_config_file.parent / "missing.cfg")

    def test_help_lists_every_key(self):
        """
        Test that the options help mentions every key.
        """
        text = describe_options()
        assert all(key in text for key in OPTIONS), "Every key should be documented"

    def test_field_defaults_match_options(self):
        """
        Test that dataclass defaults agree with the documented defaults.
        """
        config = ExperimentConfig(jobs=1)
        for key, option in OPTIONS.items():
            assert getattr(config, key) == option.default, f"default of {key} disagrees"


class TestConfigValidation:
    @pytest.mark.parametrize(
        "changes",
        [
            {"label": 10},
            {"denoiser": "trained", "command": "attack"},
            {"batch_size": 600},
            {"rv_N": 600},
            {"jobs": 0},
            {"seeds": ()},
        ],
    )
    def test_cross_field_checks(self, changes):
        """
        Test combinations that are invalid even though each value parses.
        """
        with pytest.raises(ValidationError):
            ExperimentConfig(**{"jobs": 1, **changes})

    def test_training_needs_no_checkpoint(self):
        """
        Test that train-denoiser accepts a trained denoiser without a checkpoint.
        """
        config = ExperimentConfig(denoiser="trained", command="train-denoiser", jobs=1)
        assert config.denoiser_checkpoint == "", "Training writes the checkpoint itself"

    def test_manifest_rendering(self):
        """
        Test manifest text for floats and lists.
        """
        manifest = ExperimentConfig(jobs=1, noise_grid=(0.1, 0.5)).as_manifest()
        assert manifest["config.noise_grid"] == "0.10000000000000001,0.5", "Floats keep 17 digits"
        assert manifest["config.seeds"] == "0,1,2,3,4", "Lists are comma separated"


class TestPersistence:
    def test_run_dir_never_reused(self, tmp_path):
        """
        Test that a second run in the same second gets a suffixed directory.
        """
        now = datetime(2024, 1, 2, 3, 4, 5)
        first = create_run_dir(tmp_path, "attack", now)
        second = create_run_dir(tmp_path, "attack", now)
        assert first.name == "attack-20240102-030405", "Directory is named by command and time"
        assert second.name == "attack-20240102-030405-1", "Existing directory should not be reused"

    def test_checkpoint_round_trip(self, tmp_path):
        """
        Test that named tensors survive a checkpoint in order.
        """
        tensors = {"w": Tensor([[1.0, 2.0], [3.0, 4.0]]), "b": Tensor([0.1, -0.2])}
        path = write_checkpoint(tmp_path / "model.ckpt", tensors)
        restored = read_checkpoint(path)
        assert list(restored) == ["w", "b"], "Section order should be kept"
        assert all(np.array_equal(restored[k].data, tensors[k].data) for k in tensors), \
            "Values should survive exactly"

    def test_checkpoint_errors(self, tmp_path):
        """
        Test missing files, stray data and duplicated sections.
        """
        with pytest.raises(ValidationError):
            read_checkpoint(tmp_path / "absent.ckpt")
        stray = tmp_path / "stray.ckpt"
        stray.write_text("tensor 1 1\n1\n")
        with pytest.raises(ValidationError) as info:
            read_checkpoint(stray)
        assert info.value.line == 1, "Stray data should point at line 1"
        twice = tmp_path / "twice.ckpt"
        twice.write_text("[param a]\ntensor 1 1\n1\n[param a]\ntensor 1 1\n2\n")
        with pytest.raises(ValidationError) as info:
            read_checkpoint(twice)
        assert info.value.line == 4, "Duplicate section should point at its header"

    def test_csv_and_key_values(self, tmp_path):
        """
        Test cell rendering and sorted key=value files.
        """
        path = write_csv(tmp_path / "table.csv", ("a", "b", "c"), [(1, 0.1, True), (2, float("nan"), False)])
        assert path.read_text() == "a,b,c\n1,0.10000000000000001,true\n2,nan,false\n", "Cells render exactly"
        assert read_csv(path)[1]["b"] == "nan", "DictReader should see the header"
        kv = write_key_values(tmp_path / "kv.txt", {"z": 1, "a": "x"})
        assert kv.read_text() == "a=x\nz=1\n", "Keys should be sorted"
        assert read_key_values(kv) == {"a": "x", "z": "1"}, "Reading returns strings"


class TestAttackPipeline:
    def test_private_batch_is_deterministic(self, tiny_config):
        """
        Test that private samples depend only on the seed and are distinct.
        """
        pipeline = AttackPipeline(tiny_config)
        first = pipeline.private_batch(3, 4)
        again = pipeline.private_batch(3, 4)
        assert len(first) == 4, "Batch should have the requested size"
        assert all(np.array_equal(a.data, b.data) for a, b in zip(first, again)), "Same seed, same batch"
        assert len({a.data.tobytes() for a in first}) == 4, "Samples are drawn without replacement"

    def test_leak_without_defense_is_clean(self, tiny_config):
        """
        Test that the undefended leak equals the batch gradient.
        """
        pipeline = AttackPipeline(tiny_config)
        leaked, batch = pipeline.leak(0, "none", 0.0, 2)
        expected = batch_gradient(pipeline.model, batch)
        assert np.array_equal(leaked.values.data, expected.values.data), "No defense leaves the gradient"
        noisy, _ = pipeline.leak(0, "gaussian", 0.01, 2)
        assert not np.array_equal(noisy.values.data, expected.values.data), "Noise should perturb it"

    def test_noise_cells_are_sorted(self, tiny_config):
        """
        Test the deterministic order of sweep cells.
        """
        config = tiny_config.with_overrides(seeds=(2, 0), noise_grid=(0.01, 0.0001))
        cells = noise_cells(config)
        assert cells[0] == SweepCell(0, "gaussian", 0.0001), "First cell has the smallest keys"
        assert [(c.kind, c.variance, c.seed) for c in cells] == sorted(
            (c.kind, c.variance, c.seed) for c in cells
        ), "Cells are sorted by kind, variance and seed"

    def test_run_cells_keeps_order(self):
        """
        Test that results come back in cell order.
        """
        assert run_cells(abs, [-3, 1, -2]) == [3, 1, 2], "Serial results keep their order"


class TestCommandLine:
    def _args(self, command, config_file, tmp_path, *extra):
        return [command, "--config", str(config_file), "--out", str(tmp_path / "runs"), "--jobs", "1", *extra]

    def test_every_command_is_registered(self):
        """
        Test the subcommand table.
        """
        assert sorted(COMMANDS) == sorted([
            "train-denoiser", "attack", "baseline", "sweep-noise", "sweep-batch",
            "sweep-guidance", "rv", "verify-theorems",
        ]), "Every subcommand should be registered"

    def test_attack_writes_artifacts(self, tiny_config_file, tmp_path):
        """
        Test the trace, snapshot, final and manifest files of an attack run.
        """
        assert run(self._args("attack", tiny_config_file, tmp_path)) == 0, "Attack should succeed"
        (run_dir,) = (tmp_path / "runs").glob("attack-*")
        rows = read_csv(run_dir / "trace-s0.csv")
        assert [int(r["t"]) for r in rows] == list(range(10, 0, -1)), "One row per step from T to 1"
        assert read_tensor(run_dir / "trace-s0-final.txt").shape == (16,), "Final reconstruction should be saved"
        assert len(list((run_dir / "trace-s0-snapshots").iterdir())) <= 2, "Snapshots respect the limit"
        manifest = read_key_values(run_dir / "manifest.txt")
        assert manifest["command"] == "attack" and manifest["seeds"] == "0", "Manifest names the run"
        assert manifest["config.T"] == "10", "Manifest records every setting"

    def test_rerun_is_byte_identical(self, tiny_config_file, tmp_path):
        """
        Test that two runs with the same seeds write identical traces.
        """
        for _ in range(2):
            assert run(self._args("attack", tiny_config_file, tmp_path)) == 0, "Attack should succeed"
        first, second = sorted((tmp_path / "runs").glob("attack-*"))
        assert (first / "trace-s0.csv").read_bytes() == (second / "trace-s0.csv").read_bytes(), \
            "Same seeds should give byte-identical traces"

    def test_sweeps_and_rv_tables(self, tiny_config_file, tmp_path):
        """
        Test the CSV tables of the noise sweep and the rv command.
        """
        assert run(self._args("sweep-noise", tiny_config_file, tmp_path)) == 0, "Sweep should succeed"
        (sweep_dir,) = (tmp_path / "runs").glob("sweep-noise-*")
        rows = read_csv(sweep_dir / "sweep.csv")
        assert len(rows) == 4, "Two kinds by two variances by one seed"
        assert (sweep_dir / "matched-noise.txt").is_file(), "Both kinds give a matched-noise report"
        assert run(self._args("rv", tiny_config_file, tmp_path)) == 0, "rv should succeed"
        (rv_dir,) = (tmp_path / "runs").glob("rv-*")
        assert [r["model"] for r in read_csv(rv_dir / "rv.csv")] == ["linear-1", "mlp-2"], "One row per model"
        assert [r["model"] for r in read_csv(rv_dir / "rv-psnr.csv")] == ["linear-1", "mlp-2"], \
            "RV is paired with attack PSNR per model"
        assert "stat.spearman" in read_key_values(rv_dir / "rv-psnr.txt"), "Rank correlation is reported"

    def test_baseline_and_ablation_sweeps(self, tiny_config_file, tmp_path):
        """
        Test the baseline trace and the batch and guidance sweep tables.
        """
        assert run(self._args("baseline", tiny_config_file, tmp_path)) == 0, "Baseline should succeed"
        (base_dir,) = (tmp_path / "runs").glob("baseline-*")
        assert len(read_csv(base_dir / "baseline-s0.csv")) == 10, "Baseline budget defaults to T"
        for command, column, expected in (("sweep-batch", "batch_size", ["1", "2"]),
                                          ("sweep-guidance", "m_r", ["0.20000000000000001", "1"])):
            assert run(self._args(command, tiny_config_file, tmp_path)) == 0, f"{command} should succeed"
            (sweep_dir,) = (tmp_path / "runs").glob(f"{command}-*")
            assert [r[column] for r in read_csv(sweep_dir / "sweep.csv")] == expected, \
                f"{command} rows should follow the sorted grid"

    def test_trained_denoiser_feeds_the_attack(self, tmp_path):
        """
        Test that a trained checkpoint can drive a later attack.
        """
        config_file = tmp_path / "train.cfg"
        config_file.write_text(TINY_CONFIG + "train_epochs = 3\n")
        assert run(self._args("train-denoiser", config_file, tmp_path)) == 0, "Training should succeed"
        (train_dir,) = (tmp_path / "runs").glob("train-denoiser-*")
        assert [r["epoch"] for r in read_csv(train_dir / "loss.csv")] == ["1", "2", "3"], "One row per epoch"
        attack_file = tmp_path / "attack.cfg"
        attack_file.write_text(
            TINY_CONFIG + f"denoiser = trained\ndenoiser_checkpoint = {train_dir / 'denoiser.ckpt'}\n"
        )
        assert run(self._args("attack", attack_file, tmp_path)) == 0, "Attack with a trained denoiser should succeed"

    def test_bad_config_exits_with_one(self, tmp_path, capsys):
        """
        Test that an invalid config is reported with exit code 1.
        """
        bad = tmp_path / "bad.cfg"
        bad.write_text("T = 20\nwidth = 3\n")
        assert run(self._args("attack", bad, tmp_path)) == 1, "Invalid config should exit 1"
        assert "unknown keys" in capsys.readouterr().err, "The error should name the problem"
        assert run(["no-such-command"]) == 1, "Unknown subcommand is a usage error"

    def test_failed_check_exits_with_three(self, tiny_config_file, tmp_path, monkeypatch):
        """
        Test that a failing validator gives exit code 3 after writing its report.
        """
        monkeypatch.setattr(
            AttackPipeline, "verify_theorems",
            lambda self: [TheoremReport("always-ok", True), TheoremReport("always-fails", False)],
        )
        assert run(self._args("verify-theorems", tiny_config_file, tmp_path)) == 3, "Failure should exit 3"
        (run_dir,) = (tmp_path / "runs").glob("verify-theorems-*")
        assert (run_dir / "reports" / "01-always-fails.txt").is_file(), "Failing report is still written"
        assert [r["passed"] for r in read_csv(run_dir / "summary.csv")] == ["true", "false"], "Summary lists both"

    @pytest.mark.slow
    def test_verify_theorems_end_to_end(self, tmp_path):
        """
        Test that the full validator run passes every check at the default settings.
        """
        code = run(["verify-theorems", "--out", str(tmp_path / "runs"), "--jobs", "1"])
        (run_dir,) = (tmp_path / "runs").glob("verify-theorems-*")
        summary = read_csv(run_dir / "summary.csv")
        expected = [f"laurent-massart[n={n},eps={eps:g}]" for n, eps in LM_GRID]
        expected += ["jensen-gap-affine", "jensen-gap-growth", "jensen-gap-bound"]
        expected += [f"monotone-attack-loss[seed={seed}]" for seed in range(5)]
        expected += ["convergence-rate", "noise-degradation", "jacobian-spectrum"]
        assert [r["theorem"] for r in summary] == expected, "Every validator should report once, in order"
        failed = [r["theorem"] for r in summary if r["passed"] != "true"]
        assert failed == [], f"No check should fail: {failed}"
        assert code == 0, "A healthy build exits 0"
