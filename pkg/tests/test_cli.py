import csv
from pathlib import Path
import numpy as np
import pytest

from flowmc.formats import load_flow, read_pfm, write_pgm
from flowmc.main import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_FLOW = """
[flow]
n_layers = 2
bins = 4
one_blob_bins = 8
outer_width = 8
nesting = 1

[train]
batch_size = 64
steps_per_batch = 2
learning_rate = 0.01

[schedule]
budget = 255
grid_resolution = 16
eval_samples = 256
"""


def _config(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


def _run(config: Path, out: Path, *extra: str) -> int:
    return main(["--config", str(config), "--out", str(out), "--quiet", *extra])


def _key_values(path: Path) -> dict:
    with open(path, newline="") as handle:
        return {row["key"]: float(row["value"]) for row in csv.DictReader(handle)}


class TestDiagnose:
    def test_shipped_config_writes_curve(self, tmp_path):
        assert _run(CONFIGS / "diagnose.toml", tmp_path / "out") == 0
        with open(tmp_path / "out" / "appendix_b.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 99
        assert float(rows[0]["theta"]) == pytest.approx(0.01)
        assert {row["density_norm_sign"] for row in rows} == {"-1"}
        assert all(abs(float(row["mass_norm_grad"])) < 1e-10 for row in rows)


class TestTrainImage:
    def test_constant_target_stays_uniform(self, tmp_path):
        text = 'command = "train-image"\nseed = 5\n[target]\nprocedural = "constant"\n' + SMALL_FLOW
        config = _config(tmp_path, text.replace("learning_rate = 0.01", "learning_rate = 0.001"))
        out = tmp_path / "out"
        assert _run(config, out) == 0
        assert (out / "metrics.csv").exists()
        grids = sorted(out.glob("density_*.pfm"))
        assert [g.name for g in grids] == [f"density_{i:02d}.pfm" for i in range(8)]
        np.testing.assert_allclose(read_pfm(grids[-1]), 1.0, atol=0.2)
        summary = _key_values(out / "summary.csv")
        assert summary["estimator_mean"] == pytest.approx(1.0, abs=0.05)
        assert summary["cross_entropy_start"] == pytest.approx(0.0, abs=1e-9)
        assert load_flow(out / "flow.ckpt").dim == 2

    def test_same_seed_same_bytes(self, tmp_path):
        config = _config(tmp_path, 'command = "train-image"\nseed = 11\n[target]\nprocedural = "rings"\n' + SMALL_FLOW)
        assert _run(config, tmp_path / "a") == 0
        assert _run(config, tmp_path / "b") == 0
        for name in ("metrics.csv", "summary.csv", "flow.ckpt", "density_07.pfm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override_changes_the_run(self, tmp_path):
        config = _config(tmp_path, 'command = "train-image"\nseed = 11\n[target]\nprocedural = "rings"\n' + SMALL_FLOW)
        assert _run(config, tmp_path / "a") == 0
        assert _run(config, tmp_path / "b", "--seed", "12") == 0
        assert (tmp_path / "a" / "flow.ckpt").read_bytes() != (tmp_path / "b" / "flow.ckpt").read_bytes()

    def test_image_relative_to_config(self, tmp_path):
        grid = np.outer(np.linspace(0.1, 1.0, 8), np.ones(8))
        write_pgm(tmp_path / "ramp.pgm", grid)
        config = _config(tmp_path, 'command = "train-image"\n[target]\nimage = "ramp.pgm"\n' + SMALL_FLOW)
        assert _run(config, tmp_path / "out") == 0
        assert (tmp_path / "out" / "summary.csv").exists()


class TestExitCodes:
    def test_invalid_config(self, tmp_path):
        config = _config(tmp_path, 'command = "train-image"\n[flow]\nn_layers = 1\n')
        assert _run(config, tmp_path / "out") == 2

    def test_unreadable_image(self, tmp_path):
        config = _config(tmp_path, 'command = "train-image"\n[target]\nimage = "missing.pgm"\n' + SMALL_FLOW)
        assert _run(config, tmp_path / "out") == 2

    def test_missing_config(self, tmp_path):
        assert _run(tmp_path / "absent.toml", tmp_path / "out") == 2


GUIDING = """
command = "guiding-bench"
seed = 2

[flow]
n_layers = 2
bins = 4
one_blob_bins = 8
outer_width = 8
nesting = 1

[train]
batch_size = 64
steps_per_batch = 1

[schedule]
budget = 63

[mis]
variants = ["flow_only", "analytic_only", "mis_learned"]
selection_outer_width = 8
selection_nesting = 1

[[mis.scenarios]]
name = "sharp"
lobe_u = 0.5
lobe_v = 0.5
lobe_sigma = 0.05
atom_probability = 0.2

[[mis.scenarios.radiance]]
weight = 1.0
mean = [0.3, 0.6]
sigma = [0.3, 0.3]

[[mis.scenarios]]
name = "wide"
lobe_u = 0.4
lobe_v = 0.6
lobe_sigma = 0.4

[[mis.scenarios.radiance]]
weight = 1.0
mean = [0.7, 0.3]
sigma = [0.1, 0.1]
"""


class TestGuidingBench:
    def test_smoke(self, tmp_path):
        out = tmp_path / "out"
        assert _run(_config(tmp_path, GUIDING), out) == 0
        assert not (out / "guiding_flow_only.csv").exists()
        for variant in ("analytic_only", "mis_learned"):
            assert (out / f"guiding_{variant}.csv").exists()
            for scenario in ("sharp", "wide"):
                assert (out / f"guiding_{variant}_{scenario}.csv").exists()
        with open(out / "selection_mis_learned.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2 * 7
        assert [float(r["selection"]) for r in rows[:2]] == [0.5, 0.5]
        with open(out / "selection_analytic_only.csv", newline="") as handle:
            assert {float(r["selection"]) for r in csv.DictReader(handle)} == {0.0}
        with open(out / "guiding_summary.csv", newline="") as handle:
            summary = list(csv.DictReader(handle))
        assert [(r["variant"], r["scenario"]) for r in summary] == [
            ("analytic_only", "sharp"),
            ("analytic_only", "wide"),
            ("mis_learned", "sharp"),
            ("mis_learned", "wide"),
        ]


class TestPssBench:
    def test_smoke(self, tmp_path):
        config = _config(
            tmp_path,
            'command = "pss-bench"\n[pss]\ndim = 4\neval_samples = 512\n'
            "[flow]\ndim = 4\nn_layers = 4\npartition = \"even_odd\"\nbins = 4\none_blob_bins = 8\n"
            "outer_width = 8\nnesting = 1\n[train]\nbatch_size = 64\n[schedule]\nbudget = 127\n",
        )
        out = tmp_path / "out"
        assert _run(config, out) == 0
        summary = _key_values(out / "summary.csv")
        assert set(summary) == {
            "reference",
            "uniform_mean",
            "uniform_variance",
            "flow_mean",
            "flow_variance",
            "variance_reduction",
            "clamped_inputs",
        }
        assert all(np.isfinite(v) for v in summary.values())
        assert summary["reference"] > 0.0
        assert load_flow(out / "flow.ckpt").dim == 4


@pytest.mark.slow
def test_shipped_image_config_runs(tmp_path):
    assert _run(CONFIGS / "image_step_kl.toml", tmp_path / "out") == 0
