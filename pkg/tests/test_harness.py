import gzip
import hashlib
import json
import struct

import numpy as np
import pytest

from uotscreen import Penalty
from uotscreen.harness import (IMAGE_MAGIC, LABEL_MAGIC, EmptyHistogramError, ExperimentPlan,
                               IDXParseError, cell_status, compare_projections, gen_gaussian_pair,
                               load_mnist_idx, load_problem, plan_instances, read_trace,
                               run_experiment, save_problem, squared_distance_cost, write_idx,
                               write_trace)


def _digits(rng, count=6, side=8):
    imgs = np.zeros((count, side, side), dtype=np.uint8)
    for k in range(count):
        r0, c0 = rng.integers(0, side - 3, 2)
        imgs[k, r0:r0 + 3, c0:c0 + 3] = rng.integers(1, 256, (3, 3))
    return imgs


@pytest.fixture
def idx_files(tmp_path, rng):
    imgs = _digits(rng)
    images, labels = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, imgs, IMAGE_MAGIC)
    write_idx(labels, np.arange(len(imgs)) % 10, LABEL_MAGIC)
    return images, labels, imgs


class TestGaussian:
    def test_deterministic(self, tmp_path):
        a, b = gen_gaussian_pair(100, 3), gen_gaussian_pair(100, 3)
        save_problem(a, tmp_path / "a.json")
        save_problem(b, tmp_path / "b.json")
        digest = [hashlib.sha256((tmp_path / f).read_bytes()).hexdigest() for f in ("a.json", "b.json")]
        assert digest[0] == digest[1]
        assert not np.array_equal(gen_gaussian_pair(100, 4).a, a.a)

    def test_cost_normalized_and_symmetric(self):
        spec = gen_gaussian_pair(100, 0)
        assert spec.c.max() == 1.0
        C = spec.cost_matrix
        np.testing.assert_array_equal(C, C.T)
        assert np.all(np.diag(C) == 0)

    def test_unit_masses(self):
        spec = gen_gaussian_pair(50, 1)
        assert spec.a.sum() == pytest.approx(1.0) and spec.b.sum() == pytest.approx(1.0)

    def test_bins(self):
        with pytest.raises(ValueError):
            gen_gaussian_pair(1, 0)

    def test_round_trip(self, tmp_path):
        spec = gen_gaussian_pair(10, 2, lam=0.01, penalty="kl")
        save_problem(spec, tmp_path / "p.json")
        back = load_problem(tmp_path / "p.json")
        np.testing.assert_array_equal(back.c, spec.c)
        assert back.penalty is Penalty.KL and back.lam == 0.01

    def test_bad_problem_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(IDXParseError):
            load_problem(tmp_path / "bad.json")

    def test_squared_distance_cost(self):
        np.testing.assert_array_equal(squared_distance_cost([0.0, 1.0], [0.0, 2.0]),
                                      [0.0, 1.0, 0.25, 0.25])


class TestMnist:
    def test_load(self, idx_files):
        images, labels, imgs = idx_files
        spec = load_mnist_idx(images, labels, 0, 1)
        assert spec.n == np.count_nonzero(imgs[0]) and spec.m == np.count_nonzero(imgs[1])
        assert spec.a.sum() == pytest.approx(1.0) and spec.c.max() == 1.0

    def test_magic_bytes(self, idx_files):
        assert idx_files[0].read_bytes()[:4] == b"\x00\x00\x08\x03"

    def test_gzip(self, tmp_path, rng):
        imgs = _digits(rng)
        write_idx(tmp_path / "img.idx.gz", imgs, IMAGE_MAGIC)
        with gzip.open(tmp_path / "img.idx.gz") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x03"
        assert load_mnist_idx(tmp_path / "img.idx.gz", None, 2, 3).n == np.count_nonzero(imgs[2])

    def test_labels_as_images(self, idx_files):
        _, labels, _ = idx_files
        with pytest.raises(IDXParseError) as err:
            load_mnist_idx(labels, None, 0, 1)
        assert err.value.offset == 0

    def test_truncated(self, tmp_path, idx_files):
        raw = idx_files[0].read_bytes()
        cut = tmp_path / "cut.idx"
        cut.write_bytes(raw[:-5])
        with pytest.raises(IDXParseError) as err:
            load_mnist_idx(cut, None, 0, 1)
        assert err.value.offset == len(raw) - 5
        cut.write_bytes(raw[:6])
        with pytest.raises(IDXParseError):
            load_mnist_idx(cut, None, 0, 1)

    def test_empty_image(self, tmp_path, rng):
        imgs = _digits(rng)
        imgs[1] = 0
        write_idx(tmp_path / "img.idx", imgs, IMAGE_MAGIC)
        with pytest.raises(EmptyHistogramError):
            load_mnist_idx(tmp_path / "img.idx", None, 0, 1)

    def test_label_count_mismatch(self, tmp_path, idx_files):
        images, _, _ = idx_files
        write_idx(tmp_path / "lab.idx", np.zeros(2), LABEL_MAGIC)
        with pytest.raises(IDXParseError):
            load_mnist_idx(images, tmp_path / "lab.idx", 0, 1)

    def test_write_idx_rank_check(self, tmp_path):
        with pytest.raises(ValueError):
            write_idx(tmp_path / "x.idx", np.zeros((2, 2)), IMAGE_MAGIC)

    def test_header_layout(self, idx_files):
        raw = idx_files[0].read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (IMAGE_MAGIC, 6, 8, 8)


class TestPlan:
    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentPlan(dataset="cifar")
        with pytest.raises(ValueError):
            ExperimentPlan(methods=[])
        with pytest.raises(ValueError):
            ExperimentPlan.from_dict({"bogus": 1})
        with pytest.raises(ValueError):
            ExperimentPlan(dataset="mnist")

    def test_round_trip(self):
        plan = ExperimentPlan(pairs=2, lambda_grid=[0.1, 0.01])
        assert ExperimentPlan.from_dict(json.loads(json.dumps(plan.to_dict()))) == plan

    def test_instances_deterministic(self):
        plan = ExperimentPlan(pairs=3, bins=12)
        a, b = plan_instances(plan, 0.1), plan_instances(plan, 0.1)
        assert all(np.array_equal(x.a, y.a) and np.array_equal(x.b, y.b) for x, y in zip(a, b))

    def test_mnist_instances(self, idx_files):
        images, labels, _ = idx_files
        plan = ExperimentPlan(dataset="mnist", pairs=2, images=str(images), labels=str(labels))
        specs = plan_instances(plan, 0.1)
        assert len(specs) == 2 and all(s.c.max() == 1.0 for s in specs)

    def test_file_instances(self, tmp_path):
        save_problem(gen_gaussian_pair(6, 0), tmp_path / "p.json")
        plan = ExperimentPlan(dataset="file", problems=[str(tmp_path / "p.json")], penalty="kl")
        (spec,) = plan_instances(plan, 0.5)
        assert spec.lam == 0.5 and spec.penalty is Penalty.KL

    def test_cell_status(self):
        assert cell_status("fista", "sa-ctp", "l2") == "ok"
        assert cell_status("fista", "sa", "kl") == "unsupported"
        assert cell_status("mm", "sa", "kl") == "unsupported"
        assert cell_status("mm", "ell", "l2") == "unsupported"
        assert cell_status("mm", "gap", "kl") == "degenerate-possible"
        assert cell_status("mm", "ell-ctp", "kl") == "ok"


class TestRunExperiment:
    def test_self_ratio(self, tmp_path):
        plan = ExperimentPlan(pairs=1, bins=10, methods=["none"], repeats=1, max_iters=2000)
        summary = run_experiment(plan, tmp_path)
        (cell,) = summary["speedup"].values()
        assert cell == {"none": 1.0}
        assert (tmp_path / "summary.json").exists()

    def test_curves_and_traces(self, tmp_path):
        plan = ExperimentPlan(pairs=2, bins=12, methods=["none", "sa", "sa-ctp", "ell"],
                              repeats=1, max_iters=5000)
        summary = run_experiment(plan, tmp_path)
        statuses = {c["method"]: c["status"] for c in summary["cells"]}
        assert statuses["ell"] == "unsupported"
        for cell in summary["cells"]:
            if cell["status"] == "unsupported":
                assert "curve" not in cell
                continue
            fractions = [row[2] for row in cell["curve"]]
            assert fractions == sorted(fractions)
            trace = read_trace(tmp_path / cell["trace"])
            assert [r.screened for r in trace] == [round(f * 144) for f in fractions]
        speed = next(iter(summary["speedup"].values()))
        assert set(speed) == {"none", "sa", "sa-ctp"}

    def test_traces_deterministic(self, tmp_path):
        plan = ExperimentPlan(pairs=1, bins=10, methods=["sa-ctp"], repeats=1, max_iters=1000)
        run_experiment(plan, tmp_path / "a")
        run_experiment(plan, tmp_path / "b")
        name = next((tmp_path / "a").glob("*.csv")).name
        # The last column is wall-clock time.
        strip = [[line.rsplit(",", 1)[0] for line in (tmp_path / d / name).read_text().splitlines()]
                 for d in ("a", "b")]
        assert strip[0] == strip[1] and len(strip[0]) > 1

    def test_trace_round_trip(self, tmp_path):
        from uotscreen import IterateTrace
        rows = [IterateTrace(0, 1.0, 0.5, 0.5, 0, 10), IterateTrace(10, 0.1 + 0.2, 0.25, 0.05, 3, 20)]
        write_trace(rows, tmp_path / "t.csv")
        assert read_trace(tmp_path / "t.csv") == rows


class TestProjectionComparison:
    def test_shape_and_values(self):
        spec = gen_gaussian_pair(10, 0, lam=0.01)
        gaps = compare_projections(spec, 50, every=5, methods=("shift", "shift+", "rescale"))
        assert gaps.shape == (10, 3)
        finite = gaps[np.isfinite(gaps)]
        assert np.all(finite >= -1e-12)

    def test_rescale_degenerate_on_zero_diagonal(self):
        # Zero-cost entries make rescaling undefined; those iterates certify nothing.
        spec = gen_gaussian_pair(10, 0, lam=0.01)
        gaps = compare_projections(spec, 20, methods=("rescale",))
        assert gaps.shape == (20, 1) and np.all(np.isinf(gaps) | (gaps >= 0))
