import dataclasses
import tracemalloc

import numpy as np
import pytest

from sepmamba import bench
from sepmamba import separator as sep
from sepmamba import trainer as tr

TOY = sep.SeparatorConfig(n_stages=3, base_dim=8, blocks_per_stage=2)


@pytest.fixture(scope="module")
def toy_weights():
    return sep.build(TOY, seed=0)


class TestTiming:
    def test_three_repeats(self, toy_weights):
        t = bench.profile_forward(toy_weights, seconds=0.1, repeats=3)
        assert len(t.samples_ms) == 3
        assert t.min <= t.mean <= t.max
        assert t.stdev >= 0

    def test_doubling_length_is_roughly_linear(self, toy_weights):
        # advisory wall-clock check, so the slack is generous and the best of 5 is used
        short = bench.profile_forward(toy_weights, seconds=0.5, repeats=5).min
        long = bench.profile_forward(toy_weights, seconds=1.0, repeats=5).min
        assert long <= 2 * short * 1.25 + 5.0

    @pytest.mark.parametrize("kw", [{"repeats": 2}, {"warmup": 0}])
    def test_preconditions(self, toy_weights, kw):
        with pytest.raises(ValueError):
            bench.profile_forward(toy_weights, 0.1, **{"repeats": 3, **kw})

    def test_backends_compared_on_same_input(self):
        out = bench.compare_backends(TOY, seconds=0.05, repeats=3)
        assert set(out) == {"numba", "numpy"} and all(len(t.samples_ms) == 3 for t in out.values())


class TestMemory:
    def test_linear_hand_sum(self):
        # 16 weights x4 (value, grad, two moments) + 32 inputs + 32 outputs, 4 bytes each
        assert bench.linear_memory(4, 4, 8, itemsize=4) == (4 * 16 + 32 + 32) * 4 == 512

    def test_linear_bias(self):
        assert bench.linear_memory(4, 4, 8, bias=True) - bench.linear_memory(4, 4, 8) == 4 * 4 * 4

    def test_monotone_in_length(self):
        vals = [bench.estimate_peak_memory(TOY, s) for s in (0.25, 0.5, 1.0, 2.0)]
        assert vals == sorted(vals) and len(set(vals)) == 4

    def test_monotone_in_width(self):
        vals = [bench.estimate_peak_memory(dataclasses.replace(TOY, base_dim=d), 0.5) for d in (4, 8, 16, 32)]
        assert vals == sorted(vals) and len(set(vals)) == 4

    def test_f64_doubles(self):
        assert bench.estimate_peak_memory(TOY, 0.5, "f64") == 2 * bench.estimate_peak_memory(TOY, 0.5, "f32")

    def test_process_peak_is_at_least_estimate(self):
        seconds = 0.25
        n = int(seconds * TOY.sample_rate)
        rng = np.random.default_rng(0)
        mix = rng.uniform(-0.5, 0.5, n)
        refs = np.stack([mix * 0.5, mix * 0.5 + 1e-3 * rng.standard_normal(n)])
        tracemalloc.start()
        try:
            w = sep.build(TOY, seed=0)
            _, grads = tr.loss_and_grads(w, mix, refs)
            tr.adamw_step(w.tensors, grads, tr.AdamState(), tr.TrainConfig())
            peak = tracemalloc.get_traced_memory()[1]
        finally:
            tracemalloc.stop()
        assert peak >= bench.estimate_peak_memory(TOY, seconds)


class TestReport:
    def _row(self, name="S"):
        return bench.ComputeReport(name, 7212866, 11.6291, 123.25, 10**9, "x86_64 test")

    def test_empty_is_header_only(self):
        for fmt, n in (("tsv", 1), ("markdown", 2)):
            assert len(bench.emit_report([], fmt).splitlines()) == n

    def test_one_row_one_line(self):
        assert len(bench.emit_report([self._row()], "tsv").splitlines()) == 2
        assert len(bench.emit_report([self._row()], "markdown").splitlines()) == 3

    def test_markdown_headers_in_order(self):
        assert bench.emit_report([], "markdown").splitlines()[0] == "| Model | # Params | GMAC/s | Fw. pass (ms) | Mem. Usage (GB) | Env |"

    def test_tsv_round_trip(self):
        rows = [self._row("S"), bench.ComputeReport("M", 1, 0.1 + 0.2, 1e-7, 0, "")]
        assert bench.parse_report_tsv(bench.emit_report(rows, "tsv")) == rows

    def test_bad_format_and_header(self):
        with pytest.raises(ValueError):
            bench.emit_report([], "csv")
        with pytest.raises(ValueError):
            bench.parse_report_tsv("a\tb\n")

    @pytest.mark.parametrize("kw", [{"params": -1}, {"model": "a\tb"}, {"env": "x|y"}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            dataclasses.replace(self._row(), **kw)

    def test_gmac_consistent_with_count_macs(self):
        r = bench.compute_report(sep.SEPMAMBA_S, "S", time_forward=False)
        assert abs(r.gmac_per_s * 1e9 / sep.count_macs(sep.SEPMAMBA_S, 1.0) - 1) < 1e-6
        assert r.params == sep.count_params(sep.SEPMAMBA_S) and r.fwd_ms == 0.0


class TestCalibration:
    def test_chosen_defaults_are_best(self):
        rows = bench.calibration_grid()
        assert len(rows) == 18
        best = rows[0]
        assert (best.expand, best.n_state, best.d_conv) == (2, 16, 3)
        d = sep.SeparatorConfig()
        assert (d.expand, d.n_state, d.d_conv) == (2, 16, 3)

    def test_best_meets_both_targets(self):
        best = bench.calibration_grid()[0]
        assert abs(best.params_s / 7.2e6 - 1) <= 0.10 and abs(best.params_m / 22e6 - 1) <= 0.10
        assert abs(best.gmac_s / 12.46 - 1) <= 0.15 and abs(best.gmac_m / 37.0 - 1) <= 0.15
