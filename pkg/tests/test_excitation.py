import math

import numpy as np
import pytest

from asvkoop.excitation import (
    EmptySignal,
    ExcitationConfig,
    ExcitationFilter,
    ExcitationSource,
    RankDeficientData,
    collect_dataset,
    full_row_rank,
    next_excitation,
    power_spectrum,
)
from asvkoop.vessel import VesselParams, VesselSimulator


class TestFilter:
    def test_zero_input_matrix_stays_zero(self):
        filt = ExcitationFilter(b_input=np.array([[0.0]]))
        rng = np.random.default_rng(0)
        assert all(next_excitation(filt, rng) == 0.0 for _ in range(50))

    def test_zero_output_map(self):
        filt = ExcitationFilter(c_output=np.array([[0.0]]))
        rng = np.random.default_rng(0)
        assert all(next_excitation(filt, rng) == 0.0 for _ in range(50))

    def test_stationary_variance_matches_closed_form(self):
        a, b, c = 0.9, 0.2, 1.5
        # generous clamp so clipping does not bias the estimate
        filt = ExcitationFilter(
            a_state=np.array([[a]]),
            b_input=np.array([[b]]),
            c_output=np.array([[c]]),
            clamp=100.0,
        )
        rng = np.random.default_rng(42)
        xs = np.array([next_excitation(filt, rng) for _ in range(100_000)])
        expected = c**2 * b**2 / (1 - a**2)
        assert abs(np.var(xs) - expected) / expected < 0.05

    def test_output_clamped(self):
        filt = ExcitationFilter(b_input=np.array([[5.0]]), clamp=1.0)
        rng = np.random.default_rng(3)
        xs = [next_excitation(filt, rng) for _ in range(500)]
        assert max(abs(x) for x in xs) <= 1.0

    def test_unstable_filter_rejected(self):
        with pytest.raises(ValueError):
            ExcitationFilter(a_state=np.array([[1.01]]))

    def test_sub_second_period_rejected(self):
        with pytest.raises(ValueError):
            ExcitationFilter(period=0.5)


class TestPowerSpectrum:
    def test_constant_signal_all_dc(self):
        freqs, power = power_spectrum(np.full(256, 2.5), 1.0)
        assert freqs[0] == 0.0
        assert power[0] == pytest.approx(256 * 2.5**2)
        assert np.allclose(power[1:], 0.0, atol=1e-18)

    def test_pure_sinusoid_single_bin(self):
        n, k = 128, 10
        t = np.arange(n)
        x = np.sin(2 * math.pi * k * t / n)
        _, power = power_spectrum(x, 1.0)
        mask = np.zeros_like(power, dtype=bool)
        mask[k] = True
        assert np.allclose(power[~mask], 0.0, atol=1e-9)
        assert power[k] > 1.0

    def test_parseval(self):
        rng = np.random.default_rng(5)
        for n in (128, 129):
            x = rng.standard_normal(n)
            _, power = power_spectrum(x, 10.0)
            assert np.sum(power) == pytest.approx(np.sum(x**2), rel=1e-9)

    def test_empty_signal_raises(self):
        with pytest.raises(EmptySignal):
            power_spectrum(np.array([1.0]), 1.0)

    def test_default_random_walk_is_low_frequency(self):
        cfg = ExcitationConfig()
        filt = ExcitationFilter(
            a_state=np.array([[cfg.pole]]),
            b_input=np.array([[cfg.gain]]),
            clamp=cfg.clamp,
        )
        rng = np.random.default_rng(11)
        xs = np.array([next_excitation(filt, rng) for _ in range(10_000)])
        freqs, power = power_spectrum(xs, 1.0 / cfg.period)
        below = np.sum(power[freqs <= cfg.system_bandwidth_hz])
        assert below / np.sum(power) >= 0.80


class TestCollect:
    def make_plant(self, seed=0, delay=0.4):
        return VesselSimulator(params=VesselParams(motor_delay=delay), seed=seed)

    def test_zero_steps_rejected(self):
        src = ExcitationSource(ExcitationConfig(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            collect_dataset(self.make_plant(), src, 0)

    def test_alignment_and_size(self):
        src = ExcitationSource(ExcitationConfig(), np.random.default_rng(1))
        batch = collect_dataset(self.make_plant(seed=1), src, 3000)
        assert batch.beta == 3000
        # successor columns are the next state columns, exactly
        assert np.array_equal(batch.x_next[:, :-1], batch.x[:, 1:])

    def test_batch_is_persistently_exciting(self):
        src = ExcitationSource(ExcitationConfig(), np.random.default_rng(2))
        batch = collect_dataset(self.make_plant(seed=2), src, 600)
        assert full_row_rank(np.vstack([batch.x, batch.u]))

    def test_constant_zero_source_rank_deficient(self):
        cfg = ExcitationConfig(gain=0.0)
        src = ExcitationSource(cfg, np.random.default_rng(3))
        with pytest.raises(RankDeficientData):
            collect_dataset(self.make_plant(seed=3), src, 100)

    def test_same_seed_identical_batches(self):
        def run():
            src = ExcitationSource(ExcitationConfig(), np.random.default_rng(7))
            return collect_dataset(self.make_plant(seed=7), src, 200)

        a, b = run(), run()
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.u, b.u)

    def test_commands_within_clamp(self):
        src = ExcitationSource(ExcitationConfig(), np.random.default_rng(4))
        batch = collect_dataset(self.make_plant(seed=4), src, 500)
        assert np.max(np.abs(batch.u)) <= 1.0

    def test_command_held_between_updates(self):
        src = ExcitationSource(ExcitationConfig(period=1.0), np.random.default_rng(5))
        c1 = src.command(0.0)
        c2 = src.command(0.5)
        c3 = src.command(1.0)
        assert c1.as_array().tolist() == c2.as_array().tolist()
        assert not np.array_equal(c1.as_array(), c3.as_array())
