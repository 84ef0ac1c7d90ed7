import csv
import io

import numpy as np
import pytest

from zipenhancer import complexity
from zipenhancer.codec import ZipEnhancer
from zipenhancer.config import S_FAMILY, TINY_STFT, preset, preset_stft
from zipenhancer.zipblocks import ModelConfig

TWO_SECONDS = 2.0


@pytest.fixture(scope="module")
def family():
    return {n: complexity.count_flops(preset(n), TWO_SECONDS, preset_stft(n)) for n in S_FAMILY}


@pytest.mark.parametrize("name", ["S", "S2", "S7", "S-tiny", "M"])
def test_param_count_matches_runtime_enumeration(name):
    cfg = preset(name)
    assert complexity.count_params(cfg).total_params == ZipEnhancer(cfg).num_parameters()


def test_single_linear_closed_form():
    assert complexity._linear(64, 64) == 64 * 64 + 64


def test_family_params_equal(family):
    totals = np.array([family[n].total_params for n in S_FAMILY])
    assert (totals.max() - totals.min()) / totals.min() < 5e-4
    base = family["S2"].total_params
    for n in S_FAMILY:
        extra = sum(complexity.sampling_params(r) for r in preset(n).ratios)
        assert family[n].total_params == base + extra


def test_config_s_near_published_size(family):
    assert 1.73e6 <= family["S"].total_params <= 2.35e6


def test_flops_ordering(family):
    flops = [family[n].total_flops for n in ["S2", "S", "S3", "S4", "S5", "S6", "S7", "S8"]]
    assert all(a > b for a, b in zip(flops, flops[1:]))


def test_flops_ratio_s_over_s2(family):
    ratio = family["S"].total_flops / family["S2"].total_flops
    assert 0.68 <= ratio <= 0.88


def test_totals_equal_sum_of_parts(family):
    rep = family["S"]
    assert rep.total_params == sum(rep.params.values())
    assert rep.total_flops == sum(rep.flops.values())
    assert complexity.count_flops(preset("S"), TWO_SECONDS).flops == rep.flops


def test_r1_stack_equals_plain_dual_path():
    cfg = preset("S2")
    rep = complexity.count_flops(cfg, 1.0)
    n_frames = 16000 // 100 + 1
    fb, tb = complexity.dual_path_flops(cfg, n_frames, 101)
    for i in range(cfg.n_stacks):
        assert rep.flops[f"stack{i}.f_block"] == fb and rep.flops[f"stack{i}.t_block"] == tb
    assert not rep.has_sampling
    assert not any("sampling" in k for k in rep.flops)


def test_downsampled_attention_shrinks_quadratically():
    cfg = preset("S")
    fb1, tb1 = complexity.dual_path_flops(cfg, 320, 100)
    fb2, tb2 = complexity.dual_path_flops(cfg, 160, 50)
    assert fb2 < fb1 / 3.9 and tb2 < tb1 / 3.9


def test_flops_monotone_in_each_ratio():
    base = [1, 2, 2, 1]
    for i in range(4):
        prev = None
        for r in range(1, 9):
            ratios = list(base)
            ratios[i] = r
            cfg = ModelConfig(n_stacks=4, ratios=tuple(ratios), channels=64, heads=4)
            total = complexity.count_flops(cfg, TWO_SECONDS).total_flops
            if prev is not None:
                assert total <= prev
            prev = total


def test_params_independent_of_duration():
    a = complexity.count_flops(preset("S"), 1.0)
    b = complexity.count_flops(preset("S"), 3.0)
    assert a.params == b.params
    assert b.total_flops > a.total_flops


def test_block_flops_linear_and_quadratic_in_frames():
    cfg = preset("S")
    f = [complexity.dual_path_flops(cfg, n, 101)[0] for n in (100, 200, 300)]
    assert f[2] - f[1] == f[1] - f[0]
    t = [complexity.dual_path_flops(cfg, n, 101)[1] for n in (100, 200, 300, 400)]
    d1 = np.diff(t)
    d2 = np.diff(d1)
    assert d2[0] > 0 and d2[0] == d2[1]


def test_table_and_csv(family):
    reports = [family[n] for n in S_FAMILY]
    table = complexity.format_table(reports)
    lines = table.splitlines()
    assert lines[0].split() == complexity.TABLE_COLUMNS
    assert "mac2" in lines[-1] and "2 s" in lines[-1]
    rows = list(csv.DictReader(io.StringIO(complexity.format_csv(reports))))
    assert [r["Model"] for r in rows] == S_FAMILY
    assert all(r["convention"] == "mac2" for r in rows)
    assert rows[1]["Ratios"] == "{1, 1, 1, 1}"
    breakdown = complexity.format_breakdown(family["S"])
    assert breakdown.splitlines()[-1].startswith("total")


def test_tiny_preset_uses_tiny_stft():
    assert preset_stft("S-tiny") == TINY_STFT
    rep = complexity.count_flops(preset("S-tiny"), 1.0, TINY_STFT)
    assert rep.total_flops > 0
