from datetime import datetime, timedelta

import numpy as np
import pytest

from stratus.gridcore import FieldSeries, GridError, Mask, regrid_array
from stratus.scenario import (BiasSpec, MaskHoleSpec, ScenarioConfig, config_from_dict, config_to_dict,
                              generate_scenario, load_scenario, make_mask, save_scenario, geometries)

from conftest import SMALL

NULL = BiasSpec()


def merged_fine(scenario) -> FieldSeries:
    entries = sorted((t, r) for s in scenario.fine_deterministic.values() for t, r in s.entries)
    return FieldSeries(tuple(entries), None, "fine")


def test_same_seed_is_bit_identical(small_scenario):
    again = generate_scenario(SMALL)
    assert np.array_equal(again.observations.stack(), small_scenario.observations.stack())
    for lead, s in small_scenario.fine_deterministic.items():
        assert np.array_equal(again.fine_deterministic[lead].stack(), s.stack())
    for a, b in zip(again.coarse_members, small_scenario.coarse_members):
        assert all(np.array_equal(a[k].stack(), b[k].stack()) for k in a)
    assert again.mask == small_scenario.mask


def test_other_seed_differs(small_scenario):
    other = generate_scenario(SMALL.replace(seed=1))
    assert not np.array_equal(other.observations.stack(), small_scenario.observations.stack())


@pytest.mark.parametrize("threshold", [0.5, 1.0, 2.0])
def test_cover_hits_targets(small_scenario, threshold):
    lead = SMALL.leads[0]
    m = small_scenario.mask.valid
    obs = np.stack([small_scenario.observations.at(datetime(d.year, d.month, d.day) + timedelta(hours=lead)).values
                    for d in small_scenario.days])
    cover = float(np.mean(obs[:, m] > threshold))
    assert abs(cover - SMALL.target_cover[threshold]) <= 0.005
    assert abs(small_scenario.achieved_cover[threshold] - SMALL.target_cover[threshold]) <= 0.005


@pytest.mark.parametrize("cover", [{0.5: 0.0}, {0.5: 0.6}, {0.5: 0.03, 1.0: 0.05}])
def test_infeasible_cover_rejected(cover):
    with pytest.raises(ValueError):
        ScenarioConfig(target_cover=cover)


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(n_members=0)
    with pytest.raises(ValueError):
        ScenarioConfig(fine_cell_km=0)
    with pytest.raises(ValueError):
        BiasSpec(noise_sd=-1)


def test_unbiased_sources_equal_the_truth():
    cfg = SMALL.replace(n_days=3, fine=NULL, coarse=NULL, member_spread_px=0.0)
    s = generate_scenario(cfg)
    day = s.days[1]
    run = datetime(day.year, day.month, day.day)
    t = run + timedelta(hours=12)
    fine = s.fine_deterministic[12].at(t).values
    assert np.allclose(fine, s.truth(s.fine_geometry, t), atol=1e-5)
    block = np.mean([s.truth(s.coarse_geometry, t - timedelta(hours=h)) for h in (0, 1, 2)], axis=0)
    for member in s.coarse_members:
        assert np.allclose(member[12].at(t).values, block, atol=1e-5)
    obs = s.observations.at(t).values
    assert np.allclose(obs, s.truth(s.obs_geometry, t), atol=1e-5)


def test_fine_source_beats_coarse_by_default(small_scenario):
    s = small_scenario
    errs = {}
    for name in ("fine", "coarse"):
        e = []
        for day in s.days:
            t = datetime(day.year, day.month, day.day) + timedelta(hours=12)
            if name == "fine":
                f = regrid_array(s.fine_deterministic[12].at(t).values, s.fine_geometry, s.obs_geometry)
            else:
                f = regrid_array(s.coarse_members[0][12].at(t).values, s.coarse_geometry, s.obs_geometry)
            e.append(np.mean((f - s.observations.at(t).values)[s.mask.valid] ** 2))
        errs[name] = np.mean(e)
    assert errs["fine"] < errs["coarse"]


def test_timing_shift_recovered_by_lag_check():
    from stratus.gridcore import lag_correlation_check

    cfg = SMALL.replace(n_days=8, fine=BiasSpec(timing_shift_hours=1))
    s = generate_scenario(cfg)
    fine = merged_fine(s)
    on_obs = FieldSeries.from_arrays(fine.times, regrid_array(fine.stack(), s.fine_geometry, s.obs_geometry),
                                     s.obs_geometry)
    report = lag_correlation_check(on_obs, s.observations, [-1, 0, 1], s.mask)
    assert report.best_lag == 1


def test_mask_is_centered_box_with_holes():
    cfg = ScenarioConfig(mask_holes=MaskHoleSpec(count=0))
    g = geometries(cfg)["obs"]
    plain = make_mask(cfg, g)
    assert plain.valid_count == 64 * 64 and plain.bounding_box() == (32, 96, 32, 96)
    holed = make_mask(ScenarioConfig(), g)
    assert 0 < holed.valid_count < 64 * 64
    assert not np.any(holed.valid & ~plain.valid)


def test_config_dict_roundtrip():
    cfg = ScenarioConfig(seed=5, fine=BiasSpec(advection_offset_px=(1, 2), timing_shift_hours=1))
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ValueError):
        config_from_dict({"sede": 1})
    with pytest.raises(ValueError):
        config_from_dict({"fine": {"nosie_sd": 1}})


def test_save_load_roundtrip(tmp_path, small_scenario):
    save_scenario(small_scenario, tmp_path)
    back = load_scenario(tmp_path)
    assert back.days == small_scenario.days and back.mask == small_scenario.mask
    assert np.array_equal(back.observations.stack(), small_scenario.observations.stack())
    assert back.coarse_members[3][15].times == small_scenario.coarse_members[3][15].times
    with pytest.raises(FileNotFoundError):
        save_scenario(small_scenario, tmp_path / "missing")


def test_save_is_deterministic(tmp_path, small_scenario):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    save_scenario(small_scenario, a)
    save_scenario(small_scenario, b)
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()
