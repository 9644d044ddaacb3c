"""Ablation grid tests: delta application, the standard sweep axes, and the
run loop's fault isolation (a broken cell records its error, the grid goes on).
"""

import csv

import pytest

from geouda.ablation import (
    RESULT_FIELDS,
    AblationCell,
    ablate,
    apply_deltas,
    run_cell,
    standard_grid,
)
from geouda.data import SyntheticConfig, generate_synthetic, load_dataset
from geouda.encoding import EncodingConfig
from geouda.network import GeoHeadConfig, SegNetConfig, TimeHeadConfig
from geouda.training import TrainConfig


@pytest.fixture(scope="module")
def grid_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid") / "ds"
    cfg = SyntheticConfig(
        num_source_domains=1,
        num_target_domains=1,
        patches_per_domain=6,
        image_size=16,
        num_classes=5,
        seed=7,
    )
    generate_synthetic(cfg, root)
    return load_dataset(root)


def tiny_cfg(**kw) -> TrainConfig:
    defaults = dict(
        batch_size=2,
        max_epochs=2,
        learning_rate=1e-3,
        patience=2,
        seed=0,
        network=SegNetConfig(in_bands=5, num_classes=6, encoder_channels=(4, 8), input_size=16),
        encoding=EncodingConfig(dim=4, noise_radius_m=0.0),
        geo_head=GeoHeadConfig(pool_output=2, hidden_widths=(8, 8, 6, 6), out_dim=4),
        time_head=TimeHeadConfig(pool_output=2, hidden_width=6),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_apply_deltas_top_level_field():
    base = tiny_cfg()
    out = apply_deltas(base, {"learning_rate": 9e-4, "patience": 5})
    assert out.learning_rate == 9e-4 and out.patience == 5
    assert base.learning_rate == 1e-3 and base.patience == 2  # base untouched


def test_apply_deltas_nested_path_preserves_siblings():
    base = tiny_cfg()
    out = apply_deltas(base, {"encoding.noise_radius_m": 12000.0})
    assert out.encoding.noise_radius_m == 12000.0
    assert out.encoding.dim == base.encoding.dim
    assert out.encoding.base_frequency == base.encoding.base_frequency
    assert out.network == base.network


def test_apply_deltas_names_the_unknown_field():
    with pytest.raises(KeyError, match="unknown config field 'frobs' on EncodingConfig"):
        apply_deltas(tiny_cfg(), {"encoding.frobs": 1.0})
    with pytest.raises(KeyError, match="unknown config field 'lrning_rate' on TrainConfig"):
        apply_deltas(tiny_cfg(), {"lrning_rate": 1e-3})


def test_apply_deltas_reruns_validation():
    with pytest.raises(ValueError, match="batch norm needs it"):
        apply_deltas(tiny_cfg(), {"batch_size": 1})
    # changing the class count alone breaks the wired dcs size check
    with pytest.raises(ValueError, match="dcs.num_classes"):
        apply_deltas(tiny_cfg(), {"network.num_classes": 9})


def test_apply_deltas_rewires_the_location_head_width():
    out = apply_deltas(tiny_cfg(), {"encoding.dim": 8})
    assert out.geo_head.out_dim == 8


def test_cell_ids_must_be_csv_and_path_safe():
    for bad in ("", "a,b", "a/b", "a\nb"):
        with pytest.raises(ValueError, match="csv/path safe"):
            AblationCell(bad)
    AblationCell("noise0km_f10000")  # fine


def test_standard_grid_covers_every_axis():
    cells = standard_grid()
    ids = [c.cell_id for c in cells]
    assert len(ids) == len(set(ids)) == 15
    assert ids[:6] == [
        "noise0km_f10000",
        "noise0km_f20000",
        "noise30km_f10000",
        "noise30km_f20000",
        "noise50km_f10000",
        "noise50km_f20000",
    ]
    assert {"tap_encoder", "tap_decoder"} <= set(ids)
    assert {"time_none", "time_month_hour", "time_month_noise"} <= set(ids)
    assert {"comp_baseline", "comp_geo", "comp_dcs", "comp_full"} <= set(ids)


def test_standard_grid_delta_values():
    by_id = {c.cell_id: dict(c.deltas) for c in standard_grid()}
    assert by_id["noise30km_f10000"]["encoding.noise_radius_m"] == 30000.0
    assert by_id["noise30km_f10000"]["encoding.base_frequency"] == 10000.0
    assert by_id["noise50km_f20000"]["encoding.noise_radius_m"] == 50000.0
    assert by_id["tap_decoder"]["geo_head.feature_source"] == "decoder"
    assert by_id["comp_baseline"] == {"components.geo_mt": False, "components.dcs": False}
    assert by_id["comp_full"] == {"components.geo_mt": True, "components.dcs": True}
    assert by_id["time_month_noise"]["time_head.use_hour"] is False


def test_standard_grid_applies_cleanly_to_the_default_config():
    base = TrainConfig()
    for cell in standard_grid():
        cfg = apply_deltas(base, dict(cell.deltas))
        assert cfg.seed == base.seed  # only the named fields move


def test_ablate_rejects_an_empty_grid(grid_dataset):
    with pytest.raises(ValueError, match="empty ablation grid"):
        ablate(tiny_cfg(), [], grid_dataset)


def test_ablate_rejects_duplicate_ids(grid_dataset):
    cells = [AblationCell("twice"), AblationCell("twice", (("seed", 1),))]
    with pytest.raises(ValueError, match="duplicate cell id 'twice'"):
        ablate(tiny_cfg(), cells, grid_dataset)


def test_failing_cell_is_recorded_and_the_grid_continues(grid_dataset, tmp_path):
    cells = [
        AblationCell("plain"),
        # pool output larger than any feature map: fails inside the head
        AblationCell("broken", (("geo_head.pool_output", 64),)),
        AblationCell("no_geo", (("components.geo_mt", False),)),
    ]
    rows = ablate(tiny_cfg(), cells, grid_dataset, out_dir=tmp_path)
    assert [r["cell_id"] for r in rows] == ["plain", "broken", "no_geo"]

    ok_rows = [rows[0], rows[2]]
    for row in ok_rows:
        assert row["error"] == ""
        assert 0.0 <= float(row["miou"]) <= 1.0
        assert row["params"] > 0 and row["epochs_run"] >= 1
    bad = rows[1]
    assert bad["miou"] == "" and bad["params"] == ""
    assert bad["error"].startswith("ValueError:")
    assert "smaller than pool output" in bad["error"]
    assert "Traceback" in bad["traceback"]

    # fewer trainable parameters once the location head is dropped
    assert ok_rows[1]["params"] < ok_rows[0]["params"]

    with open(tmp_path / "results.csv", newline="") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == RESULT_FIELDS
    assert len(lines) == 4
    assert lines[2][0] == "broken" and lines[2][1] == ""
    assert "smaller than pool output" in lines[2][4]

    assert (tmp_path / "plain" / "history.csv").is_file()
    assert (tmp_path / "no_geo" / "history.csv").is_file()
    assert not (tmp_path / "broken" / "history.csv").exists()


def test_same_deltas_same_result(grid_dataset):
    cells = [AblationCell("a"), AblationCell("b")]
    rows = ablate(tiny_cfg(), cells, grid_dataset)
    assert rows[0]["miou"] == rows[1]["miou"]
    assert rows[0]["epochs_run"] == rows[1]["epochs_run"]


def test_run_cell_without_out_dir_writes_nothing(grid_dataset, tmp_path):
    row = run_cell(AblationCell("solo"), tiny_cfg(), grid_dataset)
    assert row["error"] == "" and row["miou"] != ""
    assert list(tmp_path.iterdir()) == []
