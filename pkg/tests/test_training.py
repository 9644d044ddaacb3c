"""Training-loop tests: loss composition, stepping, early stopping, hygiene.

The loop itself is exercised on a tiny generated dataset and a small model so
every test stays in the seconds range; early-stopping semantics are probed by
scripting the validation scores.
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from geouda import training
from geouda.class_balance import DcsConfig
from geouda.data import SyntheticConfig, four_crop, generate_synthetic, load_dataset, load_eval_label
from geouda.encoding import EncodingConfig
from geouda.metrics import ConfusionMatrix, accumulate, iou
from geouda.network import GeoHeadConfig, SegModel, SegNetConfig, TimeHeadConfig
from geouda.training import (
    ComponentFlags,
    LossReport,
    TrainConfig,
    UdaBatch,
    build_model,
    coord_loss,
    evaluate,
    fit,
    make_batch,
    train_step,
    write_history_csv,
)


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "ds"
    cfg = SyntheticConfig(
        num_source_domains=1,
        num_target_domains=1,
        patches_per_domain=6,
        image_size=16,
        num_classes=5,
        seed=5,
    )
    generate_synthetic(cfg, root)
    return root


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


def test_coord_loss_against_scalar_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(5, 7))
    total = 0.0
    for i in range(5):
        for j in range(7):
            total += (a[i, j] - b[i, j]) ** 2
    oracle = total / (5 * 7)
    got = coord_loss(torch.as_tensor(a), torch.as_tensor(b))
    assert abs(float(got) - oracle) < 1e-9


def test_coord_loss_boundary_values():
    t = torch.randn(3, 4, dtype=torch.float64)
    assert float(coord_loss(t, t)) == 0.0
    assert float(coord_loss(t + 2.0, t)) == pytest.approx(4.0, abs=1e-12)
    with pytest.raises(ValueError, match="shape mismatch"):
        coord_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_loss_report_total_is_the_exact_sum():
    report = LossReport.of(0.1, 0.2, 0.3)
    assert report.total == 0.1 + 0.2 + 0.3
    assert abs(report.total - (report.l_seg + report.l_coord_source + report.l_coord_target)) < 1e-9


def test_step_additivity_and_report(tiny_root):
    cfg = tiny_cfg()
    ds = load_dataset(tiny_root)
    src = [ds.load("D01", p) for _, p in ds.patch_ids(["D01"])][:2]
    tgt = [ds.load("D90", p) for _, p in ds.patch_ids(["D90"])][:2]
    torch.manual_seed(0)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = training.cb.DcsState.initial(cfg.dcs)
    batch = make_batch(src, tgt, cfg, np.random.default_rng(0))
    state, report = train_step(model, opt, state, batch, cfg)
    assert report.l_seg > 0 and report.l_coord_source > 0 and report.l_coord_target > 0
    assert abs(report.total - (report.l_seg + report.l_coord_source + report.l_coord_target)) < 1e-9


def test_disabled_components_report_exact_zeros(tiny_root):
    cfg = tiny_cfg(components=ComponentFlags(geo_mt=False, dcs=False, time_mt=False))
    ds = load_dataset(tiny_root)
    src = [ds.load("D01", p) for _, p in ds.patch_ids(["D01"])][:2]
    tgt = [ds.load("D90", p) for _, p in ds.patch_ids(["D90"])][:2]

    # heads exist but the flags exclude them from the loss: their parameters
    # must come through the optimizer step bit-identical
    torch.manual_seed(1)
    model = SegModel(cfg.network, cfg.geo_head, cfg.time_head)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = training.cb.DcsState.initial(cfg.dcs)
    geo_before = [p.detach().clone() for p in model.geo_head.parameters()]
    time_before = [p.detach().clone() for p in model.time_head.parameters()]
    enc_before = [p.detach().clone() for p in model.encoder.parameters()]
    batch = make_batch(src, tgt, cfg, np.random.default_rng(0))
    state, report = train_step(model, opt, state, batch, cfg)

    assert report.l_coord_source == 0.0 and report.l_coord_target == 0.0
    assert report.total == report.l_seg
    for before, after in zip(geo_before, model.geo_head.parameters()):
        assert torch.equal(before, after)
    for before, after in zip(time_before, model.time_head.parameters()):
        assert torch.equal(before, after)
    assert any(not torch.equal(b, a) for b, a in zip(enc_before, model.encoder.parameters()))
    # dcs disabled: the weight state never moves off its all-ones start
    assert np.array_equal(state.weights, np.ones(cfg.dcs.num_classes))


def test_nonfinite_loss_names_the_term():
    cfg = tiny_cfg(components=ComponentFlags(geo_mt=False, dcs=False, time_mt=False))
    torch.manual_seed(0)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = training.cb.DcsState.initial(cfg.dcs)
    bad = UdaBatch(
        source_images=torch.full((2, 5, 16, 16), float("inf")),
        source_labels=torch.zeros(2, 16, 16, dtype=torch.long),
        source_coord=torch.zeros(2, 4),
        target_images=torch.zeros(2, 5, 16, 16),
        target_coord=torch.zeros(2, 4),
    )
    with pytest.raises(RuntimeError, match="l_seg"):
        train_step(model, opt, state, bad, cfg)


def test_batches_rebuild_supervision_noise_each_call(tiny_root):
    ds = load_dataset(tiny_root)
    src = [ds.load("D01", p) for _, p in ds.patch_ids(["D01"])][:2]
    tgt = [ds.load("D90", p) for _, p in ds.patch_ids(["D90"])][:2]

    noisy = tiny_cfg(encoding=EncodingConfig(dim=4, noise_radius_m=10.0))
    rng = np.random.default_rng(0)
    first = make_batch(src, tgt, noisy, rng)
    second = make_batch(src, tgt, noisy, rng)
    assert not torch.equal(first.source_coord, second.source_coord)

    exact = tiny_cfg()  # noise radius 0
    a = make_batch(src, tgt, exact, np.random.default_rng(1))
    b = make_batch(src, tgt, exact, np.random.default_rng(2))
    assert torch.equal(a.source_coord, b.source_coord)
    assert a.source_coord.shape == (2, 4)
    # the batch type carries no target labels at all
    assert not hasattr(a, "target_labels")


def test_zero_learning_rate_leaves_parameters_bitwise_unchanged(tiny_root):
    cfg = tiny_cfg(learning_rate=0.0, max_epochs=1)
    ds = load_dataset(tiny_root)
    result = fit(cfg, ds)
    torch.manual_seed(cfg.seed)
    reference = build_model(cfg)
    for (name, trained), (_, fresh) in zip(
        result.model.named_parameters(), reference.named_parameters()
    ):
        assert torch.equal(trained, fresh), name


def test_fit_is_deterministic(tiny_root):
    cfg = tiny_cfg(max_epochs=3)
    ds = load_dataset(tiny_root)
    first = fit(cfg, ds)
    second = fit(cfg, ds)
    assert len(first.history) == len(second.history) == 3
    for row_a, row_b in zip(first.history, second.history):
        assert row_a == row_b
    expected_keys = {"epoch", "l_seg", "l_coord_source", "l_coord_target", "total", "val_miou"}
    assert expected_keys.issubset(first.history[0].keys())
    assert any(k.startswith("dcs_") for k in first.history[0])


def test_fit_seed_changes_the_run(tiny_root):
    ds = load_dataset(tiny_root)
    a = fit(tiny_cfg(max_epochs=1, seed=0), ds)
    b = fit(tiny_cfg(max_epochs=1, seed=1), ds)
    assert a.history[0]["l_seg"] != b.history[0]["l_seg"]


def scripted_fit(tiny_root, monkeypatch, scores, **cfg_kw):
    script = list(scores)
    monkeypatch.setattr(training, "validation_miou", lambda model, patches, nc: script.pop(0))
    ds = load_dataset(tiny_root)
    return fit(tiny_cfg(**cfg_kw), ds)


def test_patience_zero_stops_after_first_non_improving_epoch(tiny_root, monkeypatch):
    result = scripted_fit(tiny_root, monkeypatch, [0.5, 0.4, 0.6, 0.7], patience=0, max_epochs=4)
    assert result.epochs_run == 2
    assert result.best_epoch == 0
    assert result.best_val_miou == 0.5


def test_plateau_counts_as_non_improvement(tiny_root, monkeypatch):
    result = scripted_fit(tiny_root, monkeypatch, [0.5, 0.5, 0.5], patience=0, max_epochs=3)
    assert result.epochs_run == 2


def test_monotone_improvement_never_stops_early(tiny_root, monkeypatch):
    scores = [0.1 * (i + 1) for i in range(4)]
    result = scripted_fit(tiny_root, monkeypatch, scores, patience=0, max_epochs=4)
    assert result.epochs_run == 4
    assert result.best_epoch == 3


def test_single_epoch_budget_is_respected(tiny_root, monkeypatch):
    result = scripted_fit(tiny_root, monkeypatch, [0.3], max_epochs=1)
    assert result.epochs_run == 1
    assert len(result.history) == 1


def test_patience_tolerates_exactly_that_many_bad_epochs(tiny_root, monkeypatch):
    # one bad epoch is forgiven with patience 1; two consecutive are not
    result = scripted_fit(
        tiny_root, monkeypatch, [0.5, 0.4, 0.9, 0.1, 0.1, 0.1, 0.1], patience=1, max_epochs=7
    )
    assert result.best_epoch == 2
    assert result.best_val_miou == 0.9
    assert result.epochs_run == 5


def test_best_checkpoint_state_is_restored(tiny_root, monkeypatch, tmp_path):
    captured = {}
    real_validation = training.validation_miou
    script = [0.2, 0.9, 0.1, 0.1]

    def fake_validation(model, patches, nc):
        score = script.pop(0)
        if score == 0.9:
            captured["state"] = {k: v.clone() for k, v in model.state_dict().items()}
        return score

    monkeypatch.setattr(training, "validation_miou", fake_validation)
    ds = load_dataset(tiny_root)
    result = fit(tiny_cfg(max_epochs=4, patience=5), ds, out_dir=tmp_path)
    assert result.best_epoch == 1
    final = result.model.state_dict()
    for key, value in captured["state"].items():
        assert torch.equal(final[key], value), key
    assert (tmp_path / "history.csv").is_file()
    assert (tmp_path / "checkpoint.bin").is_file()
    assert real_validation is not fake_validation  # keep the reference honest


def test_training_never_needs_the_held_out_labels(tiny_root, tmp_path):
    import shutil

    root = tmp_path / "ds"
    shutil.copytree(tiny_root, root)
    shutil.rmtree(root / "eval_labels")
    ds = load_dataset(root)
    result = fit(tiny_cfg(max_epochs=1), ds)
    assert result.epochs_run == 1
    with pytest.raises(FileNotFoundError):
        evaluate(result.model, ds)


class _LookupModel(torch.nn.Module):
    """Stands in for a checkpoint that memorized every quadrant perfectly."""

    def __init__(self, table: dict, num_classes: int):
        super().__init__()
        self.table = table
        self.cfg = SimpleNamespace(num_classes=num_classes)

    def forward(self, x):
        key = np.ascontiguousarray(x.numpy()).tobytes()
        label = self.table[key]
        probs = np.zeros((1, self.cfg.num_classes) + label.shape, dtype=np.float32)
        for c in range(self.cfg.num_classes):
            probs[0, c][label == c] = 1.0
        return torch.as_tensor(probs)


def _quadrant_key(image: np.ndarray) -> bytes:
    return np.ascontiguousarray(image.transpose(2, 0, 1)[None]).tobytes()


def test_evaluate_scores_a_memorizing_model_perfectly(tiny_root):
    ds = load_dataset(tiny_root)
    num_classes = 6
    table = {}
    for _, pid in ds.patch_ids(["D90"]):
        patch = ds.load("D90", pid)
        label = load_eval_label(tiny_root, "D90", pid)
        full = patch
        full.label = label
        for quad in four_crop(full):
            table[_quadrant_key(quad.image)] = quad.label
    report, cm = evaluate(_LookupModel(table, num_classes), ds)
    assert report.miou == 1.0
    assert cm.counts.sum() == cm.counts.trace()


def test_evaluate_constant_predictor_matches_hand_counts(tiny_root):
    ds = load_dataset(tiny_root)
    num_classes = 6

    class ConstantModel(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.cfg = SimpleNamespace(num_classes=num_classes)

        def forward(self, x):
            probs = torch.zeros(1, num_classes, x.shape[2], x.shape[3])
            probs[:, 0] = 1.0
            return probs

    report, cm = evaluate(ConstantModel(), ds)
    oracle = ConfusionMatrix(num_classes)
    for _, pid in ds.patch_ids(["D90"]):
        ref = load_eval_label(tiny_root, "D90", pid)
        oracle = accumulate(oracle, np.zeros_like(ref), ref, ignore_index=num_classes - 1)
    assert np.array_equal(cm.counts, oracle.counts)
    oracle_report = iou(oracle, num_scored=num_classes - 1)
    assert report.miou == oracle_report.miou
    # classes present in the reference but never predicted score zero
    present = oracle.counts.sum(axis=1) > 0
    assert all(report.per_class[c] == 0.0 for c in range(1, num_classes - 1) if present[c])


def test_train_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        tiny_cfg(batch_size=1)
    with pytest.raises(ValueError, match="patience"):
        tiny_cfg(patience=-1)
    with pytest.raises(ValueError, match="val_fraction"):
        tiny_cfg(val_fraction=1.0)
    with pytest.raises(ValueError, match="num_classes"):
        tiny_cfg(dcs=DcsConfig(num_classes=3))
    cfg = tiny_cfg()
    assert cfg.geo_head.out_dim == cfg.encoding.dim
    assert cfg.dcs.num_classes == cfg.network.num_classes - 1


def test_history_csv_round_trips_floats(tmp_path):
    rows = [
        {"epoch": 0, "l_seg": 1.2345678901234567, "val_miou": float("nan")},
        {"epoch": 1, "l_seg": 0.1, "val_miou": 0.25},
    ]
    path = tmp_path / "history.csv"
    write_history_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,l_seg,val_miou"
    cells = lines[1].split(",")
    assert float(cells[1]) == rows[0]["l_seg"]
    assert math.isnan(float(cells[2]))
    with pytest.raises(ValueError):
        write_history_csv(tmp_path / "empty.csv", [])
