import pytest

from mrnet.ablation import audit, loss_toggle_spec, mask_sweep_spec, parse_spec, read_table, run_ablation
from mrnet.config import ConfigError, diff

BASE = {"model.image_size": 32, "model.base_width": 8, "model.mask_hidden": 4, "encoder.channels": 16,
        "train.batch_size": 2, "train.max_steps": 2, "train.val_max_batches": 1}


def test_parse_spec():
    spec = parse_spec("train.max_steps = 5\n[variant a]\nmodel.n_masks = 1\n[variant b]\n")
    assert spec.base == {"train.max_steps": 5}
    assert [v.name for v in spec.variants] == ["a", "b"]
    assert diff(spec.base_config(), spec.variant_config(spec.variants[0])) == {"model.n_masks": (2, 1)}


@pytest.mark.parametrize("text, match", [
    ("[variant a]\nmodel.n_masks = 2\n", "do not change"),
    ("[other a]\nmodel.n_masks = 1\n", "variant NAME"),
    ("model.n_masks = 1\n", "no \\[variant"),
    ("[variant a]\nmodel.bogus = 1\n", "bogus"),
])
def test_spec_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_spec(text)


def test_builtin_specs():
    sweep = mask_sweep_spec()
    assert [v.name for v in sweep.variants] == [f"masks-{n}" for n in (0, 1, 2, 3, 4, 6, 7)]
    assert sweep.variants[2].delta == {}
    toggle = loss_toggle_spec()
    cfg = toggle.variant_config(toggle.variants[0])
    assert cfg.loss.lambda_feature == 0 and cfg.loss.lambda_mask == 0 and cfg.loss.lambda_pixel == 100


def test_run_and_audit(tmp_path, tiny_splits):
    tr, va, te = tiny_splits
    spec = mask_sweep_spec((0, 2), base=BASE)
    rows = run_ablation(spec, tr, va, te, tmp_path)
    assert len(rows) == 2
    assert (tmp_path / "ablation.md").is_file()
    assert audit(tmp_path) == []
    table = read_table(tmp_path)
    assert [int(r["rank"]) for r in table] == [1, 2]
    # tampering with a reported value is caught
    text = (tmp_path / "ablation.csv").read_text().replace(table[0]["psnr"], "99.0", 1)
    (tmp_path / "ablation.csv").write_text(text)
    assert audit(tmp_path)
