import csv
import json

import numpy as np
import pytest

from langdet import harness as H
from langdet.bank import curate_descriptions, embed_synthetic, silhouette, train_categorical_prompts
from langdet.cli import main
from langdet.config import RunConfig, parse_ablation
from langdet.synth import generate_split
from langdet.train import METRIC_COLUMNS, METRICS_SCHEMA, load_checkpoint, train

TINY = dict(train_size=16, eval_size=12, epochs=1, batch_size=8, dim=16, heads=2, enc_layers=1,
            dec_layers=2, queries=10, ffn_dim=16, backbone_channels=[4, 8, 16], guidance_dim=4,
            n_variants=2, bank_dim=16, prompt_epochs=5, eval_every=1)


def tiny(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def read_metrics(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def test_config_round_trip_and_validation(tmp_path):
    cfg = tiny(seed=4, reasoner=False)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"epochs": 1, "learning_rate": 0.1})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"relation_temperature": 0.0})
    with pytest.raises(ValueError, match="reasoner_after"):
        RunConfig(reasoner_after=3).validate()
    assert RunConfig().eval_iou == 0.7 and RunConfig(style="visdrone").eval_iou == 0.5


def test_parse_ablation():
    assert parse_ablation("reasoner=on,relation=off") == {"reasoner": True, "relation": False}
    with pytest.raises(ValueError):
        parse_ablation("reasoner=maybe")


def test_zero_epochs_writes_header_only_and_initial_checkpoint(tmp_path):
    cfg = tiny(epochs=0)
    result = train(cfg, tmp_path)
    header, rows = read_metrics(tmp_path / "metrics.csv")
    assert header == f"# schema={METRICS_SCHEMA}" and rows == []
    assert (tmp_path / "metrics.csv").read_text().splitlines()[1] == ",".join(METRIC_COLUMNS)
    model, _ = load_checkpoint(tmp_path / "checkpoint.npz")
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), result.model.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_runs_are_byte_identical(tmp_path):
    train(tiny(), tmp_path / "a")
    train(tiny(), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_ablation_flags_zero_the_extra_losses(tmp_path):
    train(tiny(reasoner=False, relation=False), tmp_path / "off")
    train(tiny(), tmp_path / "on")
    _, off = read_metrics(tmp_path / "off" / "metrics.csv")
    _, on = read_metrics(tmp_path / "on" / "metrics.csv")
    assert all(float(r["loss_relation"]) == 0.0 and float(r["loss_guidance"]) == 0.0 for r in off)
    assert all(float(r["loss_relation"]) > 0.0 and float(r["loss_guidance"]) > 0.0 for r in on)
    params = {k: json.loads((tmp_path / k / "summary.json").read_text())["parameters"] for k in ("on", "off")}
    assert params["on"] > params["off"]


def test_frozen_bank_unchanged_by_training(tmp_path):
    train(tiny(), tmp_path)
    from langdet.bank import load_frozen
    from langdet.train import prepare_bank

    assert load_frozen(tmp_path / "bank.json").digest() == prepare_bank(tiny()).digest()


def test_ablation_table_schema(tmp_path):
    result = H.run_ablation(tiny(epochs=1, eval_every=5), seeds=(0,), out_dir=tmp_path)
    assert [(r.reasoner, r.relation) for r in result.runs] == list(H.ABLATION_ROWS)
    lines = (tmp_path / "ablation_table.csv").read_text().splitlines()
    assert lines[0] == f"# schema={H.ABLATION_SCHEMA}"
    assert lines[1] == ",".join(H.TABLE_COLUMNS)
    body = list(csv.reader(lines[2:]))
    assert [(r[0], r[1]) for r in body] == [("off", "off"), ("on", "off"), ("off", "on"), ("on", "on")]
    assert int(body[3][4]) > int(body[0][4])
    checks = H.ablation_checks(result)
    assert len(checks) == 6 and all(isinstance(ok, bool) for _, ok, _ in checks)


def test_eval_by_variation(tmp_path):
    cfg = tiny(epochs=1)
    train(cfg, tmp_path)
    rows, records = H.eval_by_variation(tmp_path / "checkpoint.npz")
    by_name = {r["subset"]: r for r in rows}
    weather = [by_name[f"weather={w}"] for w in ("clean", "night", "foggy")]
    assert sum(r["images"] for r in weather) == by_name["all"]["images"] == 12
    _, manifest = generate_split(cfg.eval_size, cfg.data_seed + 1_000_003, cfg.style)
    for name, ids in manifest["subsets"].items():
        expected = H.ap_from_records([records[i] for i in ids])
        got = by_name[name]["ap"]
        assert (np.isnan(expected) and np.isnan(got)) or got == expected


def test_variation_union_identity_and_empty_subset(tmp_path):
    cfg = tiny(epochs=0)
    train(cfg, tmp_path)
    samples, manifest = generate_split(6, 3, "uavdt", {"weather": {"night": 1.0}})
    path = tmp_path / "m.json"
    path.write_text(json.dumps(manifest))
    rows, _ = H.eval_by_variation(tmp_path / "checkpoint.npz", path)
    by_name = {r["subset"]: r for r in rows}
    assert by_name["weather=night"]["images"] == 6
    a, b = by_name["weather=night"]["ap"], by_name["all"]["ap"]
    assert (np.isnan(a) and np.isnan(b)) or a == b
    assert by_name["weather=foggy"]["images"] == 0 and np.isnan(by_name["weather=foggy"]["ap"])
    out = H.write_variation(rows, tmp_path / "v.csv").read_text()
    assert "weather=foggy,0,n/a" in out


def _bank(sigma, orthogonal=False):
    descs = curate_descriptions([f"c{k}" for k in range(4)], n_variants=3)
    return embed_synthetic(descs, dim=16, sigma_in=sigma, orthogonal=orthogonal)


def test_plot_bank_degenerate_geometry(tmp_path):
    bank = _bank(0.0, orthogonal=True)
    frozen = bank.with_prompts(np.zeros((4, 16))).freeze()
    csv_path, svg_path = H.plot_bank(frozen, tmp_path / "bank")
    coords, labels = H.read_coordinates(csv_path)
    assert len(coords) == frozen.size == 16
    for c in range(4):
        assert np.max(np.abs(coords[labels == c] - coords[labels == c][0])) < 1e-9
    assert len({tuple(np.round(coords[labels == c][0], 6)) for c in range(4)}) == 4
    assert svg_path.read_text().lstrip().startswith("<?xml")


def test_plot_bank_silhouette_improves_after_prompts(tmp_path):
    bank = _bank(0.6)
    prompts, _ = train_categorical_prompts(bank, epochs=150)
    frozen = bank.with_prompts(prompts).freeze()
    raw, _ = H.plot_bank(frozen, tmp_path / "raw", with_prompts=False)
    post, _ = H.plot_bank(frozen, tmp_path / "post")
    assert H.coordinate_silhouette(post) > H.coordinate_silhouette(raw)
    assert silhouette(frozen.z, frozen.labels()) > silhouette(frozen.embeddings(), frozen.labels())


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    tiny(epochs=1).save(cfg_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--seed", "2", "--out", str(out),
                 "--ablation", "reasoner=on,relation=off"]) == 0
    saved = RunConfig.load(out / "config.json")
    assert saved.seed == 2 and saved.reasoner and not saved.relation
    assert main(["eval-by-variation", "--checkpoint", str(out / "checkpoint.npz"), "--out", str(out)]) == 0
    assert (out / "variation.csv").exists()
    assert main(["make-data", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    manifest = json.loads((tmp_path / "data" / "train" / "manifest.json").read_text())
    assert manifest["size"] == 16 and len(list((tmp_path / "data" / "train" / "images").iterdir())) == 16
    assert main(["plot-bank", "--config", str(cfg_path), "--out", str(tmp_path / "plot")]) == 0
    assert "silhouette" in capsys.readouterr().out


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all(line.startswith("PASS") for line in lines)
