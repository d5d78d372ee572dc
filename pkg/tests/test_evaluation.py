import numpy as np
import pytest
import torch

from hiva.config import apply_overrides
from hiva.evaluation import (ConfusionCounts, F1Report, cell_in_region, evaluate, export_attention_maps,
                             export_graph, export_metrics_csv, f1_from_predictions, f1_per_au, localization_rates,
                             read_graph_dump, report_model_stats, write_metrics_table)
from hiva.training import Checkpoint, load_model, train_stage1

from conftest import synthetic_for, tiny_config


def _counts(tp, fp, fn, tn=0):
    a = lambda v: np.array([v])  # noqa: E731
    return ConfusionCounts(a(tp), a(fp), a(fn), a(tn))


# F1

def test_f1_examples():
    assert round(f1_per_au(_counts(2, 1, 1)).f1[0], 1) == 66.7
    assert f1_per_au(_counts(0, 0, 0, 5)).f1 == [0.0]
    assert f1_per_au(_counts(5, 0, 0)).f1 == [100.0]


def test_f1_mean_is_plain_average():
    rep = F1Report(["a", "b", "c"], [10.0, 20.0, 33.3], 0.5, 4)
    assert rep.mean_f1 == (10.0 + 20.0 + 33.3) / 3


def test_counts_sum_to_samples():
    rng = np.random.default_rng(0)
    pred, y = rng.integers(0, 2, (50, 4)), rng.integers(0, 2, (50, 4))
    c = ConfusionCounts.from_predictions(pred, y)
    assert ((c.tp + c.fp + c.fn + c.tn) == 50).all()


def test_threshold_zero_gives_full_recall():
    rng = np.random.default_rng(1)
    probs, y = rng.random((30, 3)), rng.integers(0, 2, (30, 3))
    rep = f1_from_predictions(probs, y, threshold=0.0)
    assert all(r == 1.0 for r in rep.recall)


def test_threshold_above_one_all_negative():
    y = np.array([[1, 0], [1, 1]])
    assert f1_from_predictions(np.ones((2, 2)), y, threshold=1.01).f1 == [0.0, 0.0]


# metrics table

def test_metrics_csv_rounding_and_determinism(tmp_path):
    rep = F1Report(["AU1", "AU2"], [66.67, 50.0], 0.5, 10)
    p = export_metrics_csv(rep, tmp_path / "m.csv")
    assert p.read_text() == "AU,AU1,AU2,AVE\nHiVA,66.7,50.0,58.3\n"
    first = p.read_bytes()
    export_metrics_csv(rep, p)
    assert p.read_bytes() == first


def test_metrics_csv_empty_aus(tmp_path):
    with pytest.raises(ValueError):
        export_metrics_csv(F1Report([], [], 0.5, 0), tmp_path / "m.csv")


def test_metrics_table_multiple_rows(tmp_path):
    a, b = F1Report(["AU1"], [90.0], 0.5, 1), F1Report(["AU1"], [80.04], 0.5, 1)
    text = write_metrics_table([("HiVA", a), ("w/o DDCA", b)], tmp_path / "t.csv").read_text()
    assert text.splitlines()[2] == "w/o DDCA,80.0,80.0"


# localization helpers

def test_cell_in_region_uses_cell_centre():
    assert cell_in_region(0, 1, 8, (8, 0, 16, 8))
    assert not cell_in_region(1, 1, 8, (8, 0, 16, 8))


def test_localization_rates():
    maps = np.zeros((2, 1, 2, 2))
    maps[0, 0, 0, 1] = 1
    maps[1, 0, 1, 0] = 1
    rates = localization_rates(maps, np.array([[1], [1]]), [(8, 0, 16, 8)], 8)
    assert rates.tolist() == [0.5]


# evaluation on a trained tiny model

def test_evaluate_cache_equals_recompute(tiny_run, tmp_path):
    cfg, samples, _, c2 = tiny_run
    fresh = evaluate(c2, samples, cfg, use_cache=False)
    first = evaluate(c2, samples, cfg, cache_dir=tmp_path)
    assert (tmp_path / "text_cache.json").is_file()
    second = evaluate(c2, samples, cfg, cache_dir=tmp_path)
    assert fresh == first == second


def test_evaluate_missing_cache_and_descriptions(tiny_run, tmp_path):
    cfg, samples, _, c2 = tiny_run
    missing = apply_overrides(cfg, {})
    missing.data.descriptions = str(tmp_path / "none.txt")
    with pytest.raises(ValueError, match="no valid text cache"):
        evaluate(c2, samples, missing, cache_dir=tmp_path / "empty")


def test_evaluate_deterministic_and_ablation(tiny_run):
    cfg, samples, _, c2 = tiny_run
    assert evaluate(c2, samples, cfg) == evaluate(c2, samples, cfg)
    model = load_model(c2, cfg)
    from hiva.evaluation import predict, text_features

    text = text_features(model, cfg, c2.param_hash)
    _, outs = predict(model, samples, cfg, text, apply_overrides(cfg, {"ablation.no_ddca": True}).ablation,
                      return_outputs=True)
    assert (outs[0].D == 0).all() and (outs[0].C != 0).any()


def test_evaluate_stage1_head(tiny_run):
    cfg, samples, c1, _ = tiny_run
    rep = evaluate(c1, samples, cfg, stage1_head=True)
    assert rep.num_samples == len(samples)


def test_attention_export(tiny_run, tmp_path):
    cfg, samples, _, c2 = tiny_run
    files = export_attention_maps(c2, samples[:2], tmp_path, cfg)
    assert len(files) == 2 * (cfg.num_aus + 1)
    names = sorted(p.name for p in tmp_path.glob(f"{samples[0].sample_id}_*"))
    assert names == sorted(f"{samples[0].sample_id}_{n}.{e}" for n in [*cfg.data.au_ids, "cdca"] for e in ("npy", "png"))
    for f in files:
        arr = np.load(f)
        assert arr.shape == (4, 4)
        assert arr.min() >= 0 and abs(arr.sum() - 1) < 1e-6


def test_attention_export_unwritable(tiny_run, tmp_path):
    cfg, samples, _, c2 = tiny_run
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_attention_maps(c2, samples[:1], blocker / "sub", cfg)


# graph dumps

@pytest.fixture(scope="module")
def twelve_au_stage1():
    cfg = tiny_config(**{"data.au_ids": [f"AU{i}" for i in range(1, 13)], "graph.k": 3, "stage1.max_steps": 1})
    _, samples = synthetic_for(cfg)
    return cfg, samples, train_stage1(cfg, samples)


def test_graph_dump_out_degree_and_round_trip(twelve_au_stage1, tmp_path):
    cfg, samples, c1 = twelve_au_stage1
    path = export_graph(c1, samples, tmp_path, cfg)
    recs = read_graph_dump(path)
    assert len(recs) == len(samples)
    for rec in recs:
        assert rec["k"] == 3
        assert (rec["adjacency"].sum(1) == 3).all() and (np.diag(rec["adjacency"]) == 0).all()
        assert {"sample_id", "edges", "U_norms", "predictions", "labels", "similarity"} <= rec.keys()


def test_graph_dump_deterministic(twelve_au_stage1, tmp_path):
    cfg, samples, c1 = twelve_au_stage1
    a = export_graph(c1, samples, tmp_path / "a", cfg).read_bytes()
    assert a == export_graph(c1, samples, tmp_path / "b", cfg).read_bytes()


def test_graph_dump_needs_graph_params(twelve_au_stage1, tmp_path):
    cfg, samples, c1 = twelve_au_stage1
    stripped = Checkpoint({k: v for k, v in c1.state.items() if not k.startswith("graph.")}, 2, 1, 1,
                          c1.config, c1.seed, c1.rng_state)
    with pytest.raises(ValueError, match="graph"):
        export_graph(stripped, samples, tmp_path, cfg)


# model statistics

def _expected_parameters(cfg, vocab_size):
    """Closed-form parameter count of the configured toy model."""
    n, c, t, m = cfg.num_aus, cfg.model.width, cfg.text, cfg.model
    widths = [max(m.raw_channels >> (m.toy_stages - 1 - i), 8) for i in range(m.toy_stages)]
    widths[-1] = m.raw_channels
    vision, c_in = 0, 3
    for w in widths:
        vision += c_in * w * 4 + w
        c_in = w
    vision += m.raw_channels * c + c
    branches = n * c * c + n * c
    graph = 3 * c * c + n * c + n

    def enc_layer(w):
        return (3 * w * w + 3 * w) + (w * w + w) + (w * 4 * w + 4 * w) + (4 * w * w + w) + 4 * w

    tw = t.width
    text = vocab_size * tw + t.max_tokens * tw + 2 * tw + 2 * tw + t.layers * enc_layer(tw)
    text += tw * c + c + t.context_layers * enc_layer(c)
    inter = (tw * c + c) + 4 * 3 * c * c + (3 * c * c + c) + (n * c + n)
    return {"vision_encoding": vision, "au_branch_graph": branches + graph, "text_encoding": text,
            "cross_modal_interaction": inter}


def test_stats_parameter_count_matches_shapes(tiny_run):
    cfg, _, _, c2 = tiny_run
    stats = report_model_stats(c2, cfg)
    from hiva.text import WordPieceTokenizer

    expected = _expected_parameters(cfg, WordPieceTokenizer().vocab_size)
    assert stats["parameters_per_module"] == expected
    assert stats["total_parameters"] == sum(expected.values())
    assert stats["config_hash"] == c2.config_hash
    assert stats["macs_per_forward"] > 0 and stats["seconds_per_batch"] > 0


def test_pointwise_params_scale_quadratically():
    from hiva.model import HiVA

    counts = []
    for width in (16, 32):
        cfg = tiny_config(**{"model.raw_channels": width, "model.width": width})
        counts.append(HiVA(cfg).vision.pointwise.weight.numel())
    assert counts[1] == 4 * counts[0]
