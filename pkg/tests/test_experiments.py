import dataclasses
import filecmp
import json
import os

import numpy as np
import pytest

from evidential_grounding import autodiff as ad
from evidential_grounding import experiments as ex
from evidential_grounding.losses import Regularizer

TINY_GROUNDING = dict(n_train_videos=16, n_eval_videos=8, clips=12, dim=8, query_tokens=4,
                      vocab=24, n_concepts=6, n_blocks=1, sma_epochs=1, epochs=2,
                      batch_size=8, probe_resolution=6, probe_videos=1, log_epochs=(0, 1))


def tiny_grounding(**kw):
    return ex.GroundingConfig(**{**TINY_GROUNDING, **kw})


def tiny_cubic(**kw):
    base = dict(n_train=64, n_test=40, hidden=(8, 8), epochs=3, batch_size=32, log_epochs=(0, 1))
    return ex.CubicConfig(**{**base, **kw})


# configs --------------------------------------------------------------------

def test_packaged_configs_are_complete():
    from evidential_grounding.cli import default_config
    for kind, cls in ex.CONFIG_TYPES.items():
        mapping = default_config(kind)
        assert set(mapping) == {f.name for f in dataclasses.fields(cls)}
        ex.config_from_mapping(kind, mapping)


def test_config_lists_every_problem():
    mapping = ex.config_to_mapping(ex.CubicConfig())
    del mapping["lr"], mapping["seed"]
    mapping["learning_rate"] = 0.1
    with pytest.raises(ex.ConfigError) as info:
        ex.config_from_mapping("cubic", mapping)
    assert info.value.problems == ["unknown key: learning_rate", "missing key: lr",
                                   "missing key: seed"]


def test_config_type_and_enum_checks():
    mapping = ex.config_to_mapping(ex.GroundingConfig())
    mapping.update(epochs="ten", reg="geom3", noise_sigmas=0.5, evidential_clips="some")
    with pytest.raises(ex.ConfigError) as info:
        ex.config_from_mapping("grounding", mapping)
    text = " ".join(info.value.problems)
    for key in ("epochs", "reg", "noise_sigmas", "evidential_clips"):
        assert key in text


def test_config_overrides_and_hash():
    mapping = ex.config_to_mapping(ex.CubicConfig())
    config = ex.config_from_mapping("cubic", mapping, {"seed": 7})
    assert config.seed == 7 and isinstance(config.hidden, tuple)
    assert ex.config_hash(config) != ex.config_hash(ex.CubicConfig())
    assert ex.config_hash(config) == ex.config_hash(dataclasses.replace(ex.CubicConfig(), seed=7))


# logging ----------------------------------------------------------------------

def test_log_epochs_must_increase_per_stage():
    log = ex.ExperimentLog(metadata={})
    log.record(epoch=1, stage="sma")
    log.record(epoch=0, stage="grounding")
    with pytest.raises(ValueError):
        log.record(epoch=0, stage="grounding")


def test_csv_writer_round_trips_floats(tmp_path):
    path = tmp_path / "x.csv"
    ex.write_csv(path, ["a", "b"], [(0.1, float("nan")), (1 / 3, 2)], comment="seed=1")
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=1" and lines[1] == "a,b"
    assert float(lines[3].split(",")[0]) == 1 / 3
    assert lines[2] == "0.1,"


# cubic --------------------------------------------------------------------------

def test_cubic_run_is_deterministic():
    a = ex.train_cubic(tiny_cubic())
    b = ex.train_cubic(tiny_cubic())
    assert a.log.epochs == b.log.epochs
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)
    assert [e["epoch"] for e in a.log.epochs] == [0, 1, 3]


def test_cubic_divergence_raises(monkeypatch):
    real = ex.evidential_terms

    def poisoned(*args):
        terms, info = real(*args)
        return terms * float("nan"), info

    monkeypatch.setattr(ex, "evidential_terms", poisoned)
    with pytest.raises(ex.DivergenceError) as info:
        ex.train_cubic(tiny_cubic())
    assert (info.value.stage, info.value.epoch, info.value.step) == ("cubic", 1, 0)


def test_ood_ratio():
    x = np.array([-5.0, -1.0, 0.0, 1.0, 5.0])
    e = np.array([4.0, 1.0, 1.0, 1.0, 4.0])
    assert ex.ood_ratio(x, e) == 4.0


def test_evidential_terms_detach_error():
    g = ad.Tensor(np.array([0.1, 0.5, 0.9]), requires_grad=True)
    u, a, b = (ad.Tensor(np.array(v), requires_grad=True)
               for v in ([1.0, 2.0, 0.5], [2.0, 3.0, 1.5], [1.0, 1.0, 2.0]))
    y = np.array([0.0, 1.0, 2.0])
    with_reg, _ = ex.evidential_terms(y, g, u, a, b, Regularizer.TYPE1, 1.0, 1.0, "standard-minmax")
    ad.tsum(with_reg).backward()
    grad_reg = g.grad.copy()
    g.grad = None
    nll, _ = ex.evidential_terms(y, g, u, a, b, Regularizer.NONE, 1.0, 1.0, "standard-minmax")
    ad.tsum(nll).backward()
    np.testing.assert_array_equal(grad_reg, g.grad)


# grounding ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_result():
    return ex.train_grounding(tiny_grounding())


def test_mlm_head_frozen_in_stage_two(tiny_result):
    names = tiny_result.model.mlm_names()
    assert names
    for k in names:
        np.testing.assert_array_equal(tiny_result.model.params[k].data, tiny_result.mlm_snapshot[k])


def test_sma_stage_changes_mlm_head():
    config = tiny_grounding()
    untrained = ex.GroundingModel(ex.GroundingModelConfig(
        dim=config.dim, vocab=config.vocab, n_blocks=config.n_blocks,
        seed=int(np.random.SeedSequence(config.seed).spawn(5)[1].generate_state(1)[0])))
    result = ex.train_grounding(config)
    assert not np.array_equal(untrained.params["mlm.head.weight"].data,
                              result.mlm_snapshot["mlm.head.weight"])


def test_step_log_matches_total_composition(tiny_result):
    steps = tiny_result.log.steps
    assert steps
    for s in steps:
        recomputed = s["grounding"] + s["lambda_der"] * 2.0 / s["n_terms"] * s["evidential_sum"]
        assert abs(recomputed - s["total"]) <= 1e-9 * max(1.0, abs(s["total"]))


def test_evidential_clip_selection():
    config = tiny_grounding()
    batch = ex.gen_grounding(ex._spec(config, 1, 4))
    model = ex.GroundingModel(ex.GroundingModelConfig(dim=config.dim, vocab=config.vocab,
                                                      n_blocks=1))
    all_clips = ex.grounding_step(model, batch, dataclasses.replace(config, evidential_clips="all"),
                                  np.random.default_rng(0))
    fg_only = ex.grounding_step(model, batch, dataclasses.replace(config, evidential_clips="foreground"),
                                np.random.default_rng(0))
    assert all_clips.n_terms == batch.foreground.size
    assert fg_only.n_terms == int(batch.foreground.sum())
    assert all_clips.grounding.item() == fg_only.grounding.item()


def test_zero_lambda_der_leaves_grounding_losses_unchanged():
    base = ex.train_grounding(tiny_grounding(lambda_der=0.0))
    none = ex.train_grounding(tiny_grounding(lambda_der=0.0, reg="none"))
    assert [s["grounding"] for s in base.log.steps] == [s["grounding"] for s in none.log.steps]
    assert all(s["evidential_sum"] is None for s in base.log.steps)
    # the grounding parameters never see the evidential head when lambda_der is 0
    with_der = ex.train_grounding(tiny_grounding())
    assert base.log.steps[0]["grounding"] == with_der.log.steps[0]["grounding"]


def test_noise_sweep_level_zero_is_clean(tiny_result):
    sweep = ex.noise_sweep(tiny_result.model, tiny_result.eval, [0.0, 1.0], [0.0, 0.5], "both")
    clean = ex.evaluate_grounding(tiny_result.model, tiny_result.eval)
    np.testing.assert_array_equal(sweep.epistemic[0], clean.epistemic_video)
    with pytest.raises(ValueError):
        ex.noise_sweep(tiny_result.model, tiny_result.eval, [], [], "video")


def test_bias_probe_grid_shape(tiny_result):
    grid = ex.bias_probe(tiny_result.model, tiny_result.config)
    r = tiny_result.config.probe_resolution
    assert grid.epistemic.shape == (r, r)
    lower = np.tril_indices(r)
    assert np.all(np.isnan(grid.epistemic[lower]))
    upper = np.triu_indices(r, 1)
    assert np.all(np.isfinite(grid.epistemic[upper]))
    assert grid.excluded.any() and grid.ratio() > 0


def _read_tree(root):
    out = {}
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as fh:
            out[name] = fh.read()
    return out


@pytest.mark.parametrize("kind", ["cubic", "grounding"])
def test_run_experiment_is_byte_identical(tmp_path, kind):
    config = tiny_cubic() if kind == "cubic" else tiny_grounding()
    ex.run_experiment(kind, config, str(tmp_path / "a"))
    ex.run_experiment(kind, config, str(tmp_path / "b"))
    a, b = _read_tree(tmp_path / "a"), _read_tree(tmp_path / "b")
    assert a.keys() == b.keys()
    assert a == b
    assert "report.json" in a and "log.jsonl" in a
    if kind == "grounding":
        assert "bias_grid.csv" in a and "kde_both_3.csv" in a
    report = json.loads(a["report.json"])
    assert report["seed"] == config.seed
