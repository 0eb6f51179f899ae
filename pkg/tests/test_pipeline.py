import numpy as np
import pytest

from liftseg import pipeline as pl
from liftseg.config import tiny_config
from liftseg.evaluation import EvalReport


@pytest.fixture(scope="module")
def cfg():
    return tiny_config(synth__train_scenes=1, synth__eval_scenes=1, synth__unlabeled_scenes=2, stage1__steps=2,
                       stage2__steps=2,
                       queries__train=8, queries__infer=8)


@pytest.fixture(scope="module")
def scenes(cfg):
    return pl.generate_scenes(cfg, "train"), pl.generate_scenes(cfg, "eval")


def test_train_and_eval_seeds_disjoint(scenes):
    train, ev = scenes
    assert train[0].name != ev[0].name
    assert not np.array_equal(train[0].cloud.positions[:10], ev[0].cloud.positions[:10])
    with pytest.raises(ValueError):
        pl.generate_scenes(tiny_config(), "test")


def test_unlabeled_split(cfg, scenes):
    extra = pl.generate_scenes(cfg, "unlabeled")
    assert len(extra) == 2 and all(len(sc.frames) == 1 for sc in extra)
    names = {sc.name for group in scenes for sc in group}
    assert not names & {sc.name for sc in extra}
    assert pl.generate_scenes(tiny_config(synth__unlabeled_scenes=0), "unlabeled") == []


def test_lift_and_full_sample(scenes, cfg):
    sc = scenes[0][0]
    partials = pl.lift_scene(sc, cfg)
    assert partials and all(np.all(p.targets.sizes >= cfg.lift.min_points) for p in partials)
    full = pl.full_sample(sc, cfg)
    assert full.targets.n_points == len(full.cloud) < len(sc.cloud)


def test_coordinate_scale_applied(scenes, cfg):
    sc = scenes[0][0]
    # positions are divided by the scale factor
    halved = pl._rescale(sc.cloud, tiny_config(geometry__coordinate_scale=2.0))
    assert np.allclose(halved.positions * 2, sc.cloud.positions)
    assert pl._rescale(sc.cloud, cfg) is sc.cloud


def test_sam3d_baseline_scores(scenes, cfg):
    sc = scenes[1][0]
    full = pl.full_sample(sc, cfg)
    masks = pl.sam3d_baseline(sc, full.cloud, cfg)
    assert masks.n_points == len(full.cloud) and len(masks) > 0
    assert np.all((masks.scores >= 0) & (masks.scores <= 1))


def test_run_pipeline_report_shape(cfg):
    res = pl.run_pipeline(cfg)
    rows = res.report["rows"]
    assert tuple(rows) == pl.ROWS
    for raw, pp in pl.report_rows(res.report).values():
        assert isinstance(raw, EvalReport) and isinstance(pp, EvalReport)
    assert set(res.timings) >= {"pretrain", "finetune", "eval"}
    assert len(res.pseudo_counts) == 3   # one training scene plus two unlabeled
    assert len(pl.format_report(res.report).splitlines()) == 2 + len(pl.ROWS)
