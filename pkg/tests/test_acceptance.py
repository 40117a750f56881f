"""End-to-end runs at desk scale. Directional checks only; all are marked slow."""
import json
from pathlib import Path

import numpy as np
import pytest

import analysis
import cli
import net
import train as tr

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
MNIST = ROOT / "data" / "mnist"
needs_mnist = pytest.mark.skipif(not (MNIST / "train-images-idx3-ubyte.gz").exists(),
                                 reason="MNIST IDX files not present under data/mnist/")
# frozen desk-scale bound for CE-trained head norms
NORM_CV_LIMIT = 0.5


def _fit(cfg: cli.ExperimentConfig, seed):
    cfg = cfg.model_copy(update={"seed": seed})
    train_ds, eval_ds = cli.build_datasets(cfg)
    params, _ = tr.train(net.init_params(cfg.net, seed), train_ds, cfg.train_config(), cfg.net, progress=False)
    return cfg, params, eval_ds


def test_default_triplet_config_trains(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["train", "--config", str(CONFIGS / "triplet_spat.json"), "--out", str(out),
                     "--quiet", "--no-eval-attack"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["clean_accuracy"] >= 0.9


@pytest.fixture(scope="module")
def natural_runs():
    base = cli.load_config(CONFIGS / "triplet_ce.json")
    return [_fit(base, seed) for seed in range(5)]


def test_natural_training_biases_adversaries_toward_hard_class(natural_runs):
    shares = []
    for seed, (cfg, params, eval_ds) in enumerate(natural_runs):
        rep = analysis.adv_confusion(params, cfg.net, eval_ds, cfg.atk_eval, cfg.loss, seed=seed)
        top = rep.per_class_top_target[0]
        assert top["defined"]
        shares.append(top["share"] if top["target"] == 1 else 1.0 - top["share"])
    assert np.median(shares) > 0.7


def test_hard_class_sits_closer_in_cosine(natural_runs):
    gaps = []
    for cfg, params, eval_ds in natural_runs:
        mat = analysis.cos_stats(params, cfg.net, eval_ds).cos_matrix
        gaps.append(mat[0][1] - mat[0][2])
    assert np.median(gaps) > 0.0


def test_natural_training_keeps_head_norms_even(natural_runs):
    cvs = [analysis.weight_norms(params, cfg.net.head_mode)["cv"] for cfg, params, _ in natural_runs]
    assert np.median(cvs) < NORM_CV_LIMIT


def test_attack_strength_ordering_and_transfer():
    target_base = cli.load_config(CONFIGS / "triplet_spat.json")
    surrogate_base = cli.load_config(CONFIGS / "triplet_ce.json")
    clean, fgsm, pgd, transfer = [], [], [], []
    for seed in range(3):
        cfg, params, eval_ds = _fit(target_base, seed)
        s_cfg, s_params, _ = _fit(surrogate_base, seed)
        atk = cfg.atk_eval
        clean.append(tr.evaluate(params, cfg.net, eval_ds)[0])
        fgsm.append(tr.evaluate(params, cfg.net, eval_ds, atk, cfg.loss, method="fgsm")[0])
        pgd.append(tr.evaluate(params, cfg.net, eval_ds, atk, cfg.loss)[0])
        transfer.append(tr.evaluate(params, cfg.net, eval_ds, atk, cfg.loss,
                                    source_params=s_params, source_cfg=s_cfg.net)[0])
    assert np.median(clean) >= np.median(fgsm) >= np.median(pgd)
    assert np.median(transfer) >= np.median(pgd)


def _mnist_config(**loss):
    base = cli.load_config(CONFIGS / "mnist_spat.json")
    loss_cfg = base.loss.model_copy(update=loss)
    update = {"loss": loss_cfg, "net": base.net.model_copy(update={"layer_sizes": [784, 64, 32, 10],
                                                                   "scale_s": loss_cfg.scale_s})}
    update["train"] = base.train.model_copy(update={"epochs": 10, "lr_decay_epochs": [8]})
    update["dataset"] = base.dataset.model_copy(update={"subsample_per_class": 200, "eval_subsample_per_class": 50})
    return base.model_copy(update=update)


def _mnist_scores(cfg, seeds=(0, 1, 2)):
    clean, robust = [], []
    atk = cfg.atk_eval.model_copy(update={"steps": 10})
    for seed in seeds:
        cfg_s, params, eval_ds = _fit(cfg, seed)
        clean.append(tr.evaluate(params, cfg_s.net, eval_ds, threads=4)[0])
        robust.append(tr.evaluate(params, cfg_s.net, eval_ds, atk, cfg_s.loss, threads=4)[0])
    return float(np.median(clean)), float(np.median(robust))


@needs_mnist
def test_self_paced_terms_help_robustness():
    _, full = _mnist_scores(_mnist_config())
    plain_atk = {"attack_loss": "rob_kl"}
    ablated_cfg = _mnist_config(acc_mode="nce", sp_rob_enabled=False)
    ablated_cfg = ablated_cfg.model_copy(update={"atk_train": ablated_cfg.atk_train.model_copy(update=plain_atk)})
    _, ablated = _mnist_scores(ablated_cfg)
    assert full >= ablated


@needs_mnist
def test_scale_trades_clean_for_robust():
    clean_1, robust_1 = _mnist_scores(_mnist_config(scale_s=1.0))
    clean_10, robust_10 = _mnist_scores(_mnist_config(scale_s=10.0))
    assert robust_10 >= robust_1
    assert clean_1 >= clean_10

