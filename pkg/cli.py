#!/usr/bin/env python3
"""
Command-line driver: train / eval / attack / analyze / gradcheck / report.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 training abort.
"""
import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import analysis
import attacks
import data as ds
import gradcheck
import losses
import net
import train as tr
from attacks import AttackConfig
from data import TripletGeometry
from losses import LossConfig
from net import NetConfig
from train import TrainConfig

log = logging.getLogger("spat")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "model.ckpt.json"


class ConfigError(ValueError):
    pass


# ==========================
# 1. experiment config
# ==========================
class TripletSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["triplet"] = "triplet"
    geometry: TripletGeometry = TripletGeometry()
    subsample_per_class: Optional[int] = Field(None, ge=1)
    eval_seed_offset: int = 1


class IdxSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["idx"]
    images: str
    labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    subsample_per_class: Optional[int] = Field(None, ge=1)
    eval_subsample_per_class: Optional[int] = Field(None, ge=1)


DatasetSpec = Annotated[Union[TripletSource, IdxSource], Field(discriminator="kind")]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    net: NetConfig = NetConfig(layer_sizes=[10, 32, 16, 3], head_mode="hypersphere")
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    atk_train: AttackConfig = AttackConfig.for_training()
    atk_eval: AttackConfig = AttackConfig.for_evaluation()
    dataset: DatasetSpec = TripletSource()
    output_dir: str = "runs/default"
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _train_section(cls, raw):
        if isinstance(raw, dict) and isinstance(raw.get("train"), dict):
            clash = sorted(k for k in ("loss_cfg", "atk_train", "seed") if k in raw["train"])
            if clash:
                raise ValueError(f"train.{clash[0]} is set at top level (loss / atk_train / seed)")
        return raw

    @model_validator(mode="after")
    def _consistent(self):
        if self.loss.needs_hypersphere and self.net.head_mode != "hypersphere":
            raise ValueError(f"loss.acc_mode={self.loss.acc_mode} needs net.head_mode=hypersphere")
        if self.net.head_mode == "hypersphere" and self.net.scale_s != self.loss.scale_s:
            raise ValueError(f"net.scale_s={self.net.scale_s} != loss.scale_s={self.loss.scale_s}")
        if isinstance(self.dataset, TripletSource):
            if self.dataset.geometry.dim != self.net.input_dim:
                raise ValueError(f"triplet dim {self.dataset.geometry.dim} != net input {self.net.input_dim}")
            if self.net.class_count < 3:
                raise ValueError("triplet data has 3 classes")
        return self

    def train_config(self, threads=None):
        update = {"loss_cfg": self.loss, "atk_train": self.atk_train, "seed": self.seed}
        if threads:
            update["threads"] = threads
        return self.train.model_copy(update=update)

    def config_hash(self):
        doc = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def _line_of(text, keys):
    """Line of the last key in `keys`, each one searched for after the line of its parent."""
    lines = text.splitlines()
    found, start = None, 0
    for key in keys:
        needle = f'"{key}"'
        for i in range(start, len(lines)):
            if needle in lines[i]:
                found, start = i + 1, i
                break
    return found


def load_config(path, seed=None, output_dir=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"])
            keys = [p for p in err["loc"] if isinstance(p, str)]
            ln = _line_of(text, keys) if keys else None
            where = f"{path}:{ln}" if ln else str(path)
            lines.append(f"{where}: {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from e


def build_datasets(cfg: ExperimentConfig):
    """(training set, evaluation set)."""
    src = cfg.dataset
    if isinstance(src, TripletSource):
        train_ds = ds.gen_triplet(src.geometry, cfg.seed)
        eval_ds = ds.gen_triplet(src.geometry, cfg.seed + src.eval_seed_offset)
    else:
        train_ds = ds.load_idx(src.images, src.labels)
        eval_ds = train_ds
        if src.test_images and src.test_labels:
            eval_ds = ds.load_idx(src.test_images, src.test_labels)
        if src.eval_subsample_per_class:
            eval_ds = ds.subsample(eval_ds, src.eval_subsample_per_class, cfg.seed + 1)
    if src.subsample_per_class:
        train_ds = ds.subsample(train_ds, src.subsample_per_class, cfg.seed)
    if train_ds.dim != cfg.net.input_dim:
        raise ConfigError(f"dataset dim {train_ds.dim} != net input {cfg.net.input_dim}")
    if train_ds.class_count > cfg.net.class_count:
        raise ConfigError(f"dataset has {train_ds.class_count} classes, net has {cfg.net.class_count}")
    return train_ds, eval_ds


# ==========================
# 2. checkpoints
# ==========================
def save_checkpoint(path, params: net.ModelParams, net_cfg: net.NetConfig, provenance: dict):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": net_cfg.model_dump(mode="json"),
        # json writes the shortest repr of each float, which round-trips float64 exactly
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.named_arrays().items()},
        "provenance": provenance,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    return path


def load_checkpoint(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    try:
        net_cfg = net.NetConfig.model_validate(doc["net_config"])
        arrays = {}
        for name, rec in doc["params"].items():
            a = np.asarray(rec["data"], dtype=np.float64)
            if a.size != int(np.prod(rec["shape"])):
                raise ConfigError(f"{path}: {name} has {a.size} values for shape {rec['shape']}")
            arrays[name] = a.reshape(rec["shape"])
        params = net.ModelParams.from_named_arrays(arrays)
        net.check_params(params, net_cfg)
    except (KeyError, ValidationError, ValueError) as e:
        raise ConfigError(f"{path}: malformed checkpoint: {e}") from e
    return params, net_cfg, doc.get("provenance", {})


def _checkpoint_for(cfg: ExperimentConfig, path):
    params, ck_cfg, prov = load_checkpoint(path)
    have, want = ck_cfg.model_dump(), cfg.net.model_dump()
    diff = sorted(k for k in want if have.get(k) != want[k])
    if diff:
        detail = ", ".join(f"{k}={have.get(k)!r} (config {want[k]!r})" for k in diff)
        raise ConfigError(f"checkpoint {path} does not match net config: {detail}")
    return params, ck_cfg, prov


def write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=2)
    return str(path)


# ==========================
# 3. commands
# ==========================
def cmd_train(args):
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, eval_ds = build_datasets(cfg)
    tcfg = cfg.train_config(args.threads)
    params0 = net.init_params(cfg.net, cfg.seed)
    log.info("training %s on %s (%d samples), acc_mode=%s, adversarial=%s", cfg.net.layer_sizes,
             train_ds.name, len(train_ds), cfg.loss.acc_mode, tcfg.adversarial)

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as mf:
        def on_epoch(m, _params):
            mf.write(m.model_dump_json() + "\n")
            mf.flush()

        try:
            params, history = tr.train(params0, train_ds, tcfg, cfg.net, on_epoch=on_epoch, eval_data=eval_ds,
                                       eval_atk=None if args.no_eval_attack else cfg.atk_eval,
                                       progress=not args.quiet)
        except tr.TrainingAborted as e:
            write_json({"error": str(e), "epoch": e.epoch, "batch_index": e.batch_index, "dump": e.dump},
                       out / "abort.json")
            print(str(e), file=sys.stderr)
            return EXIT_ABORT

    ckpt = save_checkpoint(out / CHECKPOINT_NAME, params, cfg.net,
                           {"config_hash": cfg.config_hash(), "epoch": len(history), "seed": cfg.seed})
    clean, _ = tr.evaluate(params, cfg.net, eval_ds, threads=tcfg.threads)
    summary = {
        "dataset": train_ds.name,
        "epochs": len(history),
        "clean_accuracy": clean,
        "train_clean_accuracy": tr.evaluate(params, cfg.net, train_ds, threads=tcfg.threads)[0],
        "final_metrics": history[-1].model_dump() if history else None,
        "config_hash": cfg.config_hash(),
    }
    if not args.no_eval_attack:
        summary["robust_accuracy"], _ = tr.evaluate(params, cfg.net, eval_ds, cfg.atk_eval, cfg.loss,
                                                    seed=cfg.seed, threads=tcfg.threads, progress=not args.quiet)
    write_json(summary, out / "summary.json")
    print(json.dumps({"checkpoint": str(ckpt), "metrics": str(metrics_path),
                      "summary": str(out / "summary.json")}, ensure_ascii=False))
    return EXIT_OK


def _eval_split(cfg, split):
    train_ds, eval_ds = build_datasets(cfg)
    return train_ds if split == "train" else eval_ds


def cmd_eval(args):
    cfg = load_config(args.config, args.seed, args.out)
    params, _, prov = _checkpoint_for(cfg, args.checkpoint or Path(cfg.output_dir) / CHECKPOINT_NAME)
    data = _eval_split(cfg, args.split)
    threads = args.threads or cfg.train.threads
    src_params = src_cfg = None
    if args.surrogate:
        src_params, src_cfg, _ = load_checkpoint(args.surrogate)
        if src_cfg.input_dim != cfg.net.input_dim or src_cfg.class_count != cfg.net.class_count:
            raise ConfigError(f"surrogate {args.surrogate} does not share input/class dims with the target")

    clean, clean_conf = tr.evaluate(params, cfg.net, data, threads=threads)
    result = {"dataset": data.name, "samples": len(data), "checkpoint_provenance": prov,
              "clean_accuracy": clean, "clean_confusion": clean_conf.tolist()}
    if not args.no_attack:
        common = dict(loss_cfg=cfg.loss, source_params=src_params, source_cfg=src_cfg, seed=cfg.seed, threads=threads)
        fgsm_acc, fgsm_conf = tr.evaluate(params, cfg.net, data, cfg.atk_eval, method="fgsm", **common)
        rob, rob_conf = tr.evaluate(params, cfg.net, data, cfg.atk_eval, progress=not args.quiet, **common)
        result.update({
            "black_box": bool(args.surrogate),
            "surrogate": str(args.surrogate) if args.surrogate else None,
            "attack": cfg.atk_eval.model_dump(),
            "fgsm_accuracy": fgsm_acc,
            "fgsm_confusion": fgsm_conf.tolist(),
            "robust_accuracy": rob,
            "robust_confusion": rob_conf.tolist(),
        })
    path = write_json(result, Path(cfg.output_dir) / "eval.json")
    print(json.dumps({"eval": path}, ensure_ascii=False))
    return EXIT_OK


def cmd_attack(args):
    cfg = load_config(args.config, args.seed, args.out)
    params, _, _ = _checkpoint_for(cfg, args.checkpoint or Path(cfg.output_dir) / CHECKPOINT_NAME)
    data = _eval_split(cfg, args.split)
    atk = cfg.atk_train if args.train_attack else cfg.atk_eval
    threads = args.threads or cfg.train.threads
    X = attacks.generate(params, cfg.net, data.features, data.labels, atk, cfg.loss, seed=cfg.seed,
                         threads=threads, progress=not args.quiet)
    preds = np.array([net.forward(params, cfg.net, x).prediction for x in X], dtype=np.int64)
    linf = np.max(np.abs(X - data.features), axis=1) if len(data) else np.zeros(0)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "adversarial.npz", x_adv=X, labels=data.labels, predictions=preds)
    report = {
        "samples": len(data),
        "attack": atk.model_dump(),
        "accuracy": float(np.mean(preds == data.labels)) if len(data) else 0.0,
        "mean_linf": float(linf.mean()) if linf.size else 0.0,
        "max_linf": float(linf.max()) if linf.size else 0.0,
        "contained": bool(linf.size == 0 or linf.max() <= atk.epsilon + attacks.CONTAINMENT_TOL),
    }
    path = write_json(report, out / "attack.json")
    print(json.dumps({"adversarial": str(out / "adversarial.npz"), "attack": path}, ensure_ascii=False))
    return EXIT_OK


ANALYSES = ("lemma1", "bias", "cos", "norms", "embeddings", "all")


def cmd_analyze(args):
    cfg = load_config(args.config, args.seed, args.out)
    params, _, _ = _checkpoint_for(cfg, args.checkpoint or Path(cfg.output_dir) / CHECKPOINT_NAME)
    data = _eval_split(cfg, args.split)
    out = Path(cfg.output_dir)
    which = ANALYSES[:-1] if args.which == "all" else (args.which,)
    written = {}
    for w in which:
        if w == "lemma1":
            rep = analysis.lemma1_report(params, cfg.net, data, args.max_samples)
            written[w] = write_json(rep.to_dict(), out / "lemma1.json")
        elif w == "bias":
            rep = analysis.adv_confusion(params, cfg.net, data, cfg.atk_eval, cfg.loss, seed=cfg.seed,
                                         threads=args.threads or cfg.train.threads, progress=not args.quiet)
            written[w] = write_json(rep.to_dict(), out / "bias.json")
        elif w == "cos":
            stats = analysis.cos_stats(params, cfg.net, data)
            doc = stats.to_dict()
            doc["detected_hard_pairs"] = analysis.detect_hard_pairs(stats)
            written[w] = write_json(doc, out / "cos_stats.json")
        elif w == "norms":
            written[w] = write_json(analysis.weight_norms(params, cfg.net.head_mode), out / "weight_norms.json")
        elif w == "embeddings":
            written[w] = str(analysis.export_embeddings(params, cfg.net, data, out / "embeddings.csv",
                                                        normalized=args.normalized))
    print(json.dumps(written, ensure_ascii=False))
    return EXIT_OK


def cmd_gradcheck(args):
    activation, scale_s, loss_cfg = "tanh", 5.0, None
    if args.config:
        cfg = load_config(args.config)
        activation, scale_s, loss_cfg = cfg.net.activation, cfg.net.scale_s, cfg.loss
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    results = gradcheck.run_suite(args.trials, tuple(args.layers), activation, args.seed or 0, loss_cfg, scale_s)
    for r in results:
        print(f"{r.mode:<7} {r.head_mode:<12} max_rel_error={r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL ' + r.worst}")
    bad = [r for r in results if not r.ok]
    if bad:
        for r in bad:
            print(f"gradient check failed: mode={r.mode} head={r.head_mode} coordinate={r.worst} "
                  f"rel_error={r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


REPORT_FILES = ("summary.json", "eval.json", "attack.json", "lemma1.json", "bias.json", "cos_stats.json",
                "weight_norms.json")


def _pct(v):
    return f"{100.0 * v:.2f}%" if isinstance(v, (int, float)) else "-"


def write_report_text(found, path):
    """Human-readable digest of an output directory."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("=" * 60 + "\n")
        f.write("SPAT 实验报告\n")
        f.write("=" * 60 + "\n\n")
        s = found.get("summary.json")
        if s:
            f.write("训练结果：\n")
            f.write(f"   • 数据集：{s.get('dataset')}\n")
            f.write(f"   • 轮数：{s.get('epochs')}\n")
            f.write(f"   • Clean：{_pct(s.get('clean_accuracy'))}\n")
            f.write(f"   • PGD：{_pct(s.get('robust_accuracy'))}\n\n")
        e = found.get("eval.json")
        if e:
            f.write(f"评估（{'black-box' if e.get('black_box') else 'white-box'}）：\n")
            f.write(f"   • Clean：{_pct(e.get('clean_accuracy'))}\n")
            f.write(f"   • FGSM：{_pct(e.get('fgsm_accuracy'))}\n")
            f.write(f"   • PGD：{_pct(e.get('robust_accuracy'))}\n\n")
        b = found.get("bias.json")
        if b:
            f.write("对抗预测偏置：\n")
            for t in b.get("per_class_top_target", []):
                if t.get("defined"):
                    f.write(f"   • class {t['class']} -> {t['target']}  share {_pct(t['share'])} "
                            f"of {t['misclassified']}\n")
                else:
                    f.write(f"   • class {t['class']}: no misclassifications\n")
            f.write(f"   • HCP share：{_pct(b.get('hcp_share'))}\n\n")
        lm = found.get("lemma1.json")
        if lm:
            f.write("梯度分解：\n")
            f.write(f"   • median σ_true：{lm.get('median_sigma_true'):.4f}\n")
            f.write(f"   • max exact relative residual：{lm.get('max_exact_relative_residual'):.3e}\n")
            f.write(f"   • median oracle relative residual：{lm.get('median_relative_residual'):.3e}\n\n")
        w = found.get("weight_norms.json")
        if w:
            f.write("原型向量范数：\n")
            f.write("   • " + ", ".join(f"{v:.4f}" for v in w.get("norms", [])) + "\n")
            f.write(f"   • CV：{w.get('cv'):.4f}\n\n")
        f.write("-" * 40 + "\n")
        f.write("files: " + ", ".join(sorted(found)) + "\n")


def cmd_report(args):
    out = Path(args.out) if args.out else Path(load_config(args.config).output_dir)
    found = {}
    for name in REPORT_FILES:
        p = out / name
        if p.exists():
            with open(p, "r", encoding="utf-8") as f:
                found[name] = json.load(f)
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        with open(metrics, "r", encoding="utf-8") as f:
            found["metrics.jsonl"] = [json.loads(line) for line in f if line.strip()]
    if not found:
        print(f"no results found in {out}", file=sys.stderr)
        return EXIT_USAGE
    write_json(found, out / "report.json")
    write_report_text(found, out / "report.txt")
    print(json.dumps({"report": str(out / "report.json"), "report_text": str(out / "report.txt")}, ensure_ascii=False))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--checkpoint")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--split", default="test", choices=["train", "test"])
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--log_level", "--log-level", default="INFO")

    ap = argparse.ArgumentParser(prog="spat", description="self-paced adversarial training lab")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common])
    p.add_argument("--no_eval_attack", "--no-eval-attack", action="store_true")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--surrogate")
    p.add_argument("--no_attack", "--no-attack", action="store_true")
    p = sub.add_parser("attack", parents=[common])
    p.add_argument("--train_attack", "--train-attack", action="store_true", help="use atk_train instead of atk_eval")
    p = sub.add_parser("analyze", parents=[common])
    p.add_argument("--which", required=True, choices=ANALYSES)
    p.add_argument("--max_samples", "--max-samples", type=int, default=200)
    p.add_argument("--normalized", action="store_true", help="export s·z/‖z‖ instead of z")
    p = sub.add_parser("gradcheck", parents=[common])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--layers", type=int, nargs="+", default=[4, 6, 5, 3])
    sub.add_parser("report", parents=[common])
    return ap


_NEEDS_CONFIG = ("train", "eval", "attack", "analyze")


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command in _NEEDS_CONFIG and not args.config:
        print(f"{args.command}: missing --config", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "report" and not (args.out or args.config):
        print("report: need --out or --config", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None and args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError) as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
