"""Command-line entry point.

Exit codes: 0 success, 1 usage or config validation failure, 2 runtime error.
Metric files are written as sorted JSON (plus CSV where tabular) so that
seeded reruns are byte-identical; wall-clock timing goes to a separate file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from ..config import dump_config, load_config
from ..data import build_vocab, export_dataset, load_exported, load_image_file, synth_dataset, template_corpus, Vocab
from ..errors import BcqlmError, ConfigSyntaxError, ConfigValidationError

log = logging.getLogger("bcqlm")

RECORD_FIELDS = ("stage", "epoch", "loss", "pos_mean", "neg_mean", "gap", "lr")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_records_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, RECORD_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in RECORD_FIELDS})


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def setup(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    torch.manual_seed(cfg.seed)
    return cfg


def resolve_vocab(args, out: Path) -> Vocab:
    for path in (getattr(args, "vocab", None), out / "vocab.json"):
        if path and Path(path).exists():
            return Vocab.from_json(Path(path).read_text(encoding="utf-8"))
    return build_vocab(template_corpus())


def load_items(args, cfg, default_n):
    """Items come from a synth-data directory (regenerated from its recorded seed and
    verified against the exported metadata) or are synthesised from --seed/--n."""
    if args.data:
        meta = json.loads((Path(args.data) / "synth_meta.json").read_text(encoding="utf-8"))
        items = synth_dataset(meta["seed"], meta["n"], cfg.image_resolution)
        rows, _ = load_exported(args.data)
        if [(r["id"], r["caption"], r["answer"]) for r in rows] != [(i.item_id, i.caption, i.answer) for i in items]:
            raise BcqlmError(f"{args.data} does not match its recorded generator seed")
        return items
    return synth_dataset(cfg.seed, args.n or default_n, cfg.image_resolution)


def with_stage(cfg, stage: str, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    return cfg.replace(**{stage: {**getattr(cfg, stage).__dict__, **changes}})


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args):
    cfg = setup(args)
    out = out_dir(args)
    items = synth_dataset(cfg.seed, args.n, cfg.image_resolution)
    summary = export_dataset(items, out, cfg)
    vocab = build_vocab(template_corpus())
    (out / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    (out / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    write_json(out / "synth_meta.json", {"seed": cfg.seed, "n": args.n, **summary, "vocab_size": len(vocab)})
    print(json.dumps(summary, sort_keys=True))


def cmd_pretrain(args):
    from .train import pretrain_stage1

    cfg = with_stage(setup(args), "stage1", epochs=args.epochs)
    out = out_dir(args)
    items = load_items(args, cfg, 64)
    vocab = resolve_vocab(args, out)
    _, report, _ = pretrain_stage1(cfg, items, vocab, out_dir=out, checkpoint_every=args.checkpoint_every)
    (out / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    (out / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    write_json(out / "metrics_stage1.json", report.to_json())
    write_records_csv(out / "metrics_stage1.csv", report.records)
    last = report.records[-1]
    print(f"stage1 loss {last['loss']:.5f} gap {last['gap']:.4f}")


def cmd_finetune(args):
    from ..archive import read_archive
    from .train import evaluate_vqa, train_stage2

    cfg = with_stage(setup(args), "stage2", epochs=args.epochs, unfreeze_ratio=args.unfreeze_ratio)
    out = out_dir(args)
    items = load_items(args, cfg, 32)
    vocab = resolve_vocab(args, out)
    stage1 = Path(args.stage1) if args.stage1 else out / "stage1_final.bcqt"
    model, report, state = train_stage2(cfg, items, vocab, read_archive(stage1), out, args.checkpoint_every)
    _, acc = evaluate_vqa(model, vocab, cfg, items)
    report.vqa_accuracy = acc
    body = report.to_json()
    body["breezeclip_frozen"] = state.frozen_unchanged
    body["trainable_fraction"] = state.trainable_fraction
    (out / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    write_json(out / "metrics_stage2.json", body)
    write_records_csv(out / "metrics_stage2.csv", report.records)
    print(f"stage2 loss {report.records[-1]['loss']:.5f} train accuracy {acc:.4f}")


def _load_model(cfg, path):
    from ..model import BcQLM, load_checkpoint

    model = BcQLM(cfg)
    load_checkpoint(model, path)
    return model.eval()


def cmd_eval(args):
    from .flops import flops_report
    from .metrics import MetricsReport, cosine_metrics
    from .train import evaluate_vqa, prepare_stage1, stage1_embeddings

    cfg = setup(args)
    out = out_dir(args)
    items = load_items(args, cfg, 32)
    vocab = resolve_vocab(args, out)
    model = _load_model(cfg, args.checkpoint or out / "stage2_final.bcqt")
    preds, acc = evaluate_vqa(model, vocab, cfg, items)
    emb = stage1_embeddings(model.breezeclip, prepare_stage1(items, vocab, cfg))
    stats = cosine_metrics(emb.image.numpy(), emb.text.numpy())
    record = {"stage": "eval", "epoch": None, "loss": None, "pos_mean": stats.pos_mean,
              "neg_mean": stats.neg_mean, "gap": stats.gap, "lr": None}
    report = MetricsReport([record], acc, {"flops_per_sample": flops_report(cfg)["total"]})
    write_json(out / "metrics_eval.json", report.to_json())
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "question", "answer", "prediction"])
        for it, p in zip(items, preds):
            w.writerow([it.item_id, it.question, it.answer, p])
    lines = [json.dumps({"id": it.item_id, "answer": p}, sort_keys=True) for it, p in zip(items, preds)]
    (out / "predictions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"vqa accuracy {acc:.4f} gap {stats.gap:.4f}")


def cmd_infer(args):
    from .train import answer

    cfg = setup(args)
    out = Path(args.out)
    vocab = resolve_vocab(args, out)
    model = _load_model(cfg, args.checkpoint or out / "stage2_final.bcqt")
    image = torch.from_numpy(load_image_file(args.image, cfg.image_resolution, cfg.norm_mean, cfg.norm_std))
    text = answer(model, vocab, cfg, image, args.question)
    print(text)


def cmd_flops(args):
    from ..model import BcQLM
    from .flops import flops_report, instrumented_flops, measure_latency

    cfg = setup(args)
    out = out_dir(args)
    report = flops_report(cfg)
    if args.instrumented:
        model = BcQLM(cfg).eval()
        report["instrumented"] = instrumented_flops(model, cfg, cfg.seed)
        report["match"] = report["instrumented"]["total"] == report["total"]
    write_json(out / "flops.json", report)
    if args.timing:
        write_json(out / "timing.json", measure_latency(BcQLM(cfg).eval(), cfg, args.runs, cfg.seed))
    print(json.dumps({"total": report["total"], **report["modules"]}, sort_keys=True))


def cmd_pca_export(args):
    from ..model import BreezeCLIP, load_checkpoint
    from .metrics import write_pca_csv
    from .train import prepare_stage1, stage1_embeddings

    cfg = setup(args)
    out = out_dir(args)
    items = load_items(args, cfg, 32)
    vocab = resolve_vocab(args, out)
    model = BreezeCLIP(cfg)
    load_checkpoint(model, args.checkpoint or out / "stage1_final.bcqt")
    model.eval()
    emb = stage1_embeddings(model, prepare_stage1(items, vocab, cfg))
    res = write_pca_csv(out / "pca.csv", emb.image.numpy(), emb.text.numpy(), [it.item_id for it in items])
    write_json(out / "pca.json", {"explained_variance": [float(v) for v in res.explained_variance], "rows": 2 * len(items)})
    print(f"wrote {2 * len(items)} rows to {out / 'pca.csv'}")


def cmd_gradcheck(args):
    from .gradcheck import COMPONENTS, gradient_report

    out = out_dir(args)
    comps = COMPONENTS if args.component == "all" else (args.component,)
    report = {}
    for c in comps:
        report.update(gradient_report(c, args.max_entries, args.seed or 0))
    worst = max(report, key=report.get)
    passed = report[worst] < args.tolerance
    write_json(out / "gradcheck.json", {"tolerance": args.tolerance, "max_error": report[worst], "worst_tensor": worst,
                                        "passed": passed, "tensors": report})
    print(f"{'PASS' if passed else 'FAIL'} max relative error {report[worst]:.3e} ({worst})")
    if not passed:
        from ..errors import GradientCheckError

        raise GradientCheckError(worst, report[worst], args.tolerance)


# --------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="bcqlm", description="BcQLM desk-scale training and evaluation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(name, help_text, fn):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", default="tiny", help="JSON config path or preset name (default: tiny)")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default="runs/default", help="output directory")
        s.set_defaults(fn=fn)
        return s

    def data_args(s):
        s.add_argument("--data", default=None, help="directory written by synth-data")
        s.add_argument("--n", type=int, default=None, help="number of synthetic items when --data is absent")
        s.add_argument("--vocab", default=None, help="vocab.json (default: <out>/vocab.json or the template vocabulary)")

    s = common("synth-data", "generate and export a synthetic scene dataset", cmd_synth_data)
    s.add_argument("--n", type=int, default=64)

    for name, fn, help_text in (("pretrain", cmd_pretrain, "stage 1: contrastive + distillation pretraining"),
                                ("finetune", cmd_finetune, "stage 2: fusion + decoder training on frozen encoders")):
        s = common(name, help_text, fn)
        data_args(s)
        s.add_argument("--epochs", type=int, default=None, help="override the stage epoch count")
        s.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0: final only)")
        if name == "finetune":
            s.add_argument("--stage1", default=None, help="stage-1 checkpoint (default: <out>/stage1_final.bcqt)")
            s.add_argument("--unfreeze-ratio", type=float, default=None)

    s = common("eval", "VQA accuracy and cosine statistics of a stage-2 checkpoint", cmd_eval)
    data_args(s)
    s.add_argument("--checkpoint", default=None)

    s = common("infer", "answer one question about one image", cmd_infer)
    s.add_argument("--image", required=True, help=".png/.jpg or .npy (H x W x 3)")
    s.add_argument("--question", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--vocab", default=None)

    s = common("flops", "analytic per-sample FLOPs report", cmd_flops)
    s.add_argument("--instrumented", action="store_true", help="also count FLOPs of a real forward")
    s.add_argument("--timing", action="store_true", help="write latency/memory to timing.json")
    s.add_argument("--runs", type=int, default=5)

    s = common("pca-export", "3-D PCA of image and text embeddings as CSV", cmd_pca_export)
    data_args(s)
    s.add_argument("--checkpoint", default=None, help="stage-1 or stage-2 checkpoint")

    s = common("gradcheck", "finite-difference gradient verification", cmd_gradcheck)
    s.add_argument("--component", default="all",
                   choices=("all", "text_encoder", "image_encoder", "alignment", "qgcam", "decoder",
                            "qgcam.standard", "qgcam.token_balance", "qgcam.visual_query"))
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--max-entries", type=int, default=12, help="sampled entries per tensor")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        args.fn(args)
    except (ConfigSyntaxError, ConfigValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (BcqlmError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
