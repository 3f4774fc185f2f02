"""Command-line driver: ssrcap <subcommand> [flags].

Every file a subcommand writes lives under the output directory (``--out``,
else $SSRCAP_OUTPUT_DIR, else ./ssrcap_out):

    config.cfg          effective configuration of the first writing command
    data/               micro-world splits and the language-model corpus
    checkpoints/        frozen LM, ML-VSE, pretrained captioner, vocabularies
    modes/<mode>/       refined captioner, test report, per-item decodes, RL log
    report.txt/.jsonl   comparison table over the trained modes

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint, config, gradcheck, microworld, trainer, vse
from .decoding import beam_search

log = logging.getLogger("ssrcap")

ENV_OUTPUT = "SSRCAP_OUTPUT_DIR"
COMMANDS = ("make-dataset", "train-lm", "train-vse", "pretrain", "train-ssr", "generate", "evaluate", "gradcheck", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT} or ./ssrcap_out)")
    common.add_argument("--disfluency", type=float, help="pseudo-translation disfluency rate")
    common.add_argument("--irrelevancy", type=float, help="pseudo-translation irrelevancy rate")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ssrcap", description="Self-supervised rewarding for unpaired cross-lingual captioning.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "make-dataset": "generate the micro-world splits and LM corpus",
        "train-lm": "pretrain the target-language model",
        "train-vse": "pretrain the image-sentence and image-concept embeddings",
        "pretrain": "pretrain whichever of LM, ML-VSE and captioner are missing",
        "train-ssr": "refine the pretrained captioner under --mode and evaluate it",
        "generate": "beam-search one caption for --image-id",
        "evaluate": "score a trained mode on the test split",
        "gradcheck": "run the finite-difference gradient suite",
        "report": "tabulate the per-mode test reports",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name in ("train-ssr", "generate", "evaluate", "report"):
            sp.add_argument("--mode", help="mode name; train-ssr and report accept a comma list or 'all'")
        if name in ("generate", "evaluate"):
            sp.add_argument("--beam", type=int, default=10)
        if name == "generate":
            sp.add_argument("--image-id", required=True)
    return p


# ---------------------------------------------------------------------------
# configuration and layout


def _out_dir(args):
    return os.path.abspath(args.out or os.environ.get(ENV_OUTPUT) or "ssrcap_out")


def _config(args, out):
    saved = os.path.join(out, "config.cfg")
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = config.load_config(args.config)
    elif os.path.isfile(saved):
        cfg = config.load_config(saved)
    else:
        cfg = config.ExperimentConfig()
    over = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for flag in ("seed", "disfluency", "irrelevancy"):
        if getattr(args, flag) is not None:
            over[flag] = getattr(args, flag)
    if getattr(args, "beam", None) is not None:
        over["beam"] = args.beam
    try:
        cfg = config.apply_overrides(cfg, over).validate()
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from exc
    return cfg.replace(data_dir=os.path.join(out, "data"))


def _persist_config(cfg, out):
    path = os.path.join(out, "config.cfg")
    if not os.path.exists(path):
        os.makedirs(out, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(config.dump_config(cfg.replace(data_dir="")))


def _ensure_data(cfg):
    if not os.path.exists(os.path.join(cfg.data_dir, "train.jsonl")):
        world, splits, lm = trainer.make_data(cfg)
        microworld.write_dataset(cfg.data_dir, world, splits, lm)
    return trainer.prepare(cfg)


def _ckpt(out, *parts):
    return os.path.join(out, "checkpoints", *parts)


def _write_vocabs(out, prep):
    os.makedirs(_ckpt(out), exist_ok=True)
    with open(_ckpt(out, "vocab.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(prep.vocab.to_lines())
    prep.concepts.write(_ckpt(out, "concepts.tsv"))


def _have_lm(out):
    return os.path.exists(_ckpt(out, "lm.ckpt"))


def _have_vse(out):
    return all(os.path.exists(_ckpt(out, f"{n}.ckpt")) for n in ("vse_img_sent", "vse_sent", "vse_img_concept", "vse_concept"))


def _have_captioner(out):
    return os.path.exists(_ckpt(out, "captioner_pretrained.ckpt"))


def _modes(arg, cfg):
    if not arg:
        return [cfg.mode]
    if arg == "all":
        return list(cfg.modes)
    modes = [m.strip() for m in arg.split(",") if m.strip()]
    bad = [m for m in modes if m not in config.MODES]
    if bad:
        raise UsageError(f"unknown mode {bad[0]!r}; choose from {', '.join(config.MODES)}")
    return modes


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_dataset(args, cfg, out):
    world, splits, lm = trainer.make_data(cfg)
    microworld.write_dataset(cfg.data_dir, world, splits, lm)
    n = [len(s) for s in splits]
    print(f"wrote {n[0]} train / {n[1]} val / {n[2]} test pairs and {len(lm)} LM sentences to {cfg.data_dir}")


def _train_lm(cfg, prep, out):
    lm, hist = trainer.pretrain_lm(cfg, prep.lm_corpus, len(prep.vocab))
    _write_vocabs(out, prep)
    lm.save(_ckpt(out, "lm.ckpt"))
    print(f"language model: {len(hist)} epochs, final loss {hist[-1]:.4f}")


def _train_vse(cfg, prep, out):
    bundle, _ = trainer.pretrain_vse(cfg, prep)
    _write_vocabs(out, prep)
    for name, mod in bundle.modules().items():
        mod.save(_ckpt(out, f"{name}.ckpt"))
    sims = vse.image_sentence_sims(bundle, trainer._feats(prep.val), [it.caption for it in prep.val])
    print(f"ML-VSE: val image->sentence R@1 {vse.recall_at_k(sims, np.arange(len(prep.val)), 1):.3f}")


def _train_captioner(cfg, prep, out):
    cap, hist = trainer.pretrain_captioner(cfg, prep)
    _write_vocabs(out, prep)
    checkpoint.save(_ckpt(out, "captioner_pretrained.ckpt"), cap.state_dict())
    best = min(h["val_loss"] for h in hist)
    print(f"captioner: {len(hist) - 1} epochs, best val loss {best:.4f}")


def cmd_train_lm(args, cfg, out):
    _train_lm(cfg, _ensure_data(cfg), out)


def cmd_train_vse(args, cfg, out):
    _train_vse(cfg, _ensure_data(cfg), out)


def cmd_pretrain(args, cfg, out):
    prep = _ensure_data(cfg)
    for have, train, name in ((_have_lm, _train_lm, "language model"), (_have_vse, _train_vse, "ML-VSE"),
                              (_have_captioner, _train_captioner, "captioner")):
        if have(out):
            print(f"{name}: checkpoint present, skipped")
        else:
            train(cfg, prep, out)


def _load(cfg, out):
    if not (_have_lm(out) and _have_vse(out) and _have_captioner(out)):
        raise RuntimeError(f"pretrained checkpoints missing under {_ckpt(out)}; run 'ssrcap pretrain' first")
    prep = trainer.prepare(cfg)
    return prep, trainer.load_pretrained(_ckpt(out), prep, cfg)


def cmd_train_ssr(args, cfg, out):
    prep, pre = _load(cfg, out)
    for mode in _modes(args.mode, cfg):
        _, rep, _ = trainer.run_mode(cfg, prep, pre, mode, out)
        print(f"{mode}: test CIDEr {rep['cider']:.4f} BLEU-4 {rep['bleu4']:.4f} after {rep['rl_epochs']} RL epochs")


def _captioner_for(mode, cfg, out, prep, pre):
    cap = trainer.new_captioner(cfg, len(prep.vocab), cfg.seed)
    path = os.path.join(out, "modes", trainer.mode_dirname(mode), "captioner.ckpt")
    if os.path.exists(path):
        return cap.load(path)
    if mode == "baseline":
        cap.load_state_dict(pre.captioner_state)
        return cap
    raise RuntimeError(f"no trained captioner for mode {mode!r}; run 'ssrcap train-ssr --mode {mode}' first")


def cmd_generate(args, cfg, out):
    prep, pre = _load(cfg, out)
    mode = _modes(args.mode, cfg)[0]
    cap = _captioner_for(mode, cfg, out, prep, pre)
    for it in prep.test + prep.val + prep.train:
        if it.image_id == args.image_id:
            dec = beam_search(cap, it.feature.astype(np.float32), cfg.beam, cfg.max_len)
            print(" ".join(prep.vocab.decode(dec.tokens)))
            return
    raise RuntimeError(f"unknown image id {args.image_id!r}")


def cmd_evaluate(args, cfg, out):
    prep, pre = _load(cfg, out)
    mode = _modes(args.mode, cfg)[0]
    cap = _captioner_for(mode, cfg, out, prep, pre)
    rep, _ = trainer.evaluate_corpus(cap, prep.test, prep.vocab, cfg, trainer.reward_models(cfg, prep, pre))
    print(f"mode: {mode}")
    for k, v in rep.items():
        print(f"{k}: {v!r}")


def cmd_gradcheck(args, cfg, out):
    results = gradcheck.run_suite(cfg.seed)
    width = max(map(len, results))
    failed = 0
    for name, err in results.items():
        ok = err < gradcheck.TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} below {gradcheck.TOLERANCE:g}")
    return 0 if failed == 0 else 2


def cmd_report(args, cfg, out):
    modes = None if not args.mode else _modes(args.mode, cfg)
    table, _ = trainer.render_report(out, modes)
    print(table, end="")


HANDLERS = {
    "make-dataset": cmd_make_dataset,
    "train-lm": cmd_train_lm,
    "train-vse": cmd_train_vse,
    "pretrain": cmd_pretrain,
    "train-ssr": cmd_train_ssr,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}
WRITES = {"make-dataset", "train-lm", "train-vse", "pretrain", "train-ssr", "report"}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        out = _out_dir(args)
        cfg = _config(args, out)
        if getattr(args, "mode", None):
            _modes(args.mode, cfg)
    except UsageError as exc:
        msg = str(exc)
        if not msg.startswith("usage:"):
            msg = f"{parser.format_usage()}{parser.prog}: error: {msg}"
        print(msg, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        if args.command in WRITES:
            _persist_config(cfg, out)
        code = HANDLERS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
