"""Command line: ``ovclip <verb> ...``.

Settings resolve as flags > ``--config`` file > built-in defaults.  The
config file holds one ``key = value`` per line; ``#`` starts a comment.
Exit codes: 0 ok, 2 usage/config, 3 numeric failure, 4 I/O or bad file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__, captionkit, evalkit, pipeline
from .datagen import SHAPES, CorpusConfig, build_corpus, tokenize
from .errors import CaptionError, CheckpointFormatError, InvalidArgument, InvalidConfig, NumericFailure
from .pretrain import PretrainConfig, pretrain
from .weightspace import Checkpoint, IwrConfig, interpolate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ovclip")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    type: Callable[[str], Any]
    default: Any


_CORPUS_SETTINGS = {
    f"corpus.{f.name}": Setting(type(f.default), f.default)
    for f in fields(CorpusConfig) if f.name != "heldout"
}

SETTINGS: dict[str, Setting] = {
    "seed": Setting(int, 0),
    **_CORPUS_SETTINGS,
    "pretrain.epochs": Setting(int, pipeline.REFERENCE_PRETRAIN["epochs"]),
    "pretrain.lr": Setting(float, PretrainConfig.lr),
    "pretrain.batch_size": Setting(int, PretrainConfig.batch_size),
    "finetune.lr": Setting(float, pipeline.REFERENCE_FINETUNE["lr"]),
    "finetune.lr_floor": Setting(float, pipeline.REFERENCE_FINETUNE["lr_floor"]),
    "finetune.epochs": Setting(int, pipeline.REFERENCE_FINETUNE["epochs"]),
    "finetune.warmup_epochs": Setting(int, pipeline.REFERENCE_FINETUNE["warmup_epochs"]),
    "finetune.batch_size": Setting(int, pipeline.REFERENCE_FINETUNE["batch_size"]),
    "finetune.momentum": Setting(float, pipeline.REFERENCE_FINETUNE["momentum"]),
    "finetune.unfreeze_text": Setting(_bool, False),
    "window": Setting(int, 3),
    "iwr.enabled": Setting(_bool, False),
    "iwr.R": Setting(float, None),
    "iwr.C": Setting(float, None),
    "iwr.caption_at_theta": Setting(_bool, False),
    "gamma": Setting(float, 0.0),
    "l2_anchor": Setting(float, 0.0),
    "swa.enabled": Setting(_bool, False),
    "swa.start": Setting(int, None),
    "swa.cycle": Setting(int, None),
    "caption.backend": Setting(str, "stub"),
    "caption.endpoint": Setting(str, ""),
    "caption.model": Setting(str, ""),
    "caption.token_env": Setting(str, ""),
    "caption.max_in_flight": Setting(int, 4),
    "caption.attempts": Setting(int, 3),
    "eval.split": Setting(str, "heldout"),
    "eval.protocol": Setting(str, "EP2"),
    "eval.repeats": Setting(int, None),
    "eval.views": Setting(int, 1),
    "eval.draws": Setting(int, 25),
}

IWR_DEFAULT_R, IWR_DEFAULT_C = 0.6, 0.5


def read_config_file(path) -> dict[str, Any]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in SETTINGS:
                raise UsageError(f"{path}:{n}: unknown config key {key!r}")
            out[key] = _convert(key, value)
    return out


def _convert(key: str, value):
    setting = SETTINGS[key]
    try:
        return setting.type(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: expected {setting.type.__name__}, got {value!r}") from None


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Flags beat the config file, which beats the defaults."""
    conf = {k: s.default for k, s in SETTINGS.items()}
    if getattr(args, "config", None):
        conf.update(read_config_file(args.config))
    for key in SETTINGS:
        value = getattr(args, _dest(key), None)
        if value is not None:
            conf[key] = value
    return conf


def _dest(key: str) -> str:
    return "opt_" + key.replace(".", "__")


def config_digest(conf: dict) -> str:
    return hashlib.sha256(json.dumps(conf, sort_keys=True, default=str).encode()).hexdigest()[:16]


def git_digest(path) -> str:
    """sha1 over "blob <size>\\0<bytes>", the way git names file contents."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda grid {text!r}") from None


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _opt(p: argparse.ArgumentParser, flag: str, key: str, help: str = "", **kw):
    setting = SETTINGS[key]
    if setting.type is _bool and "action" not in kw:
        kw.setdefault("type", _bool)
        kw.setdefault("metavar", "true|false")
    elif "action" not in kw:
        kw.setdefault("type", setting.type)
    p.add_argument(flag, dest=_dest(key), default=None, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="ovclip", description="Video fine-tuning with weight-space regularization (desk scale).")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--log-level", default="INFO")
        _opt(p, "--seed", "seed")
        return p

    p = verb("gen-corpus", "generate the synthetic corpus")
    p.add_argument("-o", "--out", required=True, help="output directory")
    for key in _CORPUS_SETTINGS:
        _opt(p, "--" + key.split(".", 1)[1].replace("_", "-"), key)

    p = verb("pretrain", "image-caption pretraining (produces theta_A)")
    p.add_argument("corpus")
    p.add_argument("-o", "--out", required=True)
    _opt(p, "--epochs", "pretrain.epochs")
    _opt(p, "--lr", "pretrain.lr")
    _opt(p, "--batch-size", "pretrain.batch_size")

    p = verb("caption", "caption every video through the frame-caption pipeline")
    p.add_argument("corpus")
    p.add_argument("-o", "--out", required=True)
    _opt(p, "--backend", "caption.backend", choices=["stub", "service"])
    _opt(p, "--endpoint", "caption.endpoint")
    _opt(p, "--model", "caption.model")
    _opt(p, "--token-env", "caption.token_env", help="name of the env var holding the token")
    _opt(p, "--max-in-flight", "caption.max_in_flight")

    p = verb("finetune", "video fine-tuning (plain, IWR, l2-anchor) with optional SWA")
    p.add_argument("corpus")
    p.add_argument("--init", required=True, help="pretrained checkpoint (also the anchor)")
    p.add_argument("--captions", help="caption store for the gamma-weighted loss")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--save-last", help="also write the final (non-averaged) weights here")
    _opt(p, "--lr", "finetune.lr")
    _opt(p, "--lr-floor", "finetune.lr_floor")
    _opt(p, "--epochs", "finetune.epochs")
    _opt(p, "--warmup-epochs", "finetune.warmup_epochs")
    _opt(p, "--batch-size", "finetune.batch_size")
    _opt(p, "--momentum", "finetune.momentum")
    _opt(p, "--unfreeze-text", "finetune.unfreeze_text", action="store_const", const=True)
    _opt(p, "--window", "window")
    _opt(p, "--iwr", "iwr.enabled", action="store_const", const=True,
         help=f"interpolated weight regularization (R={IWR_DEFAULT_R}, C={IWR_DEFAULT_C} unless set)")
    _opt(p, "--iwr-R", "iwr.R")
    _opt(p, "--iwr-C", "iwr.C")
    _opt(p, "--iwr-caption-at-theta", "iwr.caption_at_theta", action="store_const", const=True)
    _opt(p, "--gamma", "gamma")
    _opt(p, "--l2-anchor", "l2_anchor", metavar="MU")
    _opt(p, "--swa", "swa.enabled", action="store_const", const=True)
    _opt(p, "--swa-start", "swa.start")
    _opt(p, "--swa-cycle", "swa.cycle")

    p = verb("eval", "zero-shot classification or caption retrieval")
    p.add_argument("corpus")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--out", help="metrics CSV (stdout when omitted)")
    _opt(p, "--split", "eval.split", choices=["heldout", "seen"])
    _opt(p, "--protocol", "eval.protocol", choices=list(evalkit.PROTOCOLS))
    _opt(p, "--repeats", "eval.repeats")
    _opt(p, "--views", "eval.views")
    _opt(p, "--window", "window")
    p.add_argument("--retrieval", metavar="CAPTIONS", help="caption store; report Recall@K instead")
    p.add_argument("--image-task", action="store_true", help="classify the pretrain test images by shape")
    _opt(p, "--draws", "eval.draws")

    p = verb("sweep", "patch theta_A with the tuned weights over a lambda grid")
    p.add_argument("corpus")
    p.add_argument("--theta-a", required=True)
    p.add_argument("--theta-tuned", required=True)
    p.add_argument("--lambda-grid", type=parse_grid, default=parse_grid("0:1:0.1"))
    p.add_argument("-o", "--out", required=True)
    _opt(p, "--window", "window")
    _opt(p, "--views", "eval.views")

    p = verb("interp", "lambda * a + (1 - lambda) * b")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("-o", "--out", required=True)

    p = verb("inspect-ckpt", "print metadata and per-tensor statistics")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    return top


def parse(argv: Sequence[str]) -> tuple[argparse.Namespace, dict[str, Any]]:
    args = build_parser().parse_args(list(argv))
    return args, resolve(args)


# ------------------------------------------------------------------ helpers


def iwr_config(conf: dict[str, Any]) -> IwrConfig:
    """Finetune settings -> IwrConfig; R and C default to 0 unless IWR is asked for."""
    iwr = conf["iwr.enabled"] or conf["iwr.R"] is not None or conf["iwr.C"] is not None
    R = conf["iwr.R"] if conf["iwr.R"] is not None else (IWR_DEFAULT_R if iwr else 0.0)
    C = conf["iwr.C"] if conf["iwr.C"] is not None else (IWR_DEFAULT_C if iwr else 0.0)
    return IwrConfig(R=R, C=C, gamma=conf["gamma"], lr=conf["finetune.lr"], lr_floor=conf["finetune.lr_floor"],
                     warmup_epochs=conf["finetune.warmup_epochs"], epochs=conf["finetune.epochs"],
                     batch_size=conf["finetune.batch_size"], momentum=conf["finetune.momentum"],
                     l2_anchor=conf["l2_anchor"], window=conf["window"],
                     freeze_text=not conf["finetune.unfreeze_text"],
                     caption_at_theta=conf["iwr.caption_at_theta"], seed=conf["seed"])


def _write_manifest(out_path: str, verb: str, conf: dict, inputs: Sequence[str]) -> None:
    digests = {}
    for path in inputs:
        target = os.path.join(path, pipeline.CORPUS_FILE) if os.path.isdir(path) else path
        digests[path] = git_digest(target)
    manifest = {"command": verb, "version": __version__, "seed": conf["seed"], "config": conf,
                "config_digest": config_digest(conf), "inputs": digests}
    path = out_path.rstrip("/") + ".manifest.json" if not os.path.isdir(out_path) \
        else os.path.join(out_path, "run.manifest.json")
    pipeline._atomic_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _save(ckpt: Checkpoint, path: str, verb: str, conf: dict) -> None:
    ckpt.meta.update({"command": verb, "config_digest": config_digest(conf)})
    save_checkpoint(ckpt, path)


# ------------------------------------------------------------------ verbs


def cmd_gen_corpus(args, conf):
    kw = {k.split(".", 1)[1]: v for k, v in conf.items() if k.startswith("corpus.")}
    ds = build_corpus(CorpusConfig(**kw), conf["seed"])
    pipeline.dump_corpus(ds, args.out)
    _write_manifest(args.out, args.verb, conf, [])
    print(f"corpus: {len(ds.pretrain)} images, {len(ds.seen_train)} train / {len(ds.seen_test)} test / "
          f"{len(ds.heldout_test)} held-out videos -> {args.out}")


def cmd_pretrain(args, conf):
    ds = pipeline.load_corpus(args.corpus)
    cfg = PretrainConfig(epochs=conf["pretrain.epochs"], lr=conf["pretrain.lr"],
                         batch_size=conf["pretrain.batch_size"], seed=conf["seed"])
    ckpt = pretrain(ds, cfg)
    _save(ckpt, args.out, args.verb, conf)
    _write_manifest(args.out, args.verb, conf, [args.corpus])


def cmd_caption(args, conf):
    ds = pipeline.load_corpus(args.corpus)
    if conf["caption.backend"] == "service":
        backend = captionkit.ServiceBackend.from_config(conf, attempts=conf["caption.attempts"])
    else:
        backend = captionkit.StubBackend()
    samples = ds.seen_train + ds.seen_test + ds.heldout_test
    captionkit.caption_dataset(samples, backend, args.out, conf["caption.max_in_flight"])
    _write_manifest(args.out, args.verb, conf, [args.corpus])


def cmd_finetune(args, conf):
    cfg = iwr_config(conf)
    if cfg.gamma > 0 and not args.captions:
        raise UsageError("--gamma > 0 needs --captions")
    ds = pipeline.load_corpus(args.corpus)
    theta_a = load_checkpoint(args.init)
    captions = captionkit.read_store(args.captions) if args.captions else None
    data = pipeline.train_data(ds.seen_train, captions if cfg.gamma > 0 else None)
    swa = None
    if conf["swa.enabled"]:
        swa = pipeline.default_swa(cfg, len(data))
        if conf["swa.start"] is not None:
            swa.start = conf["swa.start"]
        if conf["swa.cycle"] is not None:
            swa.cycle = conf["swa.cycle"]
    last, swa = train(theta_a, theta_a, data, cfg, swa=swa)
    if swa is not None:
        if swa.count == 0:
            raise InvalidConfig("SWA absorbed no checkpoints; lower --swa-start")
        out = swa.checkpoint()
        out.meta.update(last.meta)
        out.meta["swa_count"] = str(swa.count)
    else:
        out = last
    _save(out, args.out, args.verb, conf)
    inputs = [args.corpus, args.init] + ([args.captions] if args.captions else [])
    _write_manifest(args.out, args.verb, conf, inputs)
    if args.save_last:
        _save(last, args.save_last, args.verb, conf)


def cmd_eval(args, conf):
    ds = pipeline.load_corpus(args.corpus)
    theta = load_checkpoint(args.checkpoint)
    if args.image_task:
        images = [s.image for s in ds.pretrain_test]
        labels = [s.shape_id for s in ds.pretrain_test]
        texts = [tokenize(f"a picture of a {s}") for s in SHAPES]
        metrics = evalkit.image_task_eval(theta, images, labels, texts)
    elif args.retrieval:
        captions = captionkit.read_store(args.retrieval)
        samples = ds.heldout_test if conf["eval.split"] == "heldout" else ds.seen_test
        metrics = pipeline.caption_retrieval(theta, samples, captions, draws=conf["eval.draws"],
                                             seed=conf["seed"], window=conf["window"])
    else:
        split = pipeline.eval_split(ds, conf["eval.split"])
        metrics = evalkit.run_protocol(conf["eval.protocol"], theta, split.clips,
                                       [split.class_ids[i] for i in split.labels], split.class_ids,
                                       split.class_texts, conf["eval.repeats"], conf["seed"],
                                       conf["eval.views"], conf["window"])
    text = evalkit.metrics_csv(metrics)
    if args.out:
        pipeline._atomic_text(args.out, text)
        _write_manifest(args.out, args.verb, conf, [args.corpus, args.checkpoint])
    else:
        sys.stdout.write(text)


def cmd_sweep(args, conf):
    ds = pipeline.load_corpus(args.corpus)
    theta_a = load_checkpoint(args.theta_a)
    tuned = load_checkpoint(args.theta_tuned)
    rows = evalkit.tradeoff_sweep(theta_a, tuned, args.lambda_grid,
                                  pipeline.eval_split(ds, "seen").as_tuple(),
                                  pipeline.eval_split(ds, "heldout").as_tuple(),
                                  window=conf["window"], views=conf["eval.views"])
    pipeline._atomic_text(args.out, evalkit.sweep_csv(rows))
    _write_manifest(args.out, args.verb, conf, [args.corpus, args.theta_a, args.theta_tuned])


def cmd_interp(args, conf):
    out = interpolate(load_checkpoint(args.a), load_checkpoint(args.b), args.lam)
    _save(out, args.out, args.verb, conf)
    _write_manifest(args.out, args.verb, conf, [args.a, args.b])


def cmd_inspect(args, conf):
    ckpt = load_checkpoint(args.checkpoint)
    rows = [{"name": k, "shape": list(v.shape), "dtype": v.dtype.name,
             "mean": float(np.mean(v, dtype=np.float64)), "std": float(np.std(v, dtype=np.float64))}
            for k, v in ckpt.items()]
    if args.json:
        print(json.dumps({"meta": ckpt.meta, "digest": ckpt.digest(), "tensors": rows}, indent=2))
        return
    for k, v in sorted(ckpt.meta.items()):
        print(f"# {k} = {v}")
    print(f"# digest = {ckpt.digest()}")
    for r in rows:
        shape = "x".join(map(str, r["shape"])) or "scalar"
        print(f"{r['name']}\t{shape}\t{r['dtype']}\t{r['mean']:.9g}\t{r['std']:.9g}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "caption": cmd_caption, "finetune": cmd_finetune,
    "eval": cmd_eval, "sweep": cmd_sweep, "interp": cmd_interp, "inspect-ckpt": cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, conf = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args, conf)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgument, InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointFormatError, CaptionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
