"""Command line entry point: ``python -m vqssl <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import checkpoint as ck
from . import datagen, evalsuite, trainer
from .config import ConfigError, TrainConfig, VARIANTS, load_config, parse_overrides

COMMANDS = ("gen-data", "pretrain", "probe", "finetune", "eval-all", "inspect", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")


def _corpus_flag(p, required=True):
    p.add_argument("--corpus", required=required, help="corpus directory from gen-data")


def _probe_flags(p):
    p.add_argument("--ckpt", required=True)
    _corpus_flag(p)
    p.add_argument("--fractions", default=None, help="comma-separated label fractions")


def build_parser():
    parser = _Parser(prog="vqssl")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a phantom corpus")
    _common(p)
    p.add_argument("--num", type=int, default=2000)
    p.add_argument("--image-size", type=int, default=32)

    p = sub.add_parser("pretrain", help="pretrain an encoder")
    _common(p)
    _corpus_flag(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", default="full", choices=sorted(VARIANTS))
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    for name in ("probe", "finetune"):
        p = sub.add_parser(name, help=f"{'linear probe' if name == 'probe' else 'fine-tune'} AUC")
        _common(p)
        _probe_flags(p)

    p = sub.add_parser("eval-all", help="LP, FT, codebook and position-probe report")
    _common(p)
    _probe_flags(p)
    p.add_argument("--no-finetune", action="store_true")
    p.add_argument("--plot", action="store_true", help="also write auc_vs_fraction.png")

    p = sub.add_parser("inspect", help="print a checkpoint manifest and codebook perplexities")
    _common(p)
    p.add_argument("--ckpt", required=True)
    _corpus_flag(p, required=False)

    p = sub.add_parser("ablate", help="pretrain one ablation variant and evaluate it")
    _common(p)
    _corpus_flag(p, required=False)
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--num", type=int, default=2000, help="corpus size when --corpus is absent")
    p.add_argument("--fractions", default=None)
    p.add_argument("--no-finetune", action="store_true")
    return parser


# ------------------------------------------------------------------ helpers


def _train_config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    cfg = cfg.replace(**parse_overrides(pairs))
    if getattr(args, "variant", None):
        cfg = cfg.with_variant(args.variant)
    over = {"train_threads": args.threads}
    if args.seed is not None:
        over["train_seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["train_epochs"] = args.epochs
    cfg = cfg.replace(**over)
    cfg.validate()
    return cfg


def _probe_config(args):
    fractions = None
    if getattr(args, "fractions", None):
        try:
            fractions = tuple(float(f) for f in args.fractions.split(","))
        except ValueError:
            raise ConfigError(f"bad --fractions {args.fractions!r}") from None
        if any(not 0 < f <= 1 for f in fractions):
            raise ConfigError("label fractions must lie in (0, 1]")
    seed = args.seed or 0
    cfg = evalsuite.ProbeConfig(seeds=(seed, seed + 1, seed + 2))
    if fractions:
        cfg = evalsuite.ProbeConfig(label_fractions=fractions, seeds=cfg.seeds)
    return cfg


def _need_out(args):
    if not args.out:
        raise UsageError("--out is required for this command")
    return args.out


def _emit(text, out_dir=None, name=None):
    print(text)
    if out_dir and name:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text + "\n")


def _auc_lines(result, protocol):
    return [json.dumps({"fraction": f, "protocol": protocol, "seeds": [round(a, 6) for a in v],
                        "auc": float(np.mean(v))}) for f, v in result.items()]


def _file_digest(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            h.update(name.encode())
            h.update(fh.read())
    return h.hexdigest()


def _report(state, images, labels, pcfg, with_finetune, out_dir, plot=False):
    report = evalsuite.eval_all(state, images, labels, pcfg, with_finetune=with_finetune)
    print(report.to_table())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.jsonl"), "w") as fh:
            fh.write("\n".join(report.to_metrics_lines()) + "\n")
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(report.to_table() + "\n")
        if plot:
            report.plot(os.path.join(out_dir, "auc_vs_fraction.png"))
    return report


# ----------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = _need_out(args)
    spec = datagen.PhantomSpec(image_size=args.image_size, seed=args.seed or 0)
    m = datagen.generate_corpus(spec, args.num, out)
    print(f"wrote {m.count} phantoms to {out} (spec_hash={m.spec_hash})")


def cmd_pretrain(args):
    out = _need_out(args)
    cfg = _train_config(args)
    path = trainer.fit(cfg, args.corpus, out, resume=args.resume)
    print(f"checkpoint: {path}")


def _probe_like(args, fn):
    pcfg = _probe_config(args)
    _, images, labels = datagen.load_corpus(args.corpus)
    state = ck.load_checkpoint(args.ckpt)
    tcfg = state.cfg
    result = fn(state.theta, images, labels, tcfg.encoder_config(), pcfg,
                mean=tcfg.aug_mean, std=tcfg.aug_std)
    return result


def cmd_probe(args):
    result = _probe_like(args, evalsuite.linear_probe)
    _emit("\n".join(_auc_lines(result, "LP")), args.out, "probe.jsonl")


def cmd_finetune(args):
    result = _probe_like(args, evalsuite.finetune)
    _emit("\n".join(_auc_lines(result, "FT")), args.out, "finetune.jsonl")


def cmd_eval_all(args):
    pcfg = _probe_config(args)
    _, images, labels = datagen.load_corpus(args.corpus)
    state = ck.load_checkpoint(args.ckpt)
    _report(state, images, labels, pcfg, not args.no_finetune, args.out, args.plot)


def cmd_inspect(args):
    scalars, cfg_pairs, arrays = ck.read_manifest(args.ckpt)
    before = _file_digest(args.ckpt)
    lines = [f"{k}={v}" for k, v in scalars.items()]
    n_params = sum(int(np.prod(shape)) for _, _, shape, _, _ in arrays)
    lines.append(f"arrays={len(arrays)} values={n_params}")
    state = ck.load_checkpoint(args.ckpt)
    if args.corpus:
        images = datagen.load_corpus(args.corpus)[1]
    else:
        spec = datagen.PhantomSpec(image_size=state.cfg.encoder_input_size, seed=args.seed or 0)
        images = datagen.generate_arrays(spec, 128)[0]
    report = evalsuite.codebook_report(state, images)
    for s, r in report.items():
        lines.append(f"perplexity_{s}={r['perplexity']:.4f} utilization_{s}={r['utilization']:.3f}")
    _emit("\n".join(lines), args.out, "inspect.txt")
    if _file_digest(args.ckpt) != before:  # pragma: no cover - guard for the read-only contract
        raise RuntimeError("checkpoint changed during inspect")


def cmd_ablate(args):
    out = _need_out(args)
    cfg = _train_config(args)
    if args.corpus:
        _, images, labels = datagen.load_corpus(args.corpus)
    else:
        spec = datagen.PhantomSpec(image_size=cfg.encoder_input_size, seed=args.seed or 0)
        images, labels = datagen.generate_arrays(spec, args.num)
    path = trainer.fit(cfg, images, out)
    state = ck.load_checkpoint(path)
    print(f"variant {args.variant}: checkpoint {path}")
    _report(state, images, labels, _probe_config(args), not args.no_finetune, out)


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "probe": cmd_probe,
            "finetune": cmd_finetune, "eval-all": cmd_eval_all, "inspect": cmd_inspect,
            "ablate": cmd_ablate}


def run(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    limiter = trainer._limit_threads(args.threads)
    try:
        HANDLERS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"vqssl {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"vqssl {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


def main():
    sys.exit(run())
