"""Command-line entry point: corpus generation, training, decoding, evaluation, analysis."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("docmem")


class UsageError(Exception):
    """Bad invocation: unknown config key, malformed value, inconsistent flags."""


# -- config files and manifests ----------------------------------------------------

def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys may use dashes or underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def blob_sha1(path) -> str:
    """Content hash as git computes it for a blob."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    checkpoint_sha1: str | None = None
    version: str = __version__

    def write(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=1, sort_keys=True, default=str) + "\n")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- shared option groups ------------------------------------------------------------

def _range(text: str):
    """``5`` -> 5, ``3:9`` -> (3, 9), ``1,3,5`` -> [1, 3, 5]."""
    if ":" in text:
        a, b = text.split(":")
        return (int(a), int(b))
    if "," in text:
        return [int(x) for x in text.split(",")]
    return int(text)


def _layers(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _window(text: str):
    return "full" if str(text).lower() == "full" else int(text)


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--d-ffn", type=int, default=128)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--max-len", type=int, default=64, help="longest wrapped sentence")
    _add_memory_flags(p)


def _add_memory_flags(p, defaults=True):
    g = p.add_argument_group("memory")
    d = (lambda v: v) if defaults else (lambda v: None)
    g.add_argument("--mem-size", type=int, default=d(8))
    g.add_argument("--mem-side", choices=["src", "tgt", "both", "none"], default=d("both"))
    g.add_argument("--mem-layers", type=_layers, default=None, help="comma-separated layer indices (default: top layer)")
    g.add_argument("--trunc-window", type=_window, choices=[0, 1, "full"], default=d(1))
    g.add_argument("--strict-eq5", action="store_true", default=None if not defaults else False,
                   help="bare output attention, no residual or norm")


def _model_config(args, vocab_size: int, mem_side: str | None = None):
    from .transformer import ModelConfig

    return ModelConfig(
        n_layers=args.layers, d_model=args.d_model, n_heads=args.heads, d_ffn=args.d_ffn,
        vocab_size=vocab_size, max_sentence_len=args.max_len, dropout_rate=args.dropout,
        mem_size=args.mem_size, mem_side=mem_side or args.mem_side, mem_layers=args.mem_layers,
        truncation=args.trunc_window, seed=args.seed, strict_eq5=bool(args.strict_eq5),
    )


def _overrides(args) -> dict:
    """Memory settings given on the command line, applied on top of a checkpoint's config."""
    out = {}
    for flag, key in (("mem_size", "mem_size"), ("mem_side", "mem_side"), ("mem_layers", "mem_layers"),
                      ("trunc_window", "truncation"), ("strict_eq5", "strict_eq5")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _load_vocab(args):
    from .corpus import Vocab, entity_vocab

    return Vocab.load(args.vocab) if getattr(args, "vocab", None) else entity_vocab()


def _load_model(args):
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model(**_overrides(args))
    model.eval()
    return model


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_corpus(args) -> RunManifest:
    from .corpus import entity_vocab, generate_entity_carry_corpus, save_corpus

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = entity_vocab(args.n_words)
    vocab.save(out / "vocab.txt")
    outputs = {"vocab": str(out / "vocab.txt")}
    for i, (split, n) in enumerate((("train", args.n_train), ("valid", args.n_valid), ("test", args.n_test))):
        if n <= 0:
            continue
        docs = generate_entity_carry_corpus(
            n, _range(args.sents_per_doc), _range(args.distance), seed=args.seed * 10 + i,
            sent_len=_range(args.sent_len), n_words=args.n_words, vocab=vocab, id_prefix=f"{split}-",
            extra_pron_rate=args.extra_pron_rate,
        )
        save_corpus(docs, out / f"{split}.jsonl", vocab)
        outputs[split] = str(out / f"{split}.jsonl")
    return RunManifest("gen-corpus", vars(args), args.seed, outputs=outputs)


def _train_config(args, stage: str):
    from .training import TrainConfig

    return TrainConfig(
        stage=stage, base_lr=args.lr, new_param_lr=getattr(args, "new_lr", args.lr), warmup_steps=args.warmup,
        opt_window=getattr(args, "opt_window", 1), patience=args.patience, max_epochs=args.epochs,
        label_smoothing=args.label_smoothing, seed=args.seed, batch_size=args.batch_size,
        freeze_pretrained=getattr(args, "freeze", False), max_steps=args.max_steps,
        truncation=getattr(args, "trunc_window", None),
    )


def _corpus(args, split: str):
    from .corpus import load_corpus

    path = Path(args.data) / f"{split}.jsonl"
    return load_corpus(path, _load_vocab(args)) if path.exists() else []


def cmd_train_sentence(args) -> RunManifest:
    from .training import save_checkpoint, sentence_pretrain
    from .transformer import MemoryTransformer

    vocab = _load_vocab(args)
    train, valid = _corpus(args, "train"), _corpus(args, "valid")
    if not train:
        raise FileNotFoundError(f"no training documents under {args.data}")
    model = MemoryTransformer(_model_config(args, len(vocab), mem_side="none"))
    res = sentence_pretrain(model, train, valid, _train_config(args, "sentence"), log_path=args.log)
    save_checkpoint(res.checkpoint, args.out)
    return RunManifest("train-sentence", vars(args), args.seed, {"data": args.data}, {"checkpoint": args.out},
                       blob_sha1(args.out))


def cmd_finetune_doc(args) -> RunManifest:
    from .training import bootstrap_document_model, document_finetune, load_checkpoint, save_checkpoint
    from .transformer import ModelConfig

    init = load_checkpoint(args.init)
    if init.config is None:
        raise UsageError(f"{args.init} has no config sidecar")
    over = _overrides(args)
    over.setdefault("mem_side", "both")
    cfg = ModelConfig.from_dict({**init.config, **over, "seed": args.seed, "dropout_rate": args.dropout})
    model = bootstrap_document_model(init, cfg)
    train, valid = _corpus(args, "train"), _corpus(args, "valid")
    if not train:
        raise FileNotFoundError(f"no training documents under {args.data}")
    res = document_finetune(model, train, valid, _train_config(args, "document"), log_path=args.log)
    save_checkpoint(res.checkpoint, args.out)
    return RunManifest("finetune-doc", vars(args), args.seed, {"data": args.data, "init": args.init},
                       {"checkpoint": args.out}, blob_sha1(args.out))


def cmd_translate(args) -> RunManifest:
    from .corpus import load_corpus
    from .decoding import translate_corpus, write_translations

    vocab = _load_vocab(args)
    model = _load_model(args)
    docs = load_corpus(args.input, vocab)
    hyps = translate_corpus(model, docs, beam=args.beam, length_penalty=args.length_penalty, workers=args.workers)
    write_translations(args.out, docs, hyps, vocab)
    return RunManifest("translate", vars(args), args.seed, {"input": args.input, "ckpt": args.ckpt},
                       {"translations": args.out}, blob_sha1(args.ckpt))


def cmd_evaluate(args) -> RunManifest:
    from .decoding import read_translations
    from .evaluation import (bleu_by_index, d_bleu, distance_bucket, flatten, format_report, format_table,
                             pron_accuracy, report_dict, s_bleu, write_json)

    recs = read_translations(args.hyp)
    if not recs:
        raise UsageError(f"{args.hyp} holds no documents")
    hyps = [r["hyp"] for r in recs]
    refs = [r["tgt"] for r in recs]
    s, d = s_bleu(flatten(hyps), flatten(refs)), d_bleu(hyps, refs)
    by_index = bleu_by_index(hyps, refs, args.bucket)
    report = report_dict(s, d, by_index)
    text = format_report(s, d, by_index)
    if all("ann" in r for r in recs):
        edges = _range(args.distance_buckets) if args.distance_buckets else None
        pr = pron_accuracy(hyps, refs, [r["ann"] for r in recs], distance_bucket(edges) if edges else None)
        report["pron"] = pr.to_dict()
        rows = [["PRON", pr.pron_accuracy, pr.n_pron], ["other", pr.nonpron_accuracy, pr.n_other]]
        rows += [[f"distance {k}", v, ""] for k, v in pr.by_distance.items()]
        text += "\n\n" + format_table(rows, ["tokens", "accuracy", "count"])
    print(text)
    outputs = {}
    if args.json:
        write_json(report, args.json)
        outputs["report"] = args.json
    return RunManifest("evaluate", vars(args), args.seed, {"hyp": args.hyp}, outputs)


def _docs_for_analysis(args):
    from .corpus import load_corpus

    docs = load_corpus(args.data, _load_vocab(args))
    return docs[: args.max_docs] if args.max_docs else docs


def cmd_analyze_ig(args) -> RunManifest:
    from .analysis import information_gain
    from .training import load_checkpoint
    from .transformer import MemoryTransformer, ModelConfig

    ckpt = load_checkpoint(args.ckpt)
    trained = ckpt.model(**_overrides(args))
    init = MemoryTransformer(ModelConfig.from_dict({**trained.config.to_dict(), "seed": args.seed}))
    ig = information_gain(trained, init, _docs_for_analysis(args))
    result = {"mem_size": trained.config.mem_size, "information_gain_nats": ig}
    print(json.dumps(result, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    return RunManifest("analyze-ig", vars(args), args.seed, {"data": args.data, "ckpt": args.ckpt},
                       {"report": args.out} if args.out else {}, blob_sha1(args.ckpt))


def cmd_analyze_grad(args) -> RunManifest:
    from .analysis import gradient_attribution, write_scores_csv

    model = _load_model(args)
    anchors = [int(x) for x in args.anchors.split(",")] if args.anchors else None
    scores = gradient_attribution(model, _docs_for_analysis(args), bucket=args.bucket, anchors=anchors)
    for k, v in scores.items():
        print(f"{k:4d}  {v:.6g}")
    if args.out:
        write_scores_csv(scores, args.out, args.bucket)
    return RunManifest("analyze-grad", vars(args), args.seed, {"data": args.data, "ckpt": args.ckpt},
                       {"scores": args.out} if args.out else {}, blob_sha1(args.ckpt))


def cmd_dump_attn(args) -> RunManifest:
    from .analysis import export_attention_maps

    model = _load_model(args)
    docs = _docs_for_analysis(args)
    if not 0 <= args.doc_index < len(docs):
        raise UsageError(f"--doc-index {args.doc_index} outside 0..{len(docs) - 1}")
    paths = export_attention_maps(model, docs[args.doc_index], args.out_dir, _load_vocab(args))
    print(f"wrote {len(paths)} attention records to {args.out_dir}")
    return RunManifest("dump-attn", vars(args), args.seed, {"data": args.data, "ckpt": args.ckpt},
                       {"dir": args.out_dir}, blob_sha1(args.ckpt))


def cmd_bench_complexity(args) -> RunManifest:
    from .analysis import complexity_benchmark, write_complexity_csv
    from .evaluation import format_table

    cfg = _model_config(args, vocab_size=16)
    rows = complexity_benchmark([int(x) for x in args.tokens.split(",")], chunk=args.chunk, config=cfg)
    print(format_table([[r.n_tokens, r.variant, r.peak_values, r.seconds, r.decode_seconds_per_token * 1e3] for r in rows],
                       ["N", "variant", "peak_values", "seconds", "ms_per_token"]))
    if args.out:
        write_complexity_csv(rows, args.out)
    return RunManifest("bench-complexity", vars(args), args.seed, outputs={"csv": args.out} if args.out else {})


# -- parser ----------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="docmem", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=fn)
        subs[name] = p
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate an entity-carry corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-valid", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--sents-per-doc", default="8:120")
    p.add_argument("--distance", default="1:10")
    p.add_argument("--sent-len", default="5:12")
    p.add_argument("--n-words", type=int, default=40)
    p.add_argument("--extra-pron-rate", type=float, default=0.0,
                   help="chance that each sentence between a marker and its PRON also carries a PRON")

    def train_flags(p, lr):
        p.add_argument("--data", required=True, help="corpus directory with train/valid .jsonl")
        p.add_argument("--vocab")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="CSV training log")
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--warmup", type=int, default=4000)
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--patience", type=int, default=5)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--label-smoothing", type=float, default=0.1)
        p.add_argument("--max-steps", type=int)

    p = add("train-sentence", cmd_train_sentence, "sentence-level pretraining")
    train_flags(p, 5e-4)
    _add_model_flags(p)

    p = add("finetune-doc", cmd_finetune_doc, "document-level finetuning with memory")
    train_flags(p, 5e-4)
    p.add_argument("--init", required=True, help="sentence-level checkpoint")
    p.add_argument("--new-lr", type=float, default=3e-4, help="learning rate of the memory parameters")
    p.add_argument("--opt-window", type=_window, default=1)
    p.add_argument("--freeze", action="store_true", help="train memory parameters only")
    p.add_argument("--dropout", type=float, default=0.1)
    _add_memory_flags(p, defaults=False)

    for name, fn, help_ in (("translate", cmd_translate, "beam-search a corpus document by document"),):
        p = add(name, fn, help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--input", required=True)
        p.add_argument("--vocab")
        p.add_argument("--out", required=True)
        p.add_argument("--beam", type=int, default=5)
        p.add_argument("--length-penalty", type=float, default=0.6)
        p.add_argument("--workers", type=int, default=1, help="parallel documents")
        _add_memory_flags(p, defaults=False)

    p = add("evaluate", cmd_evaluate, "s-BLEU, d-BLEU, per-index BLEU and PRON accuracy")
    p.add_argument("--hyp", required=True, help="translations written by 'translate'")
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--bucket", type=int, default=10)
    p.add_argument("--distance-buckets", help="e.g. 1,3,5,10")

    def analysis_flags(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True, help="corpus .jsonl")
        p.add_argument("--vocab")
        p.add_argument("--max-docs", type=int)
        _add_memory_flags(p, defaults=False)

    p = add("analyze-ig", cmd_analyze_ig, "attention entropy gain over a fresh initialisation")
    analysis_flags(p)
    p.add_argument("--out")

    p = add("analyze-grad", cmd_analyze_grad, "gradient attribution Score(k) by sentence distance")
    analysis_flags(p)
    p.add_argument("--bucket", type=int, default=10)
    p.add_argument("--anchors", help="comma-separated sentence indices whose losses are used")
    p.add_argument("--out")

    p = add("dump-attn", cmd_dump_attn, "export memory attention maps as JSON")
    analysis_flags(p)
    p.add_argument("--doc-index", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = add("bench-complexity", cmd_bench_complexity, "space/time when decoding N dummy tokens")
    p.add_argument("--tokens", default="500,1000,2000")
    p.add_argument("--chunk", type=int, default=100)
    p.add_argument("--out")
    _add_model_flags(p)

    return parser, subs


def _apply_config(sub: argparse.ArgumentParser, path) -> None:
    """Install config-file values as the subcommand's defaults, which yields
    flag > file > built-in default. A required flag may come from the file."""
    actions = {a.dest: a for a in sub._actions}
    values = {}
    for key, raw in read_config(path).items():
        a = actions.get(key)
        if a is None or key in ("config", "help", "func"):
            raise UsageError(f"{path}: unknown key {key!r}")
        if isinstance(a, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}: {key} expects a boolean, got {raw!r}")
            value = raw.lower() in ("true", "1", "yes")
        else:
            try:
                value = a.type(raw) if a.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {raw!r}") from exc
            if a.choices is not None and value not in a.choices:
                raise UsageError(f"{path}: {key} must be one of {list(a.choices)}")
        a.required = False
        values[key] = value
    sub.set_defaults(**values)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        command = next((a for a in argv if a in subs), None)
        if known.config and command:
            _apply_config(subs[command], known.config)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"docmem: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    np.random.seed(args.seed)
    try:
        manifest = args.func(args)
    except UsageError as exc:
        print(f"docmem: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"docmem: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    target = _manifest_target(args)
    if target is not None:
        manifest.config = {k: v for k, v in manifest.config.items() if k != "func"}
        manifest.write(_manifest_path(target))
    return 0


def _manifest_target(args):
    for key in ("out", "out_dir", "json"):
        v = getattr(args, key, None)
        if v:
            return v
    return None


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
