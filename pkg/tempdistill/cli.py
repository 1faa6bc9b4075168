"""
Command-line entry point: one subcommand per pipeline stage
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from . import __version__
from .corpus import SPLITS, Corpus, SynthConfig, Vocabulary, build_vocab, load_jsonl, load_summaries, \
    synth_corpus_generate, write_jsonl
from .decoding import BeamConfig, load_attention_dumps
from .distillation import GRIDS, LENGTH_PENALTY_SWEEP, OUTPUT_TEMPERATURE_SWEEP, PROVENANCE_FILE, PseudoCorpus, \
    TrainConfig, evaluate_model, generate_pseudo_labels, init_student_from_teacher, run_distillation, \
    sweep_settings, train_model, verify_manifest
from .errors import InvalidArgument, LabError
from .metrics import ROUGE_MODES, build_report, evident_attention_histogram, write_histogram_csv, write_sweep_csv
from .model import ATTENTION_FAMILIES, AttentionTemperatures, ModelConfig, Transformer
from .util import sha256_output

log = logging.getLogger(__name__)


MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class RunConfig:
    """Every configurable section of a run, resolved from defaults, a JSON file and flags"""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    workers: int = 1

    SECTIONS = {"model": ModelConfig, "train": TrainConfig, "beam": BeamConfig, "synth": SynthConfig}

    def to_dict(self) -> Dict[str, Any]:
        d = {name: getattr(self, name).to_dict() for name in self.SECTIONS}
        d["workers"] = self.workers
        return d

    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidArgument("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS) - {"workers"}
        if unknown:
            raise InvalidArgument(f"unknown config sections: {sorted(unknown)}")
        sections = {name: kind.from_dict(d.get(name, {})) for name, kind in cls.SECTIONS.items()}
        return cls(workers=int(d.get("workers", 1)), **sections)

    @classmethod
    def load(cls, path:str) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"{path}: invalid JSON: {e.msg}") from e
        return cls.from_dict(data)


def _set(obj, **values):
    """Dataclass copy with every non-None value applied (and validated again)"""
    values = {k: v for k, v in values.items() if v is not None}
    return replace(obj, **values) if values else obj


def resolve_config(args:argparse.Namespace, base:Optional[RunConfig]=None) -> RunConfig:
    """defaults < config file < flags. --seed drives every seed of the run"""
    if base is None:
        base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = RunConfig(base.model, base.train, base.beam, base.synth, base.workers)
    get = lambda name: getattr(args, name, None)

    cfg.synth = _set(cfg.synth, num_documents=get("docs"), lead_skew=get("lead_skew"),
        paraphrase_rate=get("paraphrase"), seed=get("seed"))
    cfg.train = _set(cfg.train, total_steps=get("steps"), learning_rate=get("lr"), warmup_steps=get("warmup"),
        batch_tokens=get("batch_tokens"), select_by=get("select_by"), seed=get("seed"))
    cfg.beam = _set(cfg.beam, beam_size=get("beam"), length_penalty=get("length_penalty"), min_length=get("min_len"),
        max_length=get("max_len"), output_temperature=get("output_temp"), sampler=get("sampler"), top_p=get("top_p"),
        seed=get("seed"), attention_layer=get("attention_layer"), attention_head=get("attention_head"))
    cfg.beam = _apply_lambda_flags(cfg.beam, args)
    if get("workers") is not None:
        cfg.workers = get("workers")
    return cfg


def _apply_lambda_flags(beam:BeamConfig, args:argparse.Namespace) -> BeamConfig:
    per_family = {f: getattr(args, f"lambda_{f}", None) for f in ATTENTION_FAMILIES}
    per_family = {f: v for f, v in per_family.items() if v is not None}
    lam = getattr(args, "lambda_", None)
    lam_range = getattr(args, "lambda_range", None)

    if lam_range is not None:
        return replace(beam, lambda_range=tuple(lam_range), pinned=per_family)
    if lam is not None or per_family:
        base = lam if lam is not None else 1.0
        temps = AttentionTemperatures(*(per_family.get(f, base) for f in ATTENTION_FAMILIES))
        return replace(beam, temperatures=temps, lambda_range=None, pinned={})
    return beam


# --- manifests ---

def digest_path(path:Path) -> Dict[str, str]:
    """path -> digest for a file, or for every file under a directory"""
    path = Path(path)
    if path.is_dir():
        return {str(p): sha256_output(p) for p in sorted(path.rglob("*"))
            if p.is_file() and not p.name.endswith(MANIFEST_SUFFIX) and p.name != "manifest.json"}
    return {str(path): sha256_output(path)}


def manifest_path(out:Path) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + MANIFEST_SUFFIX)


def write_manifest(argv:Sequence[str], command:str, cfg:RunConfig, inputs:Sequence[Path], outputs:Sequence[Path]) -> Path:
    manifest = {
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "inputs": {k: v for p in inputs for k, v in digest_path(p).items()},
        "outputs": {k: v for p in outputs for k, v in digest_path(p).items()},
    }
    path = manifest_path(outputs[0])
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.debug("manifest written to %s", path)
    return path


# --- subcommands ---
# each returns (inputs, outputs) for the manifest

def cmd_synth(args, cfg:RunConfig):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus_generate(cfg.synth)
    outputs = []
    for name in SPLITS:
        path = out / f"{name}.jsonl"
        write_jsonl(corpus.split(name), path)
        outputs.append(path)
    vocab = build_vocab(corpus.split("train"))
    vocab.save(out / "vocab.json")
    log.info("%i documents, %i vocabulary entries written to %s", len(corpus), len(vocab), out)
    return [], [out]


def _load_model(path:str) -> Transformer:
    model = Transformer.load(path)
    if model.vocab is None:
        raise InvalidArgument(f"{path} carries no vocabulary")
    return model


def cmd_train(args, cfg:RunConfig):
    corpus = load_jsonl(args.corpus)
    valid = load_jsonl(args.valid) if args.valid else None
    inputs = [Path(args.corpus)] + ([Path(args.valid)] if args.valid else [])

    if args.init:
        init = _load_model(args.init)
        inputs.append(Path(args.init))
        result = train_model(corpus, cfg.train, init=init, valid=valid)
    else:
        if args.vocab:
            vocab = Vocabulary.load(args.vocab)
            inputs.append(Path(args.vocab))
        else:
            vocab = build_vocab(corpus)
        cfg.model = replace(cfg.model, vocab_size=len(vocab))
        result = train_model(corpus, cfg.train, cfg.model, vocab, valid=valid)

    result.model.save(args.out)
    curve = Path(args.out).with_name(Path(args.out).name + ".losses.json")
    curve.write_text(json.dumps({"train": result.train_losses, "valid": result.valid_curve,
        "best_step": result.best_step}) + "\n", encoding="utf-8")
    return inputs, [Path(args.out), curve]


def cmd_pseudo(args, cfg:RunConfig):
    teacher = _load_model(args.model)
    corpus = load_jsonl(args.corpus)
    pseudo = generate_pseudo_labels(teacher, corpus, cfg.beam, workers=cfg.workers, dump_attention=args.dump_attention)
    pseudo.write(args.out)
    outputs = [Path(args.out)] + ([Path(args.dump_attention)] if args.dump_attention else [])
    return [Path(args.model), Path(args.corpus)], outputs


def _student_config(path:str, teacher:Transformer) -> ModelConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "model" in data:
        data = data["model"]
    data.setdefault("vocab_size", teacher.config.vocab_size)
    return ModelConfig.from_dict(data)


def cmd_distill(args, cfg:RunConfig):
    teacher = _load_model(args.teacher)
    student = init_student_from_teacher(teacher, _student_config(args.student_config, teacher), args.init)
    pseudo = PseudoCorpus.load(args.pseudo)
    if pseudo.teacher_digest and pseudo.teacher_digest != teacher.digest():
        log.warning("%s was generated by another teacher (%s)", args.pseudo, pseudo.teacher_digest[:12])
    valid = load_jsonl(args.valid) if args.valid else None

    result = train_model(pseudo.to_corpus(), cfg.train, init=student, valid=valid)
    result.model.save(args.out)
    inputs = [Path(args.teacher), Path(args.student_config), Path(args.pseudo)] + ([Path(args.valid)] if args.valid else [])
    return inputs, [Path(args.out)]


def _select_split(corpus:Corpus, split:Optional[str]) -> Corpus:
    if not split:
        return corpus
    part = corpus.split(split)
    if len(part) == 0:
        raise InvalidArgument(f"corpus has no {split!r} examples")
    return part


def cmd_eval(args, cfg:RunConfig):
    model = _load_model(args.model)
    corpus = _select_split(load_jsonl(args.corpus), args.split)
    evaluation = evaluate_model(model, corpus, cfg.beam, args.name or Path(args.model).stem, args.rouge_mode,
        cfg.workers)
    evaluation.report.to_json(args.report)
    outputs = [Path(args.report)]
    if args.outputs:
        with open(args.outputs, "w", encoding="utf-8") as f:
            for doc_id, words in evaluation.outputs.items():
                f.write(json.dumps({"id": doc_id, "summary": " ".join(words)}) + "\n")
        outputs.append(Path(args.outputs))
    return [Path(args.model), Path(args.corpus)], outputs


def cmd_analyze(args, cfg:RunConfig):
    outputs = load_summaries(args.system)
    corpus = load_jsonl(args.corpus)
    corpus = Corpus(ex for ex in corpus if ex.id in outputs)
    if len(corpus) == 0:
        raise InvalidArgument(f"no document of {args.corpus} has an output in {args.system}")
    traces = list(load_attention_dumps(args.attn).values()) if args.attn else None
    report = build_report(args.name or Path(args.system).stem, outputs, corpus, args.rouge_mode,
        args.leading_fraction, args.min_span, traces, seed=cfg.train.seed)
    report.to_json(args.report)
    inputs = [Path(args.system), Path(args.corpus)] + ([Path(args.attn)] if args.attn else [])
    return inputs, [Path(args.report)]


def cmd_attn_stats(args, cfg:RunConfig):
    traces = load_attention_dumps(args.attn)
    hist = evident_attention_histogram(traces.values(), args.threshold, args.bins)
    write_histogram_csv(args.csv, {args.label or Path(args.attn).name: hist})
    if hist.defined:
        log.info("evident rate %.4f, bins %s", hist.evident_rate, " ".join(f"{p:.3f}" for p in hist.proportions))
    else:
        log.warning("no evident attention weights above %g", args.threshold)
    return [Path(args.attn)], [Path(args.csv)]


def cmd_sweep(args, cfg:RunConfig):
    teacher = _load_model(args.teacher)
    corpus = load_jsonl(args.corpus)
    student_config = _student_config(args.student_config, teacher)

    if args.length_penalties:
        grid = sweep_settings(cfg.beam, "length_penalty", args.length_penalties)
    elif args.output_temps:
        grid = sweep_settings(cfg.beam, "output_temperature", args.output_temps)
    elif args.lambdas:
        grid = list(args.lambdas)
    else:
        grid = list(GRIDS[args.grid])
    if args.gold:
        grid.append("gold")

    results = run_distillation(teacher, corpus, student_config, cfg.beam, grid, cfg.train, args.init,
        out_dir=args.out, workers=cfg.workers, rouge_mode=args.rouge_mode)
    write_sweep_csv(Path(args.out) / "sweep.csv", {r.label: r.report for r in results})
    pseudo_reports = {r.label: r.pseudo_report for r in results if r.pseudo_report is not None}
    if pseudo_reports:
        write_sweep_csv(Path(args.out) / "pseudo_sweep.csv", pseudo_reports)
    verify_manifest(Path(args.out) / PROVENANCE_FILE)
    return [Path(args.teacher), Path(args.corpus), Path(args.student_config)], [Path(args.out)]


def cmd_replay(args, cfg:RunConfig):
    """Re-run a recorded command with its recorded configuration"""
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidArgument(f"{path}: invalid JSON: {e.msg}") from e
    if manifest.get("command") == "replay":
        raise InvalidArgument("can not replay a replay")

    for name, digest in manifest["inputs"].items():
        if not Path(name).exists():
            raise LabError(f"input {name} is missing")
        if sha256_output(name) != digest:
            raise LabError(f"input {name} changed since the run")

    recorded = RunConfig.from_dict(manifest["config"])
    run(manifest["argv"], recorded)

    if args.check:
        changed = [name for name, digest in manifest["outputs"].items()
            if not Path(name).exists() or sha256_output(name) != digest]
        if changed:
            raise LabError(f"replay differs from the recorded run: {', '.join(changed)}")
        log.info("replay of %s reproduced %i outputs", path, len(manifest["outputs"]))
    return None


# --- parser ---

def _decoding_flags(p:argparse.ArgumentParser):
    g = p.add_argument_group("decoding")
    lam = g.add_mutually_exclusive_group()
    lam.add_argument("--lambda", dest="lambda_", type=float, metavar="X", help="attention temperature coefficient")
    lam.add_argument("--lambda-range", type=float, nargs=2, metavar=("A", "B"), help="draw one coefficient per document from U[A, B]")
    for f in ATTENTION_FAMILIES:
        g.add_argument(f"--lambda-{f}", type=float, metavar="X", help=f"coefficient of the {f} attention only")
    g.add_argument("--output-temp", type=float, metavar="T", help="softmax temperature of the output layer")
    g.add_argument("--sampler", choices=("beam", "ancestral", "nucleus"))
    g.add_argument("--top-p", type=float, metavar="P")
    g.add_argument("--beam", type=int, metavar="B")
    g.add_argument("--length-penalty", type=float, metavar="A")
    g.add_argument("--min-len", type=int, metavar="M")
    g.add_argument("--max-len", type=int, metavar="M")
    g.add_argument("--attention-layer", type=int, help="trace one decoder layer instead of the mean")
    g.add_argument("--attention-head", type=int, help="trace one head instead of the mean")


def _train_flags(p:argparse.ArgumentParser):
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--warmup", type=int)
    g.add_argument("--batch-tokens", type=int)
    g.add_argument("--select-by", choices=("loss", "rouge"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="F", help="JSON file with model/train/beam/synth sections")
    common.add_argument("--seed", type=int, help="seed of every random choice in the run")
    common.add_argument("--workers", type=int, help="decoding threads")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="tempdistill",
        description="Distil a summarisation transformer through pseudo labels decoded at raised attention temperature")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--docs", type=int, metavar="N")
    p.add_argument("--lead-skew", type=float, metavar="S")
    p.add_argument("--paraphrase", type=float, metavar="P")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on gold summaries")
    p.add_argument("--corpus", required=True, metavar="F")
    p.add_argument("--valid", metavar="F")
    p.add_argument("--vocab", metavar="F")
    p.add_argument("--init", metavar="F", help="continue from a model file")
    p.add_argument("--out", required=True, metavar="F")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo", parents=[common], help="decode pseudo summaries with a teacher")
    p.add_argument("--model", required=True, metavar="F")
    p.add_argument("--corpus", required=True, metavar="F")
    p.add_argument("--dump-attention", metavar="DIR")
    p.add_argument("--out", required=True, metavar="F")
    _decoding_flags(p)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("distill", parents=[common], help="train a student on pseudo summaries")
    p.add_argument("--teacher", required=True, metavar="F")
    p.add_argument("--student-config", required=True, metavar="F")
    p.add_argument("--init", choices=("first_k", "maximally_spaced"), default="maximally_spaced")
    p.add_argument("--pseudo", required=True, metavar="F")
    p.add_argument("--valid", metavar="F")
    p.add_argument("--out", required=True, metavar="F")
    _train_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="decode a corpus and score it")
    p.add_argument("--model", required=True, metavar="F")
    p.add_argument("--corpus", required=True, metavar="F")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--rouge-mode", choices=ROUGE_MODES, default="f1")
    p.add_argument("--name")
    p.add_argument("--outputs", metavar="F", help="also write the decoded summaries as JSONL")
    p.add_argument("--report", required=True, metavar="F")
    _decoding_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="statistics of system outputs against their documents")
    p.add_argument("--system", required=True, metavar="F")
    p.add_argument("--corpus", required=True, metavar="F")
    p.add_argument("--attn", metavar="DIR", help="attention dumps of the same outputs")
    p.add_argument("--rouge-mode", choices=ROUGE_MODES, default="f1")
    p.add_argument("--leading-fraction", type=float, default=0.4)
    p.add_argument("--min-span", type=int, default=5)
    p.add_argument("--name")
    p.add_argument("--report", required=True, metavar="F")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("attn-stats", parents=[common], help="evident cross-attention position histogram")
    p.add_argument("--attn", required=True, metavar="DIR")
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--label")
    p.add_argument("--csv", required=True, metavar="F")
    p.set_defaults(func=cmd_attn_stats)

    p = sub.add_parser("sweep", parents=[common], help="distil one student per temperature setting")
    p.add_argument("--teacher", required=True, metavar="F")
    p.add_argument("--corpus", required=True, metavar="F", help="corpus with train, valid and test splits")
    p.add_argument("--student-config", required=True, metavar="F")
    p.add_argument("--init", choices=("first_k", "maximally_spaced"), default="maximally_spaced")
    grid = p.add_mutually_exclusive_group()
    grid.add_argument("--grid", choices=sorted(GRIDS), default="temperature")
    grid.add_argument("--lambdas", type=float, nargs="+", metavar="X")
    grid.add_argument("--length-penalties", type=float, nargs="+", metavar="A",
        help=f"sweep the teacher's length penalty, e.g. {' '.join(map(str, LENGTH_PENALTY_SWEEP))}")
    grid.add_argument("--output-temps", type=float, nargs="+", metavar="T",
        help=f"sweep the output temperature, e.g. {' '.join(map(str, OUTPUT_TEMPERATURE_SWEEP))}")
    p.add_argument("--gold", action="store_true", help="also train a student on the gold summaries")
    p.add_argument("--rouge-mode", choices=ROUGE_MODES, default="f1")
    p.add_argument("--out", required=True, metavar="DIR")
    _decoding_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", parents=[common], help="re-run a command from its manifest")
    p.add_argument("--manifest", required=True, metavar="F")
    p.add_argument("--check", action="store_true", help="fail unless every output is reproduced bit for bit")
    p.set_defaults(func=cmd_replay)

    return parser


def setup_logging(verbose:bool=False, quiet:bool=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv:Sequence[str], config:Optional[RunConfig]=None):
    """Parse and execute one command. A given config replaces the --config file (used by replay)"""
    args = build_parser().parse_args(list(argv))
    cfg = resolve_config(args, config)
    io = args.func(args, cfg)
    if io is not None:
        inputs, outputs = io
        write_manifest(argv, args.command, cfg, inputs, outputs)


def main(argv:Optional[Sequence[str]]=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)

    try:
        run(argv)
    except LabError as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"{parser.prog} {args.command}: error: {e.strerror or e}: {e.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1
    return 0
