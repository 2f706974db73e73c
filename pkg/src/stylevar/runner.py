"""Run orchestration behind the CLI: data preparation, the epoch loop with
validation-GM checkpoint selection and resume, transfer and evaluation.

Run directory layout::

    <output_dir>/<name>/config.ini     resolved config snapshot
                        run.json       seed, git describe, family, toggles
                        train.jsonl    header line, then one line per step / validation
                        last.ckpt      end of the latest finished epoch (resume point)
                        best.ckpt      highest validation GM so far
                        outputs/       test.out, test.targets, prototypes.jsonl, identity.json
                        metrics.json
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import subprocess
from pathlib import Path

import numpy as np

from .attribution import BaselineSystem
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, to_ini
from .data import (Corpus, Vocab, build_vocab, epoch_rng, iterate_batches, load_references, load_split,
                   pad_tokens, synth_generate, write_synth)
from .embedding import EmbeddingSystem, RsSystem
from .errors import ConfigError, NumericDomainError, StyleVarError, ValidationError
from .evaluation import (EvalClassifier, MetricsReport, bleu, evaluate_run, kn_perplexity, kn_train,
                         load_eval_classifier, save_eval_classifier, style_accuracy, train_eval_classifier,
                         write_comparison_csv)
from .prototype import PrototypeSystem, identity_fraction, write_prototype_jsonl
from .seq import decode_length


class TrainingAborted(StyleVarError, RuntimeError):
    pass


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# -- data ----------------------------------------------------------------------------

@dataclasses.dataclass
class Task:
    train: Corpus
    valid: Corpus
    test: Corpus
    references: list | None
    vocab: Vocab
    root: Path


def _data_hash(cfg: RunConfig) -> str:
    h = hashlib.sha256()
    if cfg.task == "synth":
        h.update(json.dumps(dataclasses.asdict(cfg.synth), sort_keys=True).encode())
    else:
        for path in sorted(Path(cfg.data_root).glob("*")):
            if path.is_file() and (path.name.split(".")[0] in ("train", "valid", "test", "reference")):
                h.update(path.name.encode())
                h.update(path.read_bytes())
    h.update(json.dumps(dataclasses.asdict(cfg.eval), sort_keys=True).encode())
    return h.hexdigest()


def prepare(cfg: RunConfig, log=print) -> Path:
    """Write the corpus (synth), vocab, encoded caches and the evaluator.  No-op when up to date."""
    root = cfg.data_dir
    stamp = root / "prepare.json"
    digest = _data_hash(cfg)
    if stamp.exists() and json.loads(stamp.read_text()).get("hash") == digest:
        log(f"data under {root} is up to date")
        return root
    root.mkdir(parents=True, exist_ok=True)
    if cfg.task == "synth":
        write_synth(root, synth_generate(cfg.synth))
    try:
        splits = {s: load_split(root, s) for s in ("train", "valid", "test")}
    except FileNotFoundError as exc:
        raise ConfigError(str(exc), "data.root") from None
    vocab = build_vocab(splits["train"])
    vocab.save(root / "vocab.json")
    cache = {}
    for name, corpus in splits.items():
        ids, mask = pad_tokens(corpus.sentences, vocab)
        cache[f"{name}_ids"], cache[f"{name}_mask"] = ids, mask
        cache[f"{name}_labels"] = np.asarray(corpus.labels)
    np.savez_compressed(root / "encoded.npz", **cache)
    clf = train_eval_classifier(splits["train"], splits["valid"], vocab, epochs=cfg.eval.classifier_epochs, seed=0)
    save_eval_classifier(root / "evaluator.ckpt", clf)
    stamp.write_text(json.dumps({"hash": digest, "evaluator_valid_acc": clf.valid_acc}, indent=2))
    log(f"prepared {root} (vocab {len(vocab)}, evaluator valid acc {clf.valid_acc:.1f})")
    return root


def load_task(cfg: RunConfig) -> Task:
    root = cfg.data_dir
    if not (root / "prepare.json").exists():
        raise ConfigError(f"no prepared data under {root}; run `prepare` first", "data.root")
    splits = {s: load_split(root, s) for s in ("train", "valid", "test")}
    vocab = Vocab.load(root / "vocab.json")
    return Task(splits["train"], splits["valid"], splits["test"],
                load_references(root, splits["test"].num_styles), vocab, root)


def load_evaluator(task: Task) -> EvalClassifier:
    return load_eval_classifier(task.root / "evaluator.ckpt", task.vocab)


# -- systems ---------------------------------------------------------------------------

def build_system(cfg: RunConfig, task: Task):
    Y = task.train.num_styles
    fam = cfg.family
    if fam == "embedding":
        system = EmbeddingSystem(task.vocab, Y, cfg.embed, cfg.toggles, cfg.seed)
        epochs, bs = cfg.embed_epochs, cfg.embed.batch_size
    elif fam == "rs":
        system = RsSystem(task.vocab, Y, cfg.embed, cfg.toggles.gamma, cfg.seed)
        system.attach_corpus(task.train)
        epochs, bs = cfg.embed_epochs, cfg.embed.batch_size
    elif fam == "prototype":
        system = PrototypeSystem(task.vocab, Y, cfg.proto, cfg.seed)
        epochs, bs = system.total_epochs, cfg.proto.batch_size
    else:
        system = BaselineSystem(task.vocab, Y, cfg.baseline, cfg.seed)
        epochs, bs = system.total_epochs, cfg.baseline.infill.batch_size
    system.set_decode_length(decode_length(task.train.max_length()))
    return system, epochs, bs


def can_transfer(system, epoch: int) -> bool:
    """Two-stage systems only produce text once their infiller is training."""
    phase = getattr(system, "phase", None)
    return phase is None or phase(epoch) == 2


def other_style(labels, num_styles: int) -> list[int]:
    return [(int(y) + 1) % num_styles for y in labels]


def run_transfer(system, sentences, targets, beam=None, sources=None):
    if isinstance(system, BaselineSystem):
        return system.transfer(sentences, targets, beam, sources=sources)
    return system.transfer(sentences, targets, beam)


def validation_scores(system, task: Task, evaluator: EvalClassifier, lm, limit: int, beam=None) -> dict:
    """ACC, BLEU_s, PPL on (up to ``limit``) validation sentences sent to the other style.

    No references exist for validation, so GM is the geometric mean of the
    three available factors (ACC, BLEU_s, 1/ln PPL).
    """
    idx = np.linspace(0, len(task.valid) - 1, num=min(limit, len(task.valid))).round().astype(int)
    sents = [task.valid.sentences[i] for i in idx]
    labels = [task.valid.labels[i] for i in idx]
    targets = other_style(labels, task.train.num_styles)
    outs = run_transfer(system, sents, targets, beam, sources=labels)
    acc = style_accuracy(evaluator, outs, targets)
    bs = bleu(outs, sents)
    ppl = kn_perplexity(lm, outs)
    gm = (acc * bs / np.log(ppl)) ** (1 / 3) if acc > 0 and bs > 0 and ppl > 1 else 0.0
    return {"acc": acc, "bleu_s": bs, "ppl": ppl, "gm": float(gm)}


# -- training ------------------------------------------------------------------------------

def _jsonable(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in d.items()}


def _ckpt_meta(system, epoch: int, best: dict) -> dict:
    return {"epoch": epoch, "counters": system.counters(), "best": best}


def train(cfg: RunConfig, log=print, stop_after: int | None = None) -> dict:
    """Train (resuming from ``last.ckpt`` when present).  ``stop_after`` ends the
    loop after that many epochs of this call, which simulates an interruption."""
    task = load_task(cfg)
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.ini").write_text(to_ini(cfg))
    system, epochs, bs = build_system(cfg, task)
    start, best = 0, {"gm": -1.0, "epoch": None}
    log_path = run / "train.jsonl"
    if (run / "last.ckpt").exists():
        arrays, meta = load_checkpoint(run / "last.ckpt")
        system.load_arrays(arrays, meta["counters"])
        start, best = meta["epoch"] + 1, meta["best"]
        log(f"resuming {cfg.name} at epoch {start}")
    else:
        header = {"header": {"name": cfg.name, "family": cfg.family, "seed": cfg.seed,
                             "toggles": dataclasses.asdict(cfg.toggles), "git": git_describe()}}
        log_path.write_text(json.dumps(header) + "\n")
    (run / "run.json").write_text(json.dumps({"seed": cfg.seed, "git": git_describe(), "family": cfg.family,
                                              "toggles": dataclasses.asdict(cfg.toggles)}, indent=2))
    evaluator = load_evaluator(task)
    lm = kn_train(task.train.sentences, cfg.eval.lm_order)
    done = 0
    with open(log_path, "a") as fh:
        for epoch in range(start, epochs):
            system.begin_epoch(epoch, task.train)
            rng = epoch_rng(cfg.seed, epoch)
            for step, rows in enumerate(iterate_batches(len(task.train), bs, rng)):
                try:
                    terms = system.train_step(task.train, rows, epoch, rng)
                except NumericDomainError as exc:
                    fh.write(json.dumps({"epoch": epoch, "step": step, "error": str(exc)}) + "\n")
                    raise TrainingAborted(f"epoch {epoch} step {step}: {exc}; last good checkpoint kept") from exc
                fh.write(json.dumps({"epoch": epoch, "step": step, **_jsonable(terms)}) + "\n")
            last_epoch = epoch == epochs - 1
            if can_transfer(system, epoch) and ((epoch + 1) % cfg.eval.valid_every == 0 or last_epoch):
                scores = validation_scores(system, task, evaluator, lm, cfg.eval.valid_limit, cfg.beam)
                fh.write(json.dumps({"epoch": epoch, "valid": scores}) + "\n")
                log(f"epoch {epoch}: valid acc {scores['acc']:.1f} bleu_s {scores['bleu_s']:.1f} "
                    f"ppl {scores['ppl']:.1f} gm {scores['gm']:.3f}")
                if scores["gm"] > best["gm"]:
                    best = {"gm": scores["gm"], "epoch": epoch}
                    save_checkpoint(run / "best.ckpt", system.arrays(), _ckpt_meta(system, epoch, best))
            fh.flush()
            save_checkpoint(run / "last.ckpt", system.arrays(), _ckpt_meta(system, epoch, best))
            done += 1
            if stop_after is not None and done >= stop_after:
                break
    return best


def load_trained(cfg: RunConfig, task: Task, which: str = "best"):
    system, _, _ = build_system(cfg, task)
    path = cfg.run_dir / f"{which}.ckpt"
    if not path.exists():
        path = cfg.run_dir / "last.ckpt"
    if not path.exists():
        raise ConfigError(f"no checkpoint under {cfg.run_dir}; run `train` first", "run.name")
    arrays, meta = load_checkpoint(path)
    system.load_arrays(arrays, meta["counters"])
    if isinstance(system, BaselineSystem) and cfg.baseline.method == "frequency":
        # n-gram tables are derived from the corpus, not stored
        system.begin_epoch(0, task.train)
    return system


# -- transfer and evaluation ---------------------------------------------------------

def transfer(cfg: RunConfig, input_path=None, target: int | None = None, output_path=None, log=print) -> Path:
    """Transfer the test split (default) or a file of sentences.  Writes one line per input."""
    task = load_task(cfg)
    Y = task.train.num_styles
    if target is not None and not 0 <= target < Y:
        raise ConfigError(f"target style {target} out of range 0..{Y - 1}", "--target")
    system = load_trained(cfg, task)
    if input_path is None:
        sentences, sources = task.test.sentences, list(task.test.labels)
        targets = other_style(sources, Y) if target is None else [target] * len(sentences)
        out = Path(output_path) if output_path else cfg.run_dir / "outputs" / "test.out"
    else:
        if target is None:
            raise ConfigError("--target is required with --input", "--target")
        with open(input_path, encoding="utf-8") as fh:
            sentences = [line.split() for line in fh]
        if any(not s for s in sentences):
            raise ValidationError("blank input lines cannot be transferred")
        targets = [target] * len(sentences)
        sources = other_style(targets, Y) if Y == 2 else None
        out = Path(output_path) if output_path else Path(str(input_path) + ".transfer")
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = run_transfer(system, sentences, targets, cfg.beam, sources=sources)
    out.write_text("".join(" ".join(o) + "\n" for o in outputs))
    Path(str(out) + ".targets").write_text("".join(f"{t}\n" for t in targets))
    masks = getattr(system, "last_masks", None)
    if masks is not None:
        write_prototype_jsonl(out.parent / (out.stem + ".prototypes.jsonl"), sentences, masks)
        ident = identity_fraction(masks, sources)
        (out.parent / (out.stem + ".identity.json")).write_text(json.dumps(ident, indent=2))
    log(f"wrote {len(outputs)} lines to {out}")
    return out


def evaluate(cfg: RunConfig, outputs_path=None, log=print) -> MetricsReport:
    task = load_task(cfg)
    out = Path(outputs_path) if outputs_path else cfg.run_dir / "outputs" / "test.out"
    if not out.exists():
        raise ConfigError(f"{out} not found; run `transfer` first", "--outputs")
    outputs = [line.split() for line in out.read_text().splitlines()]
    targets_path = Path(str(out) + ".targets")
    targets = ([int(t) for t in targets_path.read_text().split()] if targets_path.exists()
               else other_style(task.test.labels, task.train.num_styles))
    ident_path = out.parent / (out.stem + ".identity.json")
    identity = json.loads(ident_path.read_text())["overall"] if ident_path.exists() else None
    lm = kn_train(task.train.sentences, cfg.eval.lm_order)
    report = evaluate_run(cfg.name, outputs, task.test, targets, task.references, load_evaluator(task), lm, identity)
    report.save(cfg.run_dir / "metrics.json")
    rebuild_comparison(Path(cfg.output_dir))
    log(f"{cfg.name}: ACC {report.acc:.2f} BLEU_s {report.bleu_s:.2f} BLEU_r {report.bleu_r:.2f} "
        f"PPL {report.ppl:.2f} GM {report.gm:.2f}")
    return report


def collect_reports(output_root: Path) -> list[MetricsReport]:
    return [MetricsReport.from_json(p.read_text()) for p in sorted(Path(output_root).glob("*/metrics.json"))]


def rebuild_comparison(output_root: Path) -> Path:
    path = Path(output_root) / "comparison.csv"
    write_comparison_csv(path, collect_reports(output_root))
    return path


def best_gm_from_log(run_dir: Path) -> tuple[float, int] | None:
    best = None
    with open(Path(run_dir) / "train.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            if "valid" in row and (best is None or row["valid"]["gm"] > best[0]):
                best = (row["valid"]["gm"], row["epoch"])
    return best

