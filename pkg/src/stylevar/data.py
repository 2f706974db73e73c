"""Style-labelled corpora, vocabularies, padded batches and a synthetic corpus with known markers.

On-disk layout: ``<root>/<split>.<style>`` holds one whitespace-tokenised
sentence per line, and ``<root>/reference.<style>`` holds one human/oracle
reference per line of ``test.<style>``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ValidationError

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<s>", "</s>", "[MASK]"
RESERVED = (PAD, UNK, BOS, EOS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)
SPLITS = ("train", "valid", "test")


@dataclass
class Corpus:
    sentences: list[list[str]]
    labels: list[int]
    split: str = "train"

    def __post_init__(self):
        if len(self.sentences) != len(self.labels):
            raise ValidationError("sentences and labels differ in length")
        for i, s in enumerate(self.sentences):
            if not s:
                raise ValidationError(f"sentence {i} is empty")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def num_styles(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    def subset(self, indices) -> "Corpus":
        return Corpus([self.sentences[i] for i in indices], [self.labels[i] for i in indices], self.split)

    def of_style(self, y: int) -> "Corpus":
        return self.subset([i for i, l in enumerate(self.labels) if l == y])

    def max_length(self) -> int:
        return max(len(s) for s in self.sentences)


def _check_reserved(tokens: Sequence[str], where: str) -> None:
    for tok in tokens:
        if tok in RESERVED:
            raise ValidationError(f"{where}: reserved token {tok!r} appears in corpus text")


def read_lines(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if toks:
                _check_reserved(toks, f"{path}:{lineno}")
                out.append(toks)
    return out


def load_style_corpus(paths: Sequence, split: str = "train") -> Corpus:
    """One file per style, in style-index order."""
    sentences, labels = [], []
    for style, path in enumerate(paths):
        lines = read_lines(path)
        if not lines:
            raise ValidationError(f"{path}: no sentences")
        sentences.extend(lines)
        labels.extend([style] * len(lines))
    return Corpus(sentences, labels, split)


def style_files(root, split: str) -> list[Path]:
    root = Path(root)
    files = sorted(root.glob(f"{split}.*"), key=lambda p: int(p.suffix[1:]) if p.suffix[1:].isdigit() else 1 << 30)
    files = [f for f in files if f.suffix[1:].isdigit()]
    if not files:
        raise FileNotFoundError(f"no {split}.<style> files under {root}")
    return files


def load_split(root, split: str) -> Corpus:
    return load_style_corpus(style_files(root, split), split)


def load_references(root, num_styles: int) -> list[list[str]] | None:
    """References aligned with ``test`` order (style-major), or None if absent."""
    root = Path(root)
    refs = []
    for y in range(num_styles):
        path = root / f"reference.{y}"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            refs.extend(line.split() for line in fh if line.strip())
    return refs


def write_split(root, corpus: Corpus, split: str | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    split = split or corpus.split
    for y in range(corpus.num_styles):
        with open(root / f"{split}.{y}", "w", encoding="utf-8") as fh:
            for s, l in zip(corpus.sentences, corpus.labels):
                if l == y:
                    fh.write(" ".join(s) + "\n")


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:5]) != RESERVED:
            raise ValidationError("vocab must start with the reserved tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValidationError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(json.loads(Path(path).read_text()))


def build_vocab(corpus: Corpus, min_freq: int = 1) -> Vocab:
    if min_freq < 1:
        raise ValidationError("min_freq must be >= 1")
    counts = Counter(t for s in corpus.sentences for t in s)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def batch_encode(sentences: Sequence[Sequence[str]], vocab: Vocab, max_len: int,
                 labels: Sequence[int] | None = None):
    """Rows are ``BOS ids EOS PAD...`` of width ``max_len``.

    Returns (ids (B, max_len) int64, lengths (B,) counting BOS and EOS, labels (B,)).
    Sentences longer than ``max_len - 2`` are truncated.
    """
    if not sentences:
        raise ValidationError("empty batch")
    if max_len < 3:
        raise ValidationError("max_len must leave room for BOS, one token and EOS")
    ids = np.full((len(sentences), max_len), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(sentences), dtype=np.int64)
    for i, s in enumerate(sentences):
        body = vocab.encode(s[:max_len - 2])
        row = [BOS_ID] + body + [EOS_ID]
        ids[i, :len(row)] = row
        lengths[i] = len(row)
    lab = np.asarray(labels if labels is not None else np.zeros(len(sentences)), dtype=np.int64)
    return ids, lengths, lab


def pad_tokens(sentences: Sequence[Sequence[str]], vocab: Vocab):
    """Token ids without BOS/EOS, right-padded.  Returns (ids (B, T), mask (B, T))."""
    T = max(len(s) for s in sentences)
    ids = np.full((len(sentences), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sentences), T))
    for i, s in enumerate(sentences):
        ids[i, :len(s)] = vocab.encode(s)
        mask[i, :len(s)] = 1.0
    return ids, mask


def pad_id_rows(rows: Sequence[Sequence[int]]):
    T = max(len(r) for r in rows)
    ids = np.full((len(rows), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), T))
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return ids, mask


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Per-epoch stream: resuming at an epoch boundary replays the same draws."""
    return np.random.default_rng([seed, epoch])


# -- synthetic corpus ------------------------------------------------------------

@dataclass
class SynthSpec:
    """Parameters of the synthetic style corpus.

    Content follows a sparse bigram chain over ``content_vocab`` tokens
    (``branching`` successors per token).  A sentence carries markers with
    probability ``marker_rate``; marked sentences get between 1 and
    ``max_markers`` markers of their own style, inserted at random positions.
    Marker ``k`` of style ``a`` and marker ``k`` of style ``b`` are counterparts,
    which gives an oracle reference for every test sentence.
    """
    num_styles: int = 2
    content_vocab: int = 50
    markers_per_style: int = 5
    min_len: int = 8
    max_len: int = 12
    marker_rate: float = 1.0
    max_markers: int = 1
    branching: int = 3
    train_size: int = 2000
    valid_size: int = 200
    test_size: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.marker_rate <= 1.0:
            raise ValidationError("marker_rate must lie in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValidationError("invalid sentence length range")
        if self.num_styles < 1 or self.markers_per_style < 1:
            raise ValidationError("need at least one style and one marker per style")

    def content_tokens(self) -> list[str]:
        return [f"w{i}" for i in range(self.content_vocab)]

    def markers(self) -> list[list[str]]:
        return [[f"s{y}m{k}" for k in range(self.markers_per_style)] for y in range(self.num_styles)]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthSpec":
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            if name in mapping:
                kwargs[name] = float(mapping[name]) if f.type == "float" else int(mapping[name])
        return cls(**kwargs)


@dataclass
class SynthData:
    splits: dict[str, Corpus]
    masks: dict[str, list[list[int]]]          # 1 = style marker
    references: list[list[str]]                # aligned with splits["test"]
    spec: SynthSpec


def synth_generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    content = spec.content_tokens()
    markers = spec.markers()
    successors = [rng.choice(spec.content_vocab, size=spec.branching, replace=False)
                  for _ in range(spec.content_vocab)]

    def make(n: int, split: str):
        sents, labels, masks, refs = [], [], [], []
        for i in range(n):
            y = i % spec.num_styles
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            tok = int(rng.integers(spec.content_vocab))
            body = [tok]
            for _ in range(length - 1):
                tok = int(rng.choice(successors[tok]))
                body.append(tok)
            words = [content[t] for t in body]
            mask = [0] * len(words)
            ref_words = list(words)
            if spec.max_markers > 0 and rng.random() < spec.marker_rate:
                count = int(rng.integers(1, spec.max_markers + 1))
                for _ in range(count):
                    pos = int(rng.integers(len(words) + 1))
                    k = int(rng.integers(spec.markers_per_style))
                    words.insert(pos, markers[y][k])
                    mask.insert(pos, 1)
                    ref_words.insert(pos, markers[(y + 1) % spec.num_styles][k])
            sents.append(words)
            labels.append(y)
            masks.append(mask)
            refs.append(ref_words)
        # style-major order to match the one-file-per-style layout
        order = sorted(range(n), key=lambda j: labels[j])
        corpus = Corpus([sents[j] for j in order], [labels[j] for j in order], split)
        return corpus, [masks[j] for j in order], [refs[j] for j in order]

    splits, all_masks, references = {}, {}, []
    for split, n in (("train", spec.train_size), ("valid", spec.valid_size), ("test", spec.test_size)):
        corpus, masks, refs = make(n, split)
        splits[split] = corpus
        all_masks[split] = masks
        if split == "test":
            references = refs
    return SynthData(splits, all_masks, references, spec)


def write_synth(root, data: SynthData) -> None:
    root = Path(root)
    for split, corpus in data.splits.items():
        write_split(root, corpus, split)
        write_mask_jsonl(root / f"{split}.masks.jsonl", corpus, data.masks[split])
    test = data.splits["test"]
    for y in range(test.num_styles):
        with open(root / f"reference.{y}", "w", encoding="utf-8") as fh:
            for ref, l in zip(data.references, test.labels):
                if l == y:
                    fh.write(" ".join(ref) + "\n")


def write_mask_jsonl(path, corpus: Corpus, masks: Sequence[Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for toks, y, m in zip(corpus.sentences, corpus.labels, masks):
            fh.write(json.dumps({"tokens": toks, "label": y, "mask": list(m)}) + "\n")


def read_mask_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
