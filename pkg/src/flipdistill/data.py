"""Synthetic text-matching corpus, dataset file IO, and batch assembly.

Texts are sequences of integer token ids against a fixed toy vocabulary;
no natural-language tokenizer is involved. Ids 0..5 are reserved special
tokens (see vocab module constants re-exported here), content tokens
start at CONTENT_BASE.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import ConfigError

log = logging.getLogger(__name__)

# reserved vocabulary ids
UNK, MATCH, SEP, ANS, YES, NO = 0, 1, 2, 3, 4, 5
CONTENT_BASE = 6


class ParseError(ValueError):
    pass


@dataclass
class PairExample:
    text_i: list
    text_j: list
    label: int
    cluster_i: int = -1
    cluster_j: int = -1


@dataclass
class SyntheticCorpusConfig:
    vocab_size: int = 256
    n_clusters: int = 8
    n_examples: int = 2000
    synonym_swap_rate: float = 0.3
    shuffle_rate: float = 0.2
    drop_rate: float = 0.1
    negative_hardness: float = 0.5
    positive_ratio: float = 0.5
    min_len: int = 6
    max_len: int = 16
    templates_per_cluster: int = 24
    split_fracs: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self):
        rates = {
            "synonym_swap_rate": self.synonym_swap_rate,
            "shuffle_rate": self.shuffle_rate,
            "drop_rate": self.drop_rate,
            "negative_hardness": self.negative_hardness,
            "positive_ratio": self.positive_ratio,
        }
        for name, r in rates.items():
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {r}")
        if self.vocab_size <= CONTENT_BASE + self.n_clusters:
            raise ConfigError("vocab_size too small for the requested cluster count")
        if self.max_len < self.min_len or self.min_len < 1:
            raise ConfigError("invalid length bounds")


@dataclass
class Batch:
    """B aligned pairs plus the B x B pair-label matrix."""
    examples: list
    y: np.ndarray


def _cluster_pools(cfg):
    """Partition content token ids into one pool per cluster."""
    content = np.arange(CONTENT_BASE, cfg.vocab_size)
    pools = np.array_split(content, cfg.n_clusters)
    if any(len(p) < 2 for p in pools):
        raise ConfigError("vocab_size too small: each cluster needs >= 2 content tokens")
    return pools


def _paraphrase(tokens, pool, cfg, rng):
    """Perturb a template: synonym swaps within the pool, adjacent
    shuffles, and token drops."""
    out = list(tokens)
    for idx in range(len(out)):
        if rng.random() < cfg.synonym_swap_rate:
            out[idx] = int(pool[rng.integers(len(pool))])
    for idx in range(len(out) - 1):
        if rng.random() < cfg.shuffle_rate:
            out[idx], out[idx + 1] = out[idx + 1], out[idx]
    kept = [t for t in out if rng.random() >= cfg.drop_rate]
    return kept if kept else out[:1]


def _harden(tokens, anchor, hardness, rng):
    """Overwrite a fraction of a negative's tokens with the anchor's,
    producing lexical overlap across clusters."""
    out = list(tokens)
    for idx in range(len(out)):
        if rng.random() < hardness:
            out[idx] = int(anchor[rng.integers(len(anchor))])
    return out


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig):
    """Build (train, dev, test) PairExample lists.

    Positives are paraphrase pairs from one cluster template; negatives
    cross clusters, with negative_hardness controlling how much anchor
    vocabulary leaks into the negative side. Splits are disjoint at the
    template level.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pools = _cluster_pools(cfg)

    n_templates = cfg.n_clusters * cfg.templates_per_cluster
    if cfg.n_examples > 50 * n_templates:
        raise ConfigError(
            f"n_examples={cfg.n_examples} exceeds corpus capacity for "
            f"{n_templates} templates; raise templates_per_cluster or n_clusters"
        )

    templates = []  # (template_id, cluster, tokens)
    tid = 0
    for c in range(cfg.n_clusters):
        pool = pools[c]
        for _ in range(cfg.templates_per_cluster):
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            toks = [int(pool[rng.integers(len(pool))]) for _ in range(length)]
            templates.append((tid, c, toks))
            tid += 1

    order = rng.permutation(n_templates)
    n_train = int(cfg.split_fracs[0] * n_templates)
    n_dev = int(cfg.split_fracs[1] * n_templates)
    split_ids = {
        "train": order[:n_train],
        "dev": order[n_train:n_train + n_dev],
        "test": order[n_train + n_dev:],
    }
    counts = {
        "train": int(round(cfg.split_fracs[0] * cfg.n_examples)),
        "dev": int(round(cfg.split_fracs[1] * cfg.n_examples)),
    }
    counts["test"] = cfg.n_examples - counts["train"] - counts["dev"]

    splits = []
    for name in ("train", "dev", "test"):
        ids = split_ids[name]
        by_cluster = {}
        for t in ids:
            by_cluster.setdefault(templates[t][1], []).append(t)
        clusters = sorted(by_cluster)
        examples = []
        for _ in range(counts[name]):
            if rng.random() < cfg.positive_ratio:
                c = clusters[int(rng.integers(len(clusters)))]
                t = by_cluster[c][int(rng.integers(len(by_cluster[c])))]
                _, _, toks = templates[t]
                ex = PairExample(
                    text_i=_paraphrase(toks, pools[c], cfg, rng),
                    text_j=_paraphrase(toks, pools[c], cfg, rng),
                    label=1, cluster_i=c, cluster_j=c,
                )
            else:
                ca, cb = rng.choice(len(clusters), size=2, replace=False)
                ca, cb = clusters[int(ca)], clusters[int(cb)]
                ta = by_cluster[ca][int(rng.integers(len(by_cluster[ca])))]
                tb = by_cluster[cb][int(rng.integers(len(by_cluster[cb])))]
                anchor = _paraphrase(templates[ta][2], pools[ca], cfg, rng)
                other = _paraphrase(templates[tb][2], pools[cb], cfg, rng)
                ex = PairExample(
                    text_i=anchor,
                    text_j=_harden(other, anchor, cfg.negative_hardness, rng),
                    label=0, cluster_i=ca, cluster_j=cb,
                )
            examples.append(ex)
        splits.append(examples)
    return tuple(splits)


# -- file IO -------------------------------------------------------------

def save_dataset(examples, path):
    """Write one JSON object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {"text_i": ex.text_i, "text_j": ex.text_j, "label": ex.label}
            if ex.cluster_i >= 0:
                rec["cluster_i"] = ex.cluster_i
            if ex.cluster_j >= 0:
                rec["cluster_j"] = ex.cluster_j
            f.write(json.dumps(rec) + "\n")


def load_dataset(path):
    """Parse a line-delimited dataset file; malformed lines are reported
    with their 1-based line number."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            try:
                text_i = [int(t) for t in rec["text_i"]]
                text_j = [int(t) for t in rec["text_j"]]
                label = int(rec["label"])
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}:{lineno}: missing or malformed field ({e})") from e
            if label not in (0, 1):
                raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            if not text_i or not text_j:
                raise ParseError(f"{path}:{lineno}: empty text sequence")
            examples.append(PairExample(
                text_i=text_i, text_j=text_j, label=label,
                cluster_i=int(rec.get("cluster_i", -1)),
                cluster_j=int(rec.get("cluster_j", -1)),
            ))
    if not examples:
        log.warning("load_dataset: %s contains no examples", path)
    return examples


# -- batching ------------------------------------------------------------

def make_batches(examples, batch_size, seed, same_cluster_positive=True):
    """Seed-deterministic shuffle into batches of B aligned pairs.

    The y matrix has the example labels on the diagonal. Off-diagonal
    entries pair example i's text_i with example j's text_j: 0 unless
    both carry cluster ids from the same cluster and
    same_cluster_positive is set.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for in-batch negatives, got {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    batches = []
    for start in range(0, len(examples) - batch_size + 1, batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        y = np.zeros((batch_size, batch_size))
        for i, a in enumerate(chunk):
            for j, b in enumerate(chunk):
                if i == j:
                    y[i, j] = a.label
                elif (same_cluster_positive and a.cluster_i >= 0
                        and a.cluster_i == b.cluster_j):
                    y[i, j] = 1.0
        batches.append(Batch(examples=chunk, y=y))
    return batches
