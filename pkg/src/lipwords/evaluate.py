"""Scoring, top-N accuracy, and error-analysis reports.

A Bi-LSTM variant scores word v by the sum over timesteps of the
per-timestep log posterior (the eval-time dual of the training loss); a
temporal-conv variant's single logit vector is used directly.  Rank ties
always break toward the lower word index, which makes every metric
deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError
from .data import load_batches, normalize_clip, augment, AugmentSpec


@dataclass
class ScoreMatrix:
    """Per evaluated clip: a score per vocabulary word, the true label,
    and the clip id."""

    scores: np.ndarray  # [M, V] float
    labels: np.ndarray  # [M] int
    ids: list

    def __post_init__(self):
        if self.scores.ndim != 2 or len(self.labels) != len(self.scores):
            raise ContractError("scores must be [clips, vocab] with one label per row")

    @property
    def vocab_size(self):
        return self.scores.shape[1]


def _log_softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def score_clips(net, dataset, split, batch_size=16):
    """Eval-mode scores for every clip of a split (center crop, no flip)."""
    net.set_training(False)
    ids = [clip_id for clip_id, _ in dataset.split(split)]
    all_scores, all_labels = [], []
    for clips, labels in load_batches(dataset, split, batch_size):
        logits = net.forward(clips).data
        if logits.ndim == 3:  # [T, N, V]: summed per-timestep log posteriors
            scores = _log_softmax(logits, axis=-1).sum(axis=0)
        else:  # [N, V] single logit vector
            scores = logits
        all_scores.append(scores.astype(np.float64))
        all_labels.append(labels)
    return ScoreMatrix(np.concatenate(all_scores), np.concatenate(all_labels), ids)


def rankings(sm):
    """Word indices per clip, best score first; ties -> lower index first."""
    return np.argsort(-sm.scores, axis=1, kind="stable")


def decisions(sm):
    """Argmax decision per clip (lowest index on ties)."""
    return sm.scores.argmax(axis=1)


def topn(sm, n):
    """Fraction of clips whose true word ranks within the n best scores."""
    if n < 1:
        raise ContractError("top-N needs n >= 1")
    n = min(n, sm.vocab_size)
    ranked = rankings(sm)[:, :n]
    hits = (ranked == sm.labels[:, None]).any(axis=1)
    return float(hits.sum() / len(sm.labels))


def confusion_pairs(sm, k=10):
    """Most frequent (target, decision) errors.

    For each target word with at least one error: its most frequent
    wrong decision and that decision's rate among the target's clips.
    Sorted by rate descending, ties by target then decision index.
    """
    if k < 1:
        raise ContractError("need k >= 1")
    dec = decisions(sm)
    pairs = []
    for target in np.unique(sm.labels):
        mask = sm.labels == target
        wrong = dec[mask][dec[mask] != target]
        if wrong.size == 0:
            continue
        counts = np.bincount(wrong, minlength=sm.vocab_size)
        decision = int(counts.argmax())  # argmax ties -> lower word index
        pairs.append({
            "target": int(target),
            "decision": decision,
            "count": int(counts[decision]),
            "rate": float(counts[decision] / mask.sum()),
        })
    pairs.sort(key=lambda p: (-p["rate"], p["target"], p["decision"]))
    return pairs[:k]


def per_word_table(sm):
    """Per-word accuracies, best first; words with no eval clip are absent.

    Rows carry exact integer counts so that the weighted mean recombines
    to top-1 bit-exactly: sum(correct) / sum(count) == topn(sm, 1).
    """
    dec = decisions(sm)
    rows = []
    for word in np.unique(sm.labels):
        mask = sm.labels == word
        count = int(mask.sum())
        correct = int((dec[mask] == word).sum())
        rows.append({"word": int(word), "count": count, "correct": correct,
                     "accuracy": correct / count})
    rows.sort(key=lambda r: (-r["accuracy"], r["word"]))
    return rows


def build_report(sm, vocab, ks=(1, 5, 10), confusions=10, meta=None):
    """JSON-ready report: {top: {...}, confusions: [...], per_word: [...], meta: {...}}."""
    report = {
        "top": {str(k): topn(sm, k) for k in ks},
        "confusions": [
            {**pair, "target": vocab[pair["target"]], "decision": vocab[pair["decision"]]}
            for pair in confusion_pairs(sm, confusions)
        ],
        "per_word": [{**row, "word": vocab[row["word"]]} for row in per_word_table(sm)],
        "meta": meta or {},
    }
    return report


def format_confusions(report):
    lines = [f"{'target':<16} {'decision':<16} {'error rate':>10}"]
    for pair in report["confusions"]:
        lines.append(f"{pair['target']:<16} {pair['decision']:<16} {pair['rate']:>9.0%}")
    if len(lines) == 1:
        lines.append("(no errors)")
    return "\n".join(lines)


def format_word_table(report, best=10, worst=10):
    rows = report["per_word"]
    lines = [f"{'best words':<16} {'acc':>5}    {'worst words':<16} {'acc':>5}"]
    top = rows[:best]
    bottom = rows[-worst:][::-1] if len(rows) > best else []
    for i in range(max(len(top), len(bottom))):
        left = f"{top[i]['word']:<16} {top[i]['accuracy']:>5.0%}" if i < len(top) else " " * 22
        right = f"{bottom[i]['word']:<16} {bottom[i]['accuracy']:>5.0%}" if i < len(bottom) else ""
        lines.append(f"{left}    {right}")
    return "\n".join(lines)


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def nearest_neighbor_scores(dataset, query_split="val", ref_split="train"):
    """Mean-frame nearest-neighbor baseline as a ScoreMatrix.

    Features are the time-averaged, center-cropped, normalized frames.
    Word v scores -min distance to any reference clip of v; this ignores
    all temporal structure, so it is a data-quality oracle rather than a
    model (planted same-glyph word pairs collapse under it).
    """
    spec = AugmentSpec(enabled=False)

    def features(split):
        feats, labels, ids = [], [], []
        for clip_id, label in dataset.split(split):
            frames, _ = dataset.load(clip_id)
            cropped = augment(frames, None, spec)
            feats.append(normalize_clip(cropped, dataset.manifest).mean(axis=0).ravel())
            labels.append(label)
            ids.append(clip_id)
        return np.stack(feats), np.asarray(labels), ids

    ref_feats, ref_labels, _ = features(ref_split)
    q_feats, q_labels, q_ids = features(query_split)
    vocab_size = len(dataset.manifest.vocab)
    # squared euclidean distances [M, R] without materializing differences
    dists = ((q_feats ** 2).sum(axis=1)[:, None]
             + (ref_feats ** 2).sum(axis=1)[None, :]
             - 2.0 * (q_feats @ ref_feats.T))
    scores = np.full((len(q_feats), vocab_size), -np.inf)
    for word in range(vocab_size):
        cols = dists[:, ref_labels == word]
        if cols.size:
            scores[:, word] = -cols.min(axis=1)
    return ScoreMatrix(scores, q_labels, q_ids)
