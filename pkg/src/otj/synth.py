"""Synthetic sequence-labeling data from a planted chain model.

Labels follow a self-biased Markov chain; tokens are drawn from per-label
vocabulary pools, with a noise fraction drawn from a shared pool so that some
tokens stay ambiguous no matter how much the tagger trains.
"""

from __future__ import annotations

import numpy as np

from .crf import LabelSet, TokenSequence


def synthesize_dataset(num_examples: int, length: int, num_labels: int, seed: int,
                       vocab_per_label: int = 40, shared_vocab: int = 20,
                       self_transition: float = 0.5, noise: float = 0.2):
    """Returns (examples, label_set) with examples as (TokenSequence, gold
    label-index tuple) pairs."""
    if num_labels < 2:
        raise ValueError("need at least 2 labels")
    rng = np.random.default_rng(seed)
    labels = LabelSet(["L%d" % k for k in range(num_labels)])
    K = num_labels

    transition = np.full((K, K), (1.0 - self_transition) / (K - 1))
    np.fill_diagonal(transition, self_transition)
    start = np.full(K, 1.0 / K)

    label_vocab = [["w%d_%d" % (k, j) for j in range(vocab_per_label)] for k in range(K)]
    shared = ["shared_%d" % j for j in range(shared_vocab)]

    examples = []
    for _ in range(num_examples):
        gold = [int(rng.choice(K, p=start))]
        for _i in range(1, length):
            gold.append(int(rng.choice(K, p=transition[gold[-1]])))
        tokens = []
        for y in gold:
            if rng.random() < noise:
                tokens.append(shared[int(rng.integers(len(shared)))])
            else:
                tokens.append(label_vocab[y][int(rng.integers(vocab_per_label))])
        examples.append((TokenSequence(tuple(tokens)), tuple(gold)))
    return examples, labels


def write_dataset_file(examples, labels: LabelSet, path):
    """Serialize in the loader's format: token<TAB>label lines, blank line
    between examples."""
    with open(path, "w") as fh:
        for x, gold in examples:
            for token, y in zip(x.tokens, gold):
                fh.write("%s\t%s\n" % (token, labels.labels[y]))
            fh.write("\n")
