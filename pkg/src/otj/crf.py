"""Linear-chain CRF: feature templates, exact inference, response conditioning,
and online AdaGrad training on soft per-position label targets.

All inference runs in log-space. Node potentials live on (raw feature, label)
conjunctions; a single shared K x K transition block ties adjacent labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "otj-crf-v1"
ADAGRAD_EPS = 1e-8
BIAS_FEATURE = "bias"

# Response likelihoods are floored here when conditioning so that a perfectly
# accurate crowd (prob 0 on wrong labels) cannot produce -inf potentials.
MIN_RESPONSE_PROB = 1e-12


class LabelSet:
    """Ordered, immutable set of label identifiers. Index of a label is stable."""

    def __init__(self, labels):
        labels = tuple(labels)
        if len(labels) < 2:
            raise ValueError("need at least 2 labels, got %d" % len(labels))
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels: %r" % (labels,))
        self.labels = labels
        self._index = {name: i for i, name in enumerate(labels)}

    @property
    def K(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self._index[label]

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelSet) and self.labels == other.labels

    def __repr__(self) -> str:
        return "LabelSet(%r)" % (self.labels,)


@dataclass(frozen=True)
class TokenSequence:
    """Input chain: tokens plus optional precomputed dense vectors (one per token)."""

    tokens: tuple
    dense: tuple | None = None  # tuple of per-token float tuples, uniform dim

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 1:
            raise ValueError("empty token sequence")
        if self.dense is not None:
            dense = tuple(tuple(float(v) for v in row) for row in self.dense)
            if len(dense) != len(self.tokens):
                raise ValueError("dense features: %d rows for %d tokens" % (len(dense), len(self.tokens)))
            dims = {len(row) for row in dense}
            if len(dims) > 1:
                raise ValueError("dense features must have uniform dimension, got %r" % dims)
            object.__setattr__(self, "dense", dense)

    def __len__(self) -> int:
        return len(self.tokens)


class FeatureRegistry:
    """Append-only bidirectional map feature-name <-> index."""

    def __init__(self):
        self._index = {}
        self._names = []

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def lookup(self, name: str):
        return self._index.get(name)

    def intern(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self._names)
            self._index[name] = idx
            self._names.append(name)
        return idx

    def name_of(self, index: int) -> str:
        return self._names[index]

    @property
    def names(self):
        return tuple(self._names)


def token_shape(token: str) -> str:
    out = []
    for ch in token:
        if ch.isupper():
            out.append("X")
        elif ch.islower():
            out.append("x")
        elif ch.isdigit():
            out.append("9")
        else:
            out.append(ch)
    return "".join(out)


def extract_features(x: TokenSequence, position: int, registry: FeatureRegistry,
                     allow_new: bool) -> dict:
    """Sparse feature vector {index: value} for one position.

    Templates: word identity, lowercase, 3-char prefix/suffix, shape, and the
    neighbouring words; any precomputed dense vector is passed through on
    per-slot features. Unknown names are registered when allow_new, dropped
    otherwise.
    """
    tok = x.tokens[position]
    prev_tok = x.tokens[position - 1] if position > 0 else "<S>"
    next_tok = x.tokens[position + 1] if position + 1 < len(x) else "</S>"
    names = [
        "word=" + tok,
        "lowercase=" + tok.lower(),
        "prefix3=" + tok[:3],
        "suffix3=" + tok[-3:],
        "shape=" + token_shape(tok),
        "prev_word=" + prev_tok,
        "next_word=" + next_tok,
    ]
    feats = {}
    for name in names:
        if allow_new:
            feats[registry.intern(name)] = 1.0
        else:
            idx = registry.lookup(name)
            if idx is not None:
                feats[idx] = 1.0
    if x.dense is not None:
        for d, value in enumerate(x.dense[position]):
            if value == 0.0:
                continue
            name = "dense:%d" % d
            if allow_new:
                feats[registry.intern(name)] = value
            else:
                idx = registry.lookup(name)
                if idx is not None:
                    feats[idx] = value
    return feats


@dataclass
class ChainPotentials:
    """Log-potentials for one chain: node (n, K) and shared edge (K, K)."""

    node: np.ndarray
    edge: np.ndarray

    @property
    def n(self) -> int:
        return self.node.shape[0]

    @property
    def K(self) -> int:
        return self.node.shape[1]


@dataclass
class Marginals:
    """Per-position label marginals (rows sum to 1) and the exact log-partition."""

    node: np.ndarray
    log_partition: float


class CrfModel:
    """Weights over (feature, label) conjunctions plus a transition block,
    with per-coordinate AdaGrad accumulators.

    The registry indexes label-independent feature names; conjunction with a
    label selects a column of ``node_weights``. Index 0 is a permanent bias
    feature active at every position, realizing per-label bias weights.
    """

    def __init__(self, label_set: LabelSet):
        self.label_set = label_set
        self.registry = FeatureRegistry()
        self.registry.intern(BIAS_FEATURE)
        K = label_set.K
        self.node_weights = np.zeros((1, K))
        self.node_accumulators = np.zeros((1, K))
        self.trans_weights = np.zeros((K, K))
        self.trans_accumulators = np.zeros((K, K))
        self.version = 0

    @property
    def K(self) -> int:
        return self.label_set.K

    def ensure_capacity(self):
        """Grow weight rows to match the registry (new rows start at zero)."""
        F = len(self.registry)
        have = self.node_weights.shape[0]
        if F > have:
            pad = np.zeros((F - have, self.K))
            self.node_weights = np.vstack([self.node_weights, pad])
            self.node_accumulators = np.vstack([self.node_accumulators, pad.copy()])

    def set_weight(self, feature_name: str, label: str, value: float):
        """Test/inspection helper: write one (feature, label) conjunction weight."""
        f = self.registry.intern(feature_name)
        self.ensure_capacity()
        self.node_weights[f, self.label_set.index(label)] = value

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([self.trans_weights.ravel(), self.node_weights.ravel()])

    def flat_accumulators(self) -> np.ndarray:
        return np.concatenate([self.trans_accumulators.ravel(), self.node_accumulators.ravel()])


def compute_potentials(model: CrfModel, x: TokenSequence) -> ChainPotentials:
    """Score every (position, label) and transition under the current weights.

    Features unseen in the registry carry zero weight, so inference drops them.
    """
    model.ensure_capacity()
    n, K = len(x), model.K
    node = np.tile(model.node_weights[0], (n, 1))  # bias active everywhere
    for i in range(n):
        feats = extract_features(x, i, model.registry, allow_new=False)
        if feats:
            idx = np.fromiter(feats.keys(), dtype=np.intp, count=len(feats))
            val = np.fromiter(feats.values(), dtype=np.float64, count=len(feats))
            node[i] += val @ model.node_weights[idx]
    return ChainPotentials(node=node, edge=model.trans_weights.copy())


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp along one axis of a small finite matrix. scipy's wrapper
    costs more than the whole recursion at chain sizes, so roll our own."""
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _forward_backward_tables(potentials: ChainPotentials):
    node, edge = potentials.node, potentials.edge
    n, K = node.shape
    alpha = np.empty((n, K))
    beta = np.empty((n, K))
    alpha[0] = node[0]
    for i in range(1, n):
        alpha[i] = node[i] + _lse(alpha[i - 1][:, None] + edge, axis=0)
    beta[n - 1] = 0.0
    for i in range(n - 2, -1, -1):
        beta[i] = _lse(edge + node[i + 1] + beta[i + 1], axis=1)
    last = alpha[n - 1]
    m = float(last.max())
    log_z = m + float(np.log(np.exp(last - m).sum()))
    return alpha, beta, log_z


def forward_backward(potentials: ChainPotentials) -> Marginals:
    """Exact node marginals and log-partition by the forward-backward recursions."""
    alpha, beta, log_z = _forward_backward_tables(potentials)
    return Marginals(node=np.exp(alpha + beta - log_z), log_partition=log_z)


def pairwise_marginals(potentials: ChainPotentials) -> np.ndarray:
    """Exact adjacent-pair marginals, shape (n-1, K, K). Used for the
    expected transition counts in the gradient."""
    node, edge = potentials.node, potentials.edge
    n, K = node.shape
    alpha, beta, log_z = _forward_backward_tables(potentials)
    if n < 2:
        return np.zeros((0, K, K))
    xi = np.empty((n - 1, K, K))
    for i in range(n - 1):
        xi[i] = np.exp(alpha[i][:, None] + edge + (node[i + 1] + beta[i + 1])[None, :] - log_z)
    return xi


def viterbi_map(potentials: ChainPotentials):
    """Argmax label sequence; ties resolve to the lowest label index."""
    node, edge = potentials.node, potentials.edge
    n, K = node.shape
    delta = node[0].copy()
    backptr = np.zeros((n, K), dtype=np.intp)
    for i in range(1, n):
        scores = delta[:, None] + edge
        backptr[i] = np.argmax(scores, axis=0)  # first occurrence = lowest index
        delta = node[i] + scores[backptr[i], np.arange(K)]
    path = [int(np.argmax(delta))]
    for i in range(n - 1, 0, -1):
        path.append(int(backptr[i][path[-1]]))
    path.reverse()
    return path


def condition_on_responses(potentials: ChainPotentials, responses, resp_model) -> ChainPotentials:
    """Fold crowd answers into the node potentials: each (position, label)
    response adds the response-likelihood row log p(r | y) at its position.
    Responses accumulate; the caller must pass received answers only."""
    node = potentials.node.copy()
    K = potentials.K
    for position, r in responses:
        ll = np.log([max(resp_model.prob(r, y), MIN_RESPONSE_PROB) for y in range(K)])
        node[position] += ll
    return ChainPotentials(node=node, edge=potentials.edge.copy())


def soft_label_gradient(model: CrfModel, x: TokenSequence, target: np.ndarray, l2: float):
    """Gradient of the soft-label loss: the negative expected log-likelihood
    under the product of the per-position target rows, plus (l2/2)|w|^2.

    Feature by feature this is (model expected counts - target expected
    counts) + l2 * w. Registers any new features it sees; returns
    (grad_node, grad_trans) matching the weight blocks.
    """
    n, K = len(x), model.K
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (n, K):
        raise ValueError("target shape %r, expected %r" % (target.shape, (n, K)))
    feats = [extract_features(x, i, model.registry, allow_new=True) for i in range(n)]
    model.ensure_capacity()

    node = np.tile(model.node_weights[0], (n, 1))
    for i in range(n):
        for f, v in feats[i].items():
            node[i] += v * model.node_weights[f]
    potentials = ChainPotentials(node=node, edge=model.trans_weights.copy())
    marg = forward_backward(potentials).node

    residual = marg - target  # (n, K): model minus target expected node counts
    grad_node = np.zeros_like(model.node_weights)
    grad_node[0] = residual.sum(axis=0)  # bias fires at every position
    for i in range(n):
        for f, v in feats[i].items():
            grad_node[f] += v * residual[i]

    grad_trans = np.zeros_like(model.trans_weights)
    if n > 1:
        grad_trans += pairwise_marginals(potentials).sum(axis=0)
        for i in range(n - 1):
            grad_trans -= np.outer(target[i], target[i + 1])
    if l2 > 0:
        grad_node += l2 * model.node_weights
        grad_trans += l2 * model.trans_weights
    return grad_node, grad_trans


def adagrad_update(model: CrfModel, x: TokenSequence, target: np.ndarray,
                   step_size: float, l2: float) -> CrfModel:
    """One AdaGrad step descending the soft-label loss, in place."""
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    grad_node, grad_trans = soft_label_gradient(model, x, target, l2)
    model.node_accumulators += grad_node ** 2
    model.node_weights -= step_size * grad_node / np.sqrt(model.node_accumulators + ADAGRAD_EPS)
    model.trans_accumulators += grad_trans ** 2
    model.trans_weights -= step_size * grad_trans / np.sqrt(model.trans_accumulators + ADAGRAD_EPS)
    model.version += 1
    return model


def _hex_list(arr: np.ndarray):
    return [float(v).hex() for v in arr.ravel()]


def _from_hex(values, shape) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values]).reshape(shape)


def save_model(model: CrfModel, path):
    """Write a self-describing checkpoint. Floats are stored as hex strings so
    the (save, load) round trip is bit-exact."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "labels": list(model.label_set.labels),
        "features": list(model.registry.names),
        "node_weights": _hex_list(model.node_weights),
        "node_accumulators": _hex_list(model.node_accumulators),
        "trans_weights": _hex_list(model.trans_weights),
        "trans_accumulators": _hex_list(model.trans_accumulators),
        "version": model.version,
    }
    with open(path, "w") as fh:
        json.dump(record, fh)
        fh.write("\n")


def load_model(path) -> CrfModel:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("unrecognized checkpoint format: %r" % record.get("format"))
    model = CrfModel(LabelSet(record["labels"]))
    for name in record["features"]:
        model.registry.intern(name)
    K = model.K
    F = len(model.registry)
    model.node_weights = _from_hex(record["node_weights"], (F, K))
    model.node_accumulators = _from_hex(record["node_accumulators"], (F, K))
    model.trans_weights = _from_hex(record["trans_weights"], (K, K))
    model.trans_accumulators = _from_hex(record["trans_accumulators"], (K, K))
    model.version = int(record.get("version", 0))
    return model
