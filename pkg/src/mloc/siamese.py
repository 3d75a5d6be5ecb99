"""Contrastive Siamese training with latent mixup.

Pairs are formed between an anchor's normalized latent and a partner latent
``lam * z_same + (1 - lam) * z_other`` (mixed before normalization). The mixed
pair's dissimilarity target is ``1 - lam``, so ``lam = 1`` is the pure positive
pair and ``lam = 0`` the pure negative pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .ndiff import L2Normalize, Network, RMSprop, l2_normalize, l2_normalize_backward

logger = logging.getLogger(__name__)


def mapped_distance(e1, e2):
    """2*sigmoid(|e1 - e2|) - 1, written as tanh(d/2). Works row-wise."""
    d = np.linalg.norm(np.asarray(e1, dtype=np.float64) - np.asarray(e2, dtype=np.float64), axis=-1)
    return np.tanh(d / 2.0)


def contrastive_loss(D, Y):
    """(1 - Y) D^2 + Y max(0, 1 - D)^2."""
    D = np.asarray(D, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    return (1.0 - Y) * D ** 2 + Y * np.maximum(0.0, 1.0 - D) ** 2


def sample_lambda(rng, alpha=2.0, size=None):
    """Draw mixing weights from Beta(alpha, alpha).

    For alpha = 2 the median of three independent uniforms is used; it is
    exactly Beta(2, 2) distributed.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha == 2:
        shape = (3,) if size is None else (*np.atleast_1d(size), 3)
        return np.median(rng.random(shape), axis=-1)
    return rng.beta(alpha, alpha, size=size)


@dataclass
class TrainingPair:
    anchor: np.ndarray
    partner: np.ndarray
    target: float


@dataclass
class MixupConfig:
    alpha: float = 2.0
    mixes_per_pair: int = 50

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.mixes_per_pair < 1:
            raise ValueError("mixes_per_pair must be >= 1")


@dataclass
class TrainConfig:
    episodes: int = 200
    pairs_per_episode: int = 32
    seed: int = 0
    mixup_enabled: bool = True
    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    early_stop_loss: float = 1e-4
    early_stop_patience: int = 10
    mixed_share: float = 0.5    # fraction of the episode loss carried by mixed pairs

    def __post_init__(self):
        if self.episodes < 1 or self.pairs_per_episode < 1 or self.early_stop_patience < 1:
            raise ValueError("episode and pair counts must be positive")
        if not 0.0 <= self.mixed_share < 1.0:
            raise ValueError("mixed_share must lie in [0, 1)")


def mixup_pairs(anchor, same, other, lambdas, anchor_label, same_label, other_label):
    """Mixed partners lam*same + (1-lam)*other with target 1 - lam."""
    if same_label != anchor_label:
        raise PreconditionError(
            f"same-class latent has label {same_label}, anchor has {anchor_label}")
    if other_label == anchor_label:
        raise PreconditionError("other-class latent must come from a different class")
    anchor = np.asarray(anchor, dtype=np.float64)
    same = np.asarray(same, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    return [TrainingPair(anchor, lam * same + (1.0 - lam) * other, 1.0 - float(lam))
            for lam in lambdas]


def pair_loss(Z, anchor_idx, same_idx, other_idx, lam, weights=None):
    """Weighted mean contrastive loss over mixed pairs built from rows of ``Z``.

    Returns ``(loss, dloss/dZ)``. Anchors and mixed partners are normalized
    before the mapped distance. ``weights`` defaults to uniform.
    """
    Z = np.asarray(Z, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    target = 1.0 - lam
    if weights is None:
        weights = np.full(lam.size, 1.0 / lam.size)
    weights = np.asarray(weights, dtype=np.float64)
    mixed = lam[:, None] * Z[same_idx] + (1.0 - lam)[:, None] * Z[other_idx]
    ua, na = l2_normalize(Z[anchor_idx])
    um, nm = l2_normalize(mixed)
    diff = ua - um
    d = np.linalg.norm(diff, axis=1)
    D = np.tanh(d / 2.0)
    loss = contrastive_loss(D, target)

    dL_dD = 2.0 * (1.0 - target) * D - 2.0 * target * np.maximum(0.0, 1.0 - D)
    dD_dd = 0.5 * (1.0 - D * D)
    # d|diff|/d diff is undefined at 0; the zero subgradient is used there
    inv_d = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    g_diff = (weights * dL_dD * dD_dd * inv_d)[:, None] * diff
    g_anchor = l2_normalize_backward(g_diff, ua, na)
    g_mixed = l2_normalize_backward(-g_diff, um, nm)

    grad = np.zeros_like(Z)
    np.add.at(grad, anchor_idx, g_anchor)
    np.add.at(grad, same_idx, lam[:, None] * g_mixed)
    np.add.at(grad, other_idx, (1.0 - lam)[:, None] * g_mixed)
    return float(np.dot(weights, loss)), grad


def sample_episode(rng, labels, config: TrainConfig, mixup: MixupConfig):
    """Index arrays (anchor, same, other, lam) for one episode of pairs."""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    members = {c: np.flatnonzero(labels == c) for c in classes}
    anchor_classes = [c for c in classes if members[c].size >= 2]
    a_idx, s_idx, o_idx, lams = [], [], [], []
    for _ in range(config.pairs_per_episode):
        c = anchor_classes[rng.integers(len(anchor_classes))]
        pool = members[c]
        a = pool[rng.integers(pool.size)]
        rest = pool[pool != a]
        s = rest[rng.integers(rest.size)]
        foreign = [k for k in classes if k != c]
        k = foreign[rng.integers(len(foreign))]
        o = members[k][rng.integers(members[k].size)]
        draws = [1.0, 0.0]
        if config.mixup_enabled:
            draws += sample_lambda(rng, mixup.alpha, size=mixup.mixes_per_pair).tolist()
        a_idx += [a] * len(draws)
        s_idx += [s] * len(draws)
        o_idx += [o] * len(draws)
        lams += draws
    return (np.array(a_idx), np.array(s_idx), np.array(o_idx), np.array(lams))


def episode_weights(n_pairs, mixes_per_pair, mixed_share=0.5):
    """Loss weights for the layout produced by sample_episode.

    Each sampled pair contributes its two pure pairs followed by
    ``mixes_per_pair`` mixed ones. Pure pairs share ``1 - mixed_share`` of the
    total weight and mixed pairs the rest, so the mixed pairs regularize
    without drowning out the pure contrastive signal.
    """
    per = 2 + mixes_per_pair
    pure = (np.arange(n_pairs * per) % per) < 2
    if mixes_per_pair == 0:
        return np.full(pure.size, 1.0 / pure.size)
    return np.where(pure, (1.0 - mixed_share) / (2 * n_pairs),
                    mixed_share / (mixes_per_pair * n_pairs))


def check_support(labels):
    labels = list(labels)
    classes = set(labels)
    if len(classes) < 2:
        raise PreconditionError("training needs at least 2 classes")
    if max(labels.count(c) for c in classes) < 2:
        raise PreconditionError("training needs a class with at least 2 items")


@dataclass
class TrainResult:
    network: Network
    losses: list = field(default_factory=list)

    @property
    def episodes_run(self):
        return len(self.losses)


def train(network: Network, inputs, labels, config: TrainConfig = None,
          mixup: MixupConfig = None) -> TrainResult:
    """Train ``network`` in place on the support set.

    ``inputs`` is whatever the network's first layer takes: an (N, C, H, W)
    image batch for the built-in embedder, or (N, 64) external embeddings for
    the dense head. The final layer must be L2Normalize; the mixup happens on
    the layer before it.
    """
    config = config or TrainConfig()
    mixup = mixup or MixupConfig()
    check_support(labels)
    if not isinstance(network.layers[-1], L2Normalize):
        raise PreconditionError("network must end with l2_normalize")
    inputs = np.asarray(inputs).astype(network.dtype)
    if len(inputs) != len(labels):
        raise PreconditionError("inputs and labels differ in length")

    trunk = Network(network.layers[:-1])
    opt = RMSprop(network.params(), config.learning_rate, config.decay, config.epsilon)
    sample_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    result = TrainResult(network)
    mixes = mixup.mixes_per_pair if config.mixup_enabled else 0
    weights = episode_weights(config.pairs_per_episode, mixes, config.mixed_share)
    calm = 0
    for episode in range(config.episodes):
        a, s, o, lam = sample_episode(sample_rng, labels, config, mixup)
        Z = trunk.forward(inputs)
        loss, gZ = pair_loss(Z, a, s, o, lam, weights)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at episode {episode}")
        trunk.zero_grad()
        trunk.backward(gZ.astype(network.dtype), input_grad=False)
        opt.step()
        result.losses.append(loss)
        logger.debug("episode %d loss %.6f", episode, loss)
        calm = calm + 1 if loss < config.early_stop_loss else 0
        if calm >= config.early_stop_patience:
            break
    return result


def write_loss_trace(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")


def gradient_audit(seed=0, tolerance=1e-4):
    """Finite-difference audit of every layer kind and the full contrastive head.

    Returns an ordered dict name -> GradCheckReport, all in double precision.
    """
    from .embedder import build_embedder
    from .ndiff import Conv2d, Dense, GlobalMaxPool, ReLU, finite_diff_check

    rng = np.random.default_rng(seed)
    f64 = np.float64

    def linear(out):
        w = rng.normal(size=out.shape)
        return lambda y: (float(np.sum(y * w)), w)

    relu_x = rng.normal(size=(3, 7))
    relu_x[np.abs(relu_x) < 1e-3] = 0.5   # stay off the kink
    cases = {
        "conv2d_stride1": (Network([Conv2d(2, 3, stride=1, rng=rng, dtype=f64)]), rng.normal(size=(2, 2, 5, 4))),
        "conv2d_stride2": (Network([Conv2d(3, 2, stride=2, rng=rng, dtype=f64)]), rng.normal(size=(2, 3, 6, 7))),
        "relu": (Network([ReLU()]), relu_x),
        # distinct values so the max is unique and the pooling is differentiable
        "global_max_pool": (Network([GlobalMaxPool()]), rng.permutation(120).reshape(2, 3, 4, 5) / 10.0),
        "dense": (Network([Dense(5, 4, rng=rng, dtype=f64)]), rng.normal(size=(3, 5))),
        "l2_normalize": (Network([L2Normalize()]), rng.normal(size=(3, 6))),
    }
    reports = {}
    for name, (net, x) in cases.items():
        for t in net.params():
            t.data = t.data + 0.1 * rng.normal(size=t.shape)
        reports[name] = finite_diff_check(net, x, linear(net.forward(x, retain=False)), tolerance)

    trunk = Network(build_embedder(seed=seed, dtype=f64).layers[:-1])
    x = rng.random((3, 3, 10, 10))
    idx = (np.array([0, 0, 1, 2]), np.array([1, 1, 0, 2]), np.array([2, 2, 2, 0]),
           np.array([1.0, 0.3, 0.7, 0.0]))
    reports["siamese_head"] = finite_diff_check(trunk, x, lambda Z: pair_loss(Z, *idx), tolerance)
    return reports
