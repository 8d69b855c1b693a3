"""Margin-ranking trainer for paired textual and visual embedding nets.

A positive (image, caption) pair and a sampled negative pair are scored by
cosine in the shared embedding space; the hinge max(0, s_neg - s_pos + margin)
drives SGD. Negatives follow one of two methodologies: I2T keeps the image
and swaps the caption, T2I keeps the caption and swaps the image.
"""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import Caption, FeatureStore, SplitDataset
from .errors import EmptySequenceError, ZeroNormError
from .nets import Net, accumulate, backward, clone_net, forward, lr_schedule, sgd_step
from .text import (
    SparseVector,
    TokenSequence,
    Vocabulary,
    encode_sequence,
    featurize,
    normalize_tokenize,
)

METHODOLOGIES = ("I2T", "T2I")


@dataclass
class ScoreModel:
    textual_net: Net
    visual_net: Net

    def __post_init__(self) -> None:
        if self.textual_net.spec.n_emb != self.visual_net.spec.n_emb:
            raise ValueError("textual and visual nets must share the embedding width")


@dataclass
class TrainConfig:
    margin: float = 0.15
    lr0: float = 0.001
    max_epochs: int = 50
    methodology: str = "I2T"
    seed: int = 0
    weighting: str = "binary"
    val_pairs_per_epoch: int = 500

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.methodology not in METHODOLOGIES:
            raise ValueError(f"methodology must be one of {METHODOLOGIES}")
        if self.weighting not in ("binary", "tfidf"):
            raise ValueError("weighting must be 'binary' or 'tfidf'")
        if self.val_pairs_per_epoch < 1:
            raise ValueError("val_pairs_per_epoch must be positive")


@dataclass
class EpochStats:
    epoch: int  # 1-based
    lr: float
    train_err: float
    val_err: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means no epoch ran


def write_history(history: TrainHistory, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history.epochs:
            fh.write(f"{row.epoch}\t{row.lr!r}\t{row.train_err!r}\t{row.val_err!r}\n")


def cosine_score(v_img: np.ndarray, v_txt: np.ndarray) -> float:
    # dot / sqrt(dot_ii * dot_tt) scores bit-identical vectors as exactly 1.0;
    # the clamp only trims ulp-level Cauchy-Schwarz violations
    dot_ii = float(np.dot(v_img, v_img))
    dot_tt = float(np.dot(v_txt, v_txt))
    if dot_ii == 0.0 or dot_tt == 0.0:
        raise ZeroNormError("cannot cosine-score a zero-norm embedding")
    s = float(np.dot(v_img, v_txt)) / math.sqrt(dot_ii * dot_tt)
    return min(1.0, max(-1.0, s))


def margin_loss(s_pos: float, s_neg: float, margin: float) -> tuple[float, float, float]:
    """Hinge on the score gap; returns (loss, d_loss/d_s_pos, d_loss/d_s_neg)."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    if s_pos >= s_neg + margin:
        return 0.0, 0.0, 0.0
    return s_neg - s_pos + margin, -1.0, 1.0


def cosine_backward(
    v_img: np.ndarray, v_txt: np.ndarray, d_score: float
) -> tuple[np.ndarray, np.ndarray]:
    """Chain-rule gradients of the cosine score w.r.t. both embeddings."""
    dot_ii = float(np.dot(v_img, v_img))
    dot_tt = float(np.dot(v_txt, v_txt))
    if dot_ii == 0.0 or dot_tt == 0.0:
        raise ZeroNormError("cannot differentiate through a zero-norm embedding")
    norm_prod = math.sqrt(dot_ii * dot_tt)
    s = float(np.dot(v_img, v_txt)) / norm_prod
    grad_img = d_score * (v_txt / norm_prod - s * v_img / dot_ii)
    grad_txt = d_score * (v_img / norm_prod - s * v_txt / dot_tt)
    return grad_img, grad_txt


Encoding = SparseVector | TokenSequence


@dataclass
class SplitView:
    """One split's scoreable pairs, in deterministic sorted order."""

    name: str
    image_ids: list[str]
    pairs: list[tuple[str, int]]


class RetrievalDataset:
    """A corpus joined with its vocabulary, featurized once for training."""

    def __init__(
        self,
        features: FeatureStore,
        captions: list[Caption],
        split: SplitDataset,
        vocab: Vocabulary,
        weighting: str = "binary",
        textual_kind: str = "bag",
        lenient: bool = False,
    ):
        if textual_kind not in ("bag", "sequence"):
            raise ValueError(f"unknown textual kind {textual_kind!r}")
        self.features = features
        self.vocab = vocab
        self.weighting = weighting
        self.textual_kind = textual_kind
        self.captions: dict[tuple[str, int], Caption] = {}
        self.dropped_missing_image = 0
        for cap in captions:
            if cap.image_id not in features:
                if lenient:
                    self.dropped_missing_image += 1
                    continue
                raise KeyError(
                    f"caption references image {cap.image_id!r} absent from the feature store"
                )
            self.captions[(cap.image_id, cap.caption_index)] = cap
        if self.dropped_missing_image:
            warnings.warn(
                f"dropped {self.dropped_missing_image} captions whose images have no features",
                stacklevel=2,
            )
        self.split = split
        self._encodings: dict[tuple[str, int], Encoding | None] = {}
        self.unencodable = 0
        for key, cap in self.captions.items():
            if cap.tokens is None:
                cap.tokens = normalize_tokenize(cap.text)
            enc: Encoding | None
            if textual_kind == "bag":
                vec = featurize(cap.tokens, vocab, weighting)
                enc = vec if len(vec) else None
            else:
                try:
                    enc = encode_sequence(cap.tokens, vocab)
                except EmptySequenceError:
                    enc = None
            if enc is None:
                self.unencodable += 1
            self._encodings[key] = enc
        self._views: dict[str, SplitView] = {}

    def encoding(self, image_id: str, caption_index: int) -> Encoding | None:
        return self._encodings[(image_id, caption_index)]

    def image_vec(self, image_id: str) -> np.ndarray:
        return self.features.get(image_id)

    def view(self, name: str) -> SplitView:
        """Pairs with usable encodings in the split, sorted for determinism."""
        if name not in self._views:
            member = self.split.subset(name)
            pairs = sorted(
                key
                for key, enc in self._encodings.items()
                if key[0] in member and enc is not None
            )
            self._views[name] = SplitView(name=name, image_ids=sorted(member), pairs=pairs)
        return self._views[name]


def sample_negative(
    pos: tuple[str, int],
    view: SplitView,
    methodology: str,
    rng: random.Random,
) -> tuple[str, tuple[str, int]]:
    """Draw one negative for a positive pair.

    I2T keeps the positive image and draws a caption uniformly from the
    view's pairs, excluding every caption of the positive image. T2I keeps
    the positive caption and draws a different image uniformly. Returns
    (negative image_id, negative caption key).
    """
    if methodology not in METHODOLOGIES:
        raise ValueError(f"methodology must be one of {METHODOLOGIES}")
    pos_image = pos[0]
    if methodology == "I2T":
        if not any(key[0] != pos_image for key in view.pairs):
            raise ValueError("I2T sampling needs captions from at least two images")
        while True:
            cand = view.pairs[rng.randrange(len(view.pairs))]
            if cand[0] != pos_image:
                return pos_image, cand
    if len(view.image_ids) < 2:
        raise ValueError("T2I sampling needs at least two images")
    while True:
        cand_img = view.image_ids[rng.randrange(len(view.image_ids))]
        if cand_img != pos_image:
            return cand_img, pos


def triplet_grads(
    model: ScoreModel,
    pos_image_vec: np.ndarray,
    pos_enc: Encoding,
    neg_image_vec: np.ndarray | None,
    neg_enc: Encoding | None,
    methodology: str,
    margin: float,
) -> tuple[float, float, float, dict | None, dict | None]:
    """Scores, loss, and accumulated parameter gradients for one triplet.

    Under I2T the image embedding is shared between branches (neg_image_vec
    unused); under T2I the caption embedding is shared (neg_enc unused).
    Returns (loss, s_pos, s_neg, textual grads, visual grads); the gradient
    dicts are None when the margin is already satisfied.
    """
    if methodology == "I2T":
        if neg_enc is None:
            raise ValueError("I2T triplet needs a negative caption encoding")
        v_img, tape_img = forward(model.visual_net, pos_image_vec)
        v_pos, tape_pos = forward(model.textual_net, pos_enc)
        v_neg, tape_neg = forward(model.textual_net, neg_enc)
        s_pos = cosine_score(v_img, v_pos)
        s_neg = cosine_score(v_img, v_neg)
        loss, d_pos, d_neg = margin_loss(s_pos, s_neg, margin)
        if loss == 0.0:
            return loss, s_pos, s_neg, None, None
        g_img_p, g_txt_p = cosine_backward(v_img, v_pos, d_pos)
        g_img_n, g_txt_n = cosine_backward(v_img, v_neg, d_neg)
        vgrads, _ = backward(tape_img, g_img_p + g_img_n)
        tgrads, _ = backward(tape_pos, g_txt_p)
        tgrads = accumulate(tgrads, backward(tape_neg, g_txt_n)[0])
        return loss, s_pos, s_neg, tgrads, vgrads
    if neg_image_vec is None:
        raise ValueError("T2I triplet needs a negative image vector")
    v_txt, tape_txt = forward(model.textual_net, pos_enc)
    v_pos, tape_pos = forward(model.visual_net, pos_image_vec)
    v_neg, tape_neg = forward(model.visual_net, neg_image_vec)
    s_pos = cosine_score(v_pos, v_txt)
    s_neg = cosine_score(v_neg, v_txt)
    loss, d_pos, d_neg = margin_loss(s_pos, s_neg, margin)
    if loss == 0.0:
        return loss, s_pos, s_neg, None, None
    g_img_p, g_txt_p = cosine_backward(v_pos, v_txt, d_pos)
    g_img_n, g_txt_n = cosine_backward(v_neg, v_txt, d_neg)
    tgrads, _ = backward(tape_txt, g_txt_p + g_txt_n)
    vgrads, _ = backward(tape_pos, g_img_p)
    vgrads = accumulate(vgrads, backward(tape_neg, g_img_n)[0])
    return loss, s_pos, s_neg, tgrads, vgrads


def train_epoch(
    model: ScoreModel,
    data: RetrievalDataset,
    config: TrainConfig,
    epoch: int,
    rng: random.Random,
) -> float:
    """One seeded-shuffle pass over the training pairs; returns mistake %.

    Each positive pair gets one sampled negative; when the margin is
    violated, the accumulated gradients from both branches are applied in a
    single SGD step at the scheduled learning rate. A pair counts as a
    mistake when s_pos <= s_neg.
    """
    view = data.view("train")
    if not view.pairs:
        raise RuntimeError("no scoreable training pairs")
    lr = lr_schedule(config.lr0, epoch)
    pairs = list(view.pairs)
    rng.shuffle(pairs)
    mistakes = 0
    scored = 0
    for pos in pairs:
        pos_enc = data.encoding(*pos)
        neg_img, neg_cap = sample_negative(pos, view, config.methodology, rng)
        neg_enc = data.encoding(*neg_cap) if config.methodology == "I2T" else None
        neg_vec = data.image_vec(neg_img) if config.methodology == "T2I" else None
        try:
            loss, s_pos, s_neg, tgrads, vgrads = triplet_grads(
                model,
                data.image_vec(pos[0]),
                pos_enc,
                neg_vec,
                neg_enc,
                config.methodology,
                config.margin,
            )
        except ZeroNormError:
            continue
        scored += 1
        if s_pos <= s_neg:
            mistakes += 1
        if tgrads is not None:
            sgd_step(model.textual_net, tgrads, lr)
            sgd_step(model.visual_net, vgrads, lr)
    if scored == 0:
        raise RuntimeError("every training pair was skipped")
    return 100.0 * mistakes / scored


def validate(
    model: ScoreModel,
    data: RetrievalDataset,
    config: TrainConfig,
    rng: random.Random,
) -> float:
    """Ranking error % over sampled positive/negative pairs; no updates.

    Positive pairs cycle the validation split in sorted order; each draws
    one negative per the configured methodology. Ties (s_pos == s_neg)
    count as errors, so a constant-scoring model reads 100%.
    """
    view = data.view("val")
    if not view.pairs:
        raise RuntimeError("validation split has no scoreable pairs")
    mistakes = 0
    scored = 0
    for i in range(config.val_pairs_per_epoch):
        pos = view.pairs[i % len(view.pairs)]
        pos_enc = data.encoding(*pos)
        neg_img, neg_cap = sample_negative(pos, view, config.methodology, rng)
        try:
            v_txt, _ = forward(model.textual_net, pos_enc)
            if config.methodology == "I2T":
                v_img, _ = forward(model.visual_net, data.image_vec(pos[0]))
                neg_enc = data.encoding(*neg_cap)
                v_neg, _ = forward(model.textual_net, neg_enc)
                s_pos = cosine_score(v_img, v_txt)
                s_neg = cosine_score(v_img, v_neg)
            else:
                v_pos_img, _ = forward(model.visual_net, data.image_vec(pos[0]))
                v_neg_img, _ = forward(model.visual_net, data.image_vec(neg_img))
                s_pos = cosine_score(v_pos_img, v_txt)
                s_neg = cosine_score(v_neg_img, v_txt)
        except ZeroNormError:
            continue
        scored += 1
        if s_pos <= s_neg:
            mistakes += 1
    if scored == 0:
        raise RuntimeError("every validation pair was skipped")
    return 100.0 * mistakes / scored


def epoch_seed(seed: int, epoch: int) -> int:
    """Per-epoch validation seed: reproducible, distinct across epochs."""
    return seed * 1_000_003 + epoch


def clone_model(model: ScoreModel) -> ScoreModel:
    return ScoreModel(clone_net(model.textual_net), clone_net(model.visual_net))


def train(
    model: ScoreModel,
    data: RetrievalDataset,
    config: TrainConfig,
    progress=None,
) -> tuple[ScoreModel, TrainHistory]:
    """Run up to max_epochs, keeping the earliest best-validation snapshot.

    The passed model is trained in place to its final-epoch state; the
    returned model is a copy of the parameters at the epoch with the lowest
    validation error (ties keep the earlier epoch). ``progress``, if given,
    is called with each EpochStats as it is recorded.
    """
    history = TrainHistory()
    best = clone_model(model)
    best_val = float("inf")
    rng = random.Random(config.seed)
    for e in range(1, config.max_epochs + 1):
        train_err = train_epoch(model, data, config, e - 1, rng)
        val_rng = random.Random(epoch_seed(config.seed, e))
        val_err = validate(model, data, config, val_rng)
        stats = EpochStats(
            epoch=e, lr=lr_schedule(config.lr0, e - 1), train_err=train_err, val_err=val_err
        )
        history.epochs.append(stats)
        if progress is not None:
            progress(stats)
        if val_err < best_val:
            best_val = val_err
            best = clone_model(model)
            history.best_epoch = e
    return best, history
