"""scikit-learn style wrapper: ``fit`` trains, ``transform`` extracts features."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .heads import HeadConfig, last_layers
from .model import GLTransNet
from .objectives import BatchSpec, LossReport, OptimState, PKSampler, sgd_step, total_loss
from .tensor import NonFiniteError, Tensor, no_grad

logger = logging.getLogger(__name__)

CLASSIFIER_PREFIX = "classifier."


def _check_images(X) -> np.ndarray:
    X = check_array(X, dtype=np.float32, allow_nd=True, ensure_min_features=1)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, H, W, C), got {X.shape}")
    return X


class GLTransReID(TransformerMixin, BaseEstimator):
    """Global-local transformer for retrieval by identity.

    ``fit(X, y, cameras)`` trains on images ``X`` of shape ``(n, H, W, C)``
    with identity labels ``y`` and camera indices; ``transform(X, cameras)``
    returns the concatenated ``[F_g, F_l, F_cls]`` features.

    ``aggregated_layers`` is either an int k (the last k blocks) or an
    explicit increasing tuple of 1-based block indices.
    """

    def __init__(
        self,
        image_h=52,
        image_w=28,
        channels=3,
        stride=12,
        patch=16,
        dim=64,
        depth=4,
        heads=4,
        mlp_ratio=4.0,
        num_cameras=4,
        aggregated_layers=3,
        r1=4,
        r2=1,
        gma_heads=4,
        parts=2,
        ptl_depth=2,
        ptl_mode="shared",
        gae_on=True,
        ptl_on=True,
        ptf_on=True,
        gma_on=True,
        gae_strategy="one_fc",
        P=8,
        K=4,
        epochs=30,
        lr=8e-3,
        momentum=0.9,
        weight_decay=1e-4,
        seed=0,
        eval_batch=64,
    ):
        self.image_h = image_h
        self.image_w = image_w
        self.channels = channels
        self.stride = stride
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.num_cameras = num_cameras
        self.aggregated_layers = aggregated_layers
        self.r1 = r1
        self.r2 = r2
        self.gma_heads = gma_heads
        self.parts = parts
        self.ptl_depth = ptl_depth
        self.ptl_mode = ptl_mode
        self.gae_on = gae_on
        self.ptl_on = ptl_on
        self.ptf_on = ptf_on
        self.gma_on = gma_on
        self.gae_strategy = gae_strategy
        self.P = P
        self.K = K
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.eval_batch = eval_batch

    # -- configuration ----------------------------------------------------
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            image_h=self.image_h, image_w=self.image_w, channels=self.channels,
            stride=self.stride, patch=self.patch, dim=self.dim, depth=self.depth,
            heads=self.heads, mlp_ratio=self.mlp_ratio, num_cameras=self.num_cameras,
        )

    def head_config(self) -> HeadConfig:
        layers = self.aggregated_layers
        if isinstance(layers, (int, np.integer)):
            layers = last_layers(int(layers), self.depth)
        return HeadConfig(
            aggregated_layers=tuple(layers), r1=self.r1, r2=self.r2, gma_heads=self.gma_heads,
            parts=self.parts, ptl_depth=self.ptl_depth, ptl_mode=self.ptl_mode,
            gae_on=self.gae_on, ptl_on=self.ptl_on, ptf_on=self.ptf_on, gma_on=self.gma_on,
            gae_strategy=self.gae_strategy,
        )

    def init_model(self, n_classes: int) -> "GLTransReID":
        """Build fresh network and classifier weights for ``n_classes`` identities."""
        self.model_ = GLTransNet(self.backbone_config(), self.head_config(), seed=self.seed)
        rng = np.random.default_rng([self.seed, 1])
        self.classifiers_ = {
            name: Tensor(rng.normal(0.0, 1e-3, size=(d, n_classes)), requires_grad=True)
            for name, d in self.model_.tap_dims().items()
        }
        for name, p in self.model_.named_parameters():
            p.name = name
        for name, p in self.classifiers_.items():
            p.name = CLASSIFIER_PREFIX + name
        self.n_classes_ = n_classes
        return self

    # -- training ---------------------------------------------------------
    def fit(self, X, y, cameras=None, callback: Callable[[dict, LossReport], None] | None = None):
        X = _check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        cameras = np.zeros(len(X), np.int64) if cameras is None else np.asarray(cameras, np.int64)
        self.classes_, labels = np.unique(y, return_inverse=True)
        self.init_model(len(self.classes_))
        self.history_: list[dict] = []
        self.best_state_ = self.state_dict()
        if self.epochs <= 0:
            return self

        sampler = PKSampler(labels, BatchSpec(self.P, self.K), seed=self.seed)
        state = OptimState(
            base_lr=self.lr, total_epochs=self.epochs, momentum=self.momentum,
            weight_decay=self.weight_decay,
        )
        params = self.model_.parameters() + list(self.classifiers_.values())
        best = np.inf
        it = 0
        self.model_.train()
        for epoch in range(self.epochs):
            state.epoch = epoch
            losses = []
            for batch in sampler.epoch(epoch):
                for p in params:
                    p.grad = None
                try:
                    out = self.model_(X[batch], cameras[batch])
                    report = total_loss(out.taps, labels[batch], self.classifiers_)
                    report.total.backward()
                except NonFiniteError as exc:
                    raise NonFiniteError(f"iteration {it} (epoch {epoch}): {exc}") from None
                sgd_step(params, state)
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise NonFiniteError(f"parameter {p.name} became non-finite at iteration {it}")
                row = {"iter": it, "epoch": epoch, "lr": state.lr, **report.components(),
                       "total": report.total.item()}
                self.history_.append(row)
                if callback is not None:
                    callback(row, report)
                losses.append(row["total"])
                it += 1
            mean = float(np.mean(losses)) if losses else np.inf
            logger.info("epoch %d lr %.5f loss %.4f", epoch, state.lr, mean)
            if mean < best:
                best = mean
                self.best_state_ = self.state_dict()
        self.model_.eval()
        return self

    # -- inference --------------------------------------------------------
    def transform(self, X, cameras=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_images(X)
        cameras = np.zeros(len(X), np.int64) if cameras is None else np.asarray(cameras, np.int64)
        self.model_.eval()
        feats = []
        with no_grad():
            for start in range(0, len(X), self.eval_batch):
                sl = slice(start, start + self.eval_batch)
                feats.append(self.model_(X[sl], cameras[sl]).feature.data)
        return np.concatenate(feats, axis=0).astype(np.float32)

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "model_")
        state = self.model_.state_dict()
        state.update({CLASSIFIER_PREFIX + k: v.data.copy() for k, v in self.classifiers_.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> "GLTransReID":
        cls_keys = [k for k in state if k.startswith(CLASSIFIER_PREFIX)]
        n_classes = state[cls_keys[0]].shape[1] if cls_keys else 1
        self.init_model(n_classes)
        model_state = {k: v for k, v in state.items() if not k.startswith(CLASSIFIER_PREFIX)}
        own = dict(self.model_.named_tensors())
        for name, t in own.items():
            if name in model_state and model_state[name].shape != t.shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {model_state[name].shape}, "
                    f"model expects {t.shape}"
                )
        self.model_.load_state_dict(model_state)
        for k in cls_keys:
            name = k[len(CLASSIFIER_PREFIX):]
            if name in self.classifiers_:
                self.classifiers_[name].data = state[k].astype(np.float32)
        self.model_.eval()
        return self

    def save(self, path, state: dict[str, np.ndarray] | None = None) -> None:
        save_checkpoint(path, self.state_dict() if state is None else state)

    def load(self, path) -> "GLTransReID":
        return self.load_state_dict(load_checkpoint(path))
