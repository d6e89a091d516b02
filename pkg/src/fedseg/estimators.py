"""scikit-learn style wrappers around local and federated training.

``fit`` takes ``(n, H, W)`` image arrays in [0, 1] and binary masks;
``predict`` returns binary masks, ``predict_proba`` foreground
probabilities and ``score`` the mean Dice.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .client import Client, ClientSpec, dice_score
from .data import SiteDataset
from .model import ModelConfig, build_model, predict_images
from .params import ShareFilter
from .server import ServerConfig, derive_client_seed
from .simulation import make_clients, simulate
from .validation import check_images, check_is_fitted, check_masks, check_positive


def _as_dataset(X, y=None, site="data") -> SiteDataset:
    n = len(X)
    labels = [None] * n if y is None else list(y)
    return SiteDataset(site, list(X), [x.copy() for x in X], labels, ["train"] * n)


class _SegmenterMixin:
    def _model_config(self):
        return ModelConfig(patch=(self.patch, self.patch), depth=self.depth, base_channels=self.base_channels)

    def _infer(self, X):
        check_is_fitted(self)
        X = check_images(X)
        window = (self.window, self.window) if self.window else X.shape[1:]
        stride = self.stride or max(1, min(window) // 3)
        return predict_images(self.graph_, self.params_, list(X), window, stride)

    def predict_proba(self, X) -> np.ndarray:
        return np.stack([p[..., 1] for p in self._infer(X)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.uint8)

    def score(self, X, y) -> float:
        X = check_images(X)
        y = check_masks(y, X)
        return float(np.mean([dice_score(p, g) for p, g in zip(self.predict(X), y)]))


class FCNSegmenter(_SegmenterMixin, BaseEstimator):
    """Single-site supervised U-shape FCN trained with soft Dice."""

    def __init__(self, depth=5, base_channels=8, patch=64, lr=1e-4, iterations=200, batch_size=4,
                 optimizer="adam", window=None, stride=None, random_state=0):
        self.depth = depth
        self.base_channels = base_channels
        self.patch = patch
        self.lr = lr
        self.iterations = iterations
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.window = window
        self.stride = stride
        self.random_state = random_state

    def fit(self, X, y):
        self.params_ = None
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        """Continue training (optimizer state persists between calls)."""
        X = check_images(X)
        y = check_masks(y, X)
        check_positive(self.iterations, "iterations", integer=True)
        check_positive(self.lr, "lr")
        if getattr(self, "params_", None) is None:
            config = self._model_config()
            self.graph_, init = build_model(config, self.random_state)
            self.client_ = Client(ClientSpec("local", lr=self.lr, iterations_per_epoch=self.iterations,
                                             batch_size=self.batch_size, optimizer=self.optimizer),
                                  None, self.graph_, config)
            self.client_.receive(dict(init.items()), init.stages)
            self.n_rounds_ = 0
        self.client_.dataset = _as_dataset(X, y)
        self.n_rounds_ += 1
        report = self.client_.train_round(
            self.n_rounds_, derive_client_seed(self.random_state, "local", self.n_rounds_), 1)
        self.params_ = self.client_.params
        self.loss_curve_ = list(report.losses)
        return self


class FederatedSegmenter(_SegmenterMixin, BaseEstimator):
    """Supervised site plus optional unlabeled site trained by federated
    averaging over the in-process transport."""

    def __init__(self, depth=5, base_channels=8, patch=64, rounds=10, warm_start_rounds=0,
                 iterations_per_round=20, sup_lr=1e-4, unsup_lr=5e-6, unsup_weight=1.0, tau=0.9,
                 loss="Dice_HF", augment="scale_shift", share="all", window=None, stride=None,
                 random_state=0):
        self.depth = depth
        self.base_channels = base_channels
        self.patch = patch
        self.rounds = rounds
        self.warm_start_rounds = warm_start_rounds
        self.iterations_per_round = iterations_per_round
        self.sup_lr = sup_lr
        self.unsup_lr = unsup_lr
        self.unsup_weight = unsup_weight
        self.tau = tau
        self.loss = loss
        self.augment = augment
        self.share = share
        self.window = window
        self.stride = stride
        self.random_state = random_state

    def fit(self, X, y, X_unlabeled=None):
        X = check_images(X)
        y = check_masks(y, X)
        check_positive(self.rounds, "rounds", integer=True)
        roster = [ClientSpec("sup", lr=self.sup_lr, iterations_per_epoch=self.iterations_per_round)]
        data = {"sup": _as_dataset(X, y, "sup")}
        if X_unlabeled is not None:
            U = check_images(X_unlabeled, "X_unlabeled")
            roster.append(ClientSpec("unsup", "unsupervised", lr=self.unsup_lr, weight=self.unsup_weight,
                                     iterations_per_epoch=self.iterations_per_round, tau=self.tau,
                                     loss=self.loss, augment=self.augment))
            data["unsup"] = _as_dataset(U, None, "unsup")
        cfg = ServerConfig(roster, rounds=self.rounds, warm_start_rounds=self.warm_start_rounds,
                           epochs_per_round=1, share=ShareFilter(self.share), seed=self.random_state,
                           model=self._model_config(), final_eval="validate")
        self.graph_ = build_model(cfg.model, cfg.seed)[0]
        sim = simulate(cfg, make_clients(cfg, data, self.graph_))
        self.params_ = sim.result.final
        self.history_ = sim.result.history
        return self
