"""Style classifiers behind the ambiguity reward.

All classifiers follow the scikit-learn estimator protocol (``fit`` returns self,
``predict_proba`` returns an (n, N) array) and add ``classify`` returning a
:class:`StyleDistribution`. ``torch_proba`` is the differentiable path used when a
classifier drives a generator loss.
"""
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_image_tensor, check_positive
from .embedding import ToyEmbedder, unit_normalize
from .exceptions import ConfigError, DomainError, ShapeError
from .kmeans import ClusterSet, fit_kmeans
from .prompts import STYLES

# Probabilities are floored here so that every entry stays strictly positive even
# when a logit gap exceeds the float64 exponent range.
PROB_FLOOR = np.finfo(np.float64).tiny


@dataclass
class StyleDistribution:
    """Rows of class probabilities, one per image, with their ordered labels."""

    probs: np.ndarray
    labels: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim == 1:
            p = p[None, :]
        self.probs = p
        self.labels = tuple(self.labels)
        if p.shape[1] != len(self.labels):
            raise ShapeError(f"{p.shape[1]} probabilities for {len(self.labels)} labels")
        if not np.all(p > 0):
            raise DomainError("style probabilities must be strictly positive")
        if not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-6):
            raise DomainError("style probabilities must sum to 1")

    @property
    def n_classes(self):
        return self.probs.shape[1]

    def __len__(self):
        return self.probs.shape[0]

    def argmax_labels(self):
        return [self.labels[i] for i in self.probs.argmax(axis=1)]


def stable_softmax(logits):
    """Float64 softmax along the last axis, floored at ``PROB_FLOOR`` and renormalized."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def _to_numpy(t):
    return t.detach().to(torch.float64).cpu().numpy()


class _StyleClassifierMixin(ClassifierMixin):
    def predict_proba(self, X):
        return stable_softmax(self.decision_function(X))

    def predict(self, X):
        return np.asarray(self.classes_)[self.predict_proba(X).argmax(axis=1)]

    def classify(self, X):
        return StyleDistribution(self.predict_proba(X), tuple(self.classes_))

    def torch_proba(self, X):
        return torch.softmax(self.torch_logits(X), dim=-1)

    def decision_function(self, X):
        with torch.no_grad():
            return _to_numpy(self.torch_logits(X))

    def __call__(self, X):
        return self.classify(X)


class CLIPStyleClassifier(_StyleClassifierMixin, BaseEstimator):
    """Softmax over temperature-scaled cosine similarities between an image and class names."""

    def __init__(self, class_names=STYLES, provider=None, temperature=0.01):
        self.class_names = class_names
        self.provider = provider
        self.temperature = temperature

    def fit(self, X=None, y=None):
        names = list(self.class_names or [])
        if len(names) < 2:
            raise ConfigError("CLIPStyleClassifier needs at least two class names")
        check_positive(self.temperature, "temperature")
        self.provider_ = self.provider if self.provider is not None else ToyEmbedder()
        self.classes_ = np.asarray(names, dtype=object)
        self.text_embeddings_ = unit_normalize(self.provider_.embed_text(names).to(torch.float64))
        return self

    def similarities(self, X):
        check_is_fitted(self, "text_embeddings_")
        img = unit_normalize(self.provider_.embed_image(_images(X)))
        return img @ self.text_embeddings_.to(img.dtype).T

    def torch_logits(self, X):
        return self.similarities(X) / self.temperature


class KMeansStyleClassifier(_StyleClassifierMixin, BaseEstimator):
    """Softmax of inverse distances to k cluster centers in embedding space.

    ``fit`` accepts images (``source="image"``) or strings (``source="text"``), or
    a prefitted :class:`ClusterSet` via ``clusters``.
    """

    def __init__(self, n_clusters=10, source="image", provider=None, epsilon=1e-8, clusters=None, n_init=10, random_state=0):
        self.n_clusters = n_clusters
        self.source = source
        self.provider = provider
        self.epsilon = epsilon
        self.clusters = clusters
        self.n_init = n_init
        self.random_state = random_state

    def _embed(self, X):
        if self.source == "text":
            return self.provider_.embed_text(list(X))
        return self.provider_.embed_image(_images(X))

    def fit(self, X=None, y=None):
        check_positive(self.epsilon, "epsilon")
        self.provider_ = self.provider if self.provider is not None else ToyEmbedder()
        if self.clusters is not None:
            self.clusters_ = self.clusters
        else:
            if X is None:
                raise ConfigError("KMeansStyleClassifier.fit needs data or prefitted clusters")
            vectors = _to_numpy(self._embed(X))
            self.clusters_ = fit_kmeans(vectors, self.n_clusters, self.random_state, n_init=self.n_init, source=self.source)
        self.centers_ = torch.as_tensor(self.clusters_.centers)
        self.classes_ = np.asarray([f"cluster-{i}" for i in range(self.clusters_.k)], dtype=object)
        return self

    def distances(self, X):
        check_is_fitted(self, "centers_")
        emb = self.provider_.embed_image(_images(X))
        if emb.shape[-1] != self.centers_.shape[1]:
            raise ShapeError(f"embedding dim {emb.shape[-1]} does not match centers dim {self.centers_.shape[1]}")
        diff = emb[:, None, :] - self.centers_.to(emb.dtype)[None, :, :]
        return torch.linalg.vector_norm(diff, dim=-1)

    def torch_logits(self, X):
        return 1.0 / (self.distances(X) + self.epsilon)


class GANStyleClassifier(_StyleClassifierMixin, BaseEstimator):
    """Wraps the style head of a CAN discriminator.

    ``head`` is a module mapping channel-last images to N style logits; see
    :class:`creative_diffusion.can.StyleHead`. Inputs must already be at the head's
    resolution.
    """

    def __init__(self, head=None, class_names=STYLES):
        self.head = head
        self.class_names = class_names

    def fit(self, X=None, y=None):
        if self.head is None:
            raise ConfigError("GANStyleClassifier needs a style head")
        self.head.eval()
        for p in self.head.parameters():
            p.requires_grad_(False)
        n = self.head.n_styles
        names = list(self.class_names)
        if len(names) != n:
            raise ConfigError(f"head emits {n} logits but {len(names)} class names were given")
        self.classes_ = np.asarray(names, dtype=object)
        return self

    def torch_logits(self, X):
        check_is_fitted(self, "classes_")
        x = _images(X)
        dim = self.head.image_dim
        if tuple(x.shape[1:3]) != (dim, dim):
            raise ShapeError(f"style head expects {dim}x{dim} images, got {tuple(x.shape[1:3])}")
        param = next(self.head.parameters())
        return self.head(x.to(param.dtype))


class ConstantClassifier(_StyleClassifierMixin, BaseEstimator):
    """Returns the same logits for every image. Used for no-signal controls."""

    def __init__(self, logits=(0.0, 0.0)):
        self.logits = logits

    def fit(self, X=None, y=None):
        self.classes_ = np.asarray([f"class-{i}" for i in range(len(self.logits))], dtype=object)
        return self

    def torch_logits(self, X):
        x = _images(X)
        return torch.as_tensor(self.logits, dtype=torch.float64).expand(x.shape[0], -1)


def _images(X):
    if isinstance(X, torch.Tensor):
        return X if X.ndim == 4 else X.unsqueeze(0)
    return as_image_tensor(X)


def clip_classify(x0, class_names, provider, temperature=0.01):
    return CLIPStyleClassifier(class_names, provider, temperature).fit().classify(x0)


def kmeans_classify(x0, clusters, provider, epsilon=1e-8):
    if not isinstance(clusters, ClusterSet):
        clusters = ClusterSet(np.asarray(clusters))
    return KMeansStyleClassifier(clusters=clusters, provider=provider, epsilon=epsilon).fit().classify(x0)


def gan_classify(x0, head, class_names=STYLES):
    return GANStyleClassifier(head, class_names).fit().classify(x0)
