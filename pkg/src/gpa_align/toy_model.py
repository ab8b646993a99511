"""Toy two-stage detector: a parametric feature extractor and two classification heads.

    h = tanh(X W1 + b1)            hidden activations
    F = h W2 + b2                  proposal embeddings (d)
    P1 = softmax(F W_rpn + b_rpn)  stage-1 background/foreground confidences
    P2 = softmax(F W_cls + b_cls)  stage-2 per-category confidences (class 0 = background)

All arithmetic is float64. Gradients are computed in reverse mode by hand.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# Weight matrices subject to weight decay; biases and the graph transform are not decayed.
DECAYED_PARAMS = ("w1", "w2", "w_rpn", "w_cls")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row maximum."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return np.asarray(exp / exp.sum(axis=1, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the row-wise softmax."""
    return np.asarray(probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True)))


@dataclass(frozen=True, eq=False)
class ModelOutput:
    """Forward-pass cache for one batch of raw proposal features."""

    inputs: np.ndarray  # X, (N, r)
    hidden: np.ndarray  # h, (N, hidden)
    features: np.ndarray  # F, (N, d)
    rpn_probs: np.ndarray  # P1, (N, 2)
    cls_probs: np.ndarray  # P2, (N, C)


class ToyModel:
    """Parameters of the toy detector, stored by name."""

    def __init__(self, params: dict[str, np.ndarray]) -> None:
        self.params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
        self._check_shapes()

    @classmethod
    def initialize(
        cls,
        raw_dim: int,
        hidden_dim: int,
        embedding_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        learnable_transform: bool = False,
    ) -> "ToyModel":
        """Scaled-Gaussian weights (1/sqrt(fan_in)), zero biases, identity transform."""

        def dense(fan_in: int, fan_out: int) -> np.ndarray:
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        params = {
            "w1": dense(raw_dim, hidden_dim),
            "b1": np.zeros(hidden_dim),
            "w2": dense(hidden_dim, embedding_dim),
            "b2": np.zeros(embedding_dim),
            "w_rpn": dense(embedding_dim, 2),
            "b_rpn": np.zeros(2),
            "w_cls": dense(embedding_dim, num_classes),
            "b_cls": np.zeros(num_classes),
        }
        if learnable_transform:
            params["transform"] = np.eye(embedding_dim)
        return cls(params)

    def _check_shapes(self) -> None:
        required = ("w1", "b1", "w2", "b2", "w_rpn", "b_rpn", "w_cls", "b_cls")
        missing = [name for name in required if name not in self.params]
        if missing:
            raise InvalidInputError(f"Model is missing parameters: {missing}")
        p = self.params
        hidden = p["w1"].shape[1]
        d = p["w2"].shape[1]
        expected = {
            "b1": (hidden,),
            "w2": (hidden, d),
            "b2": (d,),
            "w_rpn": (d, 2),
            "b_rpn": (2,),
            "w_cls": (d, p["w_cls"].shape[1]),
            "b_cls": (p["w_cls"].shape[1],),
        }
        if "transform" in p:
            expected["transform"] = (d, d)
        for name, shape in expected.items():
            if p[name].shape != shape:
                raise InvalidInputError(f"Parameter '{name}' has shape {p[name].shape}, expected {shape}")
        if p["w_cls"].shape[1] < 2:
            raise InvalidInputError("The stage-2 head needs at least 2 classes")

    @property
    def raw_dim(self) -> int:
        return int(self.params["w1"].shape[0])

    @property
    def embedding_dim(self) -> int:
        return int(self.params["w2"].shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.params["w_cls"].shape[1])

    @property
    def transform(self) -> np.ndarray | None:
        return self.params.get("transform")

    def copy(self) -> "ToyModel":
        return ToyModel({name: value.copy() for name, value in self.params.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.params.items()}

    def forward(self, inputs: np.ndarray) -> ModelOutput:
        """Forward pass over raw proposal features."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.raw_dim:
            raise InvalidInputError(f"Inputs must have shape (N, {self.raw_dim}), got {inputs.shape}")
        p = self.params
        hidden = np.tanh(inputs @ p["w1"] + p["b1"])
        features = hidden @ p["w2"] + p["b2"]
        return ModelOutput(
            inputs=inputs,
            hidden=hidden,
            features=features,
            rpn_probs=softmax(features @ p["w_rpn"] + p["b_rpn"]),
            cls_probs=softmax(features @ p["w_cls"] + p["b_cls"]),
        )

    def backward(
        self,
        output: ModelOutput,
        grad_features: np.ndarray | None = None,
        grad_rpn_logits: np.ndarray | None = None,
        grad_cls_logits: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients at the embeddings and the head logits."""
        p = self.params
        grads = self.zeros_like()
        grad_f = np.zeros_like(output.features) if grad_features is None else np.array(grad_features)
        if grad_rpn_logits is not None:
            grads["w_rpn"] = output.features.T @ grad_rpn_logits
            grads["b_rpn"] = grad_rpn_logits.sum(axis=0)
            grad_f += grad_rpn_logits @ p["w_rpn"].T
        if grad_cls_logits is not None:
            grads["w_cls"] = output.features.T @ grad_cls_logits
            grads["b_cls"] = grad_cls_logits.sum(axis=0)
            grad_f += grad_cls_logits @ p["w_cls"].T
        grads["w2"] = output.hidden.T @ grad_f
        grads["b2"] = grad_f.sum(axis=0)
        grad_pre = (grad_f @ p["w2"].T) * (1.0 - output.hidden**2)
        grads["w1"] = output.inputs.T @ grad_pre
        grads["b1"] = grad_pre.sum(axis=0)
        return grads


def foreground_labels(labels: np.ndarray) -> np.ndarray:
    """Collapse category labels to {0: background, 1: foreground}."""
    return (np.asarray(labels) > 0).astype(np.int64)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits that produced `probs`."""
    n, num_classes = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise InvalidInputError(f"Expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InvalidInputError(f"Labels must lie in [0, {num_classes - 1}]")
    picked = probs[np.arange(n), labels]
    # log(0) only happens for saturated, wrong predictions; keep the loss finite
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def detection_surrogate_loss(
    model: ToyModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    output: ModelOutput | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Classification part of the detection loss on labeled source proposals.

    Stage-1 cross-entropy against the background/foreground collapse plus stage-2
    cross-entropy against the full labels, each averaged over proposals.
    """
    if output is None:
        output = model.forward(inputs)
    loss, grad_rpn, grad_cls = detection_loss_terms(output, labels)
    return loss, model.backward(output, grad_rpn_logits=grad_rpn, grad_cls_logits=grad_cls)


def detection_loss_terms(output: ModelOutput, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Surrogate detection loss and its gradients w.r.t. the stage-1 and stage-2 logits."""
    loss_rpn, grad_rpn = cross_entropy(output.rpn_probs, foreground_labels(labels))
    loss_cls, grad_cls = cross_entropy(output.cls_probs, labels)
    return loss_rpn + loss_cls, grad_rpn, grad_cls
