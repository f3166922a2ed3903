"""Encoder / classifier / decoder network and its two training objectives."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .errors import DimensionError, ValidationError
from .nn import Activation, DenseLayer
from .swd import ProjectionSet, conditional_swd_and_grad, equalize, sliced_wd_and_grad

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    embed_dim: int = 16
    hidden: Tuple[int, ...] = (256, 64)
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min(self.input_dim, self.num_classes, self.embed_dim) < 1:
            raise ValidationError("input_dim, num_classes and embed_dim must be >= 1")


@dataclass
class LossWeights:
    gamma: float = 1.0    # reconstruction
    eta: float = 0.5      # marginal sliced distance
    lambda_: float = 0.5  # class-conditional sliced distance

    def __post_init__(self):
        if min(self.gamma, self.eta, self.lambda_) < 0:
            raise ValidationError(f"loss weights must be >= 0, got {self}")


class ConceptModel:
    """``classifier(encoder(x))`` for prediction, ``decoder(encoder(x))`` for reconstruction."""

    def __init__(self, encoder: List[DenseLayer], decoder: List[DenseLayer],
                 classifier: List[DenseLayer], config: Optional[ModelConfig] = None):
        self.encoder = list(encoder)
        self.decoder = list(decoder)
        self.classifier = list(classifier)
        d = self.encoder[0].in_features
        f = self.encoder[-1].out_features
        k = self.classifier[-1].out_features
        if self.decoder[0].in_features != f or self.classifier[0].in_features != f:
            raise DimensionError("decoder and classifier inputs must match the embedding width")
        if self.decoder[-1].out_features != d:
            raise DimensionError("decoder output must match the input width")
        self.config = config or ModelConfig(d, k, f, tuple(l.out_features for l in self.encoder[:-1]))

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "ConceptModel":
        rng = np.random.default_rng(seed)
        hid = config.hidden_activation
        enc_sizes = [config.input_dim, *config.hidden, config.embed_dim]
        encoder = nn.build_stack(enc_sizes, [hid] * len(config.hidden) + ["identity"], rng)
        dec_sizes = enc_sizes[::-1]
        decoder = nn.build_stack(dec_sizes, [hid] * len(config.hidden) + [config.output_activation], rng)
        classifier = nn.build_stack([config.embed_dim, config.num_classes], ["identity"], rng)
        return cls(encoder, decoder, classifier, config)

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_features

    @property
    def embed_dim(self) -> int:
        return self.encoder[-1].out_features

    @property
    def num_classes(self) -> int:
        return self.classifier[-1].out_features

    @property
    def layers(self) -> List[DenseLayer]:
        return self.encoder + self.decoder + self.classifier

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def gradients(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.grad_weights.copy(), layer.grad_bias.copy()]
        return out

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def copy(self) -> "ConceptModel":
        return ConceptModel([l.copy() for l in self.encoder], [l.copy() for l in self.decoder],
                            [l.copy() for l in self.classifier], ModelConfig(**asdict(self.config)))

    def encode(self, x) -> np.ndarray:
        return nn.forward(self.encoder, x)[0]

    def decode(self, z) -> np.ndarray:
        return nn.forward(self.decoder, z)[0]

    def classify(self, z) -> np.ndarray:
        return nn.forward(self.classifier, z)[0]

    def predict(self, x, batch_size: int = 4096) -> np.ndarray:
        x = nn.as_tensor2(x, "x")
        out = np.empty(x.shape[0], dtype=np.int64)
        for s in range(0, x.shape[0], batch_size):
            # argmax returns the first maximum: ties go to the lowest class index
            out[s:s + batch_size] = np.argmax(self.classify(self.encode(x[s:s + batch_size])), axis=1)
        return out

    def save(self, path) -> None:
        arrays = {"format_version": np.int64(CHECKPOINT_VERSION),
                  "config": np.array(json.dumps(asdict(self.config)))}
        for name, stack in (("encoder", self.encoder), ("decoder", self.decoder),
                            ("classifier", self.classifier)):
            arrays[f"{name}_activations"] = np.array([l.activation.value for l in stack])
            for i, layer in enumerate(stack):
                arrays[f"{name}_{i}_w"] = layer.weights
                arrays[f"{name}_{i}_b"] = layer.bias
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "ConceptModel":
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_VERSION:
                raise ValidationError(f"unsupported model checkpoint version {version}")
            config = ModelConfig(**json.loads(str(data["config"])))
            stacks = {}
            for name in ("encoder", "decoder", "classifier"):
                acts = data[f"{name}_activations"]
                stacks[name] = [DenseLayer(data[f"{name}_{i}_w"].copy(), data[f"{name}_{i}_b"].copy(),
                                           Activation(str(a))) for i, a in enumerate(acts)]
        return cls(stacks["encoder"], stacks["decoder"], stacks["classifier"], config)


def _check_x(model: ConceptModel, x, name: str) -> np.ndarray:
    x = nn.as_tensor2(x, name)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"{name} has {x.shape[1]} columns, model input width is {model.input_dim}")
    return x


def loss_task1(model: ConceptModel, x, y, weights: LossWeights) -> Tuple[float, List[np.ndarray]]:
    """Mean cross-entropy plus ``gamma`` times mean reconstruction error.

    Gradient buffers of all three sub-networks are overwritten; a copy of
    them is returned in ``model.parameters()`` order.
    """
    x = _check_x(model, x, "x")
    z, enc_cache = nn.forward(model.encoder, x)
    logits, cls_cache = nn.forward(model.classifier, z)
    x_hat, dec_cache = nn.forward(model.decoder, z)
    ce, g_logits = nn.cross_entropy(logits, y)
    rec, g_rec = nn.mse_loss(x_hat, x)
    gz = nn.backward(model.classifier, cls_cache, g_logits)
    gz += nn.backward(model.decoder, dec_cache, weights.gamma * g_rec)
    nn.backward(model.encoder, enc_cache, gz)
    return ce + weights.gamma * rec, model.gradients()


def loss_ecla(model: ConceptModel, x_few, y_few, x_unlabeled, x_er, y_er, z_er,
              weights: LossWeights, projections: ProjectionSet, seed=0,
              return_terms: bool = False):
    """Objective for tasks after the first.

    ``L_c(x_few) + L_c(x_er) + eta * SWD(encode(x_unlabeled), z_er)
    + lambda * sum_j SWD(encode(x_few | j), z_er | j)``, where ``L_c`` is the
    first-task combined loss. ``x_unlabeled`` should hold all current-task
    inputs of the batch, labeled or not. ``z_er`` are the latent samples the
    pseudo-inputs ``x_er`` were decoded from; they are fixed targets.

    ``projections`` are held fixed for the whole evaluation and ``seed`` drives
    the subsampling that equalises sample sizes, so the result is a
    deterministic function of the parameters.
    """
    x_few = _check_x(model, x_few, "x_few")
    x_er = _check_x(model, x_er, "x_er")
    x_unl = _check_x(model, x_unlabeled, "x_unlabeled")
    y_few = np.asarray(y_few, dtype=np.int64).ravel()
    y_er = np.asarray(y_er, dtype=np.int64).ravel()
    z_er = nn.as_tensor2(z_er, "z_er")
    if x_er.shape[0] == 0:
        raise ValidationError("replay set is empty")
    if z_er.shape != (x_er.shape[0], model.embed_dim) or y_er.shape[0] != x_er.shape[0]:
        raise DimensionError("x_er, y_er and z_er must have matching rows; z_er must be embedding-wide")
    missing = sorted(set(range(model.num_classes)) - set(y_few.tolist()))
    if missing:
        raise ValidationError(f"few-shot labels are missing classes {missing}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    n_few, n_er = x_few.shape[0], x_er.shape[0]
    z_all, enc_cache = nn.forward(model.encoder, np.concatenate([x_few, x_er, x_unl]))
    z_lab = z_all[:n_few + n_er]
    z_unl = z_all[n_few + n_er:]

    logits, cls_cache = nn.forward(model.classifier, z_lab)
    x_hat, dec_cache = nn.forward(model.decoder, z_lab)
    ce_few, g_few = nn.cross_entropy(logits[:n_few], y_few)
    ce_er, g_er = nn.cross_entropy(logits[n_few:], y_er)
    rec_few, r_few = nn.mse_loss(x_hat[:n_few], x_few)
    rec_er, r_er = nn.mse_loss(x_hat[n_few:], x_er)
    gz_lab = nn.backward(model.classifier, cls_cache, np.concatenate([g_few, g_er]))
    gz_lab += nn.backward(model.decoder, dec_cache, weights.gamma * np.concatenate([r_few, r_er]))

    gz = np.zeros_like(z_all)
    gz[:n_few + n_er] = gz_lab

    marginal = 0.0
    if weights.eta > 0 and z_unl.shape[0] > 0:
        za, zb, ia, _ = equalize(z_unl, z_er, rng)
        marginal, g = sliced_wd_and_grad(za, zb, projections)
        gz[n_few + n_er + ia] += weights.eta * g
    conditional = 0.0
    if weights.lambda_ > 0:
        conditional, g = conditional_swd_and_grad(z_all[:n_few], y_few, z_er, y_er, projections, rng)
        gz[:n_few] += weights.lambda_ * g
    nn.backward(model.encoder, enc_cache, gz)

    terms = {
        "combined_few": ce_few + weights.gamma * rec_few,
        "combined_replay": ce_er + weights.gamma * rec_er,
        "marginal_swd": marginal,
        "conditional_swd": conditional,
    }
    total = (terms["combined_few"] + terms["combined_replay"]
             + weights.eta * marginal + weights.lambda_ * conditional)
    if return_terms:
        return total, model.gradients(), terms
    return total, model.gradients()
