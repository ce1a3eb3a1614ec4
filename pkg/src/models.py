"""
Toy attacked models and the client gradient they leak.

A model maps a flattened input x of dimension n to class logits. The client
computes a scalar loss on those logits against a fixed label and shares
g(x) = dL/dW, flattened layer-major with weights before biases. Every
gradient here can be built as a graph, so it stays differentiable in x.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tensor
from .errors import ShapeError, ValidationError
from .persistence import PathLike, read_checkpoint, write_checkpoint
from .rng import SeededRNG

logger = logging.getLogger(__name__)

ARCHITECTURES = ("linear-1", "mlp-2", "mlp-3", "mlp-4", "cnn-tiny")
LOSS_KINDS = ("cross-entropy", "half-squared-error", "linear-score")
PERTURBATIONS = ("none", "gaussian", "laplacian")

# hidden widths per MLP depth; hidden dense layers use relu
_MLP_HIDDEN = {
    "linear-1": (),
    "mlp-2": (32,),
    "mlp-3": (32, 16),
    "mlp-4": (32, 16, 16),
}
CONV_CHANNELS = 4
CONV_KERNEL = 3

Label = Union[int, Tensor]


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    Layer layout of an attacked model.

    Args:
        name (str): One of ``ARCHITECTURES``
        input_dim (int): Flattened input dimension n
        num_classes (int): Number of output logits c
        loss (str): Client loss kind, one of ``LOSS_KINDS``
        bias (bool): Whether every layer carries a bias vector
    """

    name: str
    input_dim: int = 64
    num_classes: int = 10
    loss: str = "cross-entropy"
    bias: bool = True

    def __post_init__(self) -> None:
        if self.name not in ARCHITECTURES:
            raise ValidationError(
                f"unknown architecture '{self.name}'; expected one of {', '.join(ARCHITECTURES)}"
            )
        if self.loss not in LOSS_KINDS:
            raise ValidationError(
                f"unknown client loss '{self.loss}'; expected one of {', '.join(LOSS_KINDS)}"
            )
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValidationError("input_dim and num_classes must be positive")
        if self.name == "cnn-tiny":
            side = self.image_side
            if side * side != self.input_dim or side < CONV_KERNEL:
                raise ValidationError(
                    f"cnn-tiny needs a square input of side >= {CONV_KERNEL}, "
                    f"got input_dim={self.input_dim}"
                )

    @property
    def image_side(self) -> int:
        return int(round(np.sqrt(self.input_dim)))

    @property
    def widths(self) -> Tuple[int, ...]:
        """Layer widths from input to logits (dense layers only)."""
        if self.name == "cnn-tiny":
            conv_out = self.image_side - CONV_KERNEL + 1
            return (CONV_CHANNELS * conv_out * conv_out, self.num_classes)
        return (self.input_dim, *_MLP_HIDDEN[self.name], self.num_classes)

    @property
    def relu_layers(self) -> Tuple[str, ...]:
        """Dense layers followed by relu: every MLP layer but the last."""
        if self.name == "cnn-tiny":
            return ()
        return tuple(f"layer{k}" for k in range(1, len(self.widths) - 1))

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Names and shapes in the fixed flattening order."""
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        layer = 1
        if self.name == "cnn-tiny":
            shapes.append((f"layer{layer}.weight", (CONV_CHANNELS, CONV_KERNEL * CONV_KERNEL)))
            if self.bias:
                shapes.append((f"layer{layer}.bias", (CONV_CHANNELS,)))
            layer += 1
        widths = self.widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes.append((f"layer{layer}.weight", (fan_out, fan_in)))
            if self.bias:
                shapes.append((f"layer{layer}.bias", (fan_out,)))
            layer += 1
        return shapes

    @property
    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.parameter_shapes())

    def default_label(self) -> Label:
        if self.loss == "cross-entropy":
            return 0
        if self.loss == "half-squared-error":
            return Tensor.zeros((self.num_classes,))
        return Tensor(np.ones(self.num_classes))

    def check_label(self, label: Label) -> Label:
        if self.loss == "cross-entropy":
            if isinstance(label, Tensor) or not 0 <= int(label) < self.num_classes:
                raise ValidationError(
                    f"cross-entropy label must be an integer in [0, {self.num_classes})"
                )
            return int(label)
        target = label if isinstance(label, Tensor) else Tensor(label)
        if target.shape != (self.num_classes,):
            raise ShapeError("label", target.shape, (self.num_classes,))
        return target


def _patch_index(side: int) -> np.ndarray:
    """Flat pixel indices of every 3x3 patch, shape (9, positions)."""
    out = side - CONV_KERNEL + 1
    rows, cols = np.meshgrid(np.arange(out), np.arange(out), indexing="ij")
    offsets = [(dr, dc) for dr in range(CONV_KERNEL) for dc in range(CONV_KERNEL)]
    return np.stack(
        [((rows + dr) * side + (cols + dc)).reshape(-1) for dr, dc in offsets]
    )


@dataclass(frozen=True, eq=False)
class AttackedModel:
    """
    Client model F(x; W) with a fixed label and client loss.

    Instances are immutable; parameter leaves are created fresh for every
    graph, so a model can be shared between threads.
    """

    spec: ArchitectureSpec
    params: Tuple[Tensor, ...]
    label: Label
    model_id: str

    def __post_init__(self) -> None:
        expected = self.spec.parameter_shapes()
        if len(expected) != len(self.params):
            raise ValidationError(
                f"{self.spec.name} expects {len(expected)} parameter tensors, got {len(self.params)}"
            )
        for (name, shape), tensor in zip(expected, self.params):
            if tensor.shape != shape:
                raise ShapeError(name, tensor.shape, shape)
        object.__setattr__(self, "label", self.spec.check_label(self.label))

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def parameter_names(self) -> List[str]:
        return [name for name, _ in self.spec.parameter_shapes()]

    @property
    def parameter_count(self) -> int:
        return self.spec.parameter_count

    def param_nodes(self) -> List[Node]:
        return [ad.leaf(p, name=n) for p, n in zip(self.params, self.parameter_names)]

    def forward(self, x: Node, params: Sequence[Node]) -> Node:
        """Logits for one flattened input."""
        if x.shape != (self.input_dim,):
            raise ShapeError("forward", x.shape, (self.input_dim,))
        stack = list(params)
        h = x
        if self.spec.name == "cnn-tiny":
            h = self._conv(x, stack)
        dense_layers = len(self.spec.widths) - 1
        for layer in range(dense_layers):
            weight = stack.pop(0)
            h = ad.matmul(weight, h)
            if self.spec.bias:
                h = ad.add(h, stack.pop(0))
            if layer < dense_layers - 1:
                h = ad.relu(h)
        return h

    def _conv(self, x: Node, stack: List[Node]) -> Node:
        side = self.spec.image_side
        patches = ad.take(x, _patch_index(side))
        maps = ad.matmul(stack.pop(0), patches)
        if self.spec.bias:
            positions = patches.shape[1]
            maps = ad.add(maps, ad.take(stack.pop(0), np.repeat(
                np.arange(CONV_CHANNELS)[:, None], positions, axis=1)))
        return ad.reshape(ad.sigmoid(maps), (maps.size,))

    def client_loss(
        self, x: Node, params: Sequence[Node], y: Optional[Label] = None
    ) -> Node:
        """Scalar client loss L(F(x; W), y)."""
        label = self.label if y is None else self.spec.check_label(y)
        logits = self.forward(x, params)
        if self.spec.loss == "cross-entropy":
            return ad.softmax_cross_entropy(logits, int(label))  # type: ignore[arg-type]
        target = ad.constant(label)  # type: ignore[arg-type]
        if self.spec.loss == "half-squared-error":
            return ad.scale(ad.reduce_sum(ad.square(ad.sub(logits, target))), 0.5)
        return ad.reduce_sum(ad.mul(logits, target))


@dataclass(frozen=True)
class LeakedGradient:
    """
    Flattened parameter gradient as seen by the attacker.

    ``node`` holds the graph version when the gradient was built with
    ``create_graph``; it is not part of equality.
    """

    values: Tensor
    model_id: str
    perturbation: str = "none"
    variance: float = 0.0
    batch_size: int = 1
    node: Optional[Node] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.perturbation not in PERTURBATIONS:
            raise ValidationError(f"unknown perturbation '{self.perturbation}'")
        if self.variance < 0:
            raise ValidationError(f"perturbation variance must be >= 0, got {self.variance}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")
        if len(self.values.shape) != 1:
            raise ShapeError("leaked gradient", self.values.shape)

    def __len__(self) -> int:
        return self.values.size

    def as_node(self) -> Node:
        return self.node if self.node is not None else ad.constant(self.values)

    def check_against(self, model: AttackedModel) -> None:
        if len(self) != model.parameter_count:
            raise ShapeError("leaked gradient", (len(self),), (model.parameter_count,))


def build_model(
    spec: Union[str, ArchitectureSpec],
    seed: int,
    label: Optional[Label] = None,
    **spec_kwargs,
) -> AttackedModel:
    """
    Initialise an attacked model deterministically.

    Args:
        spec (Union[str, ArchitectureSpec]): Architecture spec or its name
        seed (int): Initialisation seed
        label (Optional[Label], optional): Fixed client label. Defaults to the
            loss kind's default label.
        **spec_kwargs: ``input_dim``, ``num_classes``, ``loss`` or ``bias``
            when ``spec`` is a name

    Returns:
        AttackedModel: Model with Gaussian weights of std 1/sqrt(fan_in),
            sqrt(2 / fan_in) for layers feeding a relu
    """
    if isinstance(spec, str):
        spec = ArchitectureSpec(spec, **spec_kwargs)
    rng = SeededRNG(seed)
    params = []
    fan_in = 1
    for name, shape in spec.parameter_shapes():
        if name.endswith(".weight"):
            fan_in = shape[1]
        gain = 2.0 if name.split(".")[0] in spec.relu_layers else 1.0
        params.append(Tensor.wrap(rng.normal(shape, std=np.sqrt(gain / fan_in))))
    model_id = f"{spec.name}-n{spec.input_dim}-c{spec.num_classes}-{spec.loss}-s{seed}"
    logger.debug("Built %s with %d parameters", model_id, spec.parameter_count)
    return AttackedModel(
        spec=spec,
        params=tuple(params),
        label=spec.default_label() if label is None else label,
        model_id=model_id,
    )


def from_params(
    spec: ArchitectureSpec,
    params: Sequence[Union[Tensor, np.ndarray, Sequence]],
    label: Optional[Label] = None,
    model_id: Optional[str] = None,
) -> AttackedModel:
    """Wrap hand-chosen parameters, e.g. W = I for closed-form checks."""
    tensors = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in params)
    return AttackedModel(
        spec=spec,
        params=tensors,
        label=spec.default_label() if label is None else label,
        model_id=model_id or f"{spec.name}-n{spec.input_dim}-c{spec.num_classes}-{spec.loss}-fixed",
    )


def _flatten(grads: Sequence[Node]) -> Node:
    return ad.concat([ad.reshape(g, (g.size,)) for g in grads])


def client_gradient(
    model: AttackedModel,
    x: Union[Tensor, Node],
    y: Optional[Label] = None,
    create_graph: bool = False,
) -> LeakedGradient:
    """
    Flattened dL/dW at input ``x``.

    Args:
        model (AttackedModel): The client model
        x (Union[Tensor, Node]): Flattened input; pass a Node to keep the
            result differentiable in x
        y (Optional[Label], optional): Label override. Defaults to the model's.
        create_graph (bool, optional): Keep the gradient as a graph node.
            Defaults to False.

    Returns:
        LeakedGradient: Unperturbed gradient, batch size 1
    """
    x_node = x if isinstance(x, Node) else ad.leaf(x)
    if x_node.shape != (model.input_dim,):
        raise ShapeError("client_gradient", x_node.shape, (model.input_dim,))
    params = model.param_nodes()
    loss = model.client_loss(x_node, params, y)
    grads = ad.backward(loss, params, create_graph=create_graph)
    if create_graph:
        flat = _flatten(grads)  # type: ignore[arg-type]
        return LeakedGradient(values=flat.value, model_id=model.model_id, node=flat)
    values = np.concatenate([g.data.reshape(-1) for g in grads])
    return LeakedGradient(values=Tensor.wrap(values), model_id=model.model_id)


def batch_gradient(
    model: AttackedModel,
    xs: Sequence[Tensor],
    ys: Optional[Sequence[Label]] = None,
) -> LeakedGradient:
    """Mean of per-sample client gradients over a batch."""
    if not xs:
        raise ValidationError("batch_gradient needs at least one sample")
    if ys is not None and len(ys) != len(xs):
        raise ValidationError(f"batch has {len(xs)} inputs but {len(ys)} labels")
    labels: Sequence[Optional[Label]] = ys if ys is not None else [None] * len(xs)
    total = np.zeros(model.parameter_count)
    for x, y in zip(xs, labels):
        total += client_gradient(model, x, y).values.data
    return LeakedGradient(
        values=Tensor.wrap(total / len(xs)),
        model_id=model.model_id,
        batch_size=len(xs),
    )


def projected_gradient(
    model: AttackedModel,
    x: Union[Tensor, Node],
    y: Optional[Label],
    v: Union[Tensor, Node],
) -> Node:
    """v^T g(x) as a scalar node that supports a further gradient in x."""
    v_node = v if isinstance(v, Node) else ad.constant(v)
    if v_node.shape != (model.parameter_count,):
        raise ShapeError("projected_gradient", v_node.shape, (model.parameter_count,))
    leaked = client_gradient(model, x, y, create_graph=True)
    return ad.reduce_sum(ad.mul(leaked.as_node(), v_node))


def gradient_jacobian(
    model: AttackedModel, x: Tensor, y: Optional[Label] = None
) -> np.ndarray:
    """
    Dense Jacobian J[p, k] = d g_p / d x_k, shape (parameter_count, n).

    h = grad_x(v^T g) is linear in v, so differentiating each h_k with respect
    to v yields column k of J.
    """
    x_node = ad.leaf(x)
    v = ad.leaf(np.zeros(model.parameter_count), name="v")
    projection = projected_gradient(model, x_node, y, v)
    (h,) = ad.backward(projection, [x_node], create_graph=True)
    jac = np.zeros((model.parameter_count, model.input_dim))
    for k in range(model.input_dim):
        (column,) = ad.backward(ad.take(h, np.array([k])), [v])  # type: ignore[arg-type]
        jac[:, k] = column.data  # type: ignore[union-attr]
    return jac


def model_state(model: AttackedModel) -> Dict[str, Tensor]:
    return dict(zip(model.parameter_names, model.params))


def save_model(model: AttackedModel, path: PathLike) -> Path:
    """Write the parameters as a ``[param <name>]`` checkpoint."""
    return write_checkpoint(path, model_state(model))


def load_model(
    spec: ArchitectureSpec, path: PathLike, label: Optional[Label] = None
) -> AttackedModel:
    """Rebuild a model of ``spec`` from a checkpoint, checking names and shapes."""
    tensors = read_checkpoint(path)
    names = [name for name, _ in spec.parameter_shapes()]
    missing = [name for name in names if name not in tensors]
    extra = sorted(set(tensors) - set(names))
    if missing or extra:
        raise ValidationError(
            f"checkpoint does not match {spec.name}: missing {missing}, unexpected {extra}"
        )
    return from_params(spec, [tensors[name] for name in names], label, model_id=Path(path).stem)
