"""
Data management module for the procedural image dataset.

Provides functionality for:
- Generating small grayscale shape images (rectangles, crosses, blobs)
- Filtering images by shape kind
- Fitting the Gaussian mixture that backs the oracle denoiser
"""

import logging
from typing import Dict, List, Optional

import numpy as np

from .autodiff import Tensor
from .diffusion import GaussianMixture
from .errors import ValidationError
from .rng import SeededRNG

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "cross", "blob")
MIN_VARIANCE = 1e-4


class ShapeDatasetManager:
    """
    Generates and serves a deterministic dataset of shape images.
    """

    def __init__(self, size: int = 512, side: int = 8, seed: int = 1234):
        """
        Initialize the dataset manager.

        Args:
            size (int): Number of images to generate
            side (int): Image side length; images are side x side, flattened
            seed (int): Generation seed
        """
        if size < 1:
            raise ValidationError(f"dataset size must be >= 1, got {size}")
        if side < 4:
            raise ValidationError(f"image side must be >= 4, got {side}")
        self.size = size
        self.side = side
        self.seed = seed
        self.images, self.kinds = self._generate()

    def _generate(self):
        """
        Draw every image from one seeded stream, cycling through the kinds.

        Returns:
            Tuple[np.ndarray, List[str]]: Images of shape (size, side*side)
            and the kind of each image
        """
        rng = SeededRNG(self.seed)
        images = np.zeros((self.size, self.side * self.side))
        kinds = []
        for index in range(self.size):
            kind = SHAPE_KINDS[index % len(SHAPE_KINDS)]
            painter = getattr(self, f"_paint_{kind}")
            images[index] = np.clip(painter(rng), 0.0, 1.0).reshape(-1)
            kinds.append(kind)
        logger.debug("Generated %d shape images of side %d", self.size, self.side)
        return images, kinds

    def _paint_rectangle(self, rng: SeededRNG) -> np.ndarray:
        side = self.side
        canvas = np.zeros((side, side))
        height, width = rng.integers(2, side - 1, 2)
        top = int(rng.integers(0, side - height + 1, 1)[0])
        left = int(rng.integers(0, side - width + 1, 1)[0])
        canvas[top:top + height, left:left + width] = 0.6 + 0.4 * rng.uniform(1)[0]
        return canvas

    def _paint_cross(self, rng: SeededRNG) -> np.ndarray:
        side = self.side
        canvas = np.zeros((side, side))
        row, col = rng.integers(1, side - 1, 2)
        arm = int(rng.integers(1, max(2, side // 2), 1)[0])
        level = 0.6 + 0.4 * rng.uniform(1)[0]
        canvas[row, max(0, col - arm):col + arm + 1] = level
        canvas[max(0, row - arm):row + arm + 1, col] = level
        return canvas

    def _paint_blob(self, rng: SeededRNG) -> np.ndarray:
        side = self.side
        centre = 1.5 + (side - 3.0) * rng.uniform(2)
        spread = 0.8 + 1.2 * rng.uniform(1)[0]
        rows, cols = np.mgrid[0:side, 0:side]
        dist = (rows - centre[0]) ** 2 + (cols - centre[1]) ** 2
        return (0.6 + 0.4 * rng.uniform(1)[0]) * np.exp(-dist / (2.0 * spread ** 2))

    def get_all_images(self) -> List[Tensor]:
        """
        Retrieve every image.

        Returns:
            List[Tensor]: Flattened images in generation order
        """
        return [Tensor(row) for row in self.images]

    def filter_images(self, kind: Optional[str] = None) -> List[Tensor]:
        """
        Images of one shape kind.

        Args:
            kind (Optional[str]): Shape kind; None returns every image

        Returns:
            List[Tensor]: Matching images in generation order
        """
        if kind is not None and kind not in SHAPE_KINDS:
            raise ValidationError(f"unknown shape kind '{kind}'")
        return [
            Tensor(row)
            for row, row_kind in zip(self.images, self.kinds)
            if kind is None or row_kind == kind
        ]

    def get_kinds(self) -> List[str]:
        """
        Shape kinds present in the dataset.

        Returns:
            List[str]: Kind names in canonical order
        """
        return [kind for kind in SHAPE_KINDS if kind in self.kinds]

    def kind_counts(self) -> Dict[str, int]:
        return {kind: self.kinds.count(kind) for kind in self.get_kinds()}

    def fit_mixture(self) -> GaussianMixture:
        """
        Fit one isotropic Gaussian per shape kind.

        Each component's variance is the mean per-pixel variance of its kind,
        floored at 1e-4; weights are the kind frequencies.

        Returns:
            GaussianMixture: The fitted mixture
        """
        weights, means, variances = [], [], []
        for kind in self.get_kinds():
            members = self.images[[k == kind for k in self.kinds]]
            weights.append(len(members) / self.size)
            means.append(members.mean(axis=0))
            variances.append(max(float(members.var(axis=0).mean()), MIN_VARIANCE))
        weights_array = np.asarray(weights)
        return GaussianMixture(weights_array / weights_array.sum(), means, variances)
