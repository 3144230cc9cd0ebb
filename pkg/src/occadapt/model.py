"""Pixel-aligned implicit occupancy model.

A small convolutional encoder turns the two-channel raster into L feature
grids of increasing abstraction (one per stage). A 3D query point is
projected onto the image, each grid is bilinearly sampled at that pixel, and
the point's depth is appended, giving one feature vector per level. A single
shared MLP decoder maps each per-level vector to an occupancy probability;
the fused prediction is the mean of the per-level probabilities.

Training runs through the autodiff graph; `features_np`/`predict_np` provide
a graph-free inference path for dense grid evaluation, verified in tests to
agree with the graph path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .raster import RasterInput, project


def _leaky_np(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0.0, x, slope * x)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class OccupancyPrediction:
    """Per-level occupancy probabilities and their mean."""

    per_layer: list          # active levels, each a DiffValue of shape (n,)
    fused: ad.DiffValue      # (n,) mean over active levels


class OccupancyModel:
    """Encoder + shared per-level decoder for single-view occupancy.

    channels: feature channels C per level.
    levels: encoder stages L (stage 1 downsamples once, the rest keep size).
    resolution: raster resolution R the encoder expects.
    hidden: decoder MLP widths.
    use_levels: "all" fuses every level; "last" restricts predictions and
        per-level features to the final level only (single-level ablation).
    freeze_decoder: when True, trainable_parameters() omits the decoder.
    """

    def __init__(self, channels: int = 16, levels: int = 4, resolution: int = 64,
                 hidden: tuple = (128, 64), seed: int = 0,
                 use_levels: str = "all", freeze_decoder: bool = False):
        if levels < 1:
            raise ValueError(f"levels must be >= 1, got {levels}")
        if resolution % 2:
            raise ValueError(f"resolution must be even, got {resolution}")
        if use_levels not in ("all", "last"):
            raise ValueError(f"use_levels must be 'all' or 'last', got {use_levels!r}")
        self.channels = channels
        self.levels = levels
        self.resolution = resolution
        self.hidden = tuple(hidden)
        self.use_levels = use_levels
        self.freeze_decoder = freeze_decoder

        rng = np.random.default_rng(seed)

        def kaiming(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        self.enc_w = [ad.Parameter("enc1.w", kaiming((channels, 2, 3, 3), 2 * 9))]
        self.enc_b = [ad.Parameter("enc1.b", np.zeros(channels))]
        for s in range(2, levels + 1):
            self.enc_w.append(ad.Parameter(f"enc{s}.w",
                                           kaiming((channels, channels, 3, 3), channels * 9)))
            self.enc_b.append(ad.Parameter(f"enc{s}.b", np.zeros(channels)))

        widths = (channels + 1,) + self.hidden + (1,)
        self.dec_w = [ad.Parameter(f"dec{i + 1}.w", kaiming((widths[i], widths[i + 1]), widths[i]))
                      for i in range(len(widths) - 1)]
        self.dec_b = [ad.Parameter(f"dec{i + 1}.b", np.zeros(widths[i + 1]))
                      for i in range(len(widths) - 1)]

    # -- parameter bookkeeping ------------------------------------------------

    def encoder_parameters(self) -> list:
        return list(self.enc_w) + list(self.enc_b)

    def decoder_parameters(self) -> list:
        return list(self.dec_w) + list(self.dec_b)

    def parameters(self) -> list:
        return self.encoder_parameters() + self.decoder_parameters()

    def trainable_parameters(self) -> list:
        if self.freeze_decoder:
            return self.encoder_parameters()
        return self.parameters()

    def active_levels(self) -> list[int]:
        """Indices of the levels used for features and fusion."""
        return [self.levels - 1] if self.use_levels == "last" else list(range(self.levels))

    # -- forward passes (autodiff graph) --------------------------------------

    def encode(self, raster: RasterInput) -> list:
        """All L feature grids, each a DiffValue of shape (C, R/2, R/2)."""
        if raster.resolution != self.resolution:
            raise ValueError(
                f"raster resolution {raster.resolution} != model resolution {self.resolution}")
        x = ad.constant(raster.channels()[None])            # (1, 2, R, R)
        h = ad.avg_pool2(ad.leaky_relu(ad.conv3x3(x, self.enc_w[0], self.enc_b[0])))
        half = self.resolution // 2
        stack = [ad.reshape(h, (self.channels, half, half))]
        for s in range(1, self.levels):
            h = ad.leaky_relu(ad.conv3x3(h, self.enc_w[s], self.enc_b[s]))
            stack.append(ad.reshape(h, (self.channels, half, half)))
        return stack

    def _grid_coords(self, points: np.ndarray, grid_size: int) -> np.ndarray:
        """Continuous grid-index coordinates of the projected points."""
        u, v, _ = project(points, self.resolution)
        scale = grid_size / self.resolution
        return np.stack([u * scale - 0.5, v * scale - 0.5], axis=1)

    def pixel_align(self, stack: list, points: np.ndarray) -> list:
        """Per active level: (n, C+1) features, depth as the last component."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, _, z = project(pts, self.resolution)
        zcol = ad.constant(z.reshape(-1, 1))
        out = []
        for l in self.active_levels():
            grid = stack[l]
            coords = self._grid_coords(pts, grid.shape[1])
            sampled = ad.bilinear_sample(grid, coords)      # (n, C)
            out.append(ad.concat([sampled, zcol], axis=1))
        return out

    def decode(self, f: ad.DiffValue) -> ad.DiffValue:
        """Shared MLP: (n, C+1) features -> (n, 1) occupancy probability."""
        h = f
        for i in range(len(self.dec_w) - 1):
            h = ad.leaky_relu(ad.add(ad.matmul(h, self.dec_w[i]), self.dec_b[i]))
        return ad.sigmoid(ad.add(ad.matmul(h, self.dec_w[-1]), self.dec_b[-1]))

    def predict(self, raster: RasterInput, points: np.ndarray) -> OccupancyPrediction:
        stack = self.encode(raster)
        feats = self.pixel_align(stack, points)
        return self.predict_from_features(feats)

    def predict_from_features(self, feats: list) -> OccupancyPrediction:
        n = feats[0].shape[0]
        per_layer = [ad.reshape(self.decode(f), (n,)) for f in feats]
        total = per_layer[0]
        for p in per_layer[1:]:
            total = ad.add(total, p)
        fused = ad.mul(total, ad.constant(1.0 / len(per_layer)))
        return OccupancyPrediction(per_layer, fused)

    # -- graph-free inference --------------------------------------------------

    def features_np(self, raster: RasterInput) -> list[np.ndarray]:
        """Numpy copies of the encoder's active feature grids."""
        stack = self.encode(raster)
        return [stack[l].data for l in self.active_levels()]

    def decode_np(self, f: np.ndarray) -> np.ndarray:
        h = f
        for i in range(len(self.dec_w) - 1):
            h = _leaky_np(h @ self.dec_w[i].data + self.dec_b[i].data)
        return _sigmoid_np(h @ self.dec_w[-1].data + self.dec_b[-1].data)

    def align_np(self, grids: list[np.ndarray], points: np.ndarray) -> list[np.ndarray]:
        """Graph-free pixel alignment over active-level grids."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, _, z = project(pts, self.resolution)
        out = []
        for g in grids:
            coords = self._grid_coords(pts, g.shape[1])
            u0, v0, fu, fv = ad._bilinear_weights(coords, g.shape[1], g.shape[2])
            w00 = (1 - fu) * (1 - fv)
            w01 = (1 - fu) * fv
            w10 = fu * (1 - fv)
            w11 = fu * fv
            vals = (g[:, u0, v0] * w00 + g[:, u0, v0 + 1] * w01
                    + g[:, u0 + 1, v0] * w10 + g[:, u0 + 1, v0 + 1] * w11)
            out.append(np.concatenate([vals.T, z.reshape(-1, 1)], axis=1))
        return out

    def predict_np(self, grids: list[np.ndarray], points: np.ndarray,
                   chunk: int = 65536) -> np.ndarray:
        """Fused occupancy for many points without building a graph."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts), dtype=np.float64)
        for lo in range(0, len(pts), chunk):
            feats = self.align_np(grids, pts[lo:lo + chunk])
            acc = np.zeros(len(feats[0]))
            for f in feats:
                acc += self.decode_np(f)[:, 0]
            out[lo:lo + chunk] = acc * (1.0 / len(feats))
        return out

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        ad.save_params(path, self.parameters())

    def load(self, path):
        values = ad.load_params(path)
        for p in self.parameters():
            if p.name not in values:
                raise ValueError(f"checkpoint missing parameter {p.name!r}")
            if values[p.name].shape != p.data.shape:
                raise ValueError(
                    f"checkpoint parameter {p.name!r} has shape "
                    f"{values[p.name].shape}, expected {p.data.shape}")
            p.data = values[p.name]
        extra = set(values) - {p.name for p in self.parameters()}
        if extra:
            raise ValueError(f"checkpoint has unknown parameters {sorted(extra)}")
