# Copyright 2024 t3kit developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Video-to-image processing: frame sampling and augmentation ahead of grid stitching

A clip of ``N`` frames becomes a single image by sampling ``num_selected`` frames,
augmenting each to a ``crop_size`` square tile, and laying the tiles out row-major in
a ``grid_side x grid_side`` grid. The train path (:func:`train_stitch`) resizes,
randomly crops, and applies a subset of RandAugment; the test path
(:func:`test_time_replicas`) resizes, center crops a window of side
``floor(crop_size * test_crop_scale)``, and randomly crops from that window, repeated
``test_replicas`` times.

Frames are float tensors of shape ``(3, H, W)`` with values in ``[0, 1]``. All
randomness is drawn from an explicit :class:`torch.Generator`, so the pipeline is a
pure function of the clip and config given the seed.
"""

from __future__ import annotations

import math
import os
import re

from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import param
import torch

from PIL import Image
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .params import StitchParams

__all__ = [
    "augment_test",
    "augment_train",
    "FrameSequence",
    "read_frame_sequence",
    "sample_frames",
    "sample_indices",
    "save_stitched_png",
    "stitch_grid",
    "StitchedImage",
    "test_time_replicas",
    "train_stitch",
    "write_frame_sequence",
]

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")

_logger = param.get_logger(name="t3kit.frames")


class FrameSequence(NamedTuple):
    """A clip of ``N`` frames stacked as an ``(N, 3, H, W)`` float tensor"""

    frames: torch.Tensor
    video_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.size(0)


class StitchedImage(NamedTuple):
    """A ``(3, g * c, g * c)`` grid of tiles and the frame index behind each tile"""

    pixels: torch.Tensor
    indices: Tuple[int, ...]


def _as_sequence(seq: Union[FrameSequence, torch.Tensor]) -> FrameSequence:
    if not isinstance(seq, FrameSequence):
        seq = FrameSequence(seq)
    frames = seq.frames
    if frames.dim() != 4 or frames.size(1) != 3:
        raise ValueError(f"expected frames of shape (N, 3, H, W), got {frames.shape}")
    if frames.size(0) == 0:
        raise ValueError(f"clip '{seq.video_id}' has no frames")
    if frames.dtype == torch.uint8:
        seq = seq._replace(frames=frames.float() / 255)
    return seq


def sample_indices(
    num_frames: int,
    num_selected: int,
    generator: Optional[torch.Generator] = None,
    stratified: bool = True,
) -> List[int]:
    """Draw `num_selected` sorted frame indices from ``range(num_frames)``

    Without replacement if ``num_frames >= num_selected``. Otherwise with replacement;
    if `stratified`, every index is drawn once before the remainder is drawn at random.
    """
    if num_frames < 1:
        raise ValueError("cannot sample from an empty clip")
    if num_frames >= num_selected:
        idx = torch.randperm(num_frames, generator=generator)[:num_selected]
    else:
        _logger.debug(
            f"clip of {num_frames} frames is shorter than {num_selected}; sampling "
            "with replacement"
        )
        if stratified:
            extra = torch.randint(
                num_frames, (num_selected - num_frames,), generator=generator
            )
            idx = torch.cat([torch.arange(num_frames), extra])
        else:
            idx = torch.randint(num_frames, (num_selected,), generator=generator)
    return sorted(idx.tolist())


def sample_frames(
    seq: Union[FrameSequence, torch.Tensor],
    cfg: StitchParams,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, List[int]]:
    """Sample ``cfg.num_selected`` frames in temporal order

    Train and test paths sample the same way.

    Returns
    -------
    frames, indices
        `frames` is ``(num_selected, 3, H, W)``
    """
    seq = _as_sequence(seq)
    indices = sample_indices(
        seq.num_frames, cfg.num_selected, generator, cfg.stratified
    )
    return seq.frames[indices], indices


def _resize(frame: torch.Tensor, factor: float) -> torch.Tensor:
    if factor == 1:
        return frame
    h, w = frame.shape[-2:]
    size = [max(1, int(round(h * factor))), max(1, int(round(w * factor)))]
    return TF.resize(frame, size, antialias=True)


def _pad_to(frame: torch.Tensor, side: int) -> torch.Tensor:
    # reflection padding must be narrower than the frame, so small frames take
    # several rounds
    h, w = frame.shape[-2:]
    if h >= side and w >= side:
        return frame
    _logger.debug(f"reflection-padding a {h}x{w} frame to at least {side}x{side}")
    while h < side or w < side:
        if h == 1 or w == 1:
            frame = TF.pad(
                frame, [max(side - w, 0), max(side - h, 0), 0, 0], padding_mode="edge"
            )
            break
        ph, pw = min(max(side - h, 0), h - 1), min(max(side - w, 0), w - 1)
        # left, top, right, bottom
        padding = [pw // 2, ph // 2, pw - pw // 2, ph - ph // 2]
        frame = TF.pad(frame, padding, padding_mode="reflect")
        h, w = frame.shape[-2:]
    return frame


def _random_crop(
    frame: torch.Tensor, side: int, generator: Optional[torch.Generator]
) -> torch.Tensor:
    h, w = frame.shape[-2:]
    top = int(torch.randint(h - side + 1, (1,), generator=generator))
    left = int(torch.randint(w - side + 1, (1,), generator=generator))
    return TF.crop(frame, top, left, side, side)


def _signed(value: float, generator: Optional[torch.Generator]) -> float:
    return value if torch.rand(1, generator=generator).item() < 0.5 else -value


def _apply_op(
    frame: torch.Tensor,
    op: str,
    magnitude: float,
    generator: Optional[torch.Generator],
) -> torch.Tensor:
    if op == "hflip":
        return TF.hflip(frame)
    elif op == "brightness":
        return TF.adjust_brightness(frame, 1 + _signed(0.9 * magnitude, generator))
    elif op == "contrast":
        return TF.adjust_contrast(frame, 1 + _signed(0.9 * magnitude, generator))
    elif op == "rotate":
        return TF.rotate(
            frame,
            _signed(15.0 * magnitude, generator),
            interpolation=InterpolationMode.BILINEAR,
        )
    elif op == "translate":
        h, w = frame.shape[-2:]
        shift = [0, 0]
        axis = int(torch.randint(2, (1,), generator=generator))
        shift[axis] = int(round(_signed(0.1 * magnitude, generator) * (w, h)[axis]))
        return TF.affine(
            frame,
            angle=0.0,
            translate=shift,
            scale=1.0,
            shear=[0.0, 0.0],
            interpolation=InterpolationMode.NEAREST,
        )
    raise ValueError(f"unknown augmentation op '{op}'")


def rand_augment(
    frame: torch.Tensor, cfg: StitchParams, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Apply ``cfg.augment_num_ops`` ops drawn uniformly from ``cfg.augment_ops``"""
    ops = list(cfg.augment_ops)
    if not ops:
        return frame
    magnitude = cfg.augment_magnitude / 10
    for _ in range(cfg.augment_num_ops):
        op = ops[int(torch.randint(len(ops), (1,), generator=generator))]
        frame = _apply_op(frame, op, magnitude, generator)
    return frame.clamp(0, 1)


def augment_train(
    frame: torch.Tensor, cfg: StitchParams, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Resize by ``cfg.resize_factor``, randomly crop a ``cfg.crop_size`` square, then
    apply :func:`rand_augment`

    Frames smaller than the crop after resizing are reflection-padded to fit.
    """
    frame = _resize(frame, cfg.resize_factor)
    frame = _pad_to(frame, cfg.crop_size)
    frame = _random_crop(frame, cfg.crop_size, generator)
    return rand_augment(frame, cfg, generator)


def center_window(frame: torch.Tensor, side: int) -> Tuple[int, int]:
    """Top-left corner of the centered `side` square within `frame`"""
    h, w = frame.shape[-2:]
    return (h - side) // 2, (w - side) // 2


def augment_test(
    frame: torch.Tensor, cfg: StitchParams, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Center crop ``cfg.test_window`` then randomly crop ``cfg.crop_size``

    The frame is first resized by ``cfg.resize_factor`` if ``cfg.test_resize``. No
    photometric augmentation is applied.
    """
    if cfg.test_resize:
        frame = _resize(frame, cfg.resize_factor)
    window = cfg.test_window
    frame = _pad_to(frame, window)
    top, left = center_window(frame, window)
    frame = TF.crop(frame, top, left, window, window)
    return _random_crop(frame, cfg.crop_size, generator)


def stitch_grid(
    tiles: Union[torch.Tensor, Sequence[torch.Tensor]],
    indices: Optional[Sequence[int]] = None,
    grid_side: Optional[int] = None,
) -> StitchedImage:
    """Lay ``g * g`` square tiles out row-major into one image

    Tile ``t`` occupies rows ``(t // g) * c`` to ``(t // g + 1) * c`` and columns
    ``(t % g) * c`` to ``(t % g + 1) * c``.

    Raises
    ------
    ValueError
        If the tile count is not ``grid_side ** 2`` (or a perfect square, when
        `grid_side` is unset) or the tiles are not all ``(3, c, c)``
    """
    if not isinstance(tiles, torch.Tensor):
        tiles = list(tiles)
        if not tiles:
            raise ValueError("no tiles to stitch")
        shapes = {tuple(t.shape) for t in tiles}
        if len(shapes) != 1:
            raise ValueError(f"tiles differ in shape: {sorted(shapes)}")
        tiles = torch.stack(tiles)
    if tiles.dim() != 4 or tiles.size(1) != 3 or tiles.size(2) != tiles.size(3):
        raise ValueError(f"expected tiles of shape (T, 3, c, c), got {tiles.shape}")
    num_tiles, _, c, _ = tiles.shape
    g = math.isqrt(num_tiles) if grid_side is None else grid_side
    if g * g != num_tiles:
        raise ValueError(
            f"{num_tiles} tiles cannot fill a {g}x{g} grid"
            if grid_side is not None
            else f"{num_tiles} tiles is not a perfect square"
        )
    if indices is None:
        indices = range(num_tiles)
    indices = tuple(int(i) for i in indices)
    if len(indices) != num_tiles:
        raise ValueError(f"{len(indices)} indices for {num_tiles} tiles")
    pixels = tiles.view(g, g, 3, c, c).permute(2, 0, 3, 1, 4).reshape(3, g * c, g * c)
    return StitchedImage(pixels, indices)


def train_stitch(
    seq: Union[FrameSequence, torch.Tensor],
    cfg: StitchParams,
    generator: Optional[torch.Generator] = None,
) -> StitchedImage:
    """Sample, train-augment, and stitch one clip"""
    frames, indices = sample_frames(seq, cfg, generator)
    tiles = torch.stack([augment_train(f, cfg, generator) for f in frames])
    return stitch_grid(tiles, indices, cfg.grid_side)


def test_time_replicas(
    seq: Union[FrameSequence, torch.Tensor], cfg: StitchParams, seed: int = 0
) -> List[StitchedImage]:
    """Draw ``cfg.test_replicas`` stitched images of a clip

    Replica ``i`` re-samples frames and crops with a generator seeded by ``seed + i``.
    """
    seq = _as_sequence(seq)
    replicas = []
    for i in range(cfg.test_replicas):
        generator = torch.Generator().manual_seed(seed + i)
        frames, indices = sample_frames(seq, cfg, generator)
        tiles = torch.stack([augment_test(f, cfg, generator) for f in frames])
        replicas.append(stitch_grid(tiles, indices, cfg.grid_side))
    return replicas


def _frame_number(fname: str) -> int:
    match = re.search(r"(\d+)", os.path.splitext(fname)[0])
    return int(match.group(1)) if match else -1


def read_frame_sequence(
    dir_: Union[str, os.PathLike], video_id: Optional[str] = None
) -> FrameSequence:
    """Load a directory of numbered PNG/JPEG frames into a :class:`FrameSequence`

    Frames are ordered by the first number in their file names.
    """
    try:
        fnames = [
            f
            for f in os.listdir(dir_)
            if os.path.splitext(f)[1].lower() in FRAME_SUFFIXES
        ]
    except OSError as e:
        raise OSError(f"could not list frames in '{dir_}': {e}") from e
    if not fnames:
        raise ValueError(f"no frames in '{dir_}'")
    fnames.sort(key=lambda f: (_frame_number(f), f))
    frames = []
    for fname in fnames:
        with Image.open(os.path.join(dir_, fname)) as img:
            frames.append(TF.to_tensor(img.convert("RGB")))
    if video_id is None:
        video_id = os.path.basename(os.path.normpath(dir_))
    return FrameSequence(torch.stack(frames), video_id)


def _to_uint8(pixels: torch.Tensor) -> torch.Tensor:
    return (pixels.clamp(0, 1) * 255).round().to(torch.uint8)


def write_frame_sequence(
    seq: Union[FrameSequence, torch.Tensor], dir_: Union[str, os.PathLike]
) -> None:
    """Write frames as zero-padded PNGs (``000000.png``, ...) in `dir_`"""
    seq = _as_sequence(seq)
    os.makedirs(dir_, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        TF.to_pil_image(_to_uint8(frame)).save(os.path.join(dir_, f"{i:06d}.png"))


def save_stitched_png(
    image: Union[StitchedImage, torch.Tensor], path: Union[str, os.PathLike]
) -> None:
    """Dump a stitched image as an 8-bit PNG"""
    pixels = image.pixels if isinstance(image, StitchedImage) else image
    TF.to_pil_image(_to_uint8(pixels)).save(path)
