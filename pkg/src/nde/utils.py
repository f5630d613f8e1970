"""numpy <-> torch bridging and small shared helpers."""

import numpy as np
import torch


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HxWxC [0,1] array -> 1xCxHxW tensor."""
    if img.ndim == 2:
        img = img[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))
    return t.unsqueeze(0).to(dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """1xCxHxW or CxHxW tensor -> HxWxC float64 array clipped to [0,1]."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("expected a single-image tensor, got batch %d" % t.shape[0])
        t = t[0]
    arr = t.detach().cpu().numpy().astype(np.float64).transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


def stack_images(imgs, dtype=torch.float32) -> torch.Tensor:
    """List of HxWxC arrays (same shape) -> BxCxHxW tensor."""
    return torch.cat([image_to_tensor(im, dtype) for im in imgs], dim=0)


def pad_to_multiple(t: torch.Tensor, multiple: int):
    """Reflect-pad BxCxHxW so H and W divide `multiple`; returns (padded, (H, W)).

    Falls back to replicate padding when the image is too small to reflect.
    """
    h, w = t.shape[-2], t.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        t = torch.nn.functional.pad(t, (0, pw, 0, ph), mode=mode)
    return t, (h, w)


def crop_to(t: torch.Tensor, size) -> torch.Tensor:
    h, w = size
    return t[..., :h, :w]


def state_dict_digest(state_dict) -> str:
    """Order-independent content hash of named tensors (bitwise)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(state_dict[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
