"""Segmentation backends for the adapter: a deterministic stub and a
checkpoint-backed MedSAM runner."""

from __future__ import annotations

import threading

import numpy as np


class StubModel:
    """Protocol-conformance stand-in: the mask is exactly the filled request
    box, confidence is fixed at 0.5."""

    name = "stub"

    def segment(self, pixels: np.ndarray, box: tuple[int, int, int, int]) -> tuple[np.ndarray, float]:
        x0, y0, x1, y1 = box
        mask = np.zeros(pixels.shape, dtype=bool)
        mask[y0:y1, x0:x1] = True
        return mask, 0.5


class MedSamModel:
    """Box-prompt inference over a released MedSAM (SAM vit_b) checkpoint.

    Inference is serialized behind a lock; the checkpoint path is not
    reentrant. The wire protocol's half-open pixel boxes map directly to
    continuous corner coordinates, which is what the prompt encoder expects.
    Mask probabilities are thresholded at 0.5.
    """

    name = "medsam"

    def __init__(self, checkpoint: str, device: str = "cpu"):
        try:
            import torch
            from segment_anything import sam_model_registry
        except ImportError as e:  # pragma: no cover - requires optional deps
            raise RuntimeError(
                "checkpoint mode needs the optional model dependencies; "
                "install with `pip install medsam-adapter[model]`"
            ) from e
        self._torch = torch
        self._model = sam_model_registry["vit_b"](checkpoint=checkpoint)
        self._model.to(device)
        self._model.eval()
        self._device = device
        self._lock = threading.Lock()

    def segment(self, pixels: np.ndarray, box: tuple[int, int, int, int]) -> tuple[np.ndarray, float]:
        torch = self._torch
        h, w = pixels.shape
        rgb = np.repeat(pixels[None, :, :], 3, axis=0).astype(np.float32)
        with self._lock, torch.no_grad():
            img = torch.from_numpy(rgb)[None].to(self._device)
            img_1024 = torch.nn.functional.interpolate(
                img, size=(1024, 1024), mode="bilinear", align_corners=False
            )
            embedding = self._model.image_encoder(img_1024)
            scale = np.array([1024.0 / w, 1024.0 / h, 1024.0 / w, 1024.0 / h])
            box_1024 = np.asarray(box, dtype=np.float64) * scale
            box_t = torch.as_tensor(box_1024, dtype=torch.float32, device=self._device)[None, None]
            sparse, dense = self._model.prompt_encoder(points=None, boxes=box_t, masks=None)
            low_res, iou_pred = self._model.mask_decoder(
                image_embeddings=embedding,
                image_pe=self._model.prompt_encoder.get_dense_pe(),
                sparse_prompt_embeddings=sparse,
                dense_prompt_embeddings=dense,
                multimask_output=False,
            )
            probs = torch.sigmoid(low_res)
            full = torch.nn.functional.interpolate(
                probs, size=(h, w), mode="bilinear", align_corners=False
            )
            mask = (full[0, 0] > 0.5).cpu().numpy()
            confidence = float(np.clip(iou_pred.reshape(-1)[0].cpu().numpy(), 0.0, 1.0))
        return mask, confidence


def build_model(checkpoint: str | None, device: str, stub_mode: bool):
    if stub_mode or checkpoint is None:
        return StubModel()
    return MedSamModel(checkpoint, device)
