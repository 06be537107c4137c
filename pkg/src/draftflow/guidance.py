"""Classifier-free guidance composition over the condition lattice.

The conditioning input of the velocity net is built from three slots
(prompt embedding p, draft semantic features vit, verification embedding v)
plus a categorical mode flag.  Absent slots are rendered as fixed non-zero
null embeddings so that "unconditional" is a distinct, trained input mode.

Three guidance variants are implemented, all costing exactly three network
evaluations per call:

* ``nested``: one-round guidance with nested contexts,
      u + s_draft * (d - u) + s_text * (f - d)
  where u, d, f are the unconditional, draft-only and fully-conditioned
  passes.  At scales (1, 1) the sum telescopes to the full pass.

* ``sequential``: two chained single-condition rounds,
      m' = M + s_text * (M - M_text),   out = m' + s_img * (m' - M_img)
  with M_text the image-only pass and M_img the prompt-only pass.

* ``expanded``: the algebraic expansion of ``sequential`` in a single pass,
      (1+s_text)(1+s_img) M - s_text(1+s_img) M_text - s_img M_img.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import hashed_vector
from .errors import ConfigError, IncompleteBundleError
from .flowcore import velocity

PROMPT_DIM = 48
VIT_DIM = 64
VERIFICATION_DIM = 64
MODES = ("uncond", "draft_only", "full")
MODE_DIM = len(MODES)
VARIANTS = ("none", "nested", "sequential", "expanded")


def null_embedding(slot: str, dim: int) -> np.ndarray:
    """The fixed null vector standing in for an absent condition slot."""
    return hashed_vector(f"null|{slot}", dim)


@dataclass(frozen=True)
class ConditionBundle:
    """The (p, vit, v) condition triple; ``None`` marks an absent slot."""

    p: Optional[np.ndarray] = None
    vit: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    vit_dim: int = VIT_DIM  # slot width when vit is absent

    def __post_init__(self):
        if self.p is not None and len(self.p) != PROMPT_DIM:
            raise ConfigError(f"prompt embedding must have dim {PROMPT_DIM}")
        if self.v is not None and len(self.v) != VERIFICATION_DIM:
            raise ConfigError(f"verification embedding must have dim {VERIFICATION_DIM}")
        if self.vit is not None and len(self.vit) != self.vit_dim:
            object.__setattr__(self, "vit_dim", len(self.vit))

    def keep(self, slots) -> "ConditionBundle":
        """Bundle with only the named slots present (condition dropout)."""
        return ConditionBundle(
            p=self.p if "p" in slots else None,
            vit=self.vit if "vit" in slots else None,
            v=self.v if "v" in slots else None,
            vit_dim=self.vit_dim,
        )


def cond_dim(vit_dim: int = VIT_DIM) -> int:
    return PROMPT_DIM + vit_dim + VERIFICATION_DIM + MODE_DIM


def infer_mode(bundle: ConditionBundle) -> str:
    present = [s for s, val in (("p", bundle.p), ("vit", bundle.vit), ("v", bundle.v)) if val is not None]
    if not present:
        return "uncond"
    if present == ["vit"]:
        return "draft_only"
    return "full"


def bundle_vector(bundle: ConditionBundle, mode: Optional[str] = None) -> np.ndarray:
    """Render a bundle to the flat conditioning vector fed to the network."""
    if mode is None:
        mode = infer_mode(bundle)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    flag = np.zeros(MODE_DIM)
    flag[MODES.index(mode)] = 1.0
    return np.concatenate([
        bundle.p if bundle.p is not None else null_embedding("p", PROMPT_DIM),
        bundle.vit if bundle.vit is not None else null_embedding("vit", bundle.vit_dim),
        bundle.v if bundle.v is not None else null_embedding("v", VERIFICATION_DIM),
        flag,
    ])


@dataclass
class GuidanceSpec:
    """Guidance variant, scales and condition bundle for sampling."""

    variant: str
    bundle: ConditionBundle
    s_draft: float = 0.0
    s_text: float = 0.0
    s_img: float = 0.0
    uncond_mode: str = "uncond"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown guidance variant {self.variant!r}")
        for name in ("s_draft", "s_text", "s_img"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")


def _require(bundle, slots, variant):
    for s in slots:
        if getattr(bundle, s) is None:
            raise IncompleteBundleError(f"{variant} guidance needs the {s!r} slot")


def nested_cfg(net, x_t, t, bundle, s_draft, s_text, uncond_mode="uncond"):
    """One-round nested guidance over uncond / draft-only / full contexts.

    The draft slot is mandatory whenever its scale is live; with
    ``s_draft == 0`` the draft term drops out and the call degenerates to
    plain text-conditional guidance, which is how prompt-only sketching
    samples.
    """
    if bundle.vit is None and s_draft != 0.0:
        raise IncompleteBundleError("nested guidance needs the 'vit' slot")
    u = velocity(net, x_t, t, bundle_vector(bundle.keep(()), mode=uncond_mode))
    d = velocity(net, x_t, t, bundle_vector(bundle.keep(("vit",))))
    f = velocity(net, x_t, t, bundle_vector(bundle))
    return u + s_draft * (d - u) + s_text * (f - d)


def sequential_cfg(net, x_t, t, bundle, s_text, s_img):
    """Two chained guidance rounds: text round first, then image round."""
    _require(bundle, ("p", "vit", "v"), "sequential")
    m_full = velocity(net, x_t, t, bundle_vector(bundle))
    m_text_dropped = velocity(net, x_t, t, bundle_vector(bundle.keep(("vit",))))
    m_img_dropped = velocity(net, x_t, t, bundle_vector(bundle.keep(("p",))))
    m_prime = m_full + s_text * (m_full - m_text_dropped)
    return m_prime + s_img * (m_prime - m_img_dropped)


def expanded_coefficients(s_text, s_img):
    """Coefficients (full, text-dropped, img-dropped) of the expanded form."""
    return (
        (1.0 + s_text) * (1.0 + s_img),
        -s_text * (1.0 + s_img),
        -s_img,
    )


def expanded_cfg(net, x_t, t, bundle, s_text, s_img):
    """Single-pass algebraic expansion of :func:`sequential_cfg`."""
    _require(bundle, ("p", "vit", "v"), "expanded")
    m_full = velocity(net, x_t, t, bundle_vector(bundle))
    m_text_dropped = velocity(net, x_t, t, bundle_vector(bundle.keep(("vit",))))
    m_img_dropped = velocity(net, x_t, t, bundle_vector(bundle.keep(("p",))))
    c_full, c_text, c_img = expanded_coefficients(s_text, s_img)
    return c_full * m_full + c_text * m_text_dropped + c_img * m_img_dropped


def guided_velocity(net, x_t, t, spec: GuidanceSpec):
    """Dispatch to the configured guidance variant."""
    if spec.variant == "none":
        return velocity(net, x_t, t, bundle_vector(spec.bundle))
    if spec.variant == "nested":
        return nested_cfg(
            net, x_t, t, spec.bundle, spec.s_draft, spec.s_text, spec.uncond_mode
        )
    if spec.variant == "sequential":
        return sequential_cfg(net, x_t, t, spec.bundle, spec.s_text, spec.s_img)
    if spec.variant == "expanded":
        return expanded_cfg(net, x_t, t, spec.bundle, spec.s_text, spec.s_img)
    raise ConfigError(f"unknown guidance variant {spec.variant!r}")


def text_only_spec(bundle: ConditionBundle, s_text: float) -> GuidanceSpec:
    """Prompt-only guidance used for sketching and the direct baseline."""
    return GuidanceSpec(
        variant="nested", bundle=bundle.keep(("p",)), s_draft=0.0, s_text=s_text
    )
