"""Three-stage generation (sketch, verify, refine) and the training loops.

Stage one samples a low-resolution draft conditioned on the prompt alone.
Stage two runs a trained verifier head over the prompt embedding and the
draft's semantic features to produce a structured verification record.
Stage three samples the final high-resolution image under nested guidance
conditioned on the prompt, the draft features and the verification encoding.

Because a fixed-width dense network cannot consume two image sizes, the
generative model is a pair of velocity nets, one per resolution, behind a
single FlowModel object.  Training is joint: flow-matching regression on the
image targets plus cross-entropy on the verifier head.  Per draft-bearing
sample the conditioning is subject to two dropout draws: all conditions
nulled (unconditional mode), or only the draft features kept, in which case
the regression target switches to the high-resolution render of the draft's
own scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import datagen, scenes
from .basis import sum_vectors
from .datagen import CorrectionOp, VerificationRecord, encode_verification
from .errors import ConfigError, EmptyBatchError, ModelStateError
from .flowcore import (
    MomentumState,
    VelocityNet,
    gate_features,
    init_model,
    mlp_backward,
    mlp_forward,
    time_embedding,
    train_step,
    warmup_lr,
)
from .guidance import (
    VARIANTS,
    VIT_DIM,
    ConditionBundle,
    bundle_vector,
    cond_dim,
)
from .scenes import DRAFT_RES, FINAL_RES, PromptSpec, encode_prompt

PIXEL_DIM = 144  # 12x12 grayscale raw-pixel channel (ablation only)
RESOLUTIONS = (8, 24, 96)


def to_flow_space(img: np.ndarray) -> np.ndarray:
    """Images are regressed in contrast-centered space [-1, 1]: against the
    standard-Gaussian source the doubled object contrast is what makes the
    velocity field commit to scenes instead of averaging them."""
    return 2.0 * img - 1.0


def from_flow_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# draft features
# ---------------------------------------------------------------------------

def detect_draft(draft: np.ndarray) -> list:
    """Confident object tuples in a draft at any supported resolution;
    resolution-8 drafts are upsampled to 24 before detection."""
    res = draft.shape[0]
    if res == 8:
        draft = scenes.upsample(draft, 3)
    elif res not in (DRAFT_RES, FINAL_RES):
        raise ConfigError(f"unsupported draft resolution {res}")
    return scenes.confident_objects(scenes.detect(draft))


def semantic_features(draft: np.ndarray) -> np.ndarray:
    """Frozen semantic embedding of a draft: detect, then sum the frozen
    per-object basis vectors."""
    objs = detect_draft(draft)
    return sum_vectors((f"draftobj|{o!r}" for o in sorted(objs)), VIT_DIM)


def _pixel_features(draft: np.ndarray) -> np.ndarray:
    gray = draft.mean(axis=2)
    if gray.shape[0] == 8:
        gray = np.repeat(np.repeat(gray, 3, axis=0), 3, axis=1)
    f = gray.shape[0] // 12
    return gray.reshape(12, f, 12, f).mean(axis=(1, 3)).ravel()


@dataclass(frozen=True)
class DraftEncoder:
    """Frozen draft featurizer; the raw-pixel channel exists only in the
    ablation mode and only changes the output length."""

    include_pixels: bool = False

    @property
    def out_dim(self) -> int:
        return VIT_DIM + (PIXEL_DIM if self.include_pixels else 0)

    def encode(self, draft: np.ndarray) -> np.ndarray:
        sem = semantic_features(draft)
        if not self.include_pixels:
            return sem
        return np.concatenate([sem, _pixel_features(draft)])


# ---------------------------------------------------------------------------
# verifier head
# ---------------------------------------------------------------------------

_FIELD_ORDER = ("shape", "color", "cell", "size", "new_color", "dest_cell", "other_cell")
_FIELD_VOCAB = {
    "shape": scenes.SHAPES,
    "color": scenes.COLOR_NAMES,
    "cell": tuple(range(scenes.N_CELLS)),
    "size": scenes.SIZES,
    "new_color": scenes.COLOR_NAMES,
    "dest_cell": tuple(range(scenes.N_CELLS)),
    "other_cell": tuple(range(scenes.N_CELLS)),
}
_FIELDS_BY_KIND = {
    "none": (),
    "recolor": ("shape", "color", "cell", "new_color"),
    "add": ("shape", "color", "cell", "size"),
    "remove": ("shape", "color", "cell"),
    "move": ("shape", "color", "cell", "dest_cell"),
    "swap": ("shape", "color", "cell", "other_cell"),
}

_OP_SLOT_DIM = len(datagen.OP_KINDS) + sum(len(_FIELD_VOCAB[f]) for f in _FIELD_ORDER)
HEAD_IN_DIM = scenes.PROMPT_DIM + VIT_DIM
HEAD_OUT_DIM = 1 + scenes.MAX_CONSTRAINTS + datagen.MAX_OPS * _OP_SLOT_DIM
HEAD_WIDTH = 128


def _op_slot_offsets(slot: int) -> dict:
    base = 1 + scenes.MAX_CONSTRAINTS + slot * _OP_SLOT_DIM
    offsets = {"kind": (base, base + len(datagen.OP_KINDS))}
    pos = base + len(datagen.OP_KINDS)
    for f in _FIELD_ORDER:
        offsets[f] = (pos, pos + len(_FIELD_VOCAB[f]))
        pos += len(_FIELD_VOCAB[f])
    return offsets


@dataclass
class VerifierHead:
    """Dense network from [prompt embedding ++ draft features] to the
    structured verification logits."""

    weights: list = field(repr=False)
    biases: list = field(repr=False)

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_head(seed) -> VerifierHead:
    dims = [HEAD_IN_DIM, HEAD_WIDTH, HEAD_WIDTH, HEAD_OUT_DIM]
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return VerifierHead(ws, bs)


def head_input(prompt: PromptSpec, draft: np.ndarray) -> np.ndarray:
    return np.concatenate([encode_prompt(prompt), semantic_features(draft)])


def verification_targets(record: VerificationRecord, prompt: PromptSpec) -> dict:
    """Per-slot targets/masks for the verifier cross-entropy."""
    nc = len(prompt.constraints)
    findings = np.zeros(scenes.MAX_CONSTRAINTS)
    findings_mask = np.zeros(scenes.MAX_CONSTRAINTS)
    findings[:nc] = [1.0 if f else 0.0 for f in record.findings[:nc]]
    findings_mask[:nc] = 1.0
    kinds, fields = [], []
    for slot in range(datagen.MAX_OPS):
        if slot < len(record.ops):
            op = record.ops[slot]
            kinds.append(datagen.OP_KINDS.index(op.kind))
            fields.append(
                {f: _FIELD_VOCAB[f].index(getattr(op, f)) for f in _FIELDS_BY_KIND[op.kind]}
            )
        else:
            kinds.append(datagen.OP_KINDS.index("none"))
            fields.append({})
    return {
        "aligned": 1.0 if record.aligned else 0.0,
        "findings": findings,
        "findings_mask": findings_mask,
        "kinds": kinds,
        "fields": fields,
    }


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _bce(z, y):
    # numerically stable binary cross entropy on a logit
    return max(z, 0.0) - z * y + math.log1p(math.exp(-abs(z)))


def _softmax_ce(z, k):
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return lse - z[k], np.exp(z - lse)


def head_loss_and_grads(head: VerifierHead, x: np.ndarray, targets: list):
    """Mean cross-entropy over active record slots, with gradients."""
    logits, caches = mlp_forward(head.weights, head.biases, x)
    d_logits = np.zeros_like(logits)
    total, n_active = 0.0, 0
    for b, t in enumerate(targets):
        z = logits[b]
        total += _bce(z[0], t["aligned"])
        d_logits[b, 0] = _sigmoid(z[0]) - t["aligned"]
        n_active += 1
        for i in range(scenes.MAX_CONSTRAINTS):
            if t["findings_mask"][i] == 0.0:
                continue
            zi = z[1 + i]
            total += _bce(zi, t["findings"][i])
            d_logits[b, 1 + i] = _sigmoid(zi) - t["findings"][i]
            n_active += 1
        for slot in range(datagen.MAX_OPS):
            offs = _op_slot_offsets(slot)
            lo, hi = offs["kind"]
            ce, probs = _softmax_ce(z[lo:hi], t["kinds"][slot])
            total += ce
            d_logits[b, lo:hi] = probs
            d_logits[b, lo + t["kinds"][slot]] -= 1.0
            n_active += 1
            for f, k in t["fields"][slot].items():
                lo, hi = offs[f]
                ce, probs = _softmax_ce(z[lo:hi], k)
                total += ce
                d_logits[b, lo:hi] = probs
                d_logits[b, lo + k] -= 1.0
                n_active += 1
    loss = total / n_active
    d_ws, d_bs, _ = mlp_backward(head.weights, caches, d_logits / n_active)
    grads = []
    for dw, db in zip(d_ws, d_bs):
        grads.append(dw)
        grads.append(db)
    return loss, grads


def verifier_loss(head: VerifierHead, x: np.ndarray, targets: list) -> float:
    loss, _ = head_loss_and_grads(head, x, targets)
    return loss


def decode_verification(logits: np.ndarray, prompt: PromptSpec) -> VerificationRecord:
    """Argmax decode; an aligned verdict forces an empty op list."""
    nc = len(prompt.constraints)
    findings = tuple(bool(logits[1 + i] > 0.0) for i in range(nc))
    aligned = bool(logits[0] > 0.0)
    ops = []
    if not aligned:
        for slot in range(datagen.MAX_OPS):
            offs = _op_slot_offsets(slot)
            lo, hi = offs["kind"]
            kind = datagen.OP_KINDS[int(np.argmax(logits[lo:hi]))]
            if kind == "none":
                continue
            kwargs = {}
            for f in _FIELDS_BY_KIND[kind]:
                flo, fhi = offs[f]
                kwargs[f] = _FIELD_VOCAB[f][int(np.argmax(logits[flo:fhi]))]
            ops.append(CorrectionOp(kind, **kwargs))
    if aligned or not ops:
        # never emit the contradictory (misaligned, no ops) combination
        return VerificationRecord(True, findings, ())
    return VerificationRecord(False, findings, tuple(ops))


def verify(head: VerifierHead, prompt: PromptSpec, draft: np.ndarray) -> VerificationRecord:
    """Stage two: predict the verification record for a draft."""
    x = head_input(prompt, draft)[None, :]
    logits, _ = mlp_forward(head.weights, head.biases, x)
    return decode_verification(logits[0], prompt)


# ---------------------------------------------------------------------------
# model bundle and configuration
# ---------------------------------------------------------------------------

@dataclass
class FlowModel:
    """The two-resolution generative model plus its frozen draft encoder."""

    net_draft: VelocityNet
    net_final: VelocityNet
    encoder: DraftEncoder
    draft_res: int = DRAFT_RES
    final_res: int = FINAL_RES


@dataclass
class PipelineConfig:
    draft_res: int = DRAFT_RES
    final_res: int = FINAL_RES
    s_draft: float = 2.0
    s_text: float = 6.0
    sampler_steps: int = 50
    cfg_variant: str = "nested"
    vae_input: bool = False
    p_uncond: float = 0.05
    p_draft_only: float = 0.05
    width: int = 256
    train_steps: int = 3000
    pretrain_steps: int = 600
    batch_size: int = 16
    lr: float = 0.02
    head_lr: float = 0.2
    warmup_frac: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.draft_res not in RESOLUTIONS or self.final_res not in RESOLUTIONS:
            raise ConfigError(f"resolutions must be in {RESOLUTIONS}")
        for name in ("p_uncond", "p_draft_only"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.p_uncond + self.p_draft_only > 1.0:
            raise ConfigError("dropout probabilities must sum to at most 1")
        if self.cfg_variant not in VARIANTS:
            raise ConfigError(f"cfg_variant must be one of {VARIANTS}")
        if self.sampler_steps < 1 or self.train_steps < 0 or self.batch_size < 1:
            raise ConfigError("steps and batch size must be positive")


def init_pipeline(cfg: PipelineConfig):
    """Fresh (FlowModel, VerifierHead) deterministic in cfg.seed."""
    encoder = DraftEncoder(include_pixels=cfg.vae_input)
    net_draft = init_model(
        cfg.width, (cfg.draft_res, cfg.draft_res, 3), cond_dim(VIT_DIM), seed=[cfg.seed, 11]
    )
    net_final = init_model(
        cfg.width,
        (cfg.final_res, cfg.final_res, 3),
        cond_dim(encoder.out_dim),
        seed=[cfg.seed, 12],
    )
    head = init_head(seed=[cfg.seed, 13])
    return FlowModel(net_draft, net_final, encoder, cfg.draft_res, cfg.final_res), head


def _check_model_state(net: VelocityNet):
    for p in net.params():
        if not math.isfinite(float(np.sum(p))):
            raise ModelStateError("velocity net has non-finite weights")


# ---------------------------------------------------------------------------
# inference stages
# ---------------------------------------------------------------------------

def sketch_draft(model: FlowModel, prompt: PromptSpec, cfg: PipelineConfig, seed):
    """Stage one: prompt-only sampling at draft resolution with text guidance."""
    _check_model_state(model.net_draft)
    shape = (model.draft_res, model.draft_res, 3)
    return sample_prompt_only_batch(
        model.net_draft, [encode_prompt(prompt)], VIT_DIM,
        cfg.s_text, shape, cfg.sampler_steps, [seed],
    )[0]


def refine(model: FlowModel, prompt: PromptSpec, draft: np.ndarray,
           verification: VerificationRecord, cfg: PipelineConfig, seed):
    """Stage three: guided sampling at final resolution, conditioned on the
    prompt, the draft features and the verification encoding."""
    if draft.shape[0] != model.draft_res:
        raise ConfigError(
            f"draft resolution {draft.shape[0]} != configured {model.draft_res}"
        )
    _check_model_state(model.net_final)
    bundle = ConditionBundle(
        p=encode_prompt(prompt),
        vit=model.encoder.encode(draft),
        v=encode_verification(verification),
    )
    shape = (model.final_res, model.final_res, 3)
    return sample_refine_batch(model.net_final, [bundle], cfg, shape, [seed])[0]


@dataclass
class PipelineResult:
    draft: np.ndarray
    verification: VerificationRecord
    final: np.ndarray
    scores: scenes.ScoreReport


def run_pipeline(model: FlowModel, head: VerifierHead, prompt: PromptSpec,
                 cfg: PipelineConfig, seed) -> PipelineResult:
    """Chain the three stages and score the final image against the prompt."""
    base = [int(seed)] if np.isscalar(seed) else list(seed)
    draft = sketch_draft(model, prompt, cfg, base + [1])
    record = verify(head, prompt, draft)
    final = refine(model, prompt, draft, record, cfg, base + [2])
    return PipelineResult(draft, record, final, scenes.score(final, prompt))


def direct_generate(model: FlowModel, prompt: PromptSpec, cfg: PipelineConfig, seed):
    """One-pass prompt-only generation at final resolution (the baseline)."""
    _check_model_state(model.net_final)
    shape = (model.final_res, model.final_res, 3)
    return sample_prompt_only_batch(
        model.net_final, [encode_prompt(prompt)], model.encoder.out_dim,
        cfg.s_text, shape, cfg.sampler_steps, [seed],
    )[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def sample_dropout_mode(rng, p_uncond: float, p_draft_only: float) -> str:
    """Draw the conditioning mode for one training sample."""
    u = rng.random()
    if u < p_uncond:
        return "uncond"
    if u < p_uncond + p_draft_only:
        return "draft_only"
    return "full"


@dataclass
class _Prepared:
    sample: datagen.TrainSample
    p_emb: np.ndarray
    net: str  # "draft" or "final"
    vit: Optional[np.ndarray] = None
    sem: Optional[np.ndarray] = None
    v_enc: Optional[np.ndarray] = None
    draft_hi: Optional[np.ndarray] = None
    head_targets: Optional[dict] = None


def _prepare(model: FlowModel, dataset) -> list:
    prepared = []
    for s in dataset:
        pr = _Prepared(
            sample=s,
            p_emb=encode_prompt(s.prompt),
            net="draft" if s.category == "t2i_low" else "final",
        )
        if s.draft is not None:
            pr.vit = model.encoder.encode(s.draft)
            pr.sem = semantic_features(s.draft)
            pr.draft_hi = scenes.render(s.scene_draft, model.final_res)
        if s.verification is not None:
            pr.v_enc = encode_verification(s.verification)
            pr.head_targets = verification_targets(s.verification, s.prompt)
        prepared.append(pr)
    return prepared


def _training_cond(pr: _Prepared, mode: str, vit_dim: int):
    if mode == "uncond":
        bundle = ConditionBundle(vit_dim=vit_dim)
        return bundle_vector(bundle, mode="uncond")
    if mode == "draft_only":
        return bundle_vector(ConditionBundle(vit=pr.vit, vit_dim=vit_dim))
    return bundle_vector(
        ConditionBundle(p=pr.p_emb, vit=pr.vit, v=pr.v_enc, vit_dim=vit_dim)
    )


@dataclass
class TrainReport:
    rows: list
    dropout_counts: dict
    updates: int


def train_pipeline(model: FlowModel, head: VerifierHead, dataset, cfg: PipelineConfig,
                   log_every: int = 25) -> TrainReport:
    """Joint training loop over flow targets and verifier records."""
    if len(dataset) == 0:
        raise EmptyBatchError("training needs a non-empty dataset")
    prepared = _prepare(model, dataset)
    head_idx = [i for i, pr in enumerate(prepared) if pr.head_targets is not None]
    rng = np.random.default_rng([cfg.seed, 101])
    nets = {"draft": model.net_draft, "final": model.net_final}
    vit_dims = {"draft": VIT_DIM, "final": model.encoder.out_dim}
    mom = {
        "draft": MomentumState.for_net(model.net_draft, cfg.momentum),
        "final": MomentumState.for_net(model.net_final, cfg.momentum),
        "head": MomentumState([np.zeros_like(p) for p in head.params()], cfg.momentum),
    }
    counts = {"uncond": 0, "draft_only": 0, "full": 0}
    rows = []
    update = 0
    head_cursor = 0
    head_order = []
    queues = {"draft": [], "final": []}

    def flush(net_tag):
        nonlocal update
        batch = []
        for i in queues[net_tag]:
            pr = prepared[i]
            if pr.sample.draft is not None:
                mode = sample_dropout_mode(rng, cfg.p_uncond, cfg.p_draft_only)
            else:
                mode = "uncond" if rng.random() < cfg.p_uncond else "full"
            counts[mode] += 1
            target = pr.draft_hi if mode == "draft_only" else pr.sample.target
            cond = _training_cond(pr, mode, vit_dims[net_tag])
            t = rng.random()
            x0 = rng.standard_normal(target.shape)
            batch.append((x0, to_flow_space(target), t, cond))
        queues[net_tag] = []
        lr = warmup_lr(update, cfg.lr, cfg.train_steps, cfg.warmup_frac)
        _, loss, _ = train_step(nets[net_tag], batch, lr, mom[net_tag])
        if update % log_every == 0 or update == cfg.train_steps - 1:
            rows.append(
                {"update": update, "component": f"flow_{net_tag}", "loss": loss, "lr": lr}
            )
        update += 1

    def head_update():
        nonlocal head_cursor, head_order
        if not head_idx:
            return
        take = min(cfg.batch_size * 2, len(head_idx))
        chosen = []
        while len(chosen) < take:
            if head_cursor == 0:
                head_order = list(rng.permutation(head_idx))
            chosen.append(head_order[head_cursor])
            head_cursor = (head_cursor + 1) % len(head_order)
        x = np.stack([np.concatenate([prepared[i].p_emb, prepared[i].sem]) for i in chosen])
        targets = [prepared[i].head_targets for i in chosen]
        loss, grads = head_loss_and_grads(head, x, targets)
        lr = warmup_lr(update, cfg.head_lr, cfg.train_steps, cfg.warmup_frac)
        for p, buf, g in zip(head.params(), mom["head"].buffers, grads):
            buf *= cfg.momentum
            buf += g
            p -= lr * buf
        if update % log_every == 0 or update == cfg.train_steps - 1:
            rows.append({"update": update, "component": "verifier", "loss": loss, "lr": lr})

    while update < cfg.train_steps:
        order = rng.permutation(len(prepared))
        for i in order:
            queues[prepared[i].net].append(int(i))
            tag = prepared[i].net
            if len(queues[tag]) >= cfg.batch_size:
                head_update()
                flush(tag)
                if update >= cfg.train_steps:
                    break
        else:
            for tag in ("draft", "final"):
                if queues[tag] and update < cfg.train_steps:
                    head_update()
                    flush(tag)
            continue
        break
    return TrainReport(rows, counts, update)


def pretrain_lowres(model: FlowModel, dataset, cfg: PipelineConfig,
                    log_every: int = 25) -> TrainReport:
    """Prompt-only pretraining on a 50/50 alternation of draft-resolution and
    final-resolution renders of the dataset's scenes."""
    if len(dataset) == 0:
        raise EmptyBatchError("pretraining needs a non-empty dataset")
    scene_pool = [(s.scene_target, encode_prompt(s.prompt)) for s in dataset]
    rng = np.random.default_rng([cfg.seed, 202])
    mom = {
        "draft": MomentumState.for_net(model.net_draft, cfg.momentum),
        "final": MomentumState.for_net(model.net_final, cfg.momentum),
    }
    res_mix = {"draft": 0, "final": 0}
    counts = {"uncond": 0, "draft_only": 0, "full": 0}
    rows = []
    render_cache = {}
    for update in range(cfg.pretrain_steps):
        tag = "draft" if update % 2 == 0 else "final"
        net = model.net_draft if tag == "draft" else model.net_final
        res = model.draft_res if tag == "draft" else model.final_res
        vit_dim = VIT_DIM if tag == "draft" else model.encoder.out_dim
        batch = []
        for _ in range(cfg.batch_size):
            scene, p_emb = scene_pool[int(rng.integers(0, len(scene_pool)))]
            key = (scene.key(), res)
            if key not in render_cache:
                render_cache[key] = scenes.render(scene, res)
            target = render_cache[key]
            if rng.random() < cfg.p_uncond:
                counts["uncond"] += 1
                cond = bundle_vector(ConditionBundle(vit_dim=vit_dim), mode="uncond")
            else:
                counts["full"] += 1
                cond = bundle_vector(ConditionBundle(p=p_emb, vit_dim=vit_dim))
            batch.append(
                (rng.standard_normal(target.shape), to_flow_space(target), rng.random(), cond)
            )
        res_mix[tag] += cfg.batch_size
        lr = warmup_lr(update, cfg.lr, cfg.pretrain_steps, cfg.warmup_frac)
        _, loss, _ = train_step(net, batch, lr, mom[tag])
        if update % log_every == 0 or update == cfg.pretrain_steps - 1:
            rows.append(
                {"update": update, "component": f"pretrain_{tag}", "loss": loss, "lr": lr}
            )
    return TrainReport(rows, {"res_mix": res_mix, **counts}, cfg.pretrain_steps)


# ---------------------------------------------------------------------------
# batched evaluation
# ---------------------------------------------------------------------------

def _noise_for(seeds, shape):
    return np.stack(
        [np.random.default_rng(s).standard_normal(shape).ravel() for s in seeds]
    )


def _sample_many(net: VelocityNet, ctx_rows: np.ndarray, combine, shape, steps, seeds):
    """Euler-integrate many prompts at once.

    ``ctx_rows`` is (k, N, cond_dim): k conditioning contexts per prompt.
    ``combine`` maps the (k, N, D) velocity stack to the guided (N, D)
    velocity.  Splits the first layer so the noisy-image projection is done
    once per prompt instead of once per context.
    """
    n = len(seeds)
    d = net.data_dim
    k = ctx_rows.shape[0]
    w1 = net.weights[0]
    w1_x = w1[:d]
    w1_t = w1[d : d + time_embedding(0.0).shape[1]]
    w1_c = w1[d + time_embedding(0.0).shape[1] :]
    cond_proj = np.concatenate(list(ctx_rows), axis=0) @ w1_c  # (kN, width)
    x = _noise_for(seeds, shape)
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        x_proj = x @ w1_x
        t_proj = time_embedding(t) @ w1_t
        z1 = np.tile(x_proj, (k, 1)) + cond_proj + t_proj + net.biases[0]
        h = np.tanh(z1)
        h = np.tanh(h @ net.weights[1] + net.biases[1])
        h = np.tanh(h @ net.weights[2] + net.biases[2])
        raw = h @ net.weights[3] + net.biases[3]
        phi = gate_features(t)
        s = (phi @ net.gate_out)[0]
        g = (phi @ net.gate_skip)[0]
        out = s * raw + g * np.tile(x, (k, 1))
        net.eval_count += k * n
        v = combine(out.reshape(k, n, d))
        x = x + dt * v
    return from_flow_space(x).reshape((n,) + tuple(shape))


def _text_combine(s_text):
    return lambda v: v[0] + s_text * (v[1] - v[0])


def _nested_combine(s_draft, s_text):
    return lambda v: v[0] + s_draft * (v[1] - v[0]) + s_text * (v[2] - v[1])


def _sequential_combine(s_text, s_img):
    def f(v):
        m1 = v[0] + s_text * (v[0] - v[1])
        return m1 + s_img * (m1 - v[2])

    return f


def sample_prompt_only_batch(net, p_embs, vit_dim, s_text, shape, steps, seeds):
    """Batched text-guided sampling (uncond + prompt-conditioned contexts)."""
    uncond = bundle_vector(ConditionBundle(vit_dim=vit_dim), mode="uncond")
    conds = np.stack(
        [bundle_vector(ConditionBundle(p=pe, vit_dim=vit_dim)) for pe in p_embs]
    )
    ctx = np.stack([np.tile(uncond, (len(p_embs), 1)), conds])
    return _sample_many(net, ctx, _text_combine(s_text), shape, steps, seeds)


def sample_refine_batch(net, bundles, cfg: PipelineConfig, shape, seeds):
    """Batched stage-three sampling under the configured guidance variant."""
    if cfg.cfg_variant in ("nested", "none"):
        ctx = np.stack(
            [
                np.stack([bundle_vector(b.keep(()), mode="uncond") for b in bundles]),
                np.stack([bundle_vector(b.keep(("vit",))) for b in bundles]),
                np.stack([bundle_vector(b) for b in bundles]),
            ]
        )
        if cfg.cfg_variant == "none":
            combine = _nested_combine(1.0, 1.0)
        else:
            combine = _nested_combine(cfg.s_draft, cfg.s_text)
    else:
        ctx = np.stack(
            [
                np.stack([bundle_vector(b) for b in bundles]),
                np.stack([bundle_vector(b.keep(("vit",))) for b in bundles]),
                np.stack([bundle_vector(b.keep(("p",))) for b in bundles]),
            ]
        )
        if cfg.cfg_variant == "sequential":
            combine = _sequential_combine(cfg.s_text, cfg.s_draft)
        else:
            from .guidance import expanded_coefficients

            cf, ct, ci = expanded_coefficients(cfg.s_text, cfg.s_draft)
            combine = lambda v: cf * v[0] + ct * v[1] + ci * v[2]
    return _sample_many(net, ctx, combine, shape, cfg.sampler_steps, seeds)


def eval_prompt_set(n: int, seed) -> list:
    """n held-out prompts cycling through the six evaluation categories."""
    rng = np.random.default_rng([int(seed), 777])
    out = []
    for i in range(n):
        category = scenes.EVAL_CATEGORIES[i % len(scenes.EVAL_CATEGORIES)]
        prompt, _scene = scenes.sample_eval_prompt(rng, category)
        out.append((prompt, category))
    return out


@dataclass
class MethodResult:
    name: str
    overall: float
    subtasks: dict
    per_prompt: list  # ScoreReports
    extras: dict = field(default_factory=dict)


def _aggregate(name, reports, extras=None) -> MethodResult:
    per_task = {}
    for rep in reports:
        for task, val in rep.subtasks.items():
            per_task.setdefault(task, []).append(val)
    subtasks = {
        task: float(np.mean(per_task[task])) if task in per_task else float("nan")
        for task in scenes.SUBTASKS
    }
    overall = float(np.mean([rep.overall for rep in reports]))
    return MethodResult(name, overall, subtasks, list(reports), extras or {})


def evaluate_methods(model: FlowModel, head: VerifierHead, prompts, cfg: PipelineConfig,
                     seed, chunk: int = 100) -> dict:
    """Score direct generation, verification-free refinement, and the full
    three-stage pipeline on the same prompts and seeds."""
    p_specs = [p for p, _ in prompts]
    p_embs = [encode_prompt(p) for p in p_specs]
    final_shape = (model.final_res, model.final_res, 3)
    draft_shape = (model.draft_res, model.draft_res, 3)
    n = len(p_specs)

    def chunks():
        for lo in range(0, n, chunk):
            yield lo, min(n, lo + chunk)

    direct_reports = []
    drafts = []
    for lo, hi in chunks():
        seeds = [[int(seed), i, 0] for i in range(lo, hi)]
        imgs = sample_prompt_only_batch(
            model.net_final, p_embs[lo:hi], model.encoder.out_dim,
            cfg.s_text, final_shape, cfg.sampler_steps, seeds,
        )
        direct_reports.extend(scenes.score(img, p) for img, p in zip(imgs, p_specs[lo:hi]))
        dseeds = [[int(seed), i, 1] for i in range(lo, hi)]
        drafts.extend(
            sample_prompt_only_batch(
                model.net_draft, p_embs[lo:hi], VIT_DIM,
                cfg.s_text, draft_shape, cfg.sampler_steps, dseeds,
            )
        )

    draft_scores = [
        scenes.score_objects(detect_draft(d), p) for d, p in zip(drafts, p_specs)
    ]
    vits = [model.encoder.encode(d) for d in drafts]

    def refine_all(name, v_encs, records=None):
        reports = []
        for lo, hi in chunks():
            bundles = [
                ConditionBundle(p=p_embs[i], vit=vits[i], v=v_encs[i])
                for i in range(lo, hi)
            ]
            seeds = [[int(seed), i, 2] for i in range(lo, hi)]
            imgs = sample_refine_batch(model.net_final, bundles, cfg, final_shape, seeds)
            reports.extend(
                scenes.score(img, p) for img, p in zip(imgs, p_specs[lo:hi])
            )
        extras = {"draft_scores": draft_scores}
        if records is not None:
            extras["records"] = records
        return _aggregate(name, reports, extras)

    results = {"direct": _aggregate("direct", direct_reports)}
    results["draft_refine"] = refine_all("draft_refine", [None] * n)
    records = [verify(head, p, d) for p, d in zip(p_specs, drafts)]
    results["full"] = refine_all(
        "full", [encode_verification(r) for r in records], records
    )

    preserved, eligible = 0, 0
    full_reports = results["full"].per_prompt
    for ds, rep in zip(draft_scores, full_reports):
        if ds.overall == 1.0:
            eligible += 1
            if rep.overall == 1.0:
                preserved += 1
    results["full"].extras["preservation"] = (
        preserved / eligible if eligible else float("nan")
    )
    results["full"].extras["preservation_counts"] = (preserved, eligible)
    return results
