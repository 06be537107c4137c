"""Experiment harness: dataset building, training, evaluation, ablation.

Every subcommand is pure in (config, seed): the effective configuration is
snapshotted to the output directory before any work, all tables carry a
header row plus a config-hash footer, and reruns from the same snapshot
reproduce outputs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys

import numpy as np

from . import datagen, flowcore, pipeline, scenes
from .errors import ConfigError, DraftflowError
from .pipeline import FlowModel, PipelineConfig, VerifierHead

METHODS = ("direct", "draft_refine", "full")
EVAL_HEADER = ("method",) + scenes.SUBTASKS + ("overall",)
ABLATE_HEADER = ("draft_res", "cfg_variant", "vae_input") + scenes.SUBTASKS + ("overall",)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

_PATH_KEYS = ("out", "config", "run", "dataset", "resume")


def _config_hash(config: dict) -> str:
    """Hash of the semantic parameters; invocation paths are excluded so the
    same experiment produces the same provenance footer anywhere."""
    semantic = {k: v for k, v in config.items() if k not in _PATH_KEYS}
    blob = json.dumps(semantic, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_config_file(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")


def _merge_config(args, keys) -> dict:
    """File values first, explicit CLI flags override, then defaults."""
    file_cfg = _load_config_file(args.config) if args.config else {}
    merged = {}
    for key in keys:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
        elif key in file_cfg:
            merged[key] = file_cfg[key]
    return merged


def _snapshot(config: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, sort_keys=True, indent=2)
        f.write("\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_table(path, header, rows, config_hash):
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    lines.append(f"# config_hash={config_hash}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _write_metrics(path, rows):
    lines = ["update,component,loss,lr"]
    lines.extend(
        f"{r['update']},{r['component']},{r['loss']:.6f},{r['lr']:.6f}" for r in rows
    )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# head checkpoints (same container style as the velocity-net format)
# ---------------------------------------------------------------------------

def save_head(head: VerifierHead, path):
    dims = [head.weights[0].shape[0]] + [w.shape[1] for w in head.weights]
    with open(path, "wb") as f:
        f.write(flowcore.CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", flowcore.CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(dims)))
        for d in dims:
            f.write(struct.pack("<I", d))
        for p in head.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_head(path) -> VerifierHead:
    with open(path, "rb") as f:
        if f.read(4) != flowcore.CHECKPOINT_MAGIC:
            raise ConfigError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != flowcore.CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", f.read(4))
        dims = [struct.unpack("<I", f.read(4))[0] for _ in range(n)]
        head = pipeline.init_head(seed=0)
        expect = [head.weights[0].shape[0]] + [w.shape[1] for w in head.weights]
        if dims != expect:
            raise ConfigError(f"head checkpoint dims {dims} != expected {expect}")
        for p in head.params():
            raw = f.read(p.size * 4)
            p[...] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(p.shape)
    return head


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_DATAGEN_KEYS = ("out", "n", "seed", "mix", "draft_res")
_TRAIN_KEYS = (
    "dataset", "out", "seed", "steps", "pretrain_steps", "batch_size", "lr",
    "width", "draft_res", "final_res", "s_draft", "s_text", "cfg_variant",
    "vae_input", "sampler_steps", "resume",
)
_EVAL_KEYS = ("run", "out", "seed", "n_prompts", "sampler_steps")
_ABLATE_KEYS = (
    "dataset", "out", "seed", "steps", "pretrain_steps", "batch_size", "lr",
    "width", "n_prompts", "sampler_steps", "s_draft", "s_text",
)


def _parse_mix(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("mix must be four comma-separated ratios")
    return dict(zip(datagen.CATEGORIES, parts))


def cmd_datagen(args) -> int:
    config = _merge_config(args, _DATAGEN_KEYS)
    config.setdefault("n", 1000)
    config.setdefault("seed", 0)
    config.setdefault("mix", ",".join(str(datagen.DEFAULT_MIX[c]) for c in datagen.CATEGORIES))
    config.setdefault("draft_res", scenes.DRAFT_RES)
    if "out" not in config:
        raise ConfigError("datagen needs --out")
    mix = _parse_mix(config["mix"]) if isinstance(config["mix"], str) else config["mix"]
    _snapshot(config, config["out"])
    samples = datagen.build_trainset(
        int(config["n"]), int(config["seed"]), mix=mix, draft_res=int(config["draft_res"])
    )
    # the manifest echoes only the generation parameters, not output paths,
    # so rerunning the same config elsewhere yields identical bytes
    gen_config = {k: v for k, v in config.items() if k not in ("out", "config")}
    manifest = datagen.save_dataset(samples, config["out"], config=gen_config)
    print(json.dumps(manifest["categories"], sort_keys=True))
    print(json.dumps(manifest["capabilities"], sort_keys=True))
    print(f"fingerprint={datagen.dataset_fingerprint(config['out'])}")
    return 0


def _pipeline_config(config) -> PipelineConfig:
    return PipelineConfig(
        draft_res=int(config.get("draft_res", scenes.DRAFT_RES)),
        final_res=int(config.get("final_res", scenes.FINAL_RES)),
        s_draft=float(config.get("s_draft", 2.0)),
        s_text=float(config.get("s_text", 6.0)),
        sampler_steps=int(config.get("sampler_steps", 50)),
        cfg_variant=config.get("cfg_variant", "nested"),
        vae_input=_parse_onoff(config.get("vae_input", "off")),
        width=int(config.get("width", 256)),
        train_steps=int(config.get("steps", 3000)),
        pretrain_steps=int(config.get("pretrain_steps", 600)),
        batch_size=int(config.get("batch_size", 16)),
        lr=float(config.get("lr", 0.02)),
        seed=int(config.get("seed", 0)),
    )


def _parse_onoff(v):
    if isinstance(v, bool):
        return v
    if v in ("on", "true", "1"):
        return True
    if v in ("off", "false", "0"):
        return False
    raise ConfigError(f"expected on/off, got {v!r}")


def _save_run(out_dir, model: FlowModel, head: VerifierHead):
    ckpt = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt, exist_ok=True)
    flowcore.save_checkpoint(model.net_draft, os.path.join(ckpt, "net_draft.drcf"))
    flowcore.save_checkpoint(model.net_final, os.path.join(ckpt, "net_final.drcf"))
    save_head(head, os.path.join(ckpt, "head.drcf"))


def _load_run(run_dir):
    cfg_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(f"no config.json under {run_dir}")
    with open(cfg_path) as f:
        config = json.load(f)
    pcfg = _pipeline_config(config)
    ckpt = os.path.join(run_dir, "checkpoints")
    net_draft = flowcore.load_checkpoint(os.path.join(ckpt, "net_draft.drcf"))
    net_final = flowcore.load_checkpoint(os.path.join(ckpt, "net_final.drcf"))
    head = load_head(os.path.join(ckpt, "head.drcf"))
    encoder = pipeline.DraftEncoder(include_pixels=pcfg.vae_input)
    model = FlowModel(net_draft, net_final, encoder, pcfg.draft_res, pcfg.final_res)
    return config, pcfg, model, head


def _sample_grid(out_dir, model, head, pcfg, seed=123):
    """A few draft/final pairs for eyeballing the run."""
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    for i, (prompt, _cat) in enumerate(pipeline.eval_prompt_set(4, seed)):
        res = pipeline.run_pipeline(model, head, prompt, pcfg, [seed, i])
        scenes.write_ppm(os.path.join(out_dir, "samples", f"{i:02d}_draft.ppm"), res.draft)
        scenes.write_ppm(os.path.join(out_dir, "samples", f"{i:02d}_final.ppm"), res.final)


def cmd_train(args) -> int:
    config = _merge_config(args, _TRAIN_KEYS)
    config.setdefault("seed", 0)
    if "dataset" not in config or "out" not in config:
        raise ConfigError("train needs --dataset and --out")
    pcfg = _pipeline_config(config)
    _snapshot(config, config["out"])
    dataset = datagen.load_dataset(config["dataset"])
    resume = config.get("resume")
    if resume:
        _, _, model, head = _load_run(resume)
        pre_report = None
    else:
        model, head = pipeline.init_pipeline(pcfg)
        pre_report = pipeline.pretrain_lowres(model, dataset, pcfg)
    report = pipeline.train_pipeline(model, head, dataset, pcfg)
    _save_run(config["out"], model, head)
    rows = (pre_report.rows if pre_report else []) + report.rows
    _write_metrics(os.path.join(config["out"], "metrics.csv"), rows)
    with open(os.path.join(config["out"], "train_summary.json"), "w") as f:
        json.dump(
            {
                "dropout_counts": report.dropout_counts,
                "updates": report.updates,
                "pretrain": pre_report.dropout_counts if pre_report else None,
                "config_hash": _config_hash(config),
            },
            f, sort_keys=True, indent=2,
        )
        f.write("\n")
    _sample_grid(config["out"], model, head, pcfg)
    flow_rows = [r for r in rows if r["component"].startswith("flow")]
    if flow_rows:
        print(f"first_loss={flow_rows[0]['loss']:.4f} last_loss={flow_rows[-1]['loss']:.4f}")
    return 0


def _method_rows(results) -> list:
    rows = []
    for method in METHODS:
        r = results[method]
        rows.append(
            (method,) + tuple(r.subtasks[t] for t in scenes.SUBTASKS) + (r.overall,)
        )
    return rows


def cmd_eval(args) -> int:
    config = _merge_config(args, _EVAL_KEYS)
    config.setdefault("seed", 0)
    config.setdefault("n_prompts", 300)
    if "run" not in config:
        raise ConfigError("eval needs --run")
    run_config, pcfg, model, head = _load_run(config["run"])
    if config.get("sampler_steps"):
        pcfg.sampler_steps = int(config["sampler_steps"])
    out_dir = config.get("out") or config["run"]
    _snapshot({**run_config, **config}, out_dir)
    prompts = pipeline.eval_prompt_set(int(config["n_prompts"]), int(config["seed"]))
    results = pipeline.evaluate_methods(model, head, prompts, pcfg, int(config["seed"]))
    chash = _config_hash({**run_config, **config})
    write_table(os.path.join(out_dir, "eval.csv"), EVAL_HEADER, _method_rows(results), chash)
    extras = {
        "preservation": results["full"].extras["preservation"],
        "preservation_counts": list(results["full"].extras["preservation_counts"]),
        "draft_overall": float(
            np.mean([r.overall for r in results["full"].extras["draft_scores"]])
        ),
        "config_hash": chash,
    }
    with open(os.path.join(out_dir, "eval_extras.json"), "w") as f:
        json.dump(extras, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(out_dir, "eval.csv")) as f:
        print(f.read().rstrip())
    return 0


ABLATION_GRID = tuple(
    (res, variant, vae)
    for res in (8, 24, 96)
    for variant in ("nested", "sequential")
    for vae in (False, True)
)


def cmd_ablate(args) -> int:
    config = _merge_config(args, _ABLATE_KEYS)
    config.setdefault("seed", 0)
    config.setdefault("n_prompts", 60)
    if "dataset" not in config or "out" not in config:
        raise ConfigError("ablate needs --dataset and --out")
    _snapshot(config, config["out"])
    with open(os.path.join(config["dataset"], "manifest.json")) as f:
        manifest = json.load(f)
    data_cfg = manifest.get("config", {})
    n = int(data_cfg.get("n", 200))
    data_seed = int(data_cfg.get("seed", 0))
    mix = data_cfg.get("mix")
    if isinstance(mix, str):
        mix = _parse_mix(mix)
    rows = []
    prompts = pipeline.eval_prompt_set(int(config["n_prompts"]), int(config["seed"]))
    for res, variant, vae in ABLATION_GRID:
        cell_cfg = dict(config)
        cell_cfg.update({"draft_res": res, "cfg_variant": variant, "vae_input": vae})
        pcfg = _pipeline_config(cell_cfg)
        dataset = datagen.build_trainset(n, data_seed, mix=mix, draft_res=res)
        model, head = pipeline.init_pipeline(pcfg)
        pipeline.pretrain_lowres(model, dataset, pcfg)
        pipeline.train_pipeline(model, head, dataset, pcfg)
        results = pipeline.evaluate_methods(model, head, prompts, pcfg, int(config["seed"]))
        full = results["full"]
        rows.append(
            (res, variant, "on" if vae else "off")
            + tuple(full.subtasks[t] for t in scenes.SUBTASKS)
            + (full.overall,)
        )
        print(f"cell draft_res={res} cfg={variant} vae={'on' if vae else 'off'} "
              f"overall={full.overall:.4f}")
    chash = _config_hash(config)
    write_table(os.path.join(config["out"], "ablation.csv"), ABLATE_HEADER, rows, chash)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="draftflow",
        description="Draft-verify-refine generation experiments on the shapes world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; explicit flags override")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("datagen", help="build a training dataset directory")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--mix", help="ratios correction,no_correction,t2i_low,t2i_high")
    p.add_argument("--draft-res", dest="draft_res", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="pretrain + joint training run")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--draft-res", dest="draft_res", type=int)
    p.add_argument("--final-res", dest="final_res", type=int)
    p.add_argument("--s-draft", dest="s_draft", type=float)
    p.add_argument("--s-text", dest="s_text", type=float)
    p.add_argument("--cfg-variant", dest="cfg_variant",
                   choices=("none", "nested", "sequential", "expanded"))
    p.add_argument("--vae-input", dest="vae_input", choices=("on", "off"))
    p.add_argument("--sampler-steps", dest="sampler_steps", type=int)
    p.add_argument("--resume", help="run directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score direct vs pipeline methods")
    common(p)
    p.add_argument("--run", help="training run directory")
    p.add_argument("--n-prompts", dest="n_prompts", type=int)
    p.add_argument("--sampler-steps", dest="sampler_steps", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the ablation grid")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--n-prompts", dest="n_prompts", type=int)
    p.add_argument("--sampler-steps", dest="sampler_steps", type=int)
    p.add_argument("--s-draft", dest="s_draft", type=float)
    p.add_argument("--s-text", dest="s_text", type=float)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DraftflowError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
