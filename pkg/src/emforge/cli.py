"""Command-line entry points: train, eval, synth, gradcheck, report.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 verification
failure, 4 numeric failure.
"""

from __future__ import annotations

import os

# BLAS pools are sized when numpy loads, so the cap has to be in the
# environment before anything below imports it.
_THREADS = os.environ.get("EMFORGE_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import datetime  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import gradcache  # noqa: E402
from .contrastive import TrainBatch, info_nce  # noqa: E402
from .config import ConfigError, RunConfig, load_config  # noqa: E402
from .data import DataError, Dataset, SyntheticSpec, generate_synthetic, load_manifest, write_dataset  # noqa: E402
from .encoder import (  # noqa: E402
    ModelConfig,
    build_sequence,
    init_params,
    load_checkpoint,
    save_checkpoint,
    trainable_names,
)
from .eval import emit_report, load_report, render_report  # noqa: E402
from .instruction import TaskSpec, default_registry, load_registry, save_registry  # noqa: E402
from .numerics import NonFiniteError, Tensor  # noqa: E402
from .pipeline import TrainSettings, evaluate, query_input, target_input, train  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("emforge")

REPORT_FORMATS = ("json", "csv", "plotdata")


class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"emforge: error: {msg}", file=sys.stderr)
    return code


def _registry(cfg: RunConfig) -> dict[str, TaskSpec]:
    path = cfg.resolve(cfg.data.task_registry)
    if path is None:
        return default_registry()
    try:
        return load_registry(path)
    except OSError as exc:
        raise DataError(f"cannot read task registry {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"task registry {path}: {exc}") from exc


def _manifest(path: Path | None, what: str, tasks, split: str, seed: int) -> Dataset:
    if path is None:
        raise ConfigError(f"{what} is not set")
    try:
        return load_manifest(path, tasks, split=split, seed=seed)
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(config_path: str, out_checkpoint: str, log_path: str | None = None) -> int:
    cfg = load_config(config_path)
    model_cfg = cfg.model.model_config()
    t = cfg.train
    tasks = _registry(cfg)
    data = _manifest(cfg.resolve(cfg.data.train_manifest), "data.train_manifest", tasks, "train", t.seed)
    if not data.records:
        raise DataError("training manifest has no train records")
    settings = TrainSettings(t.batch_size, t.sub_batch_size, t.steps, t.lr, t.temperature, t.seed,
                             t.with_instructions, t.dtype)
    log_path = Path(log_path) if log_path else Path(str(out_checkpoint) + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"started": datetime.datetime.now(datetime.timezone.utc).isoformat(), "config": cfg.to_json()}
        fh.write(json.dumps(header, sort_keys=True) + "\n")

        def on_step(entry: dict) -> None:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            if entry["step"] % 50 == 0 or entry["step"] == t.steps - 1:
                log.info("step %d loss %.4f lr %.2e", entry["step"], entry["loss"], entry["lr"])

        params, _ = train(data, model_cfg, settings, on_step=on_step)
    save_checkpoint(out_checkpoint, params, model_cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_SHAPE_FIELDS = ("hidden_dim", "layers", "heads", "patch_size", "image_channels")


def _check_compatible(ckpt: ModelConfig, cfg: RunConfig) -> None:
    want = cfg.model.model_config()
    bad = [f"{f}: checkpoint {getattr(ckpt, f)} vs config {getattr(want, f)}"
           for f in _SHAPE_FIELDS if getattr(ckpt, f) != getattr(want, f)]
    if bad:
        raise ConfigError("checkpoint does not match config (" + "; ".join(bad) + ")")


def dump_inputs(dataset: Dataset, with_instructions: bool) -> list[dict]:
    """The exact strings that would be embedded, one entry per eval record."""
    out = []
    for r in dataset.records:
        q = query_input(r, dataset, with_instructions)
        out.append({
            "id": r.id,
            "query": {"text": q.text, "image": q.image},
            "candidates": [{"text": c.text, "image": c.image}
                           for c in (target_input(s, r.task_id, dataset) for s in r.candidates)],
        })
    return out


def cmd_eval(config_path: str, checkpoint: str | None, report_path: str | None, no_instructions: bool = False,
             fmt: str = "json", dry_run: bool = False) -> int:
    cfg = load_config(config_path)
    tasks = _registry(cfg)
    data = _manifest(cfg.resolve(cfg.eval.manifest), "eval.manifest", tasks, "eval", cfg.train.seed)
    if not data.records:
        raise DataError("eval manifest has no eval records")
    with_instructions = cfg.eval.with_instructions and not no_instructions
    if dry_run:
        for entry in dump_inputs(data, with_instructions):
            print(json.dumps(entry, sort_keys=True, ensure_ascii=False))
        return EXIT_OK
    if checkpoint is None:
        raise UsageError("--checkpoint is required unless --dry-run is given")
    try:
        params, model_cfg = load_checkpoint(checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad checkpoint {checkpoint}: {exc}") from exc
    _check_compatible(model_cfg, cfg)
    report = evaluate(params, model_cfg, data, with_instructions)
    out = report_path or (str(cfg.resolve(cfg.eval.report_path)) if cfg.eval.report_path else None)
    if out is None:
        raise UsageError("no report path: pass --report or set eval.report_path")
    emit_report(report, fmt, out)
    log.info("overall Precision@1 %.4f", report.overall)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(spec: SyntheticSpec, out_dir: str) -> int:
    result = generate_synthetic(spec)
    try:
        manifest = write_dataset(out_dir, result.dataset)
        save_registry(Path(out_dir) / "tasks.json", result.tasks)
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc
    log.info("wrote %d records to %s", len(result.dataset), manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_SHAPES = ((8, 8), (8, 4), (12, 3), (32, 4))
TOLERANCE = {"float64": 1e-10, "float32": 1e-4}
FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
GRADCHECK_JITTER = 0.3
FD_DIRECTIONS = 8


def toy_config(cfg: RunConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(hidden_dim=16, layers=2, heads=2, max_seq=m.max_seq, patch_size=m.patch_size,
                       image_channels=m.image_channels, lora_rank=m.lora_rank, lora_alpha=m.lora_alpha)


def toy_batch(cfg: ModelConfig, n: int, seed: int, n_hard: int = 0) -> gradcache.SequenceBatch:
    """Random byte strings, with images on the positive side."""
    rng = np.random.default_rng([seed, n, 3])
    side = 2 * cfg.patch_size

    def text() -> str:
        return "".join(chr(c) for c in rng.integers(97, 123, size=int(rng.integers(3, 10))))

    def image() -> np.ndarray:
        return rng.random((cfg.image_channels, side, side))

    queries = [build_sequence(text(), None, cfg.patch_size, cfg.max_seq) for _ in range(n)]
    positives = [build_sequence("[IMG] " + text(), image(), cfg.patch_size, cfg.max_seq) for _ in range(n)]
    hard = None
    if n_hard:
        hard = [[build_sequence("[IMG]", image(), cfg.patch_size, cfg.max_seq) for _ in range(n_hard)]
                for _ in range(n)]
    return gradcache.SequenceBatch(queries, positives, hard)


def _cast(params, dtype):
    return {k: Tensor.wrap(v.data.astype(dtype)) for k, v in params.items()}


def relative_l2(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    """||a - b|| / ||b|| over all parameters stacked into one vector."""
    num = sum(float(np.sum((a[k].astype(np.float64) - b[k].astype(np.float64)) ** 2)) for k in b)
    den = sum(float(np.sum(b[k].astype(np.float64) ** 2)) for k in b)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def gradcache_error(params, cfg: ModelConfig, B: int, s: int, tau: float, seed: int) -> float:
    batch = toy_batch(cfg, B, seed)
    part = gradcache.partition(B, s)
    cache = gradcache.forward_cache(params, cfg, batch, part)
    _, gc = gradcache.loss_and_rep_grads(cache, tau)
    cached = gradcache.accumulate_param_grads(params, cfg, batch, part, gc)
    _, direct = gradcache.direct_param_grads(params, cfg, batch, tau)
    return relative_l2(cached, direct)


def untracked_loss(params, cfg: ModelConfig, batch: gradcache.SequenceBatch, tau: float) -> float:
    cache = gradcache.forward_cache(params, cfg, batch, gradcache.partition(len(batch), len(batch)))
    hard = None if cache.hard_negatives is None else Tensor.wrap(cache.hard_negatives)
    tb = TrainBatch(Tensor.wrap(cache.queries), Tensor.wrap(cache.positives), hard, tau)
    return info_nce(tb).value


def finite_difference_error(params, cfg: ModelConfig, tau: float, seed: int) -> float:
    """Worst relative error of analytic vs central-difference directional derivatives.

    Each probe perturbs every trainable parameter along one random unit
    direction, so the derivative is on the scale of the gradient norm rather
    than of a single (possibly near-zero) coordinate.
    """
    batch = toy_batch(cfg, 4, seed, n_hard=1)
    names = trainable_names(params, cfg)
    _, grads = gradcache.direct_param_grads(params, cfg, batch, tau, names)
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    for _ in range(FD_DIRECTIONS):
        direction = {n: rng.standard_normal(params[n].shape) for n in names}
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        direction = {n: d / norm for n, d in direction.items()}

        def loss_at(h: float) -> float:
            moved = {n: Tensor.wrap(params[n].data + h * direction[n]) for n in names}
            return untracked_loss({**params, **moved}, cfg, batch, tau)

        fd = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2 * FD_STEP)
        an = sum(float(np.sum(grads[n] * direction[n])) for n in names)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst


def _generic_point(params: dict[str, Tensor], seed: int) -> dict[str, Tensor]:
    """Jitter projections and randomize LoRA B before checking gradients.

    At init every pooled vector is nearly the same, so directional derivatives
    are ~1e-6 and central differences at the fixed step drown in roundoff.
    A zero LoRA B would also leave every A gradient at exactly zero.
    """
    rng = np.random.default_rng([seed, 9])
    out = {}
    for k, v in params.items():
        if k.endswith("lora_B"):
            out[k] = Tensor.wrap(rng.normal(0, 0.1, v.shape))
        elif v.ndim == 2 and k != "tok_emb":
            out[k] = Tensor.wrap(v.data + rng.normal(0, GRADCHECK_JITTER, v.shape))
        else:
            out[k] = v
    return out


def cmd_gradcheck(config_path: str) -> int:
    cfg = load_config(config_path)
    toy = toy_config(cfg)
    seed, tau = cfg.train.seed, cfg.train.temperature
    base = _generic_point(init_params(toy, seed=seed, dtype=np.float64), seed)
    rows = []
    fd = finite_difference_error(base, toy, tau, seed)
    rows.append(("finite-difference", "float64", fd, FD_TOLERANCE))
    for dtype in ("float64", "float32"):
        params = _cast(base, np.dtype(dtype))
        for B, s in GRADCHECK_SHAPES:
            err = gradcache_error(params, toy, B, s, tau, seed)
            rows.append((f"gradcache B={B} s={s}", dtype, err, TOLERANCE[dtype]))
    ok = True
    print(f"{'check':<24} {'dtype':<8} {'max rel err':>12} {'tolerance':>10}  status")
    for name, dtype, err, tol in rows:
        passed = bool(np.isfinite(err)) and err <= tol
        ok &= passed
        print(f"{name:<24} {dtype:<8} {err:>12.3e} {tol:>10.0e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(report_path: str, fmt: str, out: str | None = None, in_format: str | None = None) -> int:
    try:
        report = load_report(report_path, in_format)
    except OSError as exc:
        raise DataError(f"cannot read report {report_path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot parse report {report_path}: {exc}") from exc
    if out is None:
        sys.stdout.write(render_report(report, fmt))
    else:
        emit_report(report, fmt, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emforge", description="Instruction-conditioned contrastive embeddings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an encoder and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log (JSONL); default <out>.log.jsonl")

    e = sub.add_parser("eval", help="Precision@1 on the eval manifest")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--report", help="report path; default eval.report_path")
    e.add_argument("--format", choices=REPORT_FORMATS, default="json")
    e.add_argument("--no-instructions", action="store_true", help="drop the instruction prefix from queries")
    e.add_argument("--dry-run", action="store_true", help="print formatted eval inputs as JSONL and exit")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--meta-task", required=True,
                   choices=("classification", "vqa", "retrieval", "grounding", "instruction_pair"))
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-eval", type=int, default=200)
    s.add_argument("--n-candidates", type=int, default=64)
    s.add_argument("--n-classes", type=int)
    s.add_argument("--image-size", type=int)
    s.add_argument("--direction", choices=("t2i", "i2t"), default="t2i")
    s.add_argument("--ood", action="store_true")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gradcheck", help="verify gradients and cached-gradient equivalence")
    g.add_argument("--config", required=True)

    r = sub.add_parser("report", help="convert a report between formats")
    r.add_argument("report")
    r.add_argument("--format", choices=REPORT_FORMATS, required=True)
    r.add_argument("--from", dest="in_format", choices=("json", "csv"))
    r.add_argument("--out")
    return p


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        return cmd_train(args.config, args.out, args.log)
    if args.command == "eval":
        return cmd_eval(args.config, args.checkpoint, args.report, args.no_instructions, args.format, args.dry_run)
    if args.command == "synth":
        try:
            spec = SyntheticSpec(args.meta_task, args.n_train, args.n_eval, args.n_candidates, args.n_classes,
                                 args.image_size, args.seed, args.direction, args.ood, args.noise)
        except DataError as exc:
            raise UsageError(str(exc)) from exc
        return cmd_synth(spec, args.out)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.config)
    if args.command == "report":
        return cmd_report(args.report, args.format, args.out, args.in_format)
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        return _fail(EXIT_CONFIG, f"EMFORGE_THREADS must be a positive integer, got {_THREADS!r}")
    try:
        return _dispatch(args)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
    except DataError as exc:
        return _fail(EXIT_DATA, str(exc))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
