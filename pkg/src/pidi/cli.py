"""Command-line interface: ``pidi train | infer | reparam-export | analyze | count-ops | bench``.

Settings come from three layers; later layers win:

1. built-in defaults,
2. ``--config-file FILE`` with ``key = value`` lines (keys are long flag names,
   dashes or underscores; ``#`` starts a comment),
3. explicit command-line flags.

Exit codes: 0 success, 2 user error (bad flags, config, image or checkpoint),
3 numeric failure (non-finite loss or weights during training).
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import analysis, io, pnm
from . import train as T
from .blocks import (ConfigError, NetworkSpec, PiDiNet, ResNet18, build_bipidinet, build_pidinet,
                     parse_config, resnet18_bipidinet_spec)
from .nn import BConv2d
from .pdc import probe_pattern
from .synth import CLASS_NAMES, stack_edges, synth_cls_dataset, synth_edge_dataset

log = logging.getLogger("pidi")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "model.pidn"
HISTORY_NAME = "history.csv"


class UserError(Exception):
    pass


# --- helpers --------------------------------------------------------------------

def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into a dict keyed by argparse dest names."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise UserError(f"cannot read config file: {e}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise UserError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().lstrip("-").replace("-", "_")] = val.strip().strip('"')
    return out


def thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def network_from_spec(spec: NetworkSpec, seed: int = 0):
    return build_pidinet(spec, seed) if spec.task == "edge" else build_bipidinet(spec, seed)


def load_model(path):
    try:
        task, spec_str, tensors = io.load_checkpoint(path)
    except OSError as e:
        raise UserError(f"cannot read checkpoint: {e}") from None
    spec = NetworkSpec.from_string(spec_str)
    model = network_from_spec(spec)
    model.load_state_dict(tensors)
    model.eval()
    return task, spec, model


def save_model(path, model) -> None:
    io.save_checkpoint(path, model.spec.task, model.spec.to_string(), model.state_dict())


def load_input(path, channels: int = 3) -> np.ndarray:
    img = pnm.read_image(path)
    x = img.to_chw()
    if x.shape[0] != channels:
        x = np.repeat(x, channels, axis=0) if x.shape[0] == 1 else x.mean(axis=0, keepdims=True)
    return x[None]


def edge_map(model, x: np.ndarray) -> np.ndarray:
    """Fused edge probabilities ``(H, W)`` for a single ``(1, C, H, W)`` input."""
    return model(x)[-1].data[0, 0]


# --- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    task = "edge" if args.task == "edge" else "classify"
    if task == "edge":
        spec = NetworkSpec(task="edge", block_kinds=parse_config(args.config), base_channels=args.channels,
                           stem_stride=args.stem_stride)
    else:
        spec = NetworkSpec(task="classify", xi=args.xi, bipdc_kind=args.bipdc_kind, stem_stride=args.stem_stride,
                           num_classes=args.classes)
    model = network_from_spec(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if task == "edge":
        images, gts = stack_edges(synth_edge_dataset(args.seed, args.samples, args.size))
        data = (images, gts)
        loss_fn = T.edge_batch_loss(T.LossParams(args.lam, args.eta))
        lr = args.lr or T.EDGE_LR
        schedule = T.edge_schedule(args.epochs, lr)
    else:
        data = synth_cls_dataset(args.seed, args.samples, args.size, args.classes)
        loss_fn = T.cls_batch_loss
        lr = args.lr or T.CLS_LR
        schedule = T.cls_schedule(args.epochs, lr)
    opt = T.Adam(model.parameters(), lr=lr)
    hist = T.train_loop(model, data, loss_fn, opt, args.epochs, seed=args.seed, batch_size=args.batch_size,
                        schedule=schedule, history_path=out / HISTORY_NAME)
    save_model(out / CHECKPOINT_NAME, model)
    last = hist.rows[-1] if hist.rows else {}
    print(f"checkpoint={out / CHECKPOINT_NAME}")
    print(f"history={out / HISTORY_NAME}")
    if last:
        print(f"final_loss={last['loss']:.6g} final_metric={last['metric']:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    task, spec, model = load_model(args.checkpoint)
    x = load_input(args.input, spec.in_channels)
    if task == "edge":
        out = args.output or str(Path(args.input).with_suffix(".edge.pgm"))
        pnm.write_image(out, pnm.Image.from_float(edge_map(model, x)), binary=not args.ascii)
        print(f"edge_map={out}")
        return EXIT_OK
    logits = model(x).data[0].astype(np.float64)
    probs = np.exp(T.log_softmax(logits[None])[0])
    names = CLASS_NAMES if spec.num_classes <= len(CLASS_NAMES) else None
    for rank, c in enumerate(np.argsort(-probs, kind="stable")[: args.top_k], 1):
        label = names[c] if names else str(c)
        print(f"{rank} {c} {label} {probs[c]:.6f}")
    return EXIT_OK


def cmd_reparam_export(args) -> int:
    task, spec, model = load_model(args.checkpoint)
    if task != "edge":
        raise UserError("Bi-PDC layers admit no re-parameterization; only edge checkpoints can be exported")
    if spec.reparam:
        raise UserError("checkpoint is already re-parameterized")
    exported = model.reparameterized()
    save_model(args.out, exported)
    print(f"exported={args.out}")
    print(f"spec={exported.spec.to_string()}")
    return EXIT_OK


def _named_model(name: str, args):
    if name == "resnet18":
        return ResNet18(binary=False)
    if name == "bireal-resnet18":
        return ResNet18(binary=True)
    if name == "bipidinet-resnet18":
        return build_bipidinet(resnet18_bipidinet_spec())
    if name == "pidinet":
        return build_pidinet(NetworkSpec(task="edge", block_kinds=parse_config(args.config),
                                         base_channels=args.channels))
    if name == "bipidinet":
        return build_bipidinet(NetworkSpec(task="classify", xi=args.xi))
    raise UserError(f"unknown model {name!r}")


def _shape(text: str) -> tuple:
    try:
        shape = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise UserError(f"bad shape {text!r}; expected N,C,H,W") from None
    if len(shape) != 4 or min(shape) < 1:
        raise UserError(f"bad shape {text!r}; expected four positive integers")
    return shape


def cmd_count_ops(args) -> int:
    model = load_model(args.checkpoint)[2] if args.checkpoint else _named_model(args.model, args)
    report = analysis.count_ops(model, _shape(args.input_shape))
    if args.format in ("table", "both"):
        print(report.table())
    if args.format in ("kv", "both"):
        print(report.key_values())
    return EXIT_OK


def _print_matrix(title: str, mag: np.ndarray) -> None:
    print(f"# {title}")
    print(analysis.spectrum_csv(mag))
    print()


def cmd_analyze(args) -> int:
    if args.what == "spectra":
        pattern = int(args.kernel) if args.kind == "V" else probe_pattern(args.kind)
        filters = analysis.shifting_filters(pattern, args.size)
        for i, f in enumerate(filters):
            mag = analysis.fft2_magnitude(f)
            _print_matrix(f"filter {i} dc={mag[args.size // 2, args.size // 2]:.3g}",
                          analysis.log_spectrum(mag) if args.log else mag)
        return EXIT_OK
    if not args.checkpoint:
        raise UserError(f"analyze {args.what} needs --checkpoint")
    task, spec, model = load_model(args.checkpoint)
    if args.what == "lbp":
        kernels = [m.weight.data for m in model.modules() if isinstance(m, BConv2d) and m.weight.shape[-1] == 3]
        if not kernels:
            raise UserError("checkpoint has no 3x3 binary convolutions")
        stats = analysis.lbp_pattern_stats(np.concatenate([k.reshape(-1, 1, 3, 3) for k in kernels]),
                                           args.max_transitions)
        print(analysis.histogram_csv(stats))
        print(f"# uniform_fraction={stats.uniform_fraction:.6f}")
        return EXIT_OK
    # features
    if not args.input:
        raise UserError("analyze features needs --input")
    x = load_input(args.input, spec.in_channels)

    def taps(inp):
        from . import autograd as ag
        feats = model.features(ag.constant(inp)) if isinstance(model, PiDiNet) else model.features(inp)
        return {f"stage{i + 1}": f.data for i, f in enumerate(feats)}

    try:
        mag = analysis.feature_spectrum(taps, x, args.tap)
    except KeyError as e:
        raise UserError(str(e)) from None
    _print_matrix(f"tap {args.tap} high_frequency_ratio={analysis.high_frequency_ratio(mag):.6f}",
                  analysis.log_spectrum(mag) if args.log else mag)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        task, spec, model = load_model(args.checkpoint)
    else:
        model = _named_model(args.model, args)
        spec = getattr(model, "spec", None)
    model.eval()
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.batch, 3, args.size, args.size), dtype=np.float32)

    def run():
        out = model(x)
        return np.concatenate([o.data.ravel() for o in out]) if isinstance(out, list) else out.data.ravel()

    out = run()  # warm-up
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        out = run()
        times.append((time.perf_counter() - t0) * 1e3)
    digest = hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest()[:16]
    print(f"iters={args.iters} mean_ms={np.mean(times):.3f} std_ms={np.std(times):.3f} output_sha256={digest}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "reparam-export": cmd_reparam_export,
    "analyze": cmd_analyze,
    "count-ops": cmd_count_ops,
    "bench": cmd_bench,
}


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _global_options(parser, default) -> None:
    parser.add_argument("--threads", type=int, default=default, help="cap BLAS threads (env PIDI_THREADS)")
    parser.add_argument("--config-file", default=default, help="key = value defaults; flags override them")
    parser.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pidi", description="Pixel difference networks: train, infer, export, analyze.")
    _global_options(p, None)
    # the same options are accepted after the command name
    common = _Parser(add_help=False)
    _global_options(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    t = sub.add_parser("train", help="train on a synthetic dataset")
    t.add_argument("--task", choices=("edge", "cls"), default="edge")
    t.add_argument("--config", default="[CARV]x4", help="block kinds, e.g. '[CARV]x4' or 'C-A-R-V...'")
    t.add_argument("--channels", type=int, default=60)
    t.add_argument("--xi", type=float, default=0.2, help="Bi-PDC channel share (cls)")
    t.add_argument("--bipdc-kind", choices=("C", "A", "R"), default="C")
    t.add_argument("--classes", type=int, default=10)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--samples", type=int, default=256)
    t.add_argument("--size", type=int, default=None, help="image size (default 64 edge, 32 cls)")
    t.add_argument("--batch-size", type=int, default=None, help="default 8 edge, 64 cls")
    t.add_argument("--stem-stride", type=int, default=None, help="default 1 edge, 2 cls")
    t.add_argument("--lr", type=float, default=None, help="default 0.005 edge, 0.001 cls")
    t.add_argument("--lam", type=float, default=1.1, help="edge loss lambda")
    t.add_argument("--eta", type=float, default=0.3, help="edge loss annotator threshold")
    t.add_argument("--out", default="run")

    i = sub.add_parser("infer", help="run a checkpoint on a PGM/PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", default=None, help="edge map PGM (edge task)")
    i.add_argument("--ascii", action="store_true", help="write P2 instead of P5")
    i.add_argument("--top-k", type=int, default=3)

    r = sub.add_parser("reparam-export", help="rewrite PDC layers as plain convolutions")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)

    a = sub.add_parser("analyze", help="spectra, LBP statistics and feature spectra as CSV")
    a.add_argument("what", choices=("spectra", "lbp", "features"))
    a.add_argument("--kind", choices=("C", "A", "R", "V"), default="C", help="V = vanilla kernel")
    a.add_argument("--kernel", type=int, default=3, help="vanilla kernel size")
    a.add_argument("--size", type=int, default=32)
    a.add_argument("--log", action="store_true")
    a.add_argument("--checkpoint", default=None)
    a.add_argument("--input", default=None)
    a.add_argument("--tap", default="stage1")
    a.add_argument("--max-transitions", type=int, default=4)

    for name, helptext in (("count-ops", "FLOPs/BOPs/OPs and memory"), ("bench", "time forward passes")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--model", default="resnet18" if name == "count-ops" else "pidinet",
                       choices=("resnet18", "bireal-resnet18", "bipidinet-resnet18", "pidinet", "bipidinet"))
        c.add_argument("--checkpoint", default=None)
        c.add_argument("--config", default="[CARV]x4")
        c.add_argument("--channels", type=int, default=60)
        c.add_argument("--xi", type=float, default=0.2)
        if name == "count-ops":
            c.add_argument("--input-shape", default="1,3,224,224")
            c.add_argument("--format", choices=("table", "kv", "both"), default="both")
        else:
            c.add_argument("--iters", type=int, default=10)
            c.add_argument("--size", type=int, default=64)
            c.add_argument("--batch", type=int, default=1)
            c.add_argument("--seed", type=int, default=0)
    return p


def _apply_task_defaults(args) -> None:
    if args.command != "train":
        return
    edge = args.task == "edge"
    for key, e, c in (("size", 64, 32), ("batch_size", 8, 64), ("stem_stride", 1, 2)):
        if getattr(args, key) is None:
            setattr(args, key, e if edge else c)


def parse_args(argv):
    parser = build_parser()
    known = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    known.add_argument("--config-file", default=None)
    pre, _ = known.parse_known_args(argv)
    if pre.config_file:
        values = read_config_file(pre.config_file)
        # push file values into the subparser of the chosen command so flags still win
        command = next((a for a in argv if a in COMMANDS), None)
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        target = sub.choices.get(command) if command else None
        dests = {a.dest: a for a in target._actions} if target else {}
        unknown = sorted(set(values) - set(dests) - {"threads", "config_file", "verbose"})
        if unknown:
            raise UserError(f"{pre.config_file}: unknown keys {unknown} for command {command!r}")
        if "threads" in values:
            parser.set_defaults(threads=int(values.pop("threads")))
        values.pop("config_file", None)
        values.pop("verbose", None)
        typed = {}
        for k, v in values.items():
            act = dests[k]
            if isinstance(act, argparse._StoreTrueAction):
                typed[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                typed[k] = act.type(v) if act.type else v
        target.set_defaults(**typed)
    args = parser.parse_args(argv)
    _apply_task_defaults(args)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads or os.environ.get("PIDI_THREADS")
    try:
        with thread_limit(threads):
            return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: bad block configuration: {e}", file=sys.stderr)
        return EXIT_USER
    except T.NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, pnm.PnmError, io.FormatError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
