"""Command-line interface: ``addl <command> ...``.

Exit codes: 0 ok, 2 usage / missing input, 3 malformed data, 4 model mismatch,
5 internal error. Outputs are computed fully in memory and written only once
every check has passed.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import CheckpointError, load, loads
from .errors import FormatError, ModelMismatchError
from .gabor import PARAM_LO, PARAM_NAMES, PARAM_RANGE

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_MISMATCH, EXIT_INTERNAL = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _write_atomic(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".addl-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_model(path: str | None):
    from .nets import ADDLModel

    if not path:
        raise UsageError("--weights is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"weights file not found: {path}")
    return ADDLModel.from_weights(load(p))


def _read_image(path: str) -> np.ndarray:
    from .pgm import read_pgm

    if not Path(path).is_file():
        raise UsageError(f"input not found: {path}")
    return read_pgm(path)


def _check_out_dir(path: str) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


# ------------------------------------------------------------ commands


def cmd_compress(a) -> int:
    from .pipeline import Mode, encode

    img = _read_image(a.input)
    model = _load_model(a.weights)
    if not 1 <= a.quality <= 100:
        raise UsageError("--quality must be in 1..100")
    if a.side_budget < 0:
        raise UsageError("--side-budget must be >= 0")
    try:
        mode = Mode.parse(a.ablation)
    except ValueError as e:
        raise UsageError(str(e)) from None
    _check_out_dir(a.output)
    r = encode(img, a.quality, model, a.side_budget, mode)
    _write_atomic(a.output, r.data)
    s = r.stream
    flag = " (side budget exceeded)" if r.budget_exceeded else ""
    print(f"{a.output}: {s.width}x{s.height} mode={mode.label} base={s.base_bits}b side={s.side_bits}b "
          f"total={s.total_bits}b bpp={s.total_bits / (s.width * s.height):.4f}{flag}")
    return EXIT_OK


def cmd_decompress(a) -> int:
    from .pgm import to_pgm_bytes
    from .pipeline import decode

    if not Path(a.input).is_file():
        raise UsageError(f"input not found: {a.input}")
    model = _load_model(a.weights)
    _check_out_dir(a.output)
    out = decode(Path(a.input).read_bytes(), model)
    _write_atomic(a.output, to_pgm_bytes(out.image))
    h, w = out.image.shape
    print(f"{a.output}: {w}x{h}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .nets import ADDLModel
    from .training import TrainConfig, TrainLog, stage1_train, stage2_train, stage3_train

    corpus_dir = None if a.corpus == "synthetic" else a.corpus
    if corpus_dir is not None and not Path(corpus_dir).is_dir():
        raise UsageError(f"corpus directory not found: {corpus_dir}")
    if a.stage in (2, 3) and not a.init:
        raise UsageError(f"stage {a.stage} needs --init weights from the previous stage")
    model = _load_model(a.init) if a.init else ADDLModel(seed=a.seed)
    _check_out_dir(a.out)
    if a.log:
        _check_out_dir(a.log)
    cfg = TrainConfig(stage=a.stage, steps=a.steps, seed=a.seed, lr=a.lr, patch=a.patch, batch=a.batch,
                      corpus_dir=corpus_dir, eval_every=a.eval_every)
    try:
        cfg.validate(model.config)
    except ValueError as e:
        raise UsageError(str(e)) from None
    fn = {1: stage1_train, 2: stage2_train, 3: stage3_train}[a.stage]
    model, log = fn(cfg, model, TrainLog())
    _write_atomic(a.out, model.to_bytes())
    text = log.to_csv()
    if a.log:
        _write_atomic(a.log, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _corpus_images(spec: str) -> dict[str, np.ndarray]:
    from .corpus import toy_images
    from .pgm import read_pgm

    if spec.startswith("synthetic"):
        _, _, n = spec.partition(":")
        imgs = toy_images(int(n or 8), 64)
        return {f"toy{i:03d}": x for i, x in enumerate(imgs)}
    d = Path(spec)
    if not d.is_dir():
        raise UsageError(f"corpus directory not found: {spec}")
    paths = sorted(d.glob("*.pgm"))
    if not paths:
        raise UsageError(f"no .pgm files in {spec}")
    return {p.stem: read_pgm(p) for p in paths}


def cmd_rd_sweep(a) -> int:
    from .sweep import ALL_MODES, BASELINE, rd_sweep, rows_to_csv

    try:
        qualities = [int(q) for q in a.qualities.split(",") if q]
    except ValueError:
        raise UsageError("--qualities must be a comma-separated list of integers") from None
    if not qualities or any(not 1 <= q <= 100 for q in qualities):
        raise UsageError("qualities must lie in 1..100")
    modes = [m.strip() for m in a.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in ALL_MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}; choose from {list(ALL_MODES)}")
    images = _corpus_images(a.corpus)
    model = None if modes == [BASELINE] else _load_model(a.weights)
    if a.out:
        _check_out_dir(a.out)
    rows = rd_sweep(images, qualities, model, modes)
    text = rows_to_csv(rows)
    if a.out:
        _write_atomic(a.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def param_planes_u8(maps) -> dict[str, np.ndarray]:
    """Each parameter plane scaled from its legal range onto 0..255."""
    out = {}
    for c, name in enumerate(PARAM_NAMES):
        v = (maps.data[c] - PARAM_LO[c]) / PARAM_RANGE[c]
        out[name] = np.clip(np.floor(v * 255.0 + 0.5), 0, 255) / 255.0
    return out


def cmd_inspect_params(a) -> int:
    from .pgm import to_pgm_bytes
    from .pipeline import _check_image, analyze, pad_even

    img = _read_image(a.input)
    model = _load_model(a.weights)
    try:
        img = _check_image(img)
    except ValueError as e:
        raise UsageError(str(e)) from None
    outdir = Path(a.outdir)
    if outdir.exists() and not outdir.is_dir():
        raise UsageError(f"{outdir} exists and is not a directory")
    maps, _ = analyze(model, pad_even(img))
    blobs = {name: to_pgm_bytes(p) for name, p in param_planes_u8(maps).items()}
    outdir.mkdir(parents=True, exist_ok=True)
    stem = Path(a.input).stem
    for name, blob in blobs.items():
        _write_atomic(outdir / f"{stem}_{name}.pgm", blob)
    h, w = maps.shape
    print(f"wrote {len(blobs)} planes of {w}x{h} to {outdir}")
    return EXIT_OK


def cmd_sync_check(a) -> int:
    from .nets import ADDLModel
    from .pipeline import sync_check

    img = _read_image(a.input)
    model = _load_model(a.weights)
    receiver = None
    if a.perturb_ulp:
        receiver = ADDLModel.from_weights(loads(model.to_bytes()))
        name = sorted(receiver.predict_net.params())[0]
        t = receiver.predict_net.params()[name]
        t.data.reshape(-1)[0] = np.nextafter(t.data.reshape(-1)[0], np.inf)
    rep = sync_check(img, a.quality, model, receiver)
    for k in ("model_id_match", "prediction_match", "params_match", "image_match"):
        print(f"{k}: {getattr(rep, k)}")
    for k, v in rep.details.items():
        print(f"{k}: {v:.3e}")
    print("sync: ok" if rep.ok else "sync: MISMATCH")
    return EXIT_OK if rep.ok else EXIT_MISMATCH


def cmd_selftest(a) -> int:
    from .selftest import run_grad_suite, run_gabor_oracle, run_rounding_check

    results = [run_gabor_oracle(200 if a.quick else 1000), run_rounding_check()]
    results += run_grad_suite(3 if a.quick else 20)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} max_err={r.max_error:.2e} {r.seconds:6.2f}s {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_OK if not failed else EXIT_INTERNAL


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="addl", description="Dual-layer Gabor downsampling image codec.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="encode a PGM image into an .addl stream")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--quality", "-q", type=int, default=50)
    c.add_argument("--side-budget", type=float, default=0.20, help="side bits as a fraction of base bits")
    c.add_argument("--weights", "-w")
    c.add_argument("--ablation", default="full",
                   help="full | no-side-info | no-predictive-coding | no-gsac")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode an .addl stream into a PGM image")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--weights", "-w")
    d.set_defaults(func=cmd_decompress)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--corpus", default="synthetic", help="directory of PGM crops, or 'synthetic'")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=400)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--patch", type=int, default=64)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--eval-every", type=int, default=50)
    t.add_argument("--init", help="weights from the previous stage")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="CSV training log (default: stdout)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rd-sweep", help="rate-distortion sweep to CSV")
    r.add_argument("corpus", help="directory of PGM images, or synthetic[:N]")
    r.add_argument("--qualities", default="30,50,70")
    r.add_argument("--weights", "-w")
    r.add_argument("--modes", default="full,baseline")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rd_sweep)

    i = sub.add_parser("inspect-params", help="dump the five Gabor parameter planes as PGM")
    i.add_argument("input")
    i.add_argument("outdir")
    i.add_argument("--weights", "-w")
    i.set_defaults(func=cmd_inspect_params)

    s = sub.add_parser("sync-check", help="verify encoder/decoder parameter synchronization")
    s.add_argument("input")
    s.add_argument("--weights", "-w")
    s.add_argument("--quality", "-q", type=int, default=50)
    s.add_argument("--perturb-ulp", action="store_true", help="nudge one receiver weight by 1 ulp")
    s.set_defaults(func=cmd_sync_check)

    st = sub.add_parser("selftest", help="run the oracle and gradient suites")
    st.add_argument("--quick", action="store_true")
    st.set_defaults(func=cmd_selftest)
    return p


def _limit_threads() -> None:
    n = os.environ.get("ADDL_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv: list[str] | None = None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"addl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ModelMismatchError as e:
        print(f"addl: model mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, CheckpointError) as e:
        print(f"addl: format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except Exception as e:  # noqa: BLE001
        print(f"addl: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
