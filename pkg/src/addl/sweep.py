"""Rate-distortion measurements: ADDL modes, the bicubic baseline, rate matching."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .base_codec import decode_base, encode_base
from .nets import ADDLModel
from .pipeline import Mode, decode, encode, pad_even, psnr
from .resize import bicubic_resize

BASELINE = "baseline"
ALL_MODES = ("full", "no-side-info", "no-predictive-coding", "no-gsac", BASELINE)
RATE_TOLERANCE = 0.05


@dataclass(frozen=True)
class RdPoint:
    image_id: str
    quality: int
    mode: str
    pixels: int
    header_bits: int
    base_bits: int
    side_bits: int
    total_bits: int
    psnr: float
    budget_exceeded: bool = False

    def __post_init__(self):
        if self.total_bits != self.header_bits + self.base_bits + self.side_bits:
            raise ValueError("bit accounting identity violated")
        if self.psnr < 0:
            raise ValueError("negative PSNR")

    @property
    def bpp(self) -> float:
        return self.total_bits / self.pixels

    @property
    def bpp_base(self) -> float:
        return self.base_bits / self.pixels

    @property
    def bpp_side(self) -> float:
        return self.side_bits / self.pixels

    @property
    def bpp_header(self) -> float:
        return self.header_bits / self.pixels

    @property
    def side_within_budget(self) -> bool:
        return self.side_bits <= 0.20 * self.base_bits


CSV_FIELDS = [f.name for f in fields(RdPoint)] + ["bpp", "bpp_base", "bpp_side", "bpp_header"]


def baseline_point(x: np.ndarray, q: int, image_id: str = "") -> RdPoint:
    """Bicubic 1/2 down, base codec, bicubic x2 up. Only the base payload is counted."""
    h, w = x.shape
    xe = pad_even(x)
    payload = encode_base(bicubic_resize(xe, 0.5), q)
    up = np.clip(bicubic_resize(decode_base(payload), 2), 0.0, 1.0)[:h, :w]
    bits = 8 * len(payload)
    return RdPoint(image_id, q, BASELINE, h * w, 0, bits, 0, bits, psnr(up, x))


def addl_point(x: np.ndarray, q: int, model: ADDLModel, mode: "Mode | str" = Mode.FULL,
               image_id: str = "", budget_ratio: float = 0.20) -> RdPoint:
    mode = Mode.parse(mode)
    r = encode(x, q, model, budget_ratio, mode)
    out = decode(r.data, model).image
    s = r.stream
    return RdPoint(image_id, q, mode.label, x.size, s.header_bits, s.base_bits, s.side_bits,
                   s.total_bits, psnr(out, x), r.budget_exceeded)


def point(x: np.ndarray, q: int, mode: str, model: ADDLModel | None, image_id: str = "") -> RdPoint:
    if mode == BASELINE:
        return baseline_point(x, q, image_id)
    if model is None:
        raise ValueError(f"mode {mode} needs model weights")
    return addl_point(x, q, model, mode, image_id)


def rate_matched(x: np.ndarray, target_bits: int, q_start: int, mode: str,
                 model: ADDLModel | None = None, image_id: str = "") -> RdPoint:
    """Smallest quality >= q_start whose total bits reach ``target_bits``.

    Quality only moves upward ("match or be slightly higher"); if even q=100
    falls short, the q=100 point is returned and the caller sees the gap.
    """
    q = max(1, min(100, q_start))
    p = point(x, q, mode, model, image_id)
    while p.total_bits < target_bits and q < 100:
        q += 1
        p = point(x, q, mode, model, image_id)
    return p


def rate_gap(p: RdPoint, target_bits: int) -> float:
    return p.total_bits / target_bits - 1.0


# ------------------------------------------------------------ sweeps


def _job(args):
    x, q, mode, weights_blob, image_id = args
    model = None if weights_blob is None else _model_from_blob(weights_blob)
    return point(x, q, mode, model, image_id)


_MODEL_CACHE: dict[bytes, ADDLModel] = {}


def _model_from_blob(blob: bytes) -> ADDLModel:
    from .autodiff.checkpoint import loads

    key = blob[-4:] + len(blob).to_bytes(8, "little")
    if key not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = ADDLModel.from_weights(loads(blob))
    return _MODEL_CACHE[key]


def threads() -> int:
    try:
        return max(1, int(os.environ.get("ADDL_THREADS", "1")))
    except ValueError:
        return 1


def rd_sweep(images: dict[str, np.ndarray], qualities, model: ADDLModel | None,
             modes=("full", BASELINE), workers: int | None = None) -> list[RdPoint]:
    modes = [BASELINE if m == BASELINE else Mode.parse(m).label for m in modes]
    workers = threads() if workers is None else workers
    jobs = [(images[k], int(q), m, k) for k in sorted(images) for q in qualities for m in modes]
    if workers <= 1:
        rows = [point(x, q, m, model, k) for x, q, m, k in jobs]
    else:
        blob = None if model is None else model.to_bytes()
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_job, [(x, q, m, blob, k) for x, q, m, k in jobs]))
    return sorted(rows, key=lambda r: (r.image_id, r.quality, r.mode))


def rows_to_csv(rows: list[RdPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        d = asdict(r)
        w.writerow([d[k] for k in CSV_FIELDS[:len(d)]] +
                   [f"{r.bpp:.6f}", f"{r.bpp_base:.6f}", f"{r.bpp_side:.6f}", f"{r.bpp_header:.6f}"])
    return buf.getvalue()


# ------------------------------------------------------------ comparisons


@dataclass
class Comparison:
    """Per-image PSNR of ADDL against a rate-matched competitor."""

    reference: list[RdPoint]
    competitor: list[RdPoint]

    @property
    def gain_db(self) -> float:
        return float(np.mean([c.psnr for c in self.reference]) - np.mean([c.psnr for c in self.competitor]))

    @property
    def max_rate_gap(self) -> float:
        return max(abs(rate_gap(c, r.total_bits)) for r, c in zip(self.reference, self.competitor))


def compare_to_baseline(images: list[np.ndarray], model: ADDLModel, q: int = 50,
                        competitor: str = BASELINE) -> Comparison:
    ref, comp = [], []
    for i, x in enumerate(images):
        r = addl_point(x, q, model, Mode.FULL, str(i))
        ref.append(r)
        comp.append(rate_matched(x, r.total_bits, q, competitor, model, str(i)))
    return Comparison(ref, comp)


def ablation_table(images: list[np.ndarray], model: ADDLModel, q: int = 50) -> dict[str, dict]:
    """Mean PSNR / bpp for full ADDL and its ablations, matched to the full rate.

    no-gsac shares the full stream's bits exactly; no-side-info saves the side
    bits, so its base quality is raised until it spends at least as much.
    """
    full = [addl_point(x, q, model, Mode.FULL, str(i)) for i, x in enumerate(images)]
    table = {"full": full}
    table["no-gsac"] = [addl_point(x, q, model, Mode.NO_GSAC, str(i)) for i, x in enumerate(images)]
    table["no-side-info"] = [
        rate_matched(x, f.total_bits, q, "no-side-info", model, str(i)) for i, (x, f) in enumerate(zip(images, full))
    ]
    out = {}
    for name, pts in table.items():
        out[name] = {
            "psnr": float(np.mean([p.psnr for p in pts])),
            "bpp": float(np.mean([p.bpp for p in pts])),
            "max_rate_gap": max(abs(rate_gap(p, f.total_bits)) for p, f in zip(pts, full)),
        }
    return out


def format_table(table: dict[str, dict]) -> str:
    lines = [f"{'mode':<14} {'psnr_db':>8} {'bpp':>8} {'rate_gap':>9}"]
    for name, row in table.items():
        lines.append(f"{name:<14} {row['psnr']:8.3f} {row['bpp']:8.4f} {row['max_rate_gap']:9.4f}")
    return "\n".join(lines)
