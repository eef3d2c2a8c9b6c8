"""Shared test helpers: a separate receiver process for sync checks."""

import subprocess
import sys
import textwrap

RECEIVER = textwrap.dedent(
    """
    import sys
    from addl.autodiff.checkpoint import load
    from addl.nets import ADDLModel
    from addl.pipeline import decode
    model = ADDLModel.from_weights(load(sys.argv[1]))
    for path in sys.argv[2:]:
        out = decode(open(path, "rb").read(), model)
        open(path + ".params", "wb").write(out.reconstructed_params.data.tobytes())
        open(path + ".pred", "wb").write(out.prediction.data.tobytes())
    """
)


def run_receiver(model, streams, tmp_path):
    wpath = tmp_path / "weights.bin"
    wpath.write_bytes(model.to_bytes())
    paths = []
    for i, data in enumerate(streams):
        p = tmp_path / f"s{i}.addl"
        p.write_bytes(data)
        paths.append(str(p))
    subprocess.run([sys.executable, "-c", RECEIVER, str(wpath), *paths], check=True)
    return [(open(p + ".pred", "rb").read(), open(p + ".params", "rb").read()) for p in paths]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "", extra: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
    ACCEPTANCE.append(line + ("\n" + extra if extra else ""))
    print(line)
    if extra:
        print(extra)
    assert ok, line
