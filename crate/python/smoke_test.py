"""Smoke test for the scanreg_py extension.

Build and install it first, e.g.

    pip install ./crates/py          # or: maturin develop -m crates/py/Cargo.toml

or build it in place with
    cargo build --release -p scanreg-py --features extension-module
in which case this script loads target/release/libscanreg_py.so directly.
"""

import importlib.machinery
import importlib.util
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import scanreg_py

        return scanreg_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libscanreg_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("scanreg_py", str(lib))
            spec = importlib.util.spec_from_file_location("scanreg_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("scanreg_py is not built; see the docstring at the top of this file")


def main():
    m = load()
    assert m.sus_score([5, 1, 5, 1, 5, 1, 5, 1, 5, 1]) == 100.0
    assert m.sus_score([3] * 10) == 50.0
    assert m.sus_score([5, 2, 4, 2, 5, 1, 4, 2, 5, 1]) == 87.5
    try:
        m.sus_score([3] * 9)
    except ValueError:
        pass
    else:
        raise AssertionError("nine responses must be rejected")
    assert m.anxiety_reduction(50, 40) == -20.0

    summary = m.summarize_sessions(str(ROOT / "crates" / "core" / "data" / "pilot_sessions.csv"))
    mean, sd = summary["anxiety_reduction"]
    assert abs(mean + 20.2) <= 0.05 and abs(sd - 7.5) <= 0.05, summary

    w, h, depth = m.render_scene(3)
    assert (w, h) == (320, 288) and len(depth) == w * h

    packet = m.encode_cue(7, 123456, 2, 1500)
    assert packet[:4] == b"MRG1"
    assert m.decode_packet(packet) == ("cue_trigger", 7, 123456)

    result = m.calibrate_scene(11)
    assert result["accepted"], result
    assert result["translation_error_m"] < 0.02, result
    print("scanreg_py smoke test passed:", {k: result[k] for k in ("translation_error_m", "elapsed_s")})


if __name__ == "__main__":
    main()
