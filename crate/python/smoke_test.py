#!/usr/bin/env python3
"""Smoke test for the gradleak_py extension module.

Builds the extension with cargo if needed, copies the shared library next
to this script, then runs label extraction and a short attack.
"""

import shutil
import subprocess
import sys
import sysconfig
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "gradleak-py"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "libgradleak_py.so"
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    dest = Path(__file__).resolve().parent / f"gradleak_py{suffix}"
    shutil.copyfile(built, dest)
    return dest


def main() -> int:
    build_extension()
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    import gradleak_py as gl

    model = gl.build_lenet(num_classes=10, dropout_rate=0.5, seed=7)
    print(f"model: {model.param_count} parameters, input {model.input_shape}")
    assert model.param_count == 15826
    assert "fc.weight" in model.param_names()

    image = gl.synth_image(3, "checkerboard")
    assert image.shape == [3, 32, 32]

    # Label extraction survives dropout.
    for label in (0, 4, 9):
        capture = gl.capture_gradients(model, image, label, seed=11)
        extracted = gl.extract_label(capture)
        print(f"true label {label} -> extracted {extracted}")
        assert extracted == label

    # Short attack on a model without dropout: RMSE must drop well below
    # the random-noise baseline.
    clean = gl.build_lenet(num_classes=10, dropout_rate=0.0, seed=7)
    capture = gl.capture_gradients(clean, image, 4, seed=11)
    result = gl.run_attack(
        clean, capture, image, iterations=400, init_seed=1, mask_policy="expected"
    )
    print(
        f"attack: label {result.label}, final distance {result.final_distance:.3e}, "
        f"final RMSE {result.final_rmse:.4f}"
    )
    assert result.label == 4
    assert not result.diverged
    assert len(result.trace) == 400
    first_rmse = result.trace[0][2]
    assert result.final_rmse < first_rmse
    assert result.final_rmse < 0.4, result.final_rmse
    # trace entries are pre-step; the reconstruction includes the final step
    assert abs(gl.rmse(result.reconstruction, image) - result.final_rmse) < 0.05

    out = Path(__file__).resolve().parent / "smoke_reconstruction.ppm"
    gl.export_ppm(result.reconstruction, out)
    assert out.stat().st_size == 13 + 3 * 32 * 32
    out.unlink()

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
