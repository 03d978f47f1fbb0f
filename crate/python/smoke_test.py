"""Smoke test for the compiled Python extension.

Build first:
    cargo build --release -p transfusion-py --features extension-module
then run:
    python3 python/smoke_test.py

Set TRANSFUSION_LIB to point at a specific shared library instead of searching target/.
"""

import importlib.util
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library():
    env = os.environ.get("TRANSFUSION_LIB")
    if env:
        return Path(env)
    for profile in ("release", "debug"):
        for name in ("libtransfusion_py.so", "libtransfusion_py.dylib", "transfusion_py.dll"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("extension not built; run: cargo build --release -p transfusion-py --features extension-module")


def load(lib, tmp):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    target = Path(tmp) / f"transfusion{suffix}"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("transfusion", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tfn = load(find_library(), tmp)
        print("transfusion", tfn.__version__)

        vol = tfn.Volume.phantom(seed=3, n_slices=2, size=64)
        depth, h, w = vol.shape
        assert (depth, h, w) == (2, 64, 64)
        labels = vol.labels()
        assert len(labels) == depth * h * w and set(labels) <= {0, 1, 2}

        saved = vol.save(tmp)
        again = tfn.Volume.load(saved)
        assert again.labels() == labels and again.spacing == vol.spacing

        m = tfn.metrics(labels, labels, 1)
        assert m["dsc"] == 1.0 and m["iou"] == 1.0 and m["voe"] == 0.0

        model = tfn.Model(base_width=2, input_size=64, seed=0)
        logits, shape = model.predict(vol.slice(0), h, w)
        assert shape == [3, h, w] and len(logits) == 3 * h * w
        seg = model.segment(vol.slice(0), h, w)
        assert len(seg) == h * w and set(seg) <= {0, 1, 2}
        edges = model.predict_edges(vol.slice(0), h, w)
        assert edges is not None and all(0.0 <= e <= 1.0 for e in edges)

        trained, losses = tfn.train([vol], epochs=2, lr=0.05, batch_size=2, base_width=2)
        assert len(losses) == 2
        scores = trained.evaluate([vol])
        assert 0.0 <= scores["mean_dsc"] <= 1.0

        ck = Path(tmp) / "ck"
        trained.save(str(ck))
        reloaded = tfn.Model.load(str(ck))
        assert reloaded.segment(vol.slice(1), h, w) == trained.segment(vol.slice(1), h, w)

        q = trained.quantize([vol])
        assert q.quantized_tensors > 0
        qs = q.evaluate([vol])
        print(f"f32 mean DSC {scores['mean_dsc']:.4f}, int8 {qs['mean_dsc']:.4f}")

        fused = trained.reconstruct(vol, sigma=1.0)
        assert len(fused) == depth * h * w
        out = Path(tmp) / "r.nrrd"
        tfn.export_nrrd(fused, vol.shape, vol.spacing, str(out))
        header = out.read_bytes().split(b"\n\n", 1)[0].decode()
        assert header.startswith("NRRD") and f"sizes: {w} {h} {depth}" in header

        try:
            model.segment([0.0] * 10, h, w)
        except ValueError:
            pass
        else:
            raise AssertionError("size mismatch accepted")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
